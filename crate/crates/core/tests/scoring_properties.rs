use proptest::prelude::*;

use vlscore::metrics::{evaluate, EvalOptions};
use vlscore::scoring::{class_index_for_bundle, classify_masks, maxlogit_reduce, score_bundle, score_bundle_with};
use vlscore::synth::oracle::oracle_uncertainty;
use vlscore::synth::{generate, FixtureSpec};
use vlscore::vocab::{extend_with_ood, Channel};
use vlscore::{load_bundle, write_bundle, ClassIndex, ClassifierMode, Execution, MergeMode, Tensor};

fn scored(seed: u64) -> (vlscore::synth::Fixture, ClassIndex) {
    let f = generate(&FixtureSpec::random(seed)).unwrap();
    let idx = class_index_for_bundle(&f.bundle, &f.vocab, MergeMode::None, &f.ood_names).unwrap();
    (f, idx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_oracle(seed in any::<u64>()) {
        let (f, idx) = scored(seed);
        let u = score_bundle(&f.bundle, &idx).unwrap();
        let o = oracle_uncertainty(&f.bundle, &idx).unwrap();
        for (a, b) in u.data().iter().zip(o.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_stay_in_range(seed in any::<u64>()) {
        let (f, idx) = scored(seed);
        let n = f.bundle.n_queries() as f32;
        let u = score_bundle(&f.bundle, &idx).unwrap();
        prop_assert!(u.data().iter().all(|&x| (-n..=0.0).contains(&x)));
    }

    #[test]
    fn query_order_does_not_matter(seed in any::<u64>(), rot in 1usize..8) {
        let (f, idx) = scored(seed);
        let b = &f.bundle;
        let n = b.n_queries();
        let hw = b.height() * b.width();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let mut shuffled = b.clone();
        let pick = |t: &Tensor<f32>, len: usize| -> Vec<f32> {
            perm.iter().flat_map(|&i| t.data()[i * len..(i + 1) * len].to_vec()).collect()
        };
        shuffled.mask_scores = Tensor::new(b.mask_scores.shape().to_vec(), pick(&b.mask_scores, hw)).unwrap();
        shuffled.vis_in = Tensor::new(b.vis_in.shape().to_vec(), pick(&b.vis_in, b.dim())).unwrap();
        shuffled.vis_out = Tensor::new(b.vis_out.shape().to_vec(), pick(&b.vis_out, b.dim())).unwrap();
        let u1 = score_bundle(b, &idx).unwrap();
        let u2 = score_bundle(&shuffled, &idx).unwrap();
        for (a, c) in u1.data().iter().zip(u2.data()) {
            prop_assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn sequential_and_parallel_agree(seed in any::<u64>()) {
        let (f, idx) = scored(seed);
        let a = score_bundle_with(&f.bundle, &idx, Execution::Sequential).unwrap();
        let b = score_bundle_with(&f.bundle, &idx, Execution::Parallel).unwrap();
        prop_assert_eq!(a.map, b.map);
    }

    #[test]
    fn merged_logits_are_max_of_member_logits(
        cos in proptest::collection::vec(-1.0f32..=1.0, 12),
        split in 1usize..6,
    ) {
        // six rows as singletons, then merged into two groups
        let cos = Tensor::new(vec![2, 6], cos).unwrap();
        let fine = ClassIndex::new((0..6).map(|r| Channel { name: format!("c{r}"), rows: vec![r] }).collect()).unwrap();
        let coarse = ClassIndex::new(vec![
            Channel { name: "a".into(), rows: (0..split).collect() },
            Channel { name: "b".into(), rows: (split..6).collect() },
        ]).unwrap();
        let f = maxlogit_reduce(&cos, &fine).unwrap();
        let c = maxlogit_reduce(&cos, &coarse).unwrap();
        for i in 0..2 {
            let ma = f.row(i)[..split].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mb = f.row(i)[split..].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(c.row(i), &[ma, mb][..]);
        }
    }
}

#[test]
fn bundle_survives_disk_roundtrip() {
    let (f, idx) = scored(5);
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&f.bundle, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back, f.bundle);
    assert_eq!(score_bundle(&back, &idx).unwrap(), score_bundle(&f.bundle, &idx).unwrap());
}

#[test]
fn fixtures_are_deterministic() {
    let a = generate(&FixtureSpec::demo(3)).unwrap().bundle;
    let b = generate(&FixtureSpec::demo(3)).unwrap().bundle;
    let c = generate(&FixtureSpec::demo(4)).unwrap().bundle;
    assert_eq!(a, b);
    assert_ne!(a.vis_in, c.vis_in);
}

#[test]
fn demo_scene_ranks_the_anomaly_first() {
    let f = generate(&FixtureSpec::demo(7)).unwrap();
    let idx = class_index_for_bundle(&f.bundle, &f.vocab, MergeMode::None, &[]).unwrap();
    let u = score_bundle(&f.bundle, &idx).unwrap();
    let gt = f.bundle.labels.clone().unwrap();
    let r = evaluate(&[(u, gt)], &EvalOptions::default()).unwrap();
    assert!(r.ap > 0.9, "{r:?}");
}

#[test]
fn sigmoid_baseline_can_be_exceeded_by_softmax_with_ood() {
    // one ID channel scored by sigmoid; adding an OOD channel whose logit is
    // negative switches to softmax and raises the ID probability
    let logits = Tensor::new(vec![1, 2], vec![0.1f32, -0.1]).unwrap();
    let id_only = Tensor::new(vec![1, 1], vec![0.1f32]).unwrap();
    let sig = classify_masks(&id_only, 0.1, ClassifierMode::Sigmoid).unwrap();
    let soft = classify_masks(&logits, 0.1, ClassifierMode::Softmax).unwrap();
    assert!((sig.probs.data()[0] - 0.731_058_6).abs() < 1e-6);
    assert!((soft.probs.data()[0] - 0.880_797_1).abs() < 1e-6);

    let id = ClassIndex::new(vec![Channel { name: "thing".into(), rows: vec![0] }]).unwrap();
    let with = extend_with_ood(&id, vec![Channel { name: "odd".into(), rows: vec![1] }]).unwrap();
    assert_eq!(ClassifierMode::for_index(&id), ClassifierMode::Sigmoid);
    assert_eq!(ClassifierMode::for_index(&with), ClassifierMode::Softmax);
}
