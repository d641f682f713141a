use std::fs;
use std::path::Path;

use vlscore_cli::run;

fn vl(args: &[&str]) -> i32 {
    run(std::iter::once("vlscore").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn fixture(dir: &Path) -> String {
    let d = p(dir, "d");
    assert_eq!(vl(&["gen-fixture", "--seed", "7", "--out", &d]), 0);
    d
}

fn report(path: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn smoke_pipeline_writes_every_report_field() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let (u, r) = (p(t.path(), "u.vlt"), p(t.path(), "r.json"));
    assert_eq!(vl(&["score", "--bundle", &d, "--vocab", "default", "--merge", "3", "--out", &u]), 0);
    assert_eq!(vl(&["eval", "--scores", &u, "--labels", &format!("{d}/labels.vlt"), "--report", &r]), 0);
    let r = report(&r);
    for field in [
        "ap", "fpr_at_95tpr", "siou_gt", "ppv", "mean_f1", "curve", "images", "images_with_ood",
        "ood_pixels", "id_pixels", "config",
    ] {
        assert!(r.get(field).is_some(), "missing {field}");
    }
    assert_eq!(r["config"]["grid"]["uniform"], 40);
}

#[test]
fn single_superclass_uses_sigmoid() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let rep = p(t.path(), "s.json");
    assert_eq!(vl(&["score", "--bundle", &d, "--merge", "1", "--out", &p(t.path(), "u.vlt"), "--report", &rep]), 0);
    let r = report(&rep);
    assert_eq!(r["classifier"], "sigmoid");
    assert_eq!(r["k_eff"], 1);
    assert_eq!(r["q"], 0);
}

#[test]
fn ood_prompt_sets_add_channels() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    for (set, q) in [("ra19", 15), ("smiyc", 15), ("rba", 13), ("none", 0)] {
        let rep = p(t.path(), &format!("{set}.json"));
        assert_eq!(
            vl(&["score", "--bundle", &d, "--ood-prompts", set, "--out", &p(t.path(), "u.vlt"), "--report", &rep]),
            0
        );
        let r = report(&rep);
        assert_eq!(r["q"], q, "{set}");
        assert_eq!(r["k_eff"], 19);
        assert_eq!(r["classifier"], "softmax");
    }
    let list = p(t.path(), "ood.txt");
    fs::write(&list, "cow\nboulder\n").unwrap();
    let rep = p(t.path(), "file.json");
    let arg = format!("file:{list}");
    assert_eq!(vl(&["score", "--bundle", &d, "--ood-prompts", &arg, "--out", &p(t.path(), "u.vlt"), "--report", &rep]), 0);
    assert_eq!(report(&rep)["q"], 2);
}

#[test]
fn merge_mode_leaves_the_bundle_untouched() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let snapshot = || {
        let mut files: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| {
                let path = e.unwrap().path();
                (path.clone(), fs::read(path).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let before = snapshot();
    for merge in ["19", "8", "3", "1"] {
        assert_eq!(vl(&["score", "--bundle", &d, "--merge", merge, "--out", &p(t.path(), "u.vlt")]), 0);
    }
    assert_eq!(before, snapshot());
}

#[test]
fn overrides_are_validated_and_recorded() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let rep = p(t.path(), "s.json");
    let u = p(t.path(), "u.vlt");
    assert_eq!(
        vl(&["score", "--bundle", &d, "--alpha", "0.25", "--beta", "0.5", "--temp", "0.02", "--out", &u, "--report", &rep]),
        0
    );
    let r = report(&rep);
    assert_eq!(r["alpha"], 0.25);
    assert_eq!(r["beta"], 0.5);
    assert_eq!(r["temperature"], 0.02);
    assert_eq!(vl(&["score", "--bundle", &d, "--alpha", "1.5", "--out", &u]), 1);
    assert_eq!(vl(&["score", "--bundle", &d, "--temp", "0", "--out", &u]), 1);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let u = p(t.path(), "u.vlt");
    assert_eq!(vl(&["score", "--bundle", &d, "--bogus", "--out", &u]), 1);
    assert_eq!(vl(&["score", "--bundle", &d, "--merge", "5", "--out", &u]), 1);
    assert_eq!(vl(&["frobnicate"]), 1);
    assert_eq!(vl(&["score", "--bundle", &p(t.path(), "missing"), "--out", &u]), 2);
    assert_eq!(vl(&["score", "--bundle", &d, "--vocab", &p(t.path(), "nope.json"), "--out", &u]), 2);
    assert_eq!(vl(&["score", "--bundle", &d, "--ood-prompts", "nosuchset", "--out", &u]), 1);
    assert_eq!(vl(&["score", "--bundle", &d, "--out", &u]), 0);
    let labels = format!("{d}/labels.vlt");
    assert_eq!(vl(&["eval", "--scores", &u, "--scores", &u, "--labels", &labels]), 1);
    assert_eq!(vl(&["eval", "--scores", &u, "--labels", &labels, "--grid", "0"]), 1);
    // a truncated score file is a format error, not I/O
    let bad = p(t.path(), "bad.vlt");
    fs::write(&bad, b"VLT1\x01\x02\x00\x00").unwrap();
    assert_eq!(vl(&["eval", "--scores", &bad, "--labels", &labels]), 1);
    assert_eq!(vl(&["--help"]), 0);
}

#[test]
fn vocab_env_var_replaces_the_default() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let u = p(t.path(), "u.vlt");
    let bad = p(t.path(), "vocab.json");
    fs::write(&bad, "{\"classes\": []}").unwrap();
    // the only test touching this variable
    std::env::set_var(vlscore_cli::VOCAB_ENV, &bad);
    let with_bad = vl(&["score", "--bundle", &d, "--vocab", "default", "--out", &u]);
    std::env::set_var(vlscore_cli::VOCAB_ENV, format!("{d}/vocab.json"));
    let with_good = vl(&["score", "--bundle", &d, "--vocab", "default", "--out", &u]);
    std::env::remove_var(vlscore_cli::VOCAB_ENV);
    assert_eq!(with_bad, 1);
    assert_eq!(with_good, 0);
}

#[test]
fn curves_are_csv() {
    let t = tempfile::tempdir().unwrap();
    let d = fixture(t.path());
    let u = p(t.path(), "u.vlt");
    assert_eq!(vl(&["score", "--bundle", &d, "--out", &u]), 0);
    let labels = format!("{d}/labels.vlt");
    let csv = p(t.path(), "c.csv");
    assert_eq!(vl(&["curve", "--scores", &u, "--labels", &labels, "--out", &csv]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "threshold,ood_recall,id_retention");
    assert_eq!(lines[1], "inf,0,1");
    assert_eq!(*lines.last().unwrap(), "-inf,1,0");
    assert_eq!(vl(&["curve", "--scores", &u, "--labels", &labels, "--kind", "pr", "--out", &csv]), 0);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("threshold,recall,precision\n"));
}

#[test]
fn gen_fixture_kinds_and_specs() {
    let t = tempfile::tempdir().unwrap();
    for kind in ["demo", "merging-boundary", "random"] {
        assert_eq!(vl(&["gen-fixture", "--kind", kind, "--seed", "3", "--out", &p(t.path(), kind)]), 0);
    }
    let spec = p(t.path(), "spec.json");
    let s = vlscore::synth::FixtureSpec::random(9);
    fs::write(&spec, serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(vl(&["gen-fixture", "--spec", &spec, "--seed", "9", "--out", &p(t.path(), "fromspec")]), 0);
    fs::write(&spec, "{\"seed\": 1}").unwrap();
    assert_eq!(vl(&["gen-fixture", "--spec", &spec, "--out", &p(t.path(), "broken")]), 1);
}
