//! The anomaly-scoring head.
//!
//! Per object query `i`, class channel logits are the cosine similarity
//! between the query's visual embedding and each channel's text embeddings,
//! max-reduced over the channel's alternative concepts. Logits are divided
//! by the temperature and pushed through a softmax (or an element-wise
//! sigmoid when there is a single channel), once for the decoder features
//! and once for the mask-pooled encoder features. The two distributions are
//! combined geometrically and aggregated with the mask scores into
//!
//! ```text
//! u[h, w] = -max_{k < K} sum_i s[i, h, w] * c[i, k]
//! ```
//!
//! OOD prompt channels (indices `K..K+Q`) take part in the softmax
//! normalisation only; they never enter the max.

use crate::bundle::InferenceBundle;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::tensor::Tensor;
use crate::vocab::{
    aggregate_template_embeddings, build_class_index, extend_with_ood, ood_groups, ClassIndex,
    ConceptTable, MergeMode, VocabConfig,
};

/// Rows with a smaller L2 norm cannot take part in a cosine similarity.
pub const MIN_ROW_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    Softmax,
    Sigmoid,
}

impl ClassifierMode {
    /// Softmax collapses to a constant 1 with a single channel, so that case
    /// (one ID channel, no OOD prompts) switches to a sigmoid.
    pub fn for_index(idx: &ClassIndex) -> Self {
        if idx.id_channel_count() == 1 && idx.ood_count() == 0 {
            ClassifierMode::Sigmoid
        } else {
            ClassifierMode::Softmax
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskClassification {
    pub probs: Tensor<f32>,
    pub mode: ClassifierMode,
}

/// Per-pixel anomaly score, H×W. Larger means more anomalous; values lie in `[-N, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(Tensor<f32>);

impl UncertaintyMap {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        t.expect_rank(2, "uncertainty map")?;
        Ok(Self(t))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::new(vec![height, width], data)?)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

fn row_norms(m: &Tensor<f32>, what: &'static str) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let n = m.row(i).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if n < MIN_ROW_NORM {
                Err(Error::DegenerateVector { matrix: what, row: i, norm: n })
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn cosine_matrix(v: &Tensor<f32>, t: &Tensor<f32>) -> Result<Tensor<f32>> {
    cosine_matrix_with(v, t, Execution::default())
}

/// `out[i, j] = <v_i, t_j> / (|v_i| |t_j|)`, clamped to `[-1, 1]`.
pub fn cosine_matrix_with(v: &Tensor<f32>, t: &Tensor<f32>, exec: Execution) -> Result<Tensor<f32>> {
    v.expect_rank(2, "visual embeddings")?;
    t.expect_rank(2, "text embeddings")?;
    if v.shape()[1] != t.shape()[1] {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {:?} vs {:?}",
            v.shape(),
            t.shape()
        )));
    }
    let (n, m) = (v.rows(), t.rows());
    let vn = row_norms(v, "visual embeddings")?;
    let tn = row_norms(t, "text embeddings")?;
    let mut out = vec![0.0f32; n * m];
    exec::for_each_chunk_mut(exec, &mut out, m, |i, row| {
        let vi = v.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let dot: f64 = vi
                .iter()
                .zip(t.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            *slot = (dot / (vn[i] * tn[j])).clamp(-1.0, 1.0) as f32;
        }
    });
    Tensor::new(vec![n, m], out)
}

/// Channel logit = max cosine over the channel's concept rows. First index wins ties.
pub fn maxlogit_reduce(cos: &Tensor<f32>, idx: &ClassIndex) -> Result<Tensor<f32>> {
    cos.expect_rank(2, "cosine matrix")?;
    let (n, m) = (cos.rows(), cos.shape()[1]);
    if let Some(r) = idx.max_row() {
        if r >= m {
            return Err(Error::Dimension(format!(
                "class index refers to concept row {r}, cosine matrix has {m} columns"
            )));
        }
    }
    let c = idx.channel_count();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = cos.row(i);
        for group in idx.groups() {
            let mut best = row[group[0]];
            for &r in &group[1..] {
                if row[r] > best {
                    best = row[r];
                }
            }
            out.push(best);
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn classify_masks(logits: &Tensor<f32>, temperature: f32, mode: ClassifierMode) -> Result<MaskClassification> {
    logits.expect_rank(2, "logits")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let t = temperature as f64;
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        match mode {
            ClassifierMode::Softmax => {
                let max = row.iter().map(|&x| x as f64 / t).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x as f64 / t - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| (e / z) as f32));
            }
            ClassifierMode::Sigmoid => {
                out.extend(row.iter().map(|&x| (1.0 / (1.0 + (-(x as f64) / t).exp())) as f32));
            }
        }
    }
    Ok(MaskClassification {
        probs: Tensor::new(vec![logits.rows(), c], out)?,
        mode,
    })
}

fn pow_exact(x: f64, e: f64) -> f64 {
    // 0^0 = 1; exponents 0 and 1 are exact so alpha = 0 reproduces c_in bitwise
    if e == 0.0 {
        1.0
    } else if e == 1.0 {
        x
    } else {
        x.powf(e)
    }
}

/// ID channels: `c_in^(1-alpha) * c_out^alpha`; OOD channels use `beta`.
/// The result is not renormalised.
pub fn geometric_ensemble(
    c_in: &Tensor<f32>,
    c_out: &Tensor<f32>,
    alpha: f32,
    beta: f32,
    id_count: usize,
) -> Result<Tensor<f32>> {
    c_in.expect_rank(2, "c_in")?;
    if c_in.shape() != c_out.shape() {
        return Err(Error::Dimension(format!(
            "c_in {:?} and c_out {:?} differ in shape",
            c_in.shape(),
            c_out.shape()
        )));
    }
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    c_in.check_range(0.0, 1.0, "c_in")?;
    c_out.check_range(0.0, 1.0, "c_out")?;
    let c = c_in.shape()[1];
    let (a, b) = (alpha as f64, beta as f64);
    let data = c_in
        .data()
        .iter()
        .zip(c_out.data())
        .enumerate()
        .map(|(flat, (&x, &y))| {
            let w = if flat % c < id_count { a } else { b };
            (pow_exact(x as f64, 1.0 - w) * pow_exact(y as f64, w)) as f32
        })
        .collect();
    Tensor::new(c_in.shape().to_vec(), data)
}

pub fn uncertainty_map(s: &Tensor<f32>, c: &Tensor<f32>, id_count: usize) -> Result<UncertaintyMap> {
    uncertainty_map_with(s, c, id_count, Execution::default())
}

pub fn uncertainty_map_with(
    s: &Tensor<f32>,
    c: &Tensor<f32>,
    id_count: usize,
    exec: Execution,
) -> Result<UncertaintyMap> {
    s.expect_rank(3, "mask scores")?;
    c.expect_rank(2, "class probabilities")?;
    let (n, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    if c.rows() != n {
        return Err(Error::Dimension(format!(
            "mask scores have {n} queries, class probabilities have {}",
            c.rows()
        )));
    }
    if id_count == 0 || c.shape()[1] < id_count {
        return Err(Error::Dimension(format!(
            "need 1..={} ID channels, got {id_count}",
            c.shape()[1]
        )));
    }
    let hw = h * w;
    let sd = s.data();
    let mut out = vec![0.0f32; hw];
    exec::for_each_chunk_mut(exec, &mut out, w.max(1), |row, chunk| {
        let mut acc = vec![0.0f64; id_count];
        for (col, slot) in chunk.iter_mut().enumerate() {
            let p = row * w + col;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..n {
                let sv = sd[i * hw + p] as f64;
                if sv == 0.0 {
                    continue;
                }
                for (a, &ck) in acc.iter_mut().zip(&c.row(i)[..id_count]) {
                    *a += sv * ck as f64;
                }
            }
            let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *slot = (-best) as f32;
        }
    });
    UncertaintyMap::from_vec(h, w, out)
}

/// Intermediate results of [`score_bundle_with`].
#[derive(Debug, Clone)]
pub struct ScoredBundle {
    pub map: UncertaintyMap,
    pub mode: ClassifierMode,
    pub c_in: Tensor<f32>,
    pub c_out: Tensor<f32>,
    pub probs: Tensor<f32>,
}

pub fn score_bundle(bundle: &InferenceBundle, idx: &ClassIndex) -> Result<UncertaintyMap> {
    Ok(score_bundle_with(bundle, idx, Execution::default())?.map)
}

pub fn score_bundle_with(bundle: &InferenceBundle, idx: &ClassIndex, exec: Execution) -> Result<ScoredBundle> {
    let table = aggregate_template_embeddings(&bundle.text_raw, &bundle.concepts)?;
    let mode = ClassifierMode::for_index(idx);
    let classify = |vis: &Tensor<f32>| -> Result<Tensor<f32>> {
        let cos = cosine_matrix_with(vis, &table, exec)?;
        let logits = maxlogit_reduce(&cos, idx)?;
        Ok(classify_masks(&logits, bundle.temperature, mode)?.probs)
    };
    let c_in = classify(&bundle.vis_in)?;
    let c_out = classify(&bundle.vis_out)?;
    let id_count = idx.id_channel_count();
    let probs = geometric_ensemble(&c_in, &c_out, bundle.alpha, bundle.beta, id_count)?;
    let map = uncertainty_map_with(&bundle.mask_scores, &probs, id_count, exec)?;
    Ok(ScoredBundle { map, mode, c_in, c_out, probs })
}

/// Builds the class index for a bundle: concept rows come from the bundle's
/// `concept_index`, OOD channels from `ood_names`.
pub fn class_index_for_bundle(
    bundle: &InferenceBundle,
    cfg: &VocabConfig,
    mode: MergeMode,
    ood_names: &[String],
) -> Result<ClassIndex> {
    let table = ConceptTable::from_entries(&bundle.concepts)?;
    let idx = build_class_index(cfg, mode, &table)?;
    extend_with_ood(&idx, ood_groups(&table, ood_names)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Channel;

    fn t2(r: usize, c: usize, v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![r, c], v).unwrap()
    }

    fn index(groups: Vec<Vec<usize>>) -> ClassIndex {
        ClassIndex::new(
            groups
                .into_iter()
                .enumerate()
                .map(|(i, rows)| Channel { name: format!("c{i}"), rows })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_basics() {
        let v = t2(1, 2, vec![0.3, -0.4]);
        assert_eq!(cosine_matrix(&v, &v).unwrap().data(), &[1.0]);
        let out = cosine_matrix(&t2(1, 2, vec![1.0, 0.0]), &t2(1, 2, vec![0.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.0]);
        // 11 / (sqrt(5) * 5)
        let out = cosine_matrix(&t2(1, 2, vec![1.0, 2.0]), &t2(1, 2, vec![3.0, 4.0])).unwrap();
        assert!((out.data()[0] as f64 - 0.983_869_910_099_907_5).abs() < 1e-7);
    }

    #[test]
    fn cosine_zero_row_names_index() {
        let v = t2(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        match cosine_matrix(&v, &t2(1, 2, vec![1.0, 1.0])) {
            Err(Error::DegenerateVector { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn maxlogit_examples() {
        let cos = t2(1, 4, vec![0.1, 0.5, 0.3, 0.2]);
        let out = maxlogit_reduce(&cos, &index(vec![vec![0, 1], vec![2, 3]])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.3]);
        let out = maxlogit_reduce(&cos, &index(vec![vec![3], vec![0]])).unwrap();
        assert_eq!(out.data(), &[0.2, 0.1]);
        assert!(maxlogit_reduce(&cos, &index(vec![vec![4]])).is_err());
    }

    #[test]
    fn softmax_and_sigmoid_examples() {
        let c = classify_masks(&t2(1, 3, vec![0.7; 3]), 0.3, ClassifierMode::Softmax).unwrap();
        for &p in c.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        // [e/(1+e), 1/(1+e)]
        let c = classify_masks(&t2(1, 2, vec![1.0, 0.0]), 1.0, ClassifierMode::Softmax).unwrap();
        assert!((c.probs.data()[0] as f64 - 0.731_058_578_630_004_9).abs() < 1e-7);
        assert!((c.probs.data()[1] as f64 - 0.268_941_421_369_995_1).abs() < 1e-7);
        let c = classify_masks(&t2(1, 1, vec![0.0]), 0.01, ClassifierMode::Sigmoid).unwrap();
        assert_eq!(c.probs.data(), &[0.5]);
        assert!(classify_masks(&t2(1, 1, vec![0.0]), 0.0, ClassifierMode::Softmax).is_err());
        assert!(classify_masks(&t2(1, 1, vec![0.0]), -1.0, ClassifierMode::Softmax).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let c_in = t2(1, 3, vec![0.2, 0.0, 0.8]);
        let c_out = t2(1, 3, vec![0.5, 0.0, 0.5]);
        let out = geometric_ensemble(&c_in, &c_out, 0.0, 0.0, 3).unwrap();
        assert_eq!(out.data(), c_in.data());
        let out = geometric_ensemble(&c_in, &c_in, 0.4, 0.8, 2).unwrap();
        for (a, b) in out.data().iter().zip(c_in.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        // 0.9^0.6 * 0.4^0.4
        let out = geometric_ensemble(&t2(1, 1, vec![0.9]), &t2(1, 1, vec![0.4]), 0.4, 0.8, 1).unwrap();
        assert!((out.data()[0] as f64 - 0.650_683_062_718_619_2).abs() < 1e-6);
        // OOD channel takes beta
        let out = geometric_ensemble(&t2(1, 2, vec![0.9, 0.9]), &t2(1, 2, vec![0.4, 0.4]), 0.0, 1.0, 1).unwrap();
        assert_eq!(out.data(), &[0.9, 0.4]);
        assert!(geometric_ensemble(&c_in, &c_out, 1.5, 0.0, 1).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let s = Tensor::filled(vec![1, 3, 4], 1.0f32).unwrap();
        let u = uncertainty_map(&s, &t2(1, 2, vec![1.0, 0.0]), 2).unwrap();
        assert!(u.data().iter().all(|&x| x == -1.0));

        let s = Tensor::filled(vec![2, 2, 2], 0.5f32).unwrap();
        let u = uncertainty_map(&s, &t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 2).unwrap();
        assert!(u.data().iter().all(|&x| x == -0.5));

        // the OOD channel (index 1) never enters the max
        let s = Tensor::filled(vec![1, 1, 1], 1.0f32).unwrap();
        let u = uncertainty_map(&s, &t2(1, 2, vec![0.1, 0.9]), 1).unwrap();
        assert!((u.data()[0] + 0.1).abs() < 1e-7);

        assert!(uncertainty_map(&s, &t2(2, 2, vec![0.0; 4]), 1).is_err());
        assert!(uncertainty_map(&s, &t2(1, 2, vec![0.0; 2]), 3).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let s = Tensor::new(vec![2, 5, 7], (0..70).map(|i| (i % 11) as f32 / 10.0).collect()).unwrap();
        let c = t2(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let a = uncertainty_map_with(&s, &c, 2, Execution::Sequential).unwrap();
        let b = uncertainty_map_with(&s, &c, 2, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_selection() {
        assert_eq!(ClassifierMode::for_index(&index(vec![vec![0, 1]])), ClassifierMode::Sigmoid);
        assert_eq!(ClassifierMode::for_index(&index(vec![vec![0], vec![1]])), ClassifierMode::Softmax);
        let with_ood = extend_with_ood(&index(vec![vec![0]]), vec![Channel { name: "o".into(), rows: vec![1] }]).unwrap();
        assert_eq!(ClassifierMode::for_index(&with_ood), ClassifierMode::Softmax);
    }
}
