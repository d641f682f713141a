//! Threshold-sweep pixel metrics. OOD pixels are the positive class and a
//! pixel is flagged at threshold `tau` when its score is `>= tau`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::labels::{LabelMap, PixelTruth};
use crate::scoring::UncertaintyMap;

/// Scores with binary truth; ignore pixels are dropped on construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPixels {
    pub scores: Vec<f32>,
    pub is_ood: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f32>, is_ood: Vec<bool>) -> Result<Self> {
        if scores.len() != is_ood.len() {
            return Err(Error::Dimension(format!(
                "{} scores but {} labels",
                scores.len(),
                is_ood.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { scores, is_ood })
    }

    pub fn from_map(u: &UncertaintyMap, gt: &LabelMap) -> Result<Self> {
        if u.shape() != gt.shape() {
            return Err(Error::Dimension(format!(
                "scores are {:?}, labels are {:?}",
                u.shape(),
                gt.shape()
            )));
        }
        let mut out = Self::default();
        for (i, &s) in u.data().iter().enumerate() {
            match gt.truth(i) {
                PixelTruth::Ignore => {}
                t => {
                    out.scores.push(s);
                    out.is_ood.push(t == PixelTruth::Ood);
                }
            }
        }
        Ok(out)
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.is_ood.extend_from_slice(&other.is_ood);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.is_ood.iter().filter(|&&o| o).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn id_scores(&self) -> Vec<f32> {
        self.scores
            .iter()
            .zip(&self.is_ood)
            .filter(|(_, &o)| !o)
            .map(|(&s, _)| s)
            .collect()
    }
}

/// Cumulative counts at each distinct score, highest threshold first.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub thresholds: Vec<f32>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
}

impl Sweep {
    pub fn new(p: &ScoredPixels, exec: Execution) -> Self {
        let mut order: Vec<(f32, bool)> = p.scores.iter().copied().zip(p.is_ood.iter().copied()).collect();
        exec::sort_unstable_by(exec, &mut order, |a, b| b.0.total_cmp(&a.0));
        let mut sweep = Sweep {
            thresholds: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            positives: 0,
            negatives: 0,
        };
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let tau = order[i].0;
            // equal scores form one atomic group
            while i < order.len() && order[i].0 == tau {
                if order[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            sweep.thresholds.push(tau);
            sweep.tp.push(tp);
            sweep.fp.push(fp);
        }
        sweep.positives = tp;
        sweep.negatives = fp;
        sweep
    }
}

pub fn pixel_ap(p: &ScoredPixels) -> Result<f64> {
    pixel_ap_with(p, Execution::default())
}

/// `sum_k (R_k - R_{k-1}) * P_k` over distinct thresholds, descending.
pub fn pixel_ap_with(p: &ScoredPixels, exec: Execution) -> Result<f64> {
    let sw = Sweep::new(p, exec);
    if sw.positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one OOD pixel".into()));
    }
    let n_pos = sw.positives as f64;
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for (&tp, &fp) in sw.tp.iter().zip(&sw.fp) {
        if tp > prev_tp {
            let recall_step = (tp - prev_tp) as f64 / n_pos;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += recall_step * precision;
        }
        prev_tp = tp;
    }
    Ok(ap)
}

pub fn fpr_at_tpr(p: &ScoredPixels, target_tpr: f64) -> Result<f64> {
    fpr_at_tpr_with(p, target_tpr, Execution::default())
}

/// FPR at the largest threshold whose TPR reaches `target_tpr`. No interpolation.
pub fn fpr_at_tpr_with(p: &ScoredPixels, target_tpr: f64, exec: Execution) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::Parameter(format!("target TPR {target_tpr} is outside [0, 1]")));
    }
    let sw = Sweep::new(p, exec);
    if sw.positives == 0 || sw.negatives == 0 {
        return Err(Error::UndefinedMetric(
            "FPR at TPR needs both OOD and ID pixels".into(),
        ));
    }
    let (n_pos, n_neg) = (sw.positives as f64, sw.negatives as f64);
    let k = sw
        .tp
        .iter()
        .position(|&tp| tp as f64 / n_pos >= target_tpr)
        .expect("the lowest threshold reaches TPR 1");
    Ok(sw.fp[k] as f64 / n_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f32,
    pub ood_recall: f64,
    pub id_retention: f64,
}

/// OOD recall against ID retention over the OOD dataset's threshold sweep.
///
/// Starts at `tau = +inf` (recall 0, retention 1) and ends at `tau = -inf`
/// (recall 1, retention 0); in between, one point per distinct score of
/// `ood`, highest first. Retention counts `id_scores` strictly below `tau`.
pub fn retention_curve(ood: &ScoredPixels, id_scores: &[f32]) -> Result<Vec<CurvePoint>> {
    retention_curve_with(ood, id_scores, Execution::default())
}

pub fn retention_curve_with(ood: &ScoredPixels, id_scores: &[f32], exec: Execution) -> Result<Vec<CurvePoint>> {
    if ood.positives() == 0 {
        return Err(Error::UndefinedMetric("retention curve needs OOD pixels".into()));
    }
    if id_scores.is_empty() {
        return Err(Error::UndefinedMetric("retention curve needs ID scores".into()));
    }
    if let Some(i) = id_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let sw = Sweep::new(ood, exec);
    let mut ids = id_scores.to_vec();
    exec::sort_unstable_by(exec, &mut ids, |a, b| a.total_cmp(b));
    let (n_pos, n_id) = (sw.positives as f64, ids.len() as f64);

    let mut curve = Vec::with_capacity(sw.thresholds.len() + 2);
    curve.push(CurvePoint {
        threshold: f32::INFINITY,
        ood_recall: 0.0,
        id_retention: 1.0,
    });
    for (&tau, &tp) in sw.thresholds.iter().zip(&sw.tp) {
        let retained = ids.partition_point(|&s| s < tau);
        curve.push(CurvePoint {
            threshold: tau,
            ood_recall: tp as f64 / n_pos,
            id_retention: retained as f64 / n_id,
        });
    }
    curve.push(CurvePoint {
        threshold: f32::NEG_INFINITY,
        ood_recall: 1.0,
        id_retention: 0.0,
    });
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f32,
    pub recall: f64,
    pub precision: f64,
}

pub fn pr_curve(p: &ScoredPixels) -> Result<Vec<PrPoint>> {
    let sw = Sweep::new(p, Execution::default());
    if sw.positives == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one OOD pixel".into()));
    }
    Ok(sw
        .thresholds
        .iter()
        .zip(sw.tp.iter().zip(&sw.fp))
        .map(|(&threshold, (&tp, &fp))| PrPoint {
            threshold,
            recall: tp as f64 / sw.positives as f64,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(scores: &[f32], ood: &[bool]) -> ScoredPixels {
        ScoredPixels::new(scores.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let p = sp(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(pixel_ap(&p).unwrap(), 1.0);
        assert_eq!(fpr_at_tpr(&p, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn anti_perfect_fpr_is_one() {
        let p = sp(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]);
        assert_eq!(fpr_at_tpr(&p, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_ap() {
        // (1/2)(1 + 2/3)
        let p = sp(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        assert!((pixel_ap(&p).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn all_tied_ap_is_prevalence() {
        let p = sp(&[0.3; 7], &[true, false, false, true, false, false, true]);
        assert!((pixel_ap(&p).unwrap() - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn fpr_tie_group_example() {
        let mut scores = vec![1.0f32; 20];
        let mut ood = vec![true; 20];
        scores.extend(std::iter::repeat_n(0.5, 19));
        ood.extend(std::iter::repeat_n(false, 19));
        scores.push(1.0);
        ood.push(false);
        let p = ScoredPixels::new(scores, ood).unwrap();
        assert_eq!(fpr_at_tpr(&p, 0.95).unwrap(), 0.05);
    }

    #[test]
    fn undefined_metrics() {
        let p = sp(&[0.1, 0.2], &[false, false]);
        assert!(matches!(pixel_ap(&p), Err(Error::UndefinedMetric(_))));
        assert!(matches!(fpr_at_tpr(&p, 0.95), Err(Error::UndefinedMetric(_))));
        let p = sp(&[0.1, 0.2], &[true, true]);
        assert!(matches!(fpr_at_tpr(&p, 0.95), Err(Error::UndefinedMetric(_))));
        assert!(retention_curve(&p, &[]).is_err());
    }

    #[test]
    fn retention_endpoints_and_perfect_point() {
        let p = sp(&[0.9, 0.8, 0.1], &[true, true, false]);
        let curve = retention_curve(&p, &[0.0, 0.1, 0.2]).unwrap();
        let first = curve.first().unwrap();
        let last = curve.last().unwrap();
        assert_eq!((first.ood_recall, first.id_retention), (0.0, 1.0));
        assert_eq!((last.ood_recall, last.id_retention), (1.0, 0.0));
        assert!(curve.iter().any(|c| c.ood_recall == 1.0 && c.id_retention == 1.0));
        for w in curve.windows(2) {
            assert!(w[1].ood_recall >= w[0].ood_recall);
            assert!(w[1].id_retention <= w[0].id_retention);
        }
    }

    #[test]
    fn pr_curve_ends_at_full_recall() {
        let p = sp(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        let pr = pr_curve(&p).unwrap();
        assert_eq!(pr.len(), 4);
        assert_eq!(pr[0].precision, 1.0);
        assert_eq!(pr[3].recall, 1.0);
        assert_eq!(pr[3].precision, 0.5);
    }
}
