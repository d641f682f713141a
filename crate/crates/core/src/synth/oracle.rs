//! Deliberately naive reference implementations.
//!
//! Everything here is written from the definitions with plain f64 loops and
//! brute-force counting, sharing no arithmetic with the optimised paths, so
//! the two can be checked against each other.

use crate::bundle::InferenceBundle;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL, OOD_LABEL};
use crate::scoring::UncertaintyMap;
use crate::vocab::ClassIndex;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Per-query ensembled class probabilities, N × C, in f64.
pub fn oracle_probabilities(bundle: &InferenceBundle, idx: &ClassIndex) -> Vec<Vec<f64>> {
    let d = bundle.text_raw.row_len();
    let concepts: Vec<Vec<f64>> = bundle
        .concepts
        .iter()
        .map(|e| {
            let mut mean = vec![0.0; d];
            for &r in &e.template_rows {
                for (m, x) in mean.iter_mut().zip(bundle.text_raw.row(r)) {
                    *m += *x as f64;
                }
            }
            let k = e.template_rows.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
            let n = dot(&mean, &mean).sqrt();
            mean.into_iter().map(|m| m / n).collect()
        })
        .collect();
    let sigmoid = idx.channel_count() == 1;
    let t = bundle.temperature as f64;
    let classify = |vis: &[f32]| -> Vec<f64> {
        let v = to_f64(vis);
        let vn = dot(&v, &v).sqrt();
        let logits: Vec<f64> = idx
            .channels()
            .iter()
            .map(|ch| {
                ch.rows
                    .iter()
                    .map(|&r| dot(&v, &concepts[r]) / vn)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        if sigmoid {
            return logits.iter().map(|l| 1.0 / (1.0 + (-l / t).exp())).collect();
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| ((l - top) / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let n = bundle.vis_in.rows();
    (0..n)
        .map(|i| {
            let a = classify(bundle.vis_in.row(i));
            let b = classify(bundle.vis_out.row(i));
            a.iter()
                .zip(&b)
                .enumerate()
                .map(|(k, (&x, &y))| {
                    let w = if k < idx.id_channel_count() {
                        bundle.alpha as f64
                    } else {
                        bundle.beta as f64
                    };
                    let p = |base: f64, e: f64| if e == 0.0 { 1.0 } else { base.powf(e) };
                    p(x, 1.0 - w) * p(y, w)
                })
                .collect()
        })
        .collect()
}

/// The anomaly map computed pixel by pixel from scratch.
pub fn oracle_uncertainty(bundle: &InferenceBundle, idx: &ClassIndex) -> Result<UncertaintyMap> {
    let probs = oracle_probabilities(bundle, idx);
    let shape = bundle.mask_scores.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let s = bundle.mask_scores.data();
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let mut best = f64::NEG_INFINITY;
        for k in 0..idx.id_channel_count() {
            let mut total = 0.0;
            for (i, row) in probs.iter().enumerate().take(n) {
                total += s[i * h * w + p] as f64 * row[k];
            }
            best = best.max(total);
        }
        out.push(-best as f32);
    }
    UncertaintyMap::from_vec(h, w, out)
}

fn pairs(scores: &[f32], is_ood: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_ood.len() {
        return Err(Error::LengthMismatch { expected: scores.len(), actual: is_ood.len() });
    }
    let pos = is_ood.iter().filter(|&&b| b).count();
    Ok((pos, is_ood.len() - pos))
}

fn distinct_desc(scores: &[f32]) -> Vec<f32> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f32], is_ood: &[bool], tau: f32) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &o) in scores.iter().zip(is_ood) {
        if s >= tau {
            if o {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// Average precision by rescanning every pixel at every distinct threshold.
pub fn oracle_ap(scores: &[f32], is_ood: &[bool]) -> Result<f64> {
    let (pos, _) = pairs(scores, is_ood)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("no OOD pixels".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for tau in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, is_ood, tau);
        let recall_step = (tp - prev_tp) as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += recall_step * precision;
        prev_tp = tp;
    }
    Ok(ap)
}

/// FPR at the highest threshold whose TPR reaches `target`.
pub fn oracle_fpr(scores: &[f32], is_ood: &[bool], target: f64) -> Result<f64> {
    let (pos, neg) = pairs(scores, is_ood)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("need both OOD and ID pixels".into()));
    }
    for tau in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, is_ood, tau);
        if tp as f64 / pos as f64 >= target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Err(Error::UndefinedMetric(format!("TPR never reaches {target}")))
}

/// `(threshold, ood_recall, id_retention)` at +inf, every distinct score of
/// `scores`, and -inf, each counted directly.
pub fn oracle_retention(scores: &[f32], is_ood: &[bool], id_scores: &[f32]) -> Result<Vec<(f32, f64, f64)>> {
    let (pos, _) = pairs(scores, is_ood)?;
    if pos == 0 || id_scores.is_empty() {
        return Err(Error::UndefinedMetric("need both OOD and ID pixels".into()));
    }
    let mut taus = vec![f32::INFINITY];
    taus.extend(distinct_desc(scores));
    taus.push(f32::NEG_INFINITY);
    Ok(taus
        .into_iter()
        .map(|tau| {
            let (tp, _) = counts_at(scores, is_ood, tau);
            let kept = id_scores.iter().filter(|&&s| s < tau).count();
            (tau, tp as f64 / pos as f64, kept as f64 / id_scores.len() as f64)
        })
        .collect())
}

/// 8-connected components by repeated neighbour-minimum propagation until
/// nothing changes. Returns one pixel list per component.
fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..h * w).map(|p| if mask[p] { p + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if label[p] == 0 {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                            continue;
                        }
                        let q = rr as usize * w + cc as usize;
                        if label[q] != 0 && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut ids: Vec<usize> = label.iter().copied().filter(|&l| l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&id| (0..h * w).filter(|&p| label[p] == id).collect())
        .collect()
}

/// `(sIoU_gt, PPV, F1)` averaged over `grid`, by explicit set arithmetic with
/// 8-connectivity.
pub fn oracle_components(u: &UncertaintyMap, gt: &LabelMap, grid: &[f32]) -> Result<(f64, f64, f64)> {
    let (h, w) = gt.shape();
    let labels = gt.data();
    let gt_mask: Vec<bool> = labels.iter().map(|&l| l == OOD_LABEL).collect();
    let gt_comps = components(&gt_mask, h, w);
    if gt_comps.is_empty() || grid.is_empty() {
        return Err(Error::UndefinedMetric("no OOD component or empty grid".into()));
    }
    let (mut siou_sum, mut ppv_sum, mut f1_sum) = (0.0, 0.0, 0.0);
    for &tau in grid {
        let pred: Vec<bool> = (0..h * w)
            .map(|p| labels[p] != IGNORE_LABEL && u.data()[p] >= tau)
            .collect();
        let pred_comps = components(&pred, h, w);
        let mut tp = 0;
        let mut siou_tau = 0.0;
        for k in &gt_comps {
            let inter = k.iter().filter(|&&p| pred[p]).count();
            // union of k with predicted pixels outside every GT component
            let mut union: Vec<usize> = k.clone();
            union.extend((0..h * w).filter(|&p| pred[p] && !gt_mask[p]));
            union.sort_unstable();
            union.dedup();
            let s = inter as f64 / union.len() as f64;
            if s > 0.5 {
                tp += 1;
            }
            siou_tau += s;
        }
        let mut fp = 0;
        let mut ppv_tau = 0.0;
        for c in &pred_comps {
            let inside = c.iter().filter(|&&p| gt_mask[p]).count();
            let v = inside as f64 / c.len() as f64;
            if v <= 0.5 {
                fp += 1;
            }
            ppv_tau += v;
        }
        siou_sum += siou_tau / gt_comps.len() as f64;
        ppv_sum += if pred_comps.is_empty() { 0.0 } else { ppv_tau / pred_comps.len() as f64 };
        let fn_ = gt_comps.len() - tp;
        f1_sum += 2.0 * tp as f64 / (2 * tp + fn_ + fp) as f64;
    }
    let n = grid.len() as f64;
    Ok((siou_sum / n, ppv_sum / n, f1_sum / n))
}
