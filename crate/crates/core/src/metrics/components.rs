//! Component-level metrics over connected OOD regions.
//!
//! At each threshold `tau`, the predicted set `P` is every non-ignore pixel
//! with `u >= tau`; `G` is the union of ground-truth OOD pixels. For a GT
//! component `k` with `A_k = G \ k`:
//!
//! ```text
//! sIoU(k) = |k ∩ P| / |k ∪ (P \ A_k)|
//! PPV(k̂)  = |k̂ ∩ G| / |k̂|
//! ```
//!
//! A GT component is a true positive when `sIoU > 0.5`; a predicted
//! component is a false positive when `PPV <= 0.5`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::labels::{LabelMap, IGNORE_LABEL, OOD_LABEL};
use crate::scoring::UncertaintyMap;

/// Membership cutoff on sIoU (TP) and PPV (FP).
pub const MEMBERSHIP_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Labels the `true` pixels of a row-major `height × width` mask.
/// Returns per-pixel labels (0 = background, components numbered from 1) and the count.
pub fn label_components(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> (Vec<u32>, usize) {
    debug_assert_eq!(mask.len(), height * width);
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr == 0 && dc == 0) || (conn == Connectivity::Four && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentScores {
    pub siou_gt: f64,
    pub ppv: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ThresholdScores {
    siou: f64,
    ppv: f64,
    f1: f64,
}

/// `n` evenly spaced thresholds over `[min u, max u]` of the non-ignore pixels.
pub fn uniform_grid(u: &UncertaintyMap, gt: &LabelMap, n: usize) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(Error::Parameter("threshold grid must have at least one point".into()));
    }
    let (lo, hi) = u
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (&s, _)| (lo.min(s), hi.max(s)));
    if lo > hi {
        return Err(Error::UndefinedMetric("every pixel is ignored".into()));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (lo, hi) = (lo as f64, hi as f64);
    Ok((0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64) as f32)
        .collect())
}

pub fn component_metrics(
    u: &UncertaintyMap,
    gt: &LabelMap,
    grid: &[f32],
    conn: Connectivity,
) -> Result<ComponentScores> {
    component_metrics_with(u, gt, grid, conn, Execution::default())
}

pub fn component_metrics_with(
    u: &UncertaintyMap,
    gt: &LabelMap,
    grid: &[f32],
    conn: Connectivity,
    exec: Execution,
) -> Result<ComponentScores> {
    if grid.is_empty() {
        return Err(Error::Parameter("threshold grid is empty".into()));
    }
    if u.shape() != gt.shape() {
        return Err(Error::Dimension(format!(
            "scores are {:?}, labels are {:?}",
            u.shape(),
            gt.shape()
        )));
    }
    let (h, w) = gt.shape();
    let in_gt: Vec<bool> = gt.data().iter().map(|&l| l == OOD_LABEL).collect();
    let (gt_labels, gt_count) = label_components(&in_gt, h, w, conn);
    if gt_count == 0 {
        return Err(Error::UndefinedMetric("label map has no OOD component".into()));
    }
    let mut gt_sizes = vec![0usize; gt_count];
    for &l in &gt_labels {
        if l > 0 {
            gt_sizes[l as usize - 1] += 1;
        }
    }

    let per_tau = exec::map_indexed(exec, grid.len(), |t| {
        let tau = grid[t];
        let predicted: Vec<bool> = u
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&s, &l)| l != IGNORE_LABEL && s >= tau)
            .collect();
        score_threshold(&predicted, &in_gt, &gt_labels, &gt_sizes, h, w, conn)
    });

    let n = grid.len() as f64;
    Ok(ComponentScores {
        siou_gt: per_tau.iter().map(|s| s.siou).sum::<f64>() / n,
        ppv: per_tau.iter().map(|s| s.ppv).sum::<f64>() / n,
        mean_f1: per_tau.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}

fn score_threshold(
    predicted: &[bool],
    in_gt: &[bool],
    gt_labels: &[u32],
    gt_sizes: &[usize],
    h: usize,
    w: usize,
    conn: Connectivity,
) -> ThresholdScores {
    let gt_count = gt_sizes.len();
    // |k ∪ (P \ A_k)| = |k| + |P \ G| since P \ A_k splits into P ∩ k and P \ G
    let mut hits = vec![0usize; gt_count];
    let mut outside_gt = 0usize;
    for ((&p, &g), &l) in predicted.iter().zip(in_gt).zip(gt_labels) {
        if !p {
            continue;
        }
        if g {
            hits[l as usize - 1] += 1;
        } else {
            outside_gt += 1;
        }
    }
    let sious: Vec<f64> = hits
        .iter()
        .zip(gt_sizes)
        .map(|(&hit, &size)| hit as f64 / (size + outside_gt) as f64)
        .collect();

    let (pred_labels, pred_count) = label_components(predicted, h, w, conn);
    let mut pred_size = vec![0usize; pred_count];
    let mut pred_in_gt = vec![0usize; pred_count];
    for (&l, &g) in pred_labels.iter().zip(in_gt) {
        if l > 0 {
            pred_size[l as usize - 1] += 1;
            if g {
                pred_in_gt[l as usize - 1] += 1;
            }
        }
    }
    let ppvs: Vec<f64> = pred_in_gt
        .iter()
        .zip(&pred_size)
        .map(|(&a, &b)| a as f64 / b as f64)
        .collect();

    let tp = sious.iter().filter(|&&s| s > MEMBERSHIP_CUTOFF).count();
    let fn_ = gt_count - tp;
    let fp = ppvs.iter().filter(|&&p| p <= MEMBERSHIP_CUTOFF).count();
    ThresholdScores {
        siou: sious.iter().sum::<f64>() / gt_count as f64,
        // no predicted components: PPV counts as 0
        ppv: if ppvs.is_empty() {
            0.0
        } else {
            ppvs.iter().sum::<f64>() / ppvs.len() as f64
        },
        f1: 2.0 * tp as f64 / (2 * tp + fn_ + fp) as f64,
    }
}
