//! Anomaly benchmark metrics.
//!
//! Pixel metrics (AP, FPR at a target TPR, the retention curve) pool every
//! non-ignore pixel of every image. Component metrics are computed per image
//! and averaged over the images that contain at least one OOD component.

pub mod components;
pub mod pixel;

use serde::Serialize;

pub use components::{
    component_metrics, component_metrics_with, label_components, uniform_grid, ComponentScores,
    Connectivity, MEMBERSHIP_CUTOFF,
};
pub use pixel::{
    fpr_at_tpr, fpr_at_tpr_with, pixel_ap, pixel_ap_with, pr_curve, retention_curve,
    retention_curve_with, CurvePoint, PrPoint, ScoredPixels, Sweep,
};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::labels::{LabelMap, OOD_LABEL};
use crate::scoring::UncertaintyMap;

pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const DEFAULT_GRID_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    /// `n` uniform thresholds over each image's own score range.
    Uniform(usize),
    /// The same explicit thresholds for every image.
    Explicit(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOptions {
    pub grid: GridSpec,
    pub connectivity: Connectivity,
    pub target_tpr: f64,
    /// The report keeps at most this many retention-curve points (endpoints always kept).
    pub max_curve_points: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::Uniform(DEFAULT_GRID_SIZE),
            connectivity: Connectivity::Eight,
            target_tpr: DEFAULT_TARGET_TPR,
            max_curve_points: 1000,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub fpr_at_95tpr: f64,
    pub siou_gt: f64,
    pub ppv: f64,
    pub mean_f1: f64,
    /// `(ood_recall, id_retention)` pairs, ordered by increasing recall.
    pub curve: Vec<(f64, f64)>,
    pub images: usize,
    pub images_with_ood: usize,
    pub ood_pixels: usize,
    pub id_pixels: usize,
}

/// Keeps `max` roughly evenly spaced points including both ends.
pub fn thin_curve(curve: &[CurvePoint], max: usize) -> Vec<CurvePoint> {
    if curve.len() <= max || max < 2 {
        return curve.to_vec();
    }
    let last = curve.len() - 1;
    let mut out: Vec<CurvePoint> = (0..max)
        .map(|i| curve[(i * last + (max - 1) / 2) / (max - 1)])
        .collect();
    out[0] = curve[0];
    out[max - 1] = curve[last];
    out.dedup();
    out
}

pub fn evaluate(images: &[(UncertaintyMap, LabelMap)], opts: &EvalOptions) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::UndefinedMetric("no images to evaluate".into()));
    }
    let mut pooled = ScoredPixels::default();
    for (u, gt) in images {
        pooled.extend(&ScoredPixels::from_map(u, gt)?);
    }
    let ap = pixel_ap_with(&pooled, opts.exec)?;
    let fpr = fpr_at_tpr_with(&pooled, opts.target_tpr, opts.exec)?;
    let curve = retention_curve_with(&pooled, &pooled.id_scores(), opts.exec)?;

    let per_image: Vec<Result<Option<ComponentScores>>> = exec::map_indexed(opts.exec, images.len(), |i| {
        let (u, gt) = &images[i];
        if !gt.data().contains(&OOD_LABEL) {
            return Ok(None);
        }
        let grid = match &opts.grid {
            GridSpec::Uniform(n) => uniform_grid(u, gt, *n)?,
            GridSpec::Explicit(g) => g.clone(),
        };
        // parallelism is spent across images here
        component_metrics_with(u, gt, &grid, opts.connectivity, Execution::Sequential).map(Some)
    });
    let mut scored = Vec::new();
    for r in per_image {
        if let Some(s) = r? {
            scored.push(s);
        }
    }
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no image has an OOD component".into()));
    }
    let k = scored.len() as f64;

    Ok(MetricsReport {
        ap,
        fpr_at_95tpr: fpr,
        siou_gt: scored.iter().map(|s| s.siou_gt).sum::<f64>() / k,
        ppv: scored.iter().map(|s| s.ppv).sum::<f64>() / k,
        mean_f1: scored.iter().map(|s| s.mean_f1).sum::<f64>() / k,
        curve: thin_curve(&curve, opts.max_curve_points)
            .iter()
            .map(|c| (c.ood_recall, c.id_retention))
            .collect(),
        images: images.len(),
        images_with_ood: scored.len(),
        ood_pixels: pooled.positives(),
        id_pixels: pooled.negatives(),
    })
}
