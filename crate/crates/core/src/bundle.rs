//! On-disk inference bundles: one image's model outputs plus metadata.
//!
//! A bundle directory holds `meta.json`, `mask_scores.vlt` (N×H×W),
//! `vis_in.vlt` (N×D), `vis_out.vlt` (N×D), `text_raw.vlt` (P×D) and an
//! optional `labels.vlt` (H×W, u8).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{read_tensor_f32, read_tensor_u8, write_atomic, write_tensor, Tensor};

pub const DEFAULT_ALPHA: f32 = 0.4;
pub const DEFAULT_BETA: f32 = 0.8;
pub const DEFAULT_TEMPERATURE: f32 = 0.01;

pub const META_FILE: &str = "meta.json";
pub const MASK_SCORES_FILE: &str = "mask_scores.vlt";
pub const VIS_IN_FILE: &str = "vis_in.vlt";
pub const VIS_OUT_FILE: &str = "vis_out.vlt";
pub const TEXT_RAW_FILE: &str = "text_raw.vlt";
pub const LABELS_FILE: &str = "labels.vlt";

/// The text_raw rows that belong to one (class, concept) pair, one per template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub class: String,
    pub concept: String,
    pub template_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n_queries: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub n_prompts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f32>,
    pub class_names: Vec<String>,
    pub concept_index: Vec<ConceptEntry>,
    /// Which export stage produced the text_raw rows (e.g. "per-template, dropout disabled").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_stage: Option<String>,
    /// Free-form provenance written by generators (PRNG name, seed, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceBundle {
    pub mask_scores: Tensor<f32>,
    pub vis_in: Tensor<f32>,
    pub vis_out: Tensor<f32>,
    pub text_raw: Tensor<f32>,
    pub temperature: f32,
    pub alpha: f32,
    pub beta: f32,
    pub labels: Option<LabelMap>,
    pub class_names: Vec<String>,
    pub concepts: Vec<ConceptEntry>,
    pub text_stage: Option<String>,
    pub generator: Option<serde_json::Value>,
}

impl InferenceBundle {
    pub fn n_queries(&self) -> usize {
        self.mask_scores.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.mask_scores.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask_scores.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.vis_in.shape()[1]
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            n_queries: self.n_queries(),
            dim: self.dim(),
            height: self.height(),
            width: self.width(),
            n_prompts: self.text_raw.rows(),
            temperature: Some(self.temperature),
            alpha: Some(self.alpha),
            beta: Some(self.beta),
            class_names: self.class_names.clone(),
            concept_index: self.concepts.clone(),
            text_stage: self.text_stage.clone(),
            generator: self.generator.clone(),
        }
    }

    /// Checks every bundle invariant; `load_bundle` and `write_bundle` both call this.
    pub fn validate(&self) -> Result<()> {
        self.mask_scores.expect_rank(3, "mask_scores")?;
        self.vis_in.expect_rank(2, "vis_in")?;
        self.vis_out.expect_rank(2, "vis_out")?;
        self.text_raw.expect_rank(2, "text_raw")?;
        let (n, h, w) = (self.n_queries(), self.height(), self.width());
        let d = self.dim();
        if self.vis_out.shape() != [n, d] || self.vis_in.shape() != [n, d] {
            return Err(Error::Dimension(format!(
                "vis_in {:?} and vis_out {:?} must both be N×D = [{n}, {d}]",
                self.vis_in.shape(),
                self.vis_out.shape()
            )));
        }
        if self.text_raw.shape()[1] != d {
            return Err(Error::Dimension(format!(
                "text_raw has width {}, visual embeddings have {d}",
                self.text_raw.shape()[1]
            )));
        }
        self.mask_scores.check_range(0.0, 1.0, "mask_scores")?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        check_concept_rows(&self.concepts, self.text_raw.rows())?;
        if let Some(labels) = &self.labels {
            if labels.shape() != (h, w) {
                return Err(Error::Dimension(format!(
                    "labels are {:?}, mask_scores are {h}×{w}",
                    labels.shape()
                )));
            }
            labels.check_codes(self.class_names.len())?;
        }
        Ok(())
    }
}

fn check_concept_rows(concepts: &[ConceptEntry], n_prompts: usize) -> Result<()> {
    let mut owner: Vec<Option<usize>> = vec![None; n_prompts];
    for (ci, c) in concepts.iter().enumerate() {
        if c.template_rows.is_empty() {
            return Err(Error::Validation(format!(
                "concept {:?}/{:?} owns no text_raw rows",
                c.class, c.concept
            )));
        }
        if concepts[..ci]
            .iter()
            .any(|o| o.class == c.class && o.concept == c.concept)
        {
            return Err(Error::Validation(format!(
                "concept {:?}/{:?} listed twice in concept_index",
                c.class, c.concept
            )));
        }
        for &r in &c.template_rows {
            let slot = owner.get_mut(r).ok_or_else(|| {
                Error::Validation(format!(
                    "concept {:?}/{:?} references row {r}, text_raw has {n_prompts}",
                    c.class, c.concept
                ))
            })?;
            if let Some(prev) = slot.replace(ci) {
                return Err(Error::Validation(format!(
                    "text_raw row {r} claimed by both {:?} and {:?}",
                    concepts[prev].concept, c.concept
                )));
            }
        }
    }
    if let Some(r) = owner.iter().position(Option::is_none) {
        return Err(Error::Validation(format!(
            "text_raw row {r} is not assigned to any concept"
        )));
    }
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<InferenceBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::config(meta_path.display().to_string(), e.to_string()))?;

    let mask_scores = read_tensor_f32(dir.join(MASK_SCORES_FILE))?;
    let vis_in = read_tensor_f32(dir.join(VIS_IN_FILE))?;
    let vis_out = read_tensor_f32(dir.join(VIS_OUT_FILE))?;
    let text_raw = read_tensor_f32(dir.join(TEXT_RAW_FILE))?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        Some(LabelMap::new(read_tensor_u8(&labels_path)?)?)
    } else {
        None
    };

    let expect = |what: &str, got: &[usize], want: &[usize]| -> Result<()> {
        if got != want {
            return Err(Error::Dimension(format!(
                "{what} has shape {got:?}, meta.json implies {want:?}"
            )));
        }
        Ok(())
    };
    let (n, d, h, w, p) = (meta.n_queries, meta.dim, meta.height, meta.width, meta.n_prompts);
    expect("mask_scores", mask_scores.shape(), &[n, h, w])?;
    expect("vis_in", vis_in.shape(), &[n, d])?;
    expect("vis_out", vis_out.shape(), &[n, d])?;
    expect("text_raw", text_raw.shape(), &[p, d])?;

    let bundle = InferenceBundle {
        mask_scores,
        vis_in,
        vis_out,
        text_raw,
        temperature: meta.temperature.unwrap_or(DEFAULT_TEMPERATURE),
        alpha: meta.alpha.unwrap_or(DEFAULT_ALPHA),
        beta: meta.beta.unwrap_or(DEFAULT_BETA),
        labels,
        class_names: meta.class_names,
        concepts: meta.concept_index,
        text_stage: meta.text_stage,
        generator: meta.generator,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(bundle: &InferenceBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(&bundle.mask_scores, dir.join(MASK_SCORES_FILE))?;
    write_tensor(&bundle.vis_in, dir.join(VIS_IN_FILE))?;
    write_tensor(&bundle.vis_out, dir.join(VIS_OUT_FILE))?;
    write_tensor(&bundle.text_raw, dir.join(TEXT_RAW_FILE))?;
    if let Some(labels) = &bundle.labels {
        write_tensor(labels.tensor(), dir.join(LABELS_FILE))?;
    }
    let mut json = serde_json::to_string_pretty(&bundle.meta()).expect("meta serializes");
    json.push('\n');
    write_atomic(&dir.join(META_FILE), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InferenceBundle {
        InferenceBundle {
            mask_scores: Tensor::new(vec![1, 2, 2], vec![1.0, 0.5, 0.0, 0.25]).unwrap(),
            vis_in: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            vis_out: Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
            text_raw: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            temperature: 0.05,
            alpha: 0.4,
            beta: 0.8,
            labels: Some(LabelMap::new(Tensor::new(vec![2, 2], vec![0, 1, 254, 255]).unwrap()).unwrap()),
            class_names: vec!["a".into(), "b".into()],
            concepts: vec![
                ConceptEntry { class: "a".into(), concept: "a".into(), template_rows: vec![0] },
                ConceptEntry { class: "b".into(), concept: "b".into(), template_rows: vec![1] },
            ],
            text_stage: None,
            generator: None,
        }
    }

    #[test]
    fn roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny();
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn missing_alpha_beta_take_defaults() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        let obj = meta.as_object_mut().unwrap();
        obj.remove("alpha");
        obj.remove("beta");
        obj.remove("temperature");
        fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        let b = load_bundle(dir.path()).unwrap();
        assert_eq!(b.alpha, 0.4);
        assert_eq!(b.beta, 0.8);
        assert_eq!(b.temperature, DEFAULT_TEMPERATURE);
    }

    #[test]
    fn mask_score_above_one_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let bad = Tensor::new(vec![1, 2, 2], vec![1.2f32, 0.5, 0.0, 0.25]).unwrap();
        write_tensor(&bad, dir.path().join(MASK_SCORES_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_mismatch_against_meta() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        let bad = Tensor::new(vec![1, 3], vec![1.0f32, 0.0, 0.0]).unwrap();
        write_tensor(&bad, dir.path().join(VIS_IN_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Dimension(_))));
    }

    #[test]
    fn missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(TEXT_RAW_FILE)).unwrap();
        assert!(load_bundle(dir.path()).unwrap_err().is_io());
    }

    #[test]
    fn out_of_range_scalars_rejected() {
        let mut b = tiny();
        b.alpha = 1.5;
        assert!(b.validate().is_err());
        let mut b = tiny();
        b.temperature = 0.0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn concept_rows_must_partition_text_raw() {
        let mut b = tiny();
        b.concepts[1].template_rows = vec![0];
        assert!(b.validate().is_err());
        let mut b = tiny();
        b.concepts.pop();
        assert!(b.validate().is_err());
    }

    #[test]
    fn label_codes_checked_against_class_count() {
        let mut b = tiny();
        b.labels = Some(LabelMap::new(Tensor::new(vec![2, 2], vec![0, 7, 254, 255]).unwrap()).unwrap());
        assert!(b.validate().is_err());
    }
}
