use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{write_bundle, ConceptEntry, InferenceBundle, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL, OOD_LABEL};
use crate::tensor::Tensor;
use crate::vocab::{default_vocab, parse_vocab_config, VocabConfig};

pub const PRNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), normals via rand_distr 0.5 StandardNormal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    /// An ID object of class `k`.
    Class(usize),
    /// An anomaly. `prompt: Some(j)` shares the prototype of OOD prompt class
    /// `j`; `None` uses a fresh prototype. `blend` mixes in weighted ID
    /// class prototypes to make the object look partly familiar.
    Ood {
        #[serde(default)]
        prompt: Option<usize>,
        #[serde(default)]
        blend: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub rect: Rect,
    pub kind: BlobKind,
    /// Mask score of the blob's query inside the rectangle.
    #[serde(default = "one")]
    pub strength: f32,
    #[serde(default = "yes")]
    pub paint_label: bool,
}

impl Blob {
    pub fn class(rect: Rect, k: usize) -> Self {
        Self { rect, kind: BlobKind::Class(k), strength: 1.0, paint_label: true }
    }

    pub fn ood(rect: Rect, prompt: Option<usize>) -> Self {
        Self { rect, kind: BlobKind::Ood { prompt, blend: Vec::new() }, strength: 1.0, paint_label: true }
    }
}

fn one() -> f32 {
    1.0
}

fn yes() -> bool {
    true
}

/// Standard deviations (as expected L2 norms) of the perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub concept: f64,
    pub template: f64,
    pub visual: f64,
    pub encoder: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self { concept: 0.15, template: 0.05, visual: 0.08, encoder: 0.12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_queries: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub id_class_count: usize,
    pub ood_prompt_count: usize,
    pub blobs: Vec<Blob>,
    /// Class of pixels outside every blob; covered by a dedicated query.
    #[serde(default)]
    pub background: usize,
    /// `1 - cos` between any two prototypes.
    #[serde(default = "one_f64")]
    pub margin: f64,
    #[serde(default = "two")]
    pub concepts_per_class: usize,
    #[serde(default = "two")]
    pub templates: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default)]
    pub noise: NoiseLevels,
    #[serde(default)]
    pub ignore: Vec<Rect>,
    /// Vocabulary to take class, concept, template and OOD names from. When
    /// absent, synthetic names are generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<serde_json::Value>,
}

fn one_f64() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn default_temperature() -> f32 {
    DEFAULT_TEMPERATURE
}
fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}
fn default_beta() -> f32 {
    DEFAULT_BETA
}

/// A generated bundle and the vocabulary it was built for.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub bundle: InferenceBundle,
    pub vocab: VocabConfig,
    /// Prompt names of the OOD channels present in the bundle, in order.
    pub ood_names: Vec<String>,
}

impl FixtureSpec {
    fn base(seed: u64, vocab: &VocabConfig) -> Self {
        FixtureSpec {
            seed,
            n_queries: 0,
            dim: 64,
            height: 32,
            width: 32,
            id_class_count: vocab.class_count(),
            ood_prompt_count: vocab.all_ood_names().len(),
            blobs: Vec::new(),
            background: 0,
            margin: 1.0,
            concepts_per_class: 2,
            templates: 2,
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            noise: NoiseLevels::default(),
            ignore: Vec::new(),
            vocab: Some(vocab.to_json()),
        }
    }

    /// A 32×32 street scene over the shipped vocabulary with one "cow" anomaly.
    pub fn demo(seed: u64) -> Self {
        let vocab = default_vocab();
        let class = |name: &str| vocab.class_position(name).expect("default class");
        let cow = vocab.all_ood_names().iter().position(|n| n == "cow");
        let mut spec = Self::base(seed, &vocab);
        spec.background = class("road");
        spec.blobs = vec![
            Blob::class(Rect::new(0, 0, 6, 32), class("sky")),
            Blob::class(Rect::new(6, 0, 8, 12), class("building")),
            Blob::class(Rect::new(6, 20, 8, 12), class("vegetation")),
            Blob::class(Rect::new(18, 2, 8, 10), class("car")),
            Blob::class(Rect::new(18, 12, 8, 8), class("truck")),
            Blob::class(Rect::new(16, 24, 10, 4), class("person")),
            Blob::ood(Rect::new(27, 10, 5, 10), cow),
        ];
        spec.n_queries = spec.blobs.len() + 1;
        spec
    }

    /// Two sibling vehicle classes meeting along a strip where both queries
    /// are only half confident, plus an anomaly next to the strip whose
    /// embedding sits between two classes of different superclasses.
    pub fn merging_boundary(seed: u64) -> Self {
        let vocab = default_vocab();
        let class = |name: &str| vocab.class_position(name).expect("default class");
        let (car, truck) = (class("car"), class("truck"));
        let strip = Rect::new(4, 15, 16, 2);
        let mut spec = Self::base(seed, &vocab);
        spec.background = class("road");
        spec.temperature = 0.05;
        spec.noise = NoiseLevels { concept: 0.05, template: 0.02, visual: 0.03, encoder: 0.05 };
        spec.blobs = vec![
            Blob::class(Rect::new(4, 0, 16, 15), car),
            Blob::class(Rect::new(4, 17, 16, 15), truck),
            Blob { strength: 0.5, ..Blob::class(strip, car) },
            Blob { strength: 0.5, ..Blob::class(strip, truck) },
            Blob {
                rect: Rect::new(22, 12, 6, 8),
                kind: BlobKind::Ood {
                    prompt: None,
                    blend: vec![(class("person"), 1.0), (class("sky"), 1.0)],
                },
                strength: 1.0,
                paint_label: true,
            },
        ];
        spec.n_queries = spec.blobs.len() + 1;
        spec
    }

    /// A small random scene with synthetic names: K ≤ 5, Q ≤ 3, N ≤ 8, H = W = 16.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7_0000_0000);
        let k = rng.random_range(1..=5usize);
        let q = rng.random_range(0..=3usize);
        let n = rng.random_range(2..=8usize);
        let (h, w) = (16, 16);
        let mut blobs = Vec::new();
        for _ in 0..n - 1 {
            let bh = rng.random_range(2..=8);
            let bw = rng.random_range(2..=8);
            let rect = Rect::new(rng.random_range(0..=h - bh), rng.random_range(0..=w - bw), bh, bw);
            let kind = if rng.random_bool(0.3) {
                let prompt = if q > 0 && rng.random_bool(0.5) {
                    Some(rng.random_range(0..q))
                } else {
                    None
                };
                let blend = if rng.random_bool(0.5) {
                    vec![(rng.random_range(0..k), rng.random_range(0.0..1.0))]
                } else {
                    Vec::new()
                };
                BlobKind::Ood { prompt, blend }
            } else {
                BlobKind::Class(rng.random_range(0..k))
            };
            blobs.push(Blob {
                rect,
                kind,
                strength: rng.random_range(0.3..=1.0f32),
                paint_label: true,
            });
        }
        FixtureSpec {
            seed,
            n_queries: n,
            dim: 32,
            height: h,
            width: w,
            id_class_count: k,
            ood_prompt_count: q,
            blobs,
            background: rng.random_range(0..k),
            margin: rng.random_range(0.5..=1.0),
            concepts_per_class: rng.random_range(1..=3),
            templates: rng.random_range(1..=3),
            temperature: rng.random_range(0.01..=0.2f32),
            alpha: rng.random_range(0.0..=1.0f32),
            beta: rng.random_range(0.0..=1.0f32),
            noise: NoiseLevels::default(),
            ignore: Vec::new(),
            vocab: None,
        }
    }

    fn resolve_vocab(&self) -> Result<(VocabConfig, Vec<String>)> {
        match &self.vocab {
            Some(v) => {
                let cfg = parse_vocab_config(&v.to_string())?;
                let ood = cfg.all_ood_names();
                if cfg.class_count() != self.id_class_count || ood.len() != self.ood_prompt_count {
                    return Err(Error::Generation(format!(
                        "spec declares K={} Q={}, vocabulary has K={} Q={}",
                        self.id_class_count,
                        self.ood_prompt_count,
                        cfg.class_count(),
                        ood.len()
                    )));
                }
                Ok((cfg, ood))
            }
            None => {
                let classes: Vec<String> = (0..self.id_class_count).map(|k| format!("class{k}")).collect();
                let concepts = classes
                    .iter()
                    .map(|c| {
                        (0..self.concepts_per_class.max(1))
                            .map(|i| if i == 0 { c.clone() } else { format!("{c} alt{i}") })
                            .collect()
                    })
                    .collect();
                let templates = (0..self.templates.max(1)).map(|t| format!("template{t} {{}}")).collect();
                let ood: Vec<String> = (0..self.ood_prompt_count).map(|j| format!("ood{j}")).collect();
                Ok((
                    VocabConfig {
                        classes,
                        concepts,
                        templates,
                        merging: None,
                        ood_classes: ood.clone(),
                        merging_presets: Vec::new(),
                        ood_sets: Vec::new(),
                    },
                    ood,
                ))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.id_class_count == 0 {
            return fail("id_class_count must be at least 1".into());
        }
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return fail(format!("margin {} is outside (0, 2)", self.margin));
        }
        if self.n_queries < self.blobs.len() + 1 {
            return fail(format!(
                "{} blobs plus the background need at least {} queries, spec has {}",
                self.blobs.len(),
                self.blobs.len() + 1,
                self.n_queries
            ));
        }
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return fail("height, width and dim must be positive".into());
        }
        if self.background >= self.id_class_count {
            return fail(format!("background class {} out of range", self.background));
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return fail("temperature must be positive; alpha and beta in [0, 1]".into());
        }
        let in_bounds = |r: &Rect| r.top + r.height <= self.height && r.left + r.width <= self.width;
        for (i, b) in self.blobs.iter().enumerate() {
            if !in_bounds(&b.rect) {
                return fail(format!("blob {i} rectangle {:?} exceeds {}×{}", b.rect, self.height, self.width));
            }
            if !(0.0..=1.0).contains(&b.strength) {
                return fail(format!("blob {i} strength {} is outside [0, 1]", b.strength));
            }
            match &b.kind {
                BlobKind::Class(k) if *k >= self.id_class_count => {
                    return fail(format!("blob {i} class {k} out of range"));
                }
                BlobKind::Ood { prompt, blend } => {
                    if let Some(j) = prompt {
                        if *j >= self.ood_prompt_count {
                            return fail(format!("blob {i} OOD prompt {j} out of range"));
                        }
                    }
                    if blend.iter().any(|(k, _)| *k >= self.id_class_count) {
                        return fail(format!("blob {i} blends an unknown class"));
                    }
                }
                _ => {}
            }
        }
        if let Some(r) = self.ignore.iter().find(|r| !in_bounds(r)) {
            return fail(format!("ignore rectangle {r:?} out of bounds"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += w * b);
}

/// `count` unit vectors in `dim` dimensions with pairwise cosine `1 - margin`.
///
/// Seeded Gaussian vectors are orthonormalised (Gram–Schmidt) into `e_k`, then
/// `x_k = a e_k + b Σ_j e_j` with `a = sqrt(1 - rho)` and `b` solving
/// `n b² + 2ab = rho`, which exists iff `rho >= -1/(n-1)`.
fn prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize, margin: f64) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Generation(format!(
            "{count} prototypes need at least {count} dimensions, spec has {dim}"
        )));
    }
    let rho = 1.0 - margin;
    if count > 1 && rho < -1.0 / (count as f64 - 1.0) {
        return Err(Error::Generation(format!(
            "margin {margin} is unsatisfiable for {count} prototypes (max {})",
            1.0 + 1.0 / (count as f64 - 1.0)
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for e in &basis {
            let d: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            add_scaled(&mut v, e, -d);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    let n = count as f64;
    let a = (1.0 - rho).sqrt();
    let b = (-a + (a * a + n * rho).max(0.0).sqrt()) / n;
    let mut sum = vec![0.0; dim];
    for e in &basis {
        add_scaled(&mut sum, e, 1.0);
    }
    Ok(basis
        .iter()
        .map(|e| {
            let mut x: Vec<f64> = e.iter().map(|v| a * v).collect();
            add_scaled(&mut x, &sum, b);
            normalized(&x)
        })
        .collect())
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let (vocab, ood_names) = spec.resolve_vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, q, d) = (spec.id_class_count, spec.ood_prompt_count, spec.dim);
    let novel: Vec<usize> = spec
        .blobs
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b.kind, BlobKind::Ood { prompt: None, .. }))
        .map(|(i, _)| i)
        .collect();
    let protos = prototypes(&mut rng, k + q + novel.len(), d, spec.margin)?;

    // text rows: concept-major, one row per template
    let n_templates = vocab.templates.len();
    let mut text = Vec::new();
    let mut concepts = Vec::new();
    let mut push_concept = |rng: &mut ChaCha8Rng, class: &str, concept: &str, proto: &[f64], spread: f64| {
        let mut dir = proto.to_vec();
        add_scaled(&mut dir, &gaussian(rng, d, spread), 1.0);
        let dir = normalized(&dir);
        let first = text.len() / d;
        for _ in 0..n_templates {
            let mut row = dir.clone();
            add_scaled(&mut row, &gaussian(rng, d, spec.noise.template), 1.0);
            text.extend(to_f32(&row));
        }
        concepts.push(ConceptEntry {
            class: class.to_string(),
            concept: concept.to_string(),
            template_rows: (first..first + n_templates).collect(),
        });
    };
    for (ci, (class, cs)) in vocab.classes.iter().zip(&vocab.concepts).enumerate() {
        for c in cs {
            push_concept(&mut rng, class, c, &protos[ci], spec.noise.concept);
        }
    }
    for (j, name) in ood_names.iter().enumerate() {
        push_concept(&mut rng, name, name, &protos[k + j], 0.0);
    }
    let n_prompts = text.len() / d;

    // query targets: blobs, background, then spare queries
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(spec.n_queries);
    for (bi, b) in spec.blobs.iter().enumerate() {
        let t = match &b.kind {
            BlobKind::Class(c) => protos[*c].clone(),
            BlobKind::Ood { prompt, blend } => {
                let mut t = match prompt {
                    Some(j) => protos[k + j].clone(),
                    None => protos[k + q + novel.iter().position(|&i| i == bi).unwrap()].clone(),
                };
                for (c, wgt) in blend {
                    add_scaled(&mut t, &protos[*c], *wgt);
                }
                normalized(&t)
            }
        };
        targets.push(t);
    }
    targets.push(protos[spec.background].clone());
    while targets.len() < spec.n_queries {
        let c = rng.random_range(0..k);
        targets.push(protos[c].clone());
    }
    let mut vis_in = Vec::with_capacity(spec.n_queries * d);
    let mut vis_out = Vec::with_capacity(spec.n_queries * d);
    for t in &targets {
        let mut a = t.clone();
        add_scaled(&mut a, &gaussian(&mut rng, d, spec.noise.visual), 1.0);
        vis_in.extend(to_f32(&a));
        let mut b = t.clone();
        add_scaled(&mut b, &gaussian(&mut rng, d, spec.noise.encoder), 1.0);
        vis_out.extend(to_f32(&b));
    }

    let mut masks = vec![0.0f32; spec.n_queries * hw];
    let mut covered = vec![false; hw];
    for (bi, b) in spec.blobs.iter().enumerate() {
        for r in b.rect.top..b.rect.top + b.rect.height {
            for c in b.rect.left..b.rect.left + b.rect.width {
                masks[bi * hw + r * w + c] = b.strength;
                covered[r * w + c] = true;
            }
        }
    }
    let bg = spec.blobs.len();
    for p in 0..hw {
        if !covered[p] {
            masks[bg * hw + p] = 1.0;
        }
    }
    for qi in bg + 1..spec.n_queries {
        for p in 0..hw {
            masks[qi * hw + p] = rng.random_range(0.0..0.05f32);
        }
    }

    let mut labels = vec![spec.background as u8; hw];
    for b in spec.blobs.iter().filter(|b| b.paint_label) {
        let code = match b.kind {
            BlobKind::Class(c) => c as u8,
            BlobKind::Ood { .. } => OOD_LABEL,
        };
        for r in b.rect.top..b.rect.top + b.rect.height {
            for c in b.rect.left..b.rect.left + b.rect.width {
                labels[r * w + c] = code;
            }
        }
    }
    for rect in &spec.ignore {
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                labels[r * w + c] = IGNORE_LABEL;
            }
        }
    }

    let mut spec_json = serde_json::to_value(spec).expect("spec serializes");
    if let Some(obj) = spec_json.as_object_mut() {
        // the vocabulary is large and recoverable from concept_index
        obj.remove("vocab");
    }
    let bundle = InferenceBundle {
        mask_scores: Tensor::new(vec![spec.n_queries, h, w], masks)?,
        vis_in: Tensor::new(vec![spec.n_queries, d], vis_in)?,
        vis_out: Tensor::new(vec![spec.n_queries, d], vis_out)?,
        text_raw: Tensor::new(vec![n_prompts, d], text)?,
        temperature: spec.temperature,
        alpha: spec.alpha,
        beta: spec.beta,
        labels: Some(LabelMap::from_vec(h, w, labels)?),
        class_names: vocab.classes.clone(),
        concepts,
        text_stage: Some("synthetic: one row per (concept, template); no dropout variants".into()),
        generator: Some(serde_json::json!({
            "prng": PRNG_NAME,
            "seed": spec.seed,
            "spec": spec_json,
        })),
    };
    bundle.validate()?;
    Ok(Fixture { bundle, vocab, ood_names })
}

/// Generates the fixture and writes the bundle directory (plus `vocab.json`).
pub fn gen_fixture(spec: &FixtureSpec, out: impl AsRef<Path>) -> Result<Fixture> {
    let out = out.as_ref();
    let fixture = generate(spec)?;
    write_bundle(&fixture.bundle, out)?;
    let mut vocab = serde_json::to_string_pretty(&fixture.vocab.to_json()).expect("vocab serializes");
    vocab.push('\n');
    crate::tensor::write_atomic(&out.join("vocab.json"), vocab.as_bytes())?;
    Ok(fixture)
}
