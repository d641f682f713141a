//! Concept dictionaries, class merging and OOD prompt classes.
//!
//! A [`VocabConfig`] names the ID classes, the alternative concepts that
//! describe each one, and optional superclass mergings and OOD prompt lists.
//! A [`ConceptTable`] fixes the row order of the concept-embedding table of a
//! particular bundle, and [`build_class_index`] turns the two into a
//! [`ClassIndex`]: for each output channel, the table rows whose cosines are
//! max-reduced into that channel's logit.

use std::collections::HashMap;

use serde_json::{Map, Value};

use crate::bundle::ConceptEntry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEFAULT_VOCAB_JSON: &str = include_str!("../data/default_vocab.json");

/// Below this L2 norm a template mean is treated as degenerate.
pub const MIN_MEAN_NORM: f64 = 1e-8;

/// Ordered superclass → member-class assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merging {
    pub groups: Vec<(String, Vec<String>)>,
}

impl Merging {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabConfig {
    pub classes: Vec<String>,
    /// Alternative concepts, aligned with `classes`.
    pub concepts: Vec<Vec<String>>,
    pub templates: Vec<String>,
    pub merging: Option<Merging>,
    pub ood_classes: Vec<String>,
    pub merging_presets: Vec<(String, Merging)>,
    pub ood_sets: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    None,
    Merged,
}

impl VocabConfig {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_position(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn concepts_of(&self, class: &str) -> Option<&[String]> {
        self.class_position(class).map(|i| self.concepts[i].as_slice())
    }

    /// Copy of this config with `merging` replaced by the named preset.
    pub fn with_merging_preset(&self, name: &str) -> Result<VocabConfig> {
        let preset = self
            .merging_presets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| {
                Error::config(
                    format!("merging_presets.{name:?}"),
                    format!(
                        "no such preset (have: {})",
                        self.merging_presets
                            .iter()
                            .map(|(n, _)| n.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                )
            })?;
        let mut out = self.clone();
        out.merging = Some(preset);
        Ok(out)
    }

    pub fn ood_set(&self, name: &str) -> Result<&[String]> {
        self.ood_sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::config(format!("ood_sets.{name:?}"), "no such OOD prompt set"))
    }

    /// `ood_classes` followed by every named OOD set, first occurrence wins.
    pub fn all_ood_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let sets = std::iter::once(self.ood_classes.as_slice())
            .chain(self.ood_sets.iter().map(|(_, v)| v.as_slice()));
        for name in sets.flatten() {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let strs = |v: &[String]| Value::Array(v.iter().cloned().map(Value::String).collect());
        let merging = |m: &Merging| {
            Value::Object(
                m.groups
                    .iter()
                    .map(|(k, v)| (k.clone(), strs(v)))
                    .collect::<Map<_, _>>(),
            )
        };
        let mut obj = Map::new();
        obj.insert("classes".into(), strs(&self.classes));
        obj.insert(
            "concepts".into(),
            Value::Object(
                self.classes
                    .iter()
                    .zip(&self.concepts)
                    .map(|(c, v)| (c.clone(), strs(v)))
                    .collect(),
            ),
        );
        obj.insert("templates".into(), strs(&self.templates));
        if let Some(m) = &self.merging {
            obj.insert("merging".into(), merging(m));
        }
        if !self.ood_classes.is_empty() {
            obj.insert("ood_classes".into(), strs(&self.ood_classes));
        }
        if !self.merging_presets.is_empty() {
            obj.insert(
                "merging_presets".into(),
                Value::Object(
                    self.merging_presets
                        .iter()
                        .map(|(k, m)| (k.clone(), merging(m)))
                        .collect(),
                ),
            );
        }
        if !self.ood_sets.is_empty() {
            obj.insert(
                "ood_sets".into(),
                Value::Object(self.ood_sets.iter().map(|(k, v)| (k.clone(), strs(v))).collect()),
            );
        }
        Value::Object(obj)
    }
}

/// The shipped CityScapes vocabulary: 19 classes, 14 templates, 8/3/1
/// superclass presets and the ra19 / smiyc / rba OOD prompt sets.
pub fn default_vocab() -> VocabConfig {
    parse_vocab_config(DEFAULT_VOCAB_JSON).expect("shipped vocabulary is valid")
}

pub fn default_vocab_json() -> &'static str {
    DEFAULT_VOCAB_JSON
}

pub fn parse_vocab_config(text: &str) -> Result<VocabConfig> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let root = root
        .as_object()
        .ok_or_else(|| Error::config("$", "expected a JSON object"))?;

    for key in root.keys() {
        if !matches!(
            key.as_str(),
            "classes" | "concepts" | "templates" | "merging" | "ood_classes" | "merging_presets" | "ood_sets"
        ) {
            return Err(Error::config(key.clone(), "unknown field"));
        }
    }

    let classes = string_list(required(root, "classes")?, "classes")?;
    if classes.is_empty() {
        return Err(Error::config("classes", "at least one class is required"));
    }
    if let Some((i, dup)) = first_duplicate(&classes) {
        return Err(Error::config(format!("classes[{i}]"), format!("duplicate class {dup:?}")));
    }

    let concept_obj = required(root, "concepts")?
        .as_object()
        .ok_or_else(|| Error::config("concepts", "expected an object"))?;
    for key in concept_obj.keys() {
        if !classes.contains(key) {
            return Err(Error::config(format!("concepts.{key:?}"), "not a declared class"));
        }
    }
    let mut concepts = Vec::with_capacity(classes.len());
    for class in &classes {
        let loc = format!("concepts.{class:?}");
        let list = concept_obj
            .get(class)
            .ok_or_else(|| Error::config(&loc, "class has no concept list"))?;
        let list = string_list(list, &loc)?;
        if list.is_empty() {
            return Err(Error::config(&loc, "concept list is empty"));
        }
        if let Some((i, dup)) = first_duplicate(&list) {
            return Err(Error::config(format!("{loc}[{i}]"), format!("duplicate concept {dup:?}")));
        }
        concepts.push(list);
    }

    let templates = match root.get("templates") {
        Some(v) => string_list(v, "templates")?,
        None => vec!["{}".to_string()],
    };
    if templates.is_empty() {
        return Err(Error::config("templates", "at least one template is required"));
    }
    if let Some(i) = templates.iter().position(|t| !t.contains("{}")) {
        return Err(Error::config(format!("templates[{i}]"), "template lacks a {} placeholder"));
    }

    let merging = root
        .get("merging")
        .map(|v| parse_merging(v, "merging", &classes))
        .transpose()?;

    let ood_classes = match root.get("ood_classes") {
        Some(v) => parse_ood_list(v, "ood_classes", &classes)?,
        None => Vec::new(),
    };

    let mut merging_presets = Vec::new();
    if let Some(v) = root.get("merging_presets") {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::config("merging_presets", "expected an object"))?;
        for (name, m) in obj {
            merging_presets.push((
                name.clone(),
                parse_merging(m, &format!("merging_presets.{name:?}"), &classes)?,
            ));
        }
    }

    let mut ood_sets = Vec::new();
    if let Some(v) = root.get("ood_sets") {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::config("ood_sets", "expected an object"))?;
        for (name, list) in obj {
            ood_sets.push((
                name.clone(),
                parse_ood_list(list, &format!("ood_sets.{name:?}"), &classes)?,
            ));
        }
    }

    Ok(VocabConfig {
        classes,
        concepts,
        templates,
        merging,
        ood_classes,
        merging_presets,
        ood_sets,
    })
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::config(key, "missing required field"))
}

fn string_list(v: &Value, loc: &str) -> Result<Vec<String>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::config(loc, "expected an array of strings"))?;
    arr.iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::config(format!("{loc}[{i}]"), "expected a string"))
        })
        .collect()
}

fn first_duplicate(items: &[String]) -> Option<(usize, &str)> {
    items
        .iter()
        .enumerate()
        .find(|(i, s)| items[..*i].contains(s))
        .map(|(i, s)| (i, s.as_str()))
}

fn parse_merging(v: &Value, loc: &str, classes: &[String]) -> Result<Merging> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::config(loc, "expected an object of superclass -> classes"))?;
    if obj.is_empty() {
        return Err(Error::config(loc, "merging declares no superclasses"));
    }
    let mut seen: HashMap<&str, &str> = HashMap::new();
    let mut groups = Vec::with_capacity(obj.len());
    for (sup, members) in obj {
        let mloc = format!("{loc}.{sup:?}");
        let members = string_list(members, &mloc)?;
        if members.is_empty() {
            return Err(Error::config(&mloc, "superclass has no members"));
        }
        for (i, m) in members.iter().enumerate() {
            let ci = classes
                .iter()
                .position(|c| c == m)
                .ok_or_else(|| Error::config(format!("{mloc}[{i}]"), format!("unknown class {m:?}")))?;
            if let Some(prev) = seen.insert(classes[ci].as_str(), sup) {
                return Err(Error::config(
                    format!("{mloc}[{i}]"),
                    format!("class {m:?} already belongs to superclass {prev:?}"),
                ));
            }
        }
        groups.push((sup.clone(), members));
    }
    if let Some(missing) = classes.iter().find(|c| !seen.contains_key(c.as_str())) {
        return Err(Error::config(loc, format!("class {missing:?} is not assigned to any superclass")));
    }
    Ok(Merging { groups })
}

fn parse_ood_list(v: &Value, loc: &str, classes: &[String]) -> Result<Vec<String>> {
    let list = string_list(v, loc)?;
    if let Some((i, dup)) = first_duplicate(&list) {
        return Err(Error::config(format!("{loc}[{i}]"), format!("duplicate OOD class {dup:?}")));
    }
    if let Some(i) = list.iter().position(|n| classes.contains(n)) {
        return Err(Error::config(
            format!("{loc}[{i}]"),
            format!("OOD class {:?} collides with an ID class", list[i]),
        ));
    }
    Ok(list)
}

/// Row order of a concept-embedding table: row `r` holds concept `keys[r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTable {
    keys: Vec<(String, String)>,
    lookup: HashMap<(String, String), usize>,
}

impl ConceptTable {
    pub fn new(keys: Vec<(String, String)>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(keys.len());
        for (row, key) in keys.iter().enumerate() {
            if lookup.insert(key.clone(), row).is_some() {
                return Err(Error::Validation(format!(
                    "concept {:?}/{:?} appears twice in the concept table",
                    key.0, key.1
                )));
            }
        }
        Ok(Self { keys, lookup })
    }

    /// The table a bundle's `concept_index` describes (one row per entry).
    pub fn from_entries(entries: &[ConceptEntry]) -> Result<Self> {
        Self::new(
            entries
                .iter()
                .map(|e| (e.class.clone(), e.concept.clone()))
                .collect(),
        )
    }

    /// Canonical order: every ID concept in class order, then each OOD name
    /// as a single-concept class.
    pub fn from_vocab(cfg: &VocabConfig, ood_names: &[String]) -> Result<Self> {
        let mut keys: Vec<(String, String)> = cfg
            .classes
            .iter()
            .zip(&cfg.concepts)
            .flat_map(|(class, cs)| cs.iter().map(move |c| (class.clone(), c.clone())))
            .collect();
        keys.extend(ood_names.iter().map(|n| (n.clone(), n.clone())));
        Self::new(keys)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, row: usize) -> (&str, &str) {
        let (a, b) = &self.keys[row];
        (a, b)
    }

    pub fn row(&self, class: &str, concept: &str) -> Option<usize> {
        self.lookup.get(&(class.to_string(), concept.to_string())).copied()
    }

    pub fn rows_of_class(&self, class: &str) -> Vec<usize> {
        self.keys
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| c == class)
            .map(|(r, _)| r)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub name: String,
    pub rows: Vec<usize>,
}

/// Output channels of the scorer: `id_count` ID channels, then OOD channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    channels: Vec<Channel>,
    id_count: usize,
}

impl ClassIndex {
    /// All channels are ID channels. Groups must be non-empty and disjoint.
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        let id_count = channels.len();
        let idx = Self { channels, id_count };
        idx.check_groups()?;
        Ok(idx)
    }

    fn check_groups(&self) -> Result<()> {
        let mut owner: HashMap<usize, &str> = HashMap::new();
        for ch in &self.channels {
            if ch.rows.is_empty() {
                return Err(Error::Validation(format!("channel {:?} has an empty group", ch.name)));
            }
            for &r in &ch.rows {
                if let Some(prev) = owner.insert(r, &ch.name) {
                    return Err(Error::Conflict(format!(
                        "row {r} is in both {prev:?} and {:?}",
                        ch.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn id_channel_count(&self) -> usize {
        self.id_count
    }

    pub fn ood_count(&self) -> usize {
        self.channels.len() - self.id_count
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.channels.iter().map(|c| c.rows.as_slice())
    }

    pub fn max_row(&self) -> Option<usize> {
        self.channels.iter().flat_map(|c| c.rows.iter().copied()).max()
    }

    /// A copy with only the ID channels.
    pub fn without_ood(&self) -> ClassIndex {
        ClassIndex {
            channels: self.channels[..self.id_count].to_vec(),
            id_count: self.id_count,
        }
    }
}

pub fn build_class_index(cfg: &VocabConfig, mode: MergeMode, table: &ConceptTable) -> Result<ClassIndex> {
    let class_rows = |class: &str| -> Result<Vec<usize>> {
        let concepts = cfg.concepts_of(class).expect("class validated by config");
        concepts
            .iter()
            .map(|c| {
                table.row(class, c).ok_or_else(|| {
                    Error::Validation(format!(
                        "concept {class:?}/{c:?} has no row in the concept table"
                    ))
                })
            })
            .collect()
    };
    let channels = match mode {
        MergeMode::None => cfg
            .classes
            .iter()
            .map(|c| {
                Ok(Channel {
                    name: c.clone(),
                    rows: class_rows(c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        MergeMode::Merged => {
            let merging = cfg
                .merging
                .as_ref()
                .ok_or_else(|| Error::config("merging", "merged mode requested but config has no merging"))?;
            merging
                .groups
                .iter()
                .map(|(sup, members)| {
                    let mut rows = Vec::new();
                    for m in members {
                        rows.extend(class_rows(m)?);
                    }
                    Ok(Channel { name: sup.clone(), rows })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    ClassIndex::new(channels)
}

/// One OOD channel per name; its rows are the table rows filed under that name.
pub fn ood_groups(table: &ConceptTable, names: &[String]) -> Result<Vec<Channel>> {
    names
        .iter()
        .map(|n| {
            let rows = table.rows_of_class(n);
            if rows.is_empty() {
                return Err(Error::Validation(format!(
                    "no text embedding rows for OOD prompt class {n:?}"
                )));
            }
            Ok(Channel { name: n.clone(), rows })
        })
        .collect()
}

pub fn extend_with_ood(idx: &ClassIndex, ood: Vec<Channel>) -> Result<ClassIndex> {
    let mut channels = idx.channels.clone();
    channels.extend(ood);
    let out = ClassIndex {
        channels,
        id_count: idx.id_count,
    };
    out.check_groups()?;
    Ok(out)
}

/// One unit-norm row per concept: the L2-normalised mean of its template rows.
pub fn aggregate_template_embeddings(raw: &Tensor<f32>, concepts: &[ConceptEntry]) -> Result<Tensor<f32>> {
    raw.expect_rank(2, "text_raw")?;
    let (p, d) = (raw.shape()[0], raw.shape()[1]);
    let mut out = Vec::with_capacity(concepts.len() * d);
    let mut mean = vec![0.0f64; d];
    for c in concepts {
        if c.template_rows.is_empty() {
            return Err(Error::Validation(format!("concept {:?} has no template rows", c.concept)));
        }
        mean.iter_mut().for_each(|m| *m = 0.0);
        for &r in &c.template_rows {
            if r >= p {
                return Err(Error::Dimension(format!(
                    "concept {:?} references row {r}, text_raw has {p}",
                    c.concept
                )));
            }
            for (m, &x) in mean.iter_mut().zip(raw.row(r)) {
                *m += x as f64;
            }
        }
        let k = c.template_rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        if norm < MIN_MEAN_NORM {
            return Err(Error::DegenerateEmbedding {
                concept: format!("{}/{}", c.class, c.concept),
                norm,
            });
        }
        out.extend(mean.iter().map(|m| (m / norm) as f32));
    }
    Tensor::new(vec![concepts.len(), d], out)
}
