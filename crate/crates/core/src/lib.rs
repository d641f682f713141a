//! Anomaly scoring for open-vocabulary mask-classification segmenters.
//!
//! Given per-query mask scores and visual embeddings from two image encoders,
//! plus raw text embeddings for every (class, concept, template) prompt, the
//! [`scoring`] module produces a per-pixel anomaly map. [`metrics`] evaluates
//! such maps against label maps, and [`synth`] builds reproducible test scenes.

pub mod bundle;
pub mod error;
pub mod exec;
pub mod labels;
pub mod metrics;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use bundle::{load_bundle, write_bundle, BundleMeta, ConceptEntry, InferenceBundle};
pub use error::{Error, Result};
pub use exec::Execution;
pub use labels::{LabelMap, IGNORE_LABEL, OOD_LABEL};
pub use scoring::{score_bundle, score_bundle_with, ClassifierMode, UncertaintyMap};
pub use tensor::{read_tensor, write_tensor, DType, Tensor};
pub use vocab::{default_vocab, parse_vocab_config, ClassIndex, MergeMode, VocabConfig};
