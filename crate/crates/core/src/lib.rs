//! Interruption analysis toolkit.
//!
//! Turns dual-channel ASR transcripts into speaker-switch events, filters the
//! overlap candidates worth labeling, keeps the annotation queue, builds
//! cross-validation datasets and evaluates competitive-interruption
//! classifiers with a fixed metric suite.
//!
//! The pipeline, in order:
//!
//! 1. [`transcript`]: parse delimited transcript tables into [`Dialogue`]s.
//! 2. [`switch`]: pair consecutive turns into [`SwitchEvent`]s and filter them.
//! 3. [`annotation`]: queue candidates and persist annotator labels.
//! 4. [`dataset`]: drop undefined labels, assign stratified folds and build
//!    two-segment model inputs.
//! 5. [`baseline`] / [`experiment`]: train a scorer natively or through an
//!    external trainer speaking the wire protocol.
//! 6. [`metrics`]: ROC AUC, threshold search, macro metrics, cross-validation.

pub mod annotation;
pub mod backend;
pub mod baseline;
pub mod dataset;
pub mod experiment;
pub mod jsonl;
pub mod metrics;
pub mod switch;
pub mod synth;
pub mod transcript;

pub use annotation::{Label, LabelStore, LabeledEvent, LabeledOverlap, Progress};
pub use dataset::{BinaryLabel, ContextVariant, FoldedDataset, ModelInput};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use switch::{FilterConfig, SwitchEvent, SwitchKind};
pub use transcript::{Channel, Dialogue, Turn};
