//! Compile a declarative schema and multi-source supervision into a trained,
//! slice-aware multitask model, and monitor its quality per tag and slice.
//!
//! Pipeline, bottom-up:
//!
//! - [`schema`]: payloads, tasks, slices, tuning spec.
//! - [`rowstore`]: JSONL ingest into an offset-indexed binary row store.
//! - [`labelmodel`]: source-accuracy EM and probabilistic labels.
//! - [`compiler`]: schema plus architecture choice to a model IR and serving signature.
//! - [`numerics`]: forward and reverse-mode evaluation of the IR.
//! - [`trainer`]: noise-aware multitask training, slice combination, prediction.
//! - [`search`]: random search over architecture choices.
//! - [`monitor`]: per-tag reports and the data-scaling harness.

mod codec;
pub mod compiler;
pub mod hash;
pub mod hparams;
pub mod labelmodel;
pub mod monitor;
pub mod numerics;
pub mod rowstore;
pub mod schema;
pub mod search;
pub mod synth;
pub mod trainer;







pub use compiler::{compile, enumerate_candidates, ArchChoice, ModelIr, ServingSignature};
pub use labelmodel::{LabelArtifact, LabelMatrix, ProbLabels, SourceModel};
pub use monitor::{evaluate, Report};
pub use rowstore::{ingest, Record, RowStore};
pub use schema::{parse_schema, serialize_schema, Schema};
pub use search::run_search;
pub use trainer::{predict, train, TrainConfig, TrainedModel};
