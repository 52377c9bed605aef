//! Knowledge graph embeddings trained with losses that use relation domain and range
//! constraints, a paired valid/invalid negative sampler, a schema-aware dataset filter,
//! and an evaluator reporting MRR, Hits@K and Sem@K.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kg;
pub mod losses;
pub mod models;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Regularizer, TrainConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, BucketSpec, EvalOptions, EvalReport, RankMode, RankResult};
pub use kg::{is_sem_valid, EntityId, KnowledgeGraph, RelationId, Schema, SemIndex, Side, Split, Triple, Vocab};
pub use losses::{LossFamily, LossSpec, Variant};
pub use models::{ModelKind, ModelParams};
pub use trainer::{grid_search, train, Trainer};
