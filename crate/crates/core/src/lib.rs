//! Rehearsal-free continual learning with per-task key-learners and
//! task-aware prompt generators injected into a frozen transformer encoder.
//!
//! The crate is organized around the training/evaluation engine:
//!
//! - [`backbone`]: a minimal frozen vision-transformer encoder whose
//!   attention accepts prefix prompts on keys and values.
//! - [`key_learner`]: per-task attention modules producing key vectors,
//!   trained with a triplet + L1 objective, plus task matching at inference.
//! - [`prompter`]: per-task feedforward generators of (key, value) prompt
//!   pairs and the prefix-attention combination rule.
//! - [`trainer`]: task-sequential training, class-incremental evaluation,
//!   baselines, and the accuracy/forgetting report.
//! - [`data`]: disjoint-class task streams from synthetic blobs or an
//!   image-folder dataset.
//! - [`autograd`]: the f64 reverse-mode tape everything above trains with.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod key_learner;
pub mod metrics;
pub mod optim;
pub mod prompter;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, ImageBatch, PoolMode, PromptSchedule, TokenBatch};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use key_learner::{KeyLearner, KeyLossConfig, Similarity};
pub use data::{DataSource, LabeledSet, SplitSpec, SyntheticSpec, TaskData, TaskStream};
pub use prompter::{Prompt, TaskPrompter};
pub use trainer::{run_baseline, ClassifierHead, Method, Reduction, SelectionMode, TrainConfig, Trainer};
