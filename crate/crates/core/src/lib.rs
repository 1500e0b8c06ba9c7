//! Few-shot metric learning: prototype classifiers with a temperature-scaled
//! metric, task-conditioned feature extractors (FILM layers driven by a task
//! embedding network), and episodic training with auxiliary co-training.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, the reverse-mode tape, and gradient checking.
//! - [`metric`]: similarity measures, scaled softmax, the episodic loss and
//!   its small/large temperature limits.
//! - [`embedding`]: feature extractors, FILM, and the task embedding network.
//! - [`model`]: parameter ownership for an extractor + TEN + metric head.
//! - [`episodes`]: episode sampling, prototypes, and conditioned inference.
//! - [`training`]: schedules, SGD with momentum, evaluation and α sweeps.
//! - [`data`]: CIFAR-100 ingestion, the FC100 split, synthetic benchmarks
//!   and checkpoints.

pub mod data;
pub mod embedding;
pub mod episodes;
mod error;
pub mod metric;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
