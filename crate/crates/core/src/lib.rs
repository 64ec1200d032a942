//! Shallow networks on empirical measures (normalized DeepSets) in three
//! nested function classes obtained by freezing layers, trained with
//! class-specific path-norm penalties, plus the baselines, diagnostics and
//! experiment harness around them.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod targets;

pub use data::{EvalReport, SetBatch};
pub use error::{Error, Result};
pub use model::{init_model, ClassTag, InitSpec, MeasureNet, NetShape};
pub use numerics::{Activation, Matrix, Rng};
pub use optim::{train, TrainConfig};
pub use targets::{eval_target, TargetSpec};
