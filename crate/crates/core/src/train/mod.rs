//! Training: per-sequence network construction, cross-entropy over candidate
//! energies, manual backpropagation and AdamW.

mod backward;
mod optim;
mod record;
mod trainer;

pub use backward::{backward, Gradients};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, ALPHA_CLAMP};
pub use record::{forward, forward_loss, ComputationRecord, HeadRecord, Targets};
pub use trainer::{batch_indices, evaluate, train, EvalReport, LrSchedule, StepLog, TrainConfig};
