//! Optimization: analytic gradients, Adam updates and density control.

pub mod adam;
pub mod backward;
pub mod density;
pub mod train;

pub use adam::{step, LearningRates, OptimState, StepGradients};
pub use backward::{backward, evaluate_loss, CloudGrad, Gradients, LossTerms};
pub use density::{densify, prune, reset_opacity, DensifyConfig, PruneCriterion, PruneResult, ViewMap};
pub use train::{random_init, StepRecord, TrainConfig, TrainView, Trainer};
