//! The differentiable backbone: model, objective, training and sampling.

pub mod checkpoint;
pub mod generate;
pub mod loss;
pub mod model;
pub mod nodes;
pub mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use generate::{GeneratedMolecule, Generator, SamplerConfig, SizeMode};
pub use loss::{
    combined_loss, draw_noise, draw_noise_at, evaluate_draw, fm_ood_loss, loss_and_grad, loss_from_heads, LossBreakdown,
    LossWeights, NoiseDraw, ObjectiveConfig,
};
pub use model::{BackboneModel, HeadOutput, ModelConfig, NoisyState, SelfCondition};
pub use nodes::{add_virtual_nodes, sample_size, CategoryPriors, PriorKind, SizeHistogram};
pub use train::{run_epochs, smoothed_losses, train, OptimConfig, StepRecord, TrainConfig, TrainState};
