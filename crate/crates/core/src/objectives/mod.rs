//! Training losses, their weighted combination, Adam with warmup and the
//! denoising pretraining loop.

mod gradcheck;
mod losses;
mod optim;
mod pretrain;
pub mod sampling;

pub use losses::{
    loss_emlm, loss_generator, loss_reconstruction, loss_rtd, total_loss, LossBreakdown, LossInputs, LossWeights,
};
pub use gradcheck::{check_total_loss_gradients, rel_err, GradCheckReport};
pub use optim::{adam_step, AdamConfig, OptState, Schedule};
pub use pretrain::{
    loss_graph, prepare_batch, pretrain, BatchSampler, GenInput, GeneratorSource, LossGraph, MetricsRecord,
    PreparedBatch, PretrainOutcome, PretrainSpec, TrainEvent,
};
pub use sampling::{argmax, nucleus_support, sample_policy, SamplePolicy};

#[cfg(test)]
mod tests;
