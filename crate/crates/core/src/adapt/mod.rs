//! Optimizer, source training and online adaptation.

mod adam;
mod online;
mod source;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use online::{adapt_stream, Ablation, AdaptConfig, Method, Metrics};
pub use source::{accuracy, train_source, SourceConfig, TrainReport};
