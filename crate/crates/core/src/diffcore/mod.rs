//! Minimal reverse-mode differentiation engine: dense tensors, a replayable
//! tape with the primitives the topic model needs, a named parameter store with
//! a binary checkpoint format, Adam, and a finite-difference checker.

pub mod gradcheck;
pub mod lstm;
pub mod optim;
pub mod store;
pub mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use lstm::{lstm_cell, LstmWeights};
pub use optim::{adam_step, clip_global_norm, AdamConfig, StepOutcome};
pub use store::ParameterStore;
pub use tape::{
    log_sum_exp, masked_softmax_values, mixture_log_prob, sigmoid, softmax_in_place, Gradients,
    SparseRows, Tape, Var, MIXTURE_FLOOR,
};
pub use tensor::Tensor;
