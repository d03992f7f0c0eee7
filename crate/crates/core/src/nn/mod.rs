//! Minimal deterministic 1-D CNN with explicit backward passes.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod model;
mod real;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport, LayerCheck};
pub use layers::{
    conv1d, conv1d_backward, dense, dropout, maxpool1d, maxpool1d_backward, relu, Mode, KERNEL,
};
pub use loss::{cross_entropy, mmd, mmd_linear, mmd_rbf, softmax, softmax_cross_entropy, MmdKernel, MmdOut};
pub use model::{
    features, loss_and_grad, model_forward, ArchConfig, CeBatch, ForwardOutput, LossParts, LossSpec, MmdBatch,
    ModelParams, CHUNK,
};
pub use real::Real;
pub use tensor::Tensor;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },
    #[error("gradient check failed at layer {layer}: relative error {rel_error:.3e} > {tolerance:.1e}")]
    GradCheck {
        layer: String,
        rel_error: f64,
        tolerance: f64,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
}
