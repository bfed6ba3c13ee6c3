//! Minimal differentiable substrate: layers with explicit backward passes,
//! losses, Adam, schedules, a finite-difference checker and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, Component};
pub use gradcheck::grad_check;
pub use gru::GruCell;
pub use layers::{copy_params, dense_forward, Activation, Dense, Embedding, Mlp, Parameterized};
pub use loss::{mse, softmax, weighted_cross_entropy};
pub use optim::{Adam, AdamConfig, LinearSchedule, WeightDecayMode};
pub use tensor::{Float, Tensor};
