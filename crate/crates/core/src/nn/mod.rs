//! Minimal neural-network engine: the layer kinds the CT-DNN and the phone
//! classifier need, exact backward passes, a finite-difference checker and
//! a momentum SGD trainer.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, InputSpec, LayerSpec, NetworkGraph};
pub use tensor::{Mat, Real, Segments};
pub use train::{train, Sequence, TrainConfig, TrainState};
