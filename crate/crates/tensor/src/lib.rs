//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! The op set is deliberately narrow: exactly what a time-major ConvLSTM
//! encoder/decoder needs (same-padded convolutions, fused LSTM cell updates,
//! batch normalization, pooling, nearest upsampling, concatenation and a
//! masked MSLE loss). Sequences are laid out time-major, `(T, N, H, W, C)`,
//! so that a time step is a contiguous block and time-distributed layers are
//! plain reshapes to `(T*N, H, W, C)`.

mod conv;
mod error;
mod gradcheck;
mod graph;
mod init;
mod optim;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_smooth, relative_error, SmoothCheck, FD_STEP};
pub use graph::{BatchStats, Gradients, Graph, Var, BN_EPSILON};
pub use init::{truncated_normal, Initializer};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
