//! Dense f64 linear algebra, a reverse-mode gradient tape, AdamW, and a
//! finite-difference gradient checker. The rest of the crate builds every
//! model and loss out of these pieces.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod random;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckReport, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
pub use matrix::{dot, l2_norm, DenseMatrix};
pub use optim::{LrSchedule, OptimizerConfig, OptimizerState, Params, StepInfo};
pub use tape::{GradientTape, GraphBinder, NodeId};
