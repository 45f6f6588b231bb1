pub mod matrix;
pub mod optim;
pub mod tape;

pub use matrix::{sigmoid, softmax_rows, DenseMatrix};
pub use optim::{adamw_step, AdamWState, LrSchedule, ParamSet};
pub use tape::{GradMap, GradientTape, NodeId};
