#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gp_oracle;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod task;
pub mod task_gen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use task::{Dataset, GaussianPrediction, Task};
pub use tensor::Tensor;
