pub mod augment;
pub mod autodiff;
pub mod config;
pub mod contrast;
pub mod error;
pub mod eval;
pub mod grid;
pub mod infer;
pub mod net;
pub mod phantom;
pub mod rng;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
