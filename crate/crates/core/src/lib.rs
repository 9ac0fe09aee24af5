pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod interp;
pub mod kv;
pub mod label_completion;
pub mod tensor;
pub mod training;
pub mod vit;
pub mod viz;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
