pub mod attention;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod pipeline;
pub mod reid;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
