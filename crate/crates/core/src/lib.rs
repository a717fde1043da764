pub mod autodiff;
pub mod bench;
pub mod backbone;
pub mod captioning;
pub mod checkpoint;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod retention;
pub mod tensor;
pub mod training;

pub use autodiff::{Convention, FlopCounter, Grads, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{ComplexTensor, Tensor};
