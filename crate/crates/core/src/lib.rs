pub mod checkpoint;
pub mod cli;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod optim;
pub mod probe;
pub mod prosqa;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use optim::{Adam, ParamId, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
