pub mod accf;
pub mod aos;
pub mod error;
pub mod linalg;
pub mod lutgemm;
pub mod model;
pub mod pipeline;
pub mod pog;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::RngState;
