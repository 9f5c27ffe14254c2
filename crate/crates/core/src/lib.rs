pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod noise;
mod io_util;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{PintError, Result};
pub use rng::SplitRng;
