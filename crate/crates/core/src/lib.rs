pub mod binwords;
pub mod error;
pub mod index_select;
pub mod kernels;
pub mod leapfrog;
pub mod orbit;
pub mod rng;
pub mod stats;
pub mod target;
pub mod verify;

pub use error::{Error, Result};
