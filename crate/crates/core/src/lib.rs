pub mod error;
pub mod linalg;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub mod curvature;
pub mod harness;
pub mod io;
pub mod netmodel;
pub mod oracles;
pub mod rank_alloc;
pub mod remap;
pub mod whiten;
