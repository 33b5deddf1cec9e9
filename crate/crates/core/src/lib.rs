pub mod adjoint;
pub mod config;
pub mod error;
pub mod fields;
pub mod inversion;
pub mod lowrank;
pub mod mesh;
pub mod pipeline;
pub mod prediction;
pub mod prior;
pub mod quadrature;
pub mod stokes;
pub mod trace;

pub use error::{Error, Result};
