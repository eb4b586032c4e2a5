pub mod artifact;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod gp_integrator;
pub mod integrator;
mod linalg;
pub mod optim;
pub mod projection;
pub mod selfcheck;
pub mod systems;

pub use error::{Error, Result};
