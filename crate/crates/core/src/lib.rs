pub mod bench;
pub mod campc;
pub mod error;
pub mod hyperthermia;
pub mod lti;
pub mod mpc;
pub mod presolve;
pub mod reach;
pub mod solvers;

pub use error::{Error, Result};
