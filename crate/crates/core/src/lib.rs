//! Marcus-type stochastic differential equations driven by semimartingales
//! with finitely many jumps.

pub mod convergence;
pub mod decompose;
pub mod error;
pub mod geometry;
pub mod marcus;
pub mod odeflow;
pub mod reference;
pub mod semimartingale;
pub mod stratjump;

pub use error::{Error, Result};
