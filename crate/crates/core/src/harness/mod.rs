//! Scene configuration, Monte-Carlo trials, parameter sweeps and CSV output.

mod config;
mod sweep;
mod trial;

pub use config::*;
pub use sweep::*;
pub use trial::*;
