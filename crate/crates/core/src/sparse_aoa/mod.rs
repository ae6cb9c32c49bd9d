//! Angular dictionaries, block-sparse SOMP angle estimation, LoS gain
//! extraction and MUSIC delay estimation.

mod dictionary;
mod somp;
mod toa;

pub use dictionary::*;
pub use somp::*;
pub use toa::*;
