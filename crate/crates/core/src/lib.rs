//! Localization of users in front of a modular antenna array built from
//! uniform planar sub-arrays, each behind one RF chain.
//!
//! The pipeline runs channel synthesis, pilot training, visible sub-array
//! selection, block-sparse angle estimation on a few typical sub-arrays, a
//! coarse weighted least-squares fix, reduced-dictionary refinement on the
//! remaining visible sub-arrays and a fine fix. A collocated fully digital
//! array with DFT angle and MUSIC delay estimation serves as the reference.

pub mod baseline;
pub mod channel;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod positioning;
pub mod selection;
pub mod sparse_aoa;
pub mod training;

pub use error::{Error, Result};
