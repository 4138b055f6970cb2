//! Benchmarks, communication skeletons and two-sided style setup helpers.

pub mod convert;
pub mod payload;
pub mod run;
pub mod simbench;
pub mod skeleton;
pub mod spec;
pub mod world;
