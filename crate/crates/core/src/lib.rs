pub mod diag;
pub mod signal;
pub mod memory;
pub mod transport;
pub mod engine;
pub mod simnet;
