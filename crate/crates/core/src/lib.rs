//! Lowering, pruning, partial execution and sanitizer-backed fuzzing of
//! SPMD kernels written in a small textual IR.

pub mod affine;
pub mod axiprune;
pub mod exec;
pub mod fuzz;
pub mod gmsbench;
pub mod kir;
pub mod pact;
pub mod pipeline;
pub mod prex;
pub mod refsim;
pub mod sanrt;
