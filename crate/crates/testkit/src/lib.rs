//! Reference implementations for tests. Everything here is written
//! independently of the library's kernels: plain loops, a Jacobi
//! eigensolver, and central finite differences that only call forward passes.

pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod scores;
pub mod structure;
