//! Numerical toolkit for a mixed local/nonlocal variational problem.
pub mod error;
pub mod flow;
pub mod forms;
pub mod grid;
pub mod linear_bn;
pub mod quad;
pub mod sobolev;
pub mod spectral;
pub mod sum;
