//! Surface-based spatial Bayesian GLM for task fMRI.
//!
//! Task activation amplitudes on a triangulated surface get SPDE (Matérn)
//! Gaussian Markov random field priors. Hyperparameters are fit by an EM
//! algorithm built on sparse Cholesky factorizations, stochastic trace
//! estimation and SQUAREM acceleration; activations are read off posterior
//! draws as excursion sets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cholesky;
pub mod em;
pub mod error;
pub mod group;
pub mod inference;
pub mod io;
pub mod mesh;
pub mod par;
pub mod preprocess;
pub mod seed;
pub mod simulate;
pub mod sparse;
pub mod spde;

pub use cholesky::{CholeskyFactor, Ordering, SymbolicCholesky};
pub use error::{Error, Result};
pub use mesh::{
    build_fem_matrices, build_projector, load_mesh, DataLocations, FemMatrices, Mesh, Projector,
};
pub use sparse::CscMatrix;
pub use spde::{Hyperparameters, PrecisionOperator, SpdeOperator};
