//! Dense linear algebra: matrices, SVD, projectors, norms, subspace angles.

mod matrix;
mod subspace;
mod svd;

pub use matrix::Matrix;
pub use subspace::{
    cayley_near_identity, complete_orthonormal_basis, frobenius_norm, orthonormality_error,
    principal_cosines, project, random_orthonormal, sin_theta, solve, spectral_norm, tail_energy,
    tail_energy_of, truncate, Projector, Truncation,
};
pub use svd::{singular_values, svd, SvdFactors, CONVERGENCE_TOL, MAX_SWEEPS};
