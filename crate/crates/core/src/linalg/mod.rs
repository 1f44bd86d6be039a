//! Dense `f64` matrices and the reference spectral routines built on them.

mod io;
mod matrix;
mod power;
mod svd;

pub(crate) use io::read_u32;
pub use io::{read_matrix, write_matrix, MATRIX_MAGIC};
pub use matrix::{dot, norm, Matrix};
pub use power::{
    bilinear, power_iteration_step, random_unit_vector, spectral_norm_converged,
    spectral_norm_from, start_vector, PowerStep, SpectralNormEstimate, ZERO_GUARD,
};
pub use svd::{sigma_svd, svd, symmetric_eigen, SvdResult, SymmetricEigen, MAX_JACOBI_SWEEPS};
