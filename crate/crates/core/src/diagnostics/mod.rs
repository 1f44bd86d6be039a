//! Entropy-bound certificates and Hessian sharpness probes.

mod bound;
mod sharpness;

pub use bound::{
    bound_beta, check_attention_bound, entropy_lower_bound, entropy_min_oracle, tight_minimizer,
    EntropyBoundCertificate, CERTIFICATE_SLACK, ORACLE_REFINE_STARTS, ORACLE_REFINE_STEPS,
};
pub use sharpness::{
    adamw_stability_threshold, default_hvp_epsilon, hvp, lanczos_top_eigs, tridiagonal_eigenvalues,
    SharpnessProbe,
};
