//! Numerical tolerances used across tests and acceptance checks.

/// Central finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Max relative error between analytic and finite-difference gradients.
pub const GRAD_REL_ERR: f64 = 1e-4;
/// Tighter bound for single primitive ops checked in isolation.
pub const GRAD_REL_ERR_PRIMITIVE: f64 = 1e-6;
/// Softmax rows must sum to one within this.
pub const SOFTMAX_SUM: f64 = 1e-12;
/// Frame-permutation equivariance / invariance.
pub const PERMUTATION: f64 = 1e-10;
/// Minimum deviation that counts as "not permutation-equivariant".
pub const NON_EQUIVARIANT_MIN: f64 = 1e-3;
/// Pruned vs unpruned posteriors.
pub const PRUNE_EQUIVALENCE: f64 = 1e-12;
/// `der == ms + fa + cf` consistency.
pub const DER_SUM: f64 = 1e-9;
/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
