//! Ground-truth machinery: a reaction-diffusion data generator, a dense
//! reference forward pass and numerical theorem checks.

mod dense;
mod rd;
mod theorems;

pub use dense::{dense_forward, DenseOutput, MAX_DENSE_STATIONS};
pub use rd::{check_stability, rd_step, simulate_rd, RdGraph, RdOutput, RdScenario, Schedule, Source};
pub use theorems::{
    check_kernel, check_lipschitz, gaussian_kernel, mlp_apply, random_pairs, spectral_norm, DenseLayer, KernelRow,
    LipschitzReport,
};
