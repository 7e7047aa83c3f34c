//! Pseudospectral propagation of scalar and matrix charge-transfer
//! Schrödinger models on periodic grids, together with a harness that
//! measures dispersive, weighted, Strichartz and energy estimates along the
//! computed flows.

pub mod error;
pub mod fieldgrid;
pub mod model;
pub mod propagate;
pub mod spectral;
pub mod symmetry;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use fieldgrid::{
    list_admissible_pairs, lp_norm, mixed_spacetime_norm, sobolev_norm, spectral_transform,
    weighted_l2_norm, AdmissiblePair, ComplexField, Direction, Grid, SpinorField, Vec3, C64,
};
pub use model::{
    matrix_potential_field, potential_field, validate_model, ChargeTransferModel,
    MatrixChargeTransferModel, MatrixPotentialSpec, PotentialSpec, Profile, Shape,
    ValidationReport,
};
pub use propagate::{
    evolve, evolve_matrix, evolve_stationary, free_evolve, pointwise_matrix_exp, Trajectory,
};
pub use symmetry::{galilei, galilei_inverse, galilei_spinor, modulation, BoostSpec};
