//! Slice-based volumetric reconstruction.

pub mod operator;
pub mod penalty;
pub mod solver;

pub use operator::{adjoint, forward, ForwardOperator, Psf, SparseMatrix, FWHM_TO_SIGMA};
pub use penalty::{
    gradient_adjoint, gradient_field, penalty, penalty_raw, Regularizer, RegularizerKind,
    DEFAULT_HUBER_GAMMA, DEFAULT_TV_EPSILON,
};
pub use solver::{
    l_curve, l_curve_corner, reconstruct_timepoint, LCurvePoint, ReconstructionProblem,
    SolveReport, SolverSettings,
};
