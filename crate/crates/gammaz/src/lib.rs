//! Generalized Gamma z calculus for degenerate drift-diffusion processes.
//!
//! The library evaluates carre-du-champ operators (`gamma`), assembles the
//! algebraic curvature tensors behind them (`tensor`), extracts pointwise
//! curvature-dimension bounds (`curvature`), and checks the resulting
//! entropy/Fisher dissipation on a periodic-box Fokker-Planck solver (`fpe`).
//! Scalar fields enter as parsed expressions differentiated exactly by
//! third-order jets (`expr`, `jet`); a problem instance is a [`Structure`]
//! (`fields`).
//!
//! Everything numeric is generic over the scalar type through [`Real`];
//! `f64` aliases for the main types live at the crate root.

pub mod curvature;
pub mod expr;
pub mod fields;
pub mod fpe;
pub mod gamma;
pub mod jet;
pub mod tensor;

mod real;

pub use curvature::{
    kappa_at, scan, total_ricci, BoxGrid, CdDimension, CurvatureError, CurvatureReport, UForm,
};
pub use expr::Expression;
pub use fields::Structure;
pub use fpe::{
    check_zlsi, fit_decay, simulate, steady_state, weak_identity_check, DecayField, DensityField,
    FpeError, Functionals, Grid, Simulator, TimeSeries,
};
pub use gamma::{GammaContext, Weight};
pub use jet::Jet;
pub use real::Real;
pub use tensor::{
    assemble, decomposition_residual, natural_mode, AssembledPoint, Basis, DecompositionCheck,
    Direction, LambdaSolution, LinearFormMap, Mode, QuadraticForm,
};

/// Jet of an `f64` scalar field.
pub type Jet64 = jet::Jet<f64>;

/// Assembled decomposition data over `f64`.
pub type AssembledPoint64 = tensor::AssembledPoint<f64>;

/// Quadratic form over `f64`.
pub type QuadraticForm64 = tensor::QuadraticForm<f64>;

/// Gradient-keyed linear map over `f64`.
pub type LinearFormMap64 = tensor::LinearFormMap<f64>;

/// Scan report over `f64`.
pub type CurvatureReport64 = curvature::CurvatureReport<f64>;

/// Scan grid over `f64`.
pub type BoxGrid64 = curvature::BoxGrid<f64>;

/// Periodic cell grid over `f64`.
pub type Grid64 = fpe::Grid<f64>;

/// Cell density over `f64`.
pub type DensityField64 = fpe::DensityField<f64>;

/// Sampled run diagnostics over `f64`.
pub type TimeSeries64 = fpe::TimeSeries<f64>;
