//! Simulation and retrieval of OPA-FROG spectrograms of temporally
//! multimode squeezed Gaussian states.
//!
//! The forward model synthesizes the spectrogram of a multimode Gaussian
//! state gated by a high-gain parametric amplifier; the retrieval module
//! inverts a measured spectrogram into principal temporal modes and
//! quadrature variances by alternating data-constraint projections with
//! preconditioned Wirtinger gradient steps.

pub mod error;
pub mod forward;
pub mod gate;
pub mod grid;
pub mod io;
pub(crate) mod kernel;
pub mod noise;
pub mod retrieval;
pub mod states;

pub use error::{Error, Result};
pub use forward::{
    model_scale, synthesize_spectrogram, synthesize_term_fields, vacuum_spectrogram,
    vacuum_subtract, Spectrogram, SpectrogramKind, TermFields,
};
pub use gate::{chirped_gaussian_gate, gate_functions, GateFunctions, GatePulse};
pub use grid::{DelayGrid, Dft, FreqGrid, GridMeta, TimeGrid};
pub use noise::{add_noise, bootstrap_retrieve, build_mask, BootstrapSpec, NoiseSpec};
pub use retrieval::{
    data_projection, extract_squeezing_angles, gradient_step, initialize, loss, match_modes,
    mode_fidelity, model_constraint_objective, orthonormalize, refit_variances, retrieve,
    wirtinger_gradient,
    MaskSpec, RetrievalConfig, RetrievalResult, StepSchedule,
};
pub use states::{
    hermite_gaussian_mode, squeezing_db_to_variance, variance_to_squeezing_db, GaussianStateSpec,
    ModeBasis, TemporalMode, VACUUM_VARIANCE,
};
