//! Self-consistent stochastic interpolants.
//!
//! Learns a transport map that inverts a black-box corruption channel at the
//! level of distributions, using only corrupted samples, and provides an exact
//! closed-form engine for the Gaussian prior with additive white noise.

pub mod channel;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod trainer;
pub mod transport;

pub use channel::{compose, ChannelOutput, ChannelSpec, MaskFill};
pub use error::{Error, Result};
pub use nn::{Activation, Adam, AdamConfig, Architecture, LrSchedule, Regressor};
pub use schedule::{
    combined_residual, denoiser_residual, drift_residual, sample_interpolant, Diffusion, InterpolantBatch,
    InterpolantSample, ResidualKind, Schedule, ScheduleKind,
};
pub use gaussian::{AffineGaussianField, FieldPart, GaussianModel, MatrixFn};
pub use metrics::{w2_sliced, w2sq_exact, SampleSet};
pub use transport::{
    integrate_ode, integrate_sde, integrate_sde_velocity, pushforward, Drift, FnField, Mode, Scheme, TransportConfig,
    VelocityField, ZeroField,
};
pub use trainer::{
    restore, scsi_train, ExactAffineScsi, NeuralModel, Objective, Observations, RunRecord, TrainConfig, TrainHooks,
    TrainOutcome,
};
