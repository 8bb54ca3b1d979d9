//! Interpolant schedules, interpolant sampling and the per-sample regression
//! residuals for the drift, denoiser and combined-drift objectives.
//!
//! A linear interpolant between an endpoint pair `(x0, x1)` is
//! `I_t = alpha(t) x0 + beta(t) x1 + gamma(t) z` with `z ~ N(0, I)`. Every
//! schedule here satisfies `alpha + beta = 1`, so for an additive channel the
//! interpolant is the clean point plus a growing amount of channel noise.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};

/// Lower clamp on training and integration times. Keeps `1/gamma(t)` and the
/// `1/sqrt(t)` derivative of the square-root schedule finite.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha = 1 - t`, `beta = t`, `gamma = 0`.
    OdeLinear,
    /// `alpha = 1 - t`, `beta = t`, `gamma = t (1 - t)`.
    SdeLinear,
    /// `alpha = 1 - sqrt(t)`, `beta = sqrt(t)`, `gamma = 0`; the interpolant
    /// whose law under an AWGN channel follows the heat equation.
    SqrtAwgn,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::OdeLinear => "ode-linear",
            ScheduleKind::SdeLinear => "sde-linear",
            ScheduleKind::SqrtAwgn => "sqrt-awgn",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode-linear" => Ok(ScheduleKind::OdeLinear),
            "sde-linear" => Ok(ScheduleKind::SdeLinear),
            "sqrt-awgn" => Ok(ScheduleKind::SqrtAwgn),
            other => Err(invalid(format!(
                "unknown schedule `{other}` (expected ode-linear, sde-linear or sqrt-awgn)"
            ))),
        }
    }
}

/// Diffusion coefficient of the reverse SDE.
///
/// `Constant(eps)` is the time-independent coefficient; `GammaScaled(c)`
/// gives `eps_t = c * gamma(t)`, for which the score multiplier
/// `eps_t / gamma(t) = c` stays bounded at the endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Diffusion {
    Constant(f64),
    GammaScaled(f64),
}

impl Diffusion {
    pub fn zero() -> Self {
        Diffusion::Constant(0.0)
    }

    pub fn scale(&self) -> f64 {
        match *self {
            Diffusion::Constant(c) | Diffusion::GammaScaled(c) => c,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.scale() == 0.0
    }

    fn validate(&self) -> Result<()> {
        let c = self.scale();
        if !(c.is_finite() && c >= 0.0) {
            return Err(invalid(format!("diffusion coefficient must be >= 0, got {c}")));
        }
        Ok(())
    }
}

impl Default for Diffusion {
    fn default() -> Self {
        Diffusion::zero()
    }
}

/// Schedule values and their analytic time derivatives at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    pub gamma_dot: f64,
}

/// An interpolant schedule together with its diffusion coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct Schedule {
    kind: ScheduleKind,
    diffusion: Diffusion,
}

/// Serialized form; a missing diffusion takes the schedule's default.
#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    kind: ScheduleKind,
    #[serde(default)]
    diffusion: Option<Diffusion>,
}

impl TryFrom<ScheduleRepr> for Schedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        match r.diffusion {
            Some(d) => Schedule::new(r.kind, d),
            None => Ok(Schedule::with_defaults(r.kind)),
        }
    }
}

impl From<Schedule> for ScheduleRepr {
    fn from(s: Schedule) -> Self {
        Self { kind: s.kind, diffusion: Some(s.diffusion) }
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind, diffusion: Diffusion) -> Result<Self> {
        diffusion.validate()?;
        if kind == ScheduleKind::OdeLinear && !diffusion.is_zero() {
            return Err(invalid("the ode-linear schedule has gamma = 0 and requires epsilon = 0"));
        }
        if kind != ScheduleKind::SdeLinear && matches!(diffusion, Diffusion::GammaScaled(c) if c != 0.0) {
            return Err(invalid("gamma-scaled diffusion needs a schedule with gamma > 0"));
        }
        Ok(Self { kind, diffusion })
    }

    /// The schedule with its default diffusion (0.1 for `SdeLinear`, else 0).
    pub fn with_defaults(kind: ScheduleKind) -> Self {
        let diffusion = match kind {
            ScheduleKind::SdeLinear => Diffusion::Constant(0.1),
            _ => Diffusion::zero(),
        };
        Self { kind, diffusion }
    }

    pub fn ode_linear() -> Self {
        Self::with_defaults(ScheduleKind::OdeLinear)
    }

    pub fn sde_linear() -> Self {
        Self::with_defaults(ScheduleKind::SdeLinear)
    }

    pub fn sqrt_awgn() -> Self {
        Self::with_defaults(ScheduleKind::SqrtAwgn)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn diffusion(&self) -> Diffusion {
        self.diffusion
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.coefficients(t).alpha
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.coefficients(t).beta
    }

    pub fn gamma(&self, t: f64) -> f64 {
        self.coefficients(t).gamma
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        self.coefficients(t).alpha_dot
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        self.coefficients(t).beta_dot
    }

    pub fn gamma_dot(&self, t: f64) -> f64 {
        self.coefficients(t).gamma_dot
    }

    /// Values and derivatives at `t`. The square-root schedule's derivatives
    /// are infinite at `t = 0`.
    pub fn coefficients(&self, t: f64) -> Coefficients {
        match self.kind {
            ScheduleKind::OdeLinear => Coefficients {
                alpha: 1.0 - t,
                beta: t,
                gamma: 0.0,
                alpha_dot: -1.0,
                beta_dot: 1.0,
                gamma_dot: 0.0,
            },
            ScheduleKind::SdeLinear => Coefficients {
                alpha: 1.0 - t,
                beta: t,
                gamma: t * (1.0 - t),
                alpha_dot: -1.0,
                beta_dot: 1.0,
                gamma_dot: 1.0 - 2.0 * t,
            },
            ScheduleKind::SqrtAwgn => {
                let s = t.sqrt();
                let ds = 0.5 / s;
                Coefficients {
                    alpha: 1.0 - s,
                    beta: s,
                    gamma: 0.0,
                    alpha_dot: -ds,
                    beta_dot: ds,
                    gamma_dot: 0.0,
                }
            }
        }
    }

    /// `d(beta^2)/dt`, finite at `t = 0` for every schedule.
    pub fn beta_sq_rate(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::OdeLinear | ScheduleKind::SdeLinear => 2.0 * t,
            ScheduleKind::SqrtAwgn => 1.0,
        }
    }

    /// `eps_t`.
    pub fn epsilon(&self, t: f64) -> f64 {
        match self.diffusion {
            Diffusion::Constant(c) => c,
            Diffusion::GammaScaled(c) => c * self.gamma(t),
        }
    }

    /// Score multiplier `eps_t / gamma(t)` appearing in the reverse SDE and
    /// the combined-drift target. Zero whenever `eps_t = 0`.
    pub fn score_multiplier(&self, t: f64) -> Result<f64> {
        match self.diffusion {
            Diffusion::GammaScaled(c) => Ok(c),
            Diffusion::Constant(c) if c == 0.0 => Ok(0.0),
            Diffusion::Constant(c) => {
                let g = self.gamma(t);
                if g > 0.0 {
                    Ok(c / g)
                } else {
                    Err(Error::DegenerateGamma { t })
                }
            }
        }
    }

    /// Whether `gamma(t) > 0` for every `t` in the open unit interval.
    pub fn has_interior_gamma(&self) -> bool {
        self.kind == ScheduleKind::SdeLinear
    }
}

/// Draw a training time uniformly on `[t_min, 1 - t_min]`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f64 {
    t_min + (1.0 - 2.0 * t_min) * rng.random::<f64>()
}

/// One draw of the interpolant and its time derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantSample {
    pub t: f64,
    pub i_t: Vec<f64>,
    pub i_dot: Vec<f64>,
    pub z: Vec<f64>,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub coefficients: Coefficients,
}

impl InterpolantSample {
    /// Assemble a sample from explicit endpoints and noise.
    pub fn from_parts(x0: Vec<f64>, x1: Vec<f64>, z: Vec<f64>, t: f64, sched: &Schedule) -> Result<Self> {
        ensure_dim(x0.len(), x1.len())?;
        ensure_dim(x0.len(), z.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let c = sched.coefficients(t);
        let i_t = x0
            .iter()
            .zip(&x1)
            .zip(&z)
            .map(|((a, b), n)| c.alpha * a + c.beta * b + c.gamma * n)
            .collect();
        let i_dot = x0
            .iter()
            .zip(&x1)
            .zip(&z)
            .map(|((a, b), n)| c.alpha_dot * a + c.beta_dot * b + c.gamma_dot * n)
            .collect();
        Ok(Self { t, i_t, i_dot, z, x0, x1, coefficients: c })
    }
}

/// Sample `I_t` and `dI_t/dt` for the pair `(x0, x1)` with fresh noise `z`.
pub fn sample_interpolant<R: Rng + ?Sized>(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    rng: &mut R,
    sched: &Schedule,
) -> Result<InterpolantSample> {
    ensure_dim(x0.len(), x1.len())?;
    let z = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    InterpolantSample::from_parts(x0.to_vec(), x1.to_vec(), z, t, sched)
}

/// Which regression objective a model output is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualKind {
    /// target `dI_t/dt`
    Drift,
    /// target `z`
    Denoiser,
    /// target `dI_t/dt + eps_t / gamma(t) * z`
    Combined,
}

/// Write the regression target for one sample into `out`.
pub fn residual_target(
    kind: ResidualKind,
    t: f64,
    i_dot: &[f64],
    z: &[f64],
    sched: &Schedule,
    out: &mut [f64],
) -> Result<()> {
    match kind {
        ResidualKind::Drift => out.copy_from_slice(i_dot),
        ResidualKind::Denoiser => {
            if sched.gamma(t) <= 0.0 {
                return Err(Error::DegenerateGamma { t });
            }
            out.copy_from_slice(z);
        }
        ResidualKind::Combined => {
            let m = sched.score_multiplier(t)?;
            for ((o, d), n) in out.iter_mut().zip(i_dot).zip(z) {
                *o = d + m * n;
            }
        }
    }
    Ok(())
}

/// A batch of interpolant draws, one row per sample, as consumed by the
/// regressor's training step.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolantBatch {
    pub t: Vec<f64>,
    pub i_t: Array2<f64>,
    pub i_dot: Array2<f64>,
    pub z: Array2<f64>,
    /// Conditioning appended to the regressor input, one row per sample.
    pub latent: Option<Array2<f64>>,
}

impl InterpolantBatch {
    /// Row-wise interpolants with uniform times on `[t_min, 1 - t_min]` and
    /// fresh Gaussian noise.
    pub fn sample<R: Rng + ?Sized>(
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        latent: Option<ArrayView2<f64>>,
        sched: &Schedule,
        t_min: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let t = (0..x0.nrows()).map(|_| sample_time(rng, t_min)).collect();
        let z = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal));
        Self::from_parts(x0, x1, z, t, latent, sched)
    }

    pub fn from_parts(
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        z: Array2<f64>,
        t: Vec<f64>,
        latent: Option<ArrayView2<f64>>,
        sched: &Schedule,
    ) -> Result<Self> {
        ensure_dim(x0.nrows(), x1.nrows())?;
        ensure_dim(x0.ncols(), x1.ncols())?;
        ensure_dim(x0.nrows(), t.len())?;
        ensure_dim(x0.ncols(), z.ncols())?;
        ensure_dim(x0.nrows(), z.nrows())?;
        if let Some(l) = &latent {
            ensure_dim(x0.nrows(), l.nrows())?;
        }
        if x0.nrows() == 0 {
            return Err(Error::Empty("interpolant batch"));
        }
        let mut i_t = Array2::zeros(x0.raw_dim());
        let mut i_dot = Array2::zeros(x0.raw_dim());
        for (r, &tr) in t.iter().enumerate() {
            if !(0.0..=1.0).contains(&tr) {
                return Err(Error::TimeOutOfRange(tr));
            }
            let c = sched.coefficients(tr);
            for j in 0..x0.ncols() {
                let (a, b, n) = (x0[[r, j]], x1[[r, j]], z[[r, j]]);
                i_t[[r, j]] = c.alpha * a + c.beta * b + c.gamma * n;
                i_dot[[r, j]] = c.alpha_dot * a + c.beta_dot * b + c.gamma_dot * n;
            }
        }
        Ok(Self { t, i_t, i_dot, z, latent: latent.map(|l| l.to_owned()) })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Regression targets for every row.
    pub fn targets(&self, kind: ResidualKind, sched: &Schedule) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(self.i_dot.raw_dim());
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let i_dot = self.i_dot.row(r);
            let z = self.z.row(r);
            residual_target(
                kind,
                self.t[r],
                i_dot.as_slice().expect("standard layout"),
                z.as_slice().expect("standard layout"),
                sched,
                row.as_slice_mut().expect("standard layout"),
            )?;
        }
        Ok(out)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim(b.len(), a.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `|b_hat - dI_t/dt|^2`
pub fn drift_residual(b_hat: &[f64], s: &InterpolantSample) -> Result<f64> {
    squared_distance(b_hat, &s.i_dot)
}

/// `|g_hat - z|^2`; undefined where `gamma(t) = 0`.
pub fn denoiser_residual(g_hat: &[f64], s: &InterpolantSample) -> Result<f64> {
    if s.coefficients.gamma <= 0.0 {
        return Err(Error::DegenerateGamma { t: s.t });
    }
    squared_distance(g_hat, &s.z)
}

/// `|v_hat - dI_t/dt - eps_t / gamma(t) * z|^2`
pub fn combined_residual(v_hat: &[f64], s: &InterpolantSample, sched: &Schedule) -> Result<f64> {
    ensure_dim(s.i_dot.len(), v_hat.len())?;
    let mut target = vec![0.0; v_hat.len()];
    residual_target(ResidualKind::Combined, s.t, &s.i_dot, &s.z, sched, &mut target)?;
    squared_distance(v_hat, &target)
}
