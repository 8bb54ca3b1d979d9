//! Backward transport from observations (`t = 1`) to data (`t = 0`): the
//! probability-flow ODE and the reverse SDE on a uniform grid over the clamped
//! window `[t_min, 1 - t_min]`.
//!
//! Fields are written in forward time. A backward step of size `h` is
//! `X <- X - h v(t, X)`, plus `sqrt(2 eps_t h) xi` in SDE mode, where
//! `v = b + eps_t / gamma(t) * g` when a drift and a denoiser are supplied.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::nn::Regressor;
use crate::schedule::{Diffusion, Schedule, DEFAULT_T_MIN};

/// Rows integrated together as one batch in [`pushforward`].
const CHUNK_ROWS: usize = 64;

/// A time-dependent vector field evaluated on a batch of states.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn latent_dim(&self) -> usize {
        0
    }

    /// Writes `f(t, x_r, latent_r)` into row `r` of `out`.
    fn eval_batch(&self, t: f64, x: ArrayView2<f64>, latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>)
        -> Result<()>;
}

impl VelocityField for Regressor {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn latent_dim(&self) -> usize {
        Regressor::latent_dim(self)
    }

    fn eval_batch(&self, t: f64, x: ArrayView2<f64>, latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        let ts = vec![t; x.nrows()];
        *out = self.forward_batch(x, &ts, latent)?;
        Ok(())
    }
}

/// A field given by a per-sample function `f(t, x, out)`.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Sync> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, t: f64, x: ArrayView2<f64>, _latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        for (xr, mut or) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let xr = xr.to_vec();
            (self.f)(t, &xr, or.as_slice_mut().expect("standard layout"));
        }
        Ok(())
    }
}

/// The identically-zero field.
pub struct ZeroField(pub usize);

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval_batch(&self, _t: f64, _x: ArrayView2<f64>, _latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ode,
    Sde,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Euler,
    Heun,
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub steps: usize,
    pub mode: Mode,
    /// Diffusion scale used in SDE mode. Whether it is constant or multiplied
    /// by `gamma(t)` follows the schedule's diffusion profile.
    pub epsilon: f64,
    pub scheme: Scheme,
    pub t_min: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            mode: Mode::Ode,
            epsilon: 0.0,
            scheme: Scheme::Heun,
            t_min: DEFAULT_T_MIN,
        }
    }
}

impl TransportConfig {
    pub fn ode(steps: usize, scheme: Scheme) -> Self {
        Self { steps, scheme, ..Self::default() }
    }

    pub fn sde(steps: usize, epsilon: f64) -> Self {
        Self {
            steps,
            mode: Mode::Sde,
            epsilon,
            scheme: Scheme::EulerMaruyama,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("transport steps must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.t_min) {
            return Err(invalid("t_min must lie in [0, 0.5)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(invalid("transport epsilon must be >= 0"));
        }
        match (self.mode, self.scheme) {
            (Mode::Ode, Scheme::EulerMaruyama) => Err(invalid("ode mode needs the euler or heun scheme")),
            (Mode::Sde, Scheme::Euler | Scheme::Heun) => Err(invalid("sde mode needs the euler-maruyama scheme")),
            (Mode::Sde, _) if self.epsilon == 0.0 => Err(invalid("sde mode needs epsilon > 0")),
            _ => Ok(()),
        }
    }

    /// Times `t_0 = 1 - t_min > t_1 > ... > t_steps = t_min`.
    pub fn grid(&self) -> Vec<f64> {
        let span = 1.0 - 2.0 * self.t_min;
        (0..=self.steps)
            .map(|i| 1.0 - self.t_min - span * i as f64 / self.steps as f64)
            .collect()
    }

    fn epsilon_at(&self, sched: &Schedule, t: f64) -> f64 {
        match sched.diffusion() {
            Diffusion::Constant(_) => self.epsilon,
            Diffusion::GammaScaled(_) => self.epsilon * sched.gamma(t),
        }
    }
}

/// What is integrated: a single velocity, or a drift plus denoiser whose
/// combination depends on the diffusion level.
#[derive(Clone, Copy)]
pub enum Drift<'a> {
    Velocity(&'a dyn VelocityField),
    DriftDenoiser {
        b: &'a dyn VelocityField,
        g: &'a dyn VelocityField,
    },
}

impl Drift<'_> {
    fn dim(&self) -> usize {
        match self {
            Drift::Velocity(v) => v.dim(),
            Drift::DriftDenoiser { b, .. } => b.dim(),
        }
    }

    fn latent_dim(&self) -> usize {
        match self {
            Drift::Velocity(v) => v.latent_dim(),
            Drift::DriftDenoiser { b, .. } => b.latent_dim(),
        }
    }
}

struct Integrator<'a> {
    drift: Drift<'a>,
    cfg: TransportConfig,
    sched: Schedule,
    stochastic: bool,
}

impl Integrator<'_> {
    fn velocity(&self, t: f64, x: ArrayView2<f64>, latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        match self.drift {
            Drift::Velocity(v) => v.eval_batch(t, x, latent, out),
            Drift::DriftDenoiser { b, g } => {
                b.eval_batch(t, x, latent, out)?;
                let eps = if self.stochastic { self.cfg.epsilon_at(&self.sched, t) } else { 0.0 };
                if eps > 0.0 {
                    let gamma = self.sched.gamma(t);
                    if gamma <= 0.0 {
                        return Err(Error::DegenerateGamma { t });
                    }
                    let mut gout = Array2::zeros(out.raw_dim());
                    g.eval_batch(t, x, latent, &mut gout)?;
                    out.scaled_add(eps / gamma, &gout);
                }
                Ok(())
            }
        }
    }

    /// Integrates the rows of `x` in place. `first_row` is the global index of
    /// row 0, used both for error reports and for the per-row noise streams.
    fn run(&self, x: &mut Array2<f64>, latent: Option<ArrayView2<f64>>, seed: u64, first_row: usize) -> Result<()> {
        let grid = self.cfg.grid();
        let mut rngs: Vec<ChaCha8Rng> = if self.stochastic {
            (0..x.nrows())
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((first_row + r) as u64);
                    rng
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut k1 = Array2::zeros(x.raw_dim());
        let mut k2 = Array2::zeros(x.raw_dim());
        for (step, w) in grid.windows(2).enumerate() {
            let (t, t_next) = (w[0], w[1]);
            let h = t - t_next;
            self.velocity(t, x.view(), latent, &mut k1)?;
            match (self.stochastic, self.cfg.scheme) {
                (false, Scheme::Heun) => {
                    let predictor = &*x - &(&k1 * h);
                    self.velocity(t_next, predictor.view(), latent, &mut k2)?;
                    x.zip_mut_with(&k1, |xi, a| *xi -= 0.5 * h * a);
                    x.zip_mut_with(&k2, |xi, b| *xi -= 0.5 * h * b);
                }
                (false, _) => x.scaled_add(-h, &k1),
                (true, _) => {
                    x.scaled_add(-h, &k1);
                    let sd = (2.0 * self.cfg.epsilon_at(&self.sched, t) * h).sqrt();
                    for (mut row, rng) in x.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
                        row.iter_mut().for_each(|v| *v += sd * rng.sample::<f64, _>(StandardNormal));
                    }
                }
            }
            for (r, row) in x.axis_iter(Axis(0)).enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { sample: first_row + r, step });
                }
            }
        }
        Ok(())
    }
}

fn check_batch(drift: &Drift, ys: &ArrayView2<f64>, latents: Option<&ArrayView2<f64>>) -> Result<()> {
    ensure_dim(drift.dim(), ys.ncols())?;
    match latents {
        Some(l) => {
            ensure_dim(drift.latent_dim(), l.ncols())?;
            ensure_dim(ys.nrows(), l.nrows())
        }
        None => ensure_dim(drift.latent_dim(), 0),
    }
}

/// Applies the transport map to every row of `ys`, in order. In SDE mode each
/// row draws its Brownian increments from its own stream, derived from one
/// draw of `rng`, so results do not depend on the thread count.
pub fn pushforward<R: Rng + ?Sized>(
    drift: Drift<'_>,
    ys: ArrayView2<f64>,
    latents: Option<ArrayView2<f64>>,
    rng: &mut R,
    cfg: &TransportConfig,
    sched: &Schedule,
) -> Result<Array2<f64>> {
    if ys.nrows() == 0 {
        return Err(Error::Empty("pushforward batch"));
    }
    if cfg.steps == 0 {
        return Err(invalid("transport steps must be >= 1"));
    }
    check_batch(&drift, &ys, latents.as_ref())?;
    let integrator = Integrator {
        drift,
        cfg: *cfg,
        sched: *sched,
        stochastic: cfg.mode == Mode::Sde,
    };
    let seed = rng.random::<u64>();
    let starts: Vec<usize> = (0..ys.nrows()).step_by(CHUNK_ROWS).collect();
    let blocks: Vec<Result<Array2<f64>>> = starts
        .par_iter()
        .map(|&a| {
            let b = (a + CHUNK_ROWS).min(ys.nrows());
            let mut x = ys.slice(s![a..b, ..]).to_owned();
            integrator.run(&mut x, latents.as_ref().map(|l| l.slice(s![a..b, ..])), seed, a)?;
            Ok(x)
        })
        .collect();
    let mut out = Array2::zeros(ys.raw_dim());
    for (&a, block) in starts.iter().zip(blocks) {
        let block = block?;
        out.slice_mut(s![a..a + block.nrows(), ..]).assign(&block);
    }
    Ok(out)
}

fn single<R: Rng + ?Sized>(
    drift: Drift<'_>,
    y: &[f64],
    latent: Option<&[f64]>,
    rng: &mut R,
    cfg: &TransportConfig,
    sched: &Schedule,
) -> Result<Vec<f64>> {
    let yv = ArrayView2::from_shape((1, y.len()), y).expect("row");
    let lv = latent.map(|l| ArrayView2::from_shape((1, l.len()), l).expect("row"));
    Ok(pushforward(drift, yv, lv, rng, cfg, sched)?.into_raw_vec_and_offset().0)
}

/// Probability-flow transport of one observation; deterministic.
pub fn integrate_ode(
    drift: &dyn VelocityField,
    y: &[f64],
    latent: Option<&[f64]>,
    cfg: &TransportConfig,
) -> Result<Vec<f64>> {
    if cfg.mode != Mode::Ode {
        return Err(invalid("integrate_ode needs an ode-mode config"));
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    single(Drift::Velocity(drift), y, latent, &mut unused, cfg, &Schedule::ode_linear())
}

/// Euler-Maruyama on the reverse SDE with drift `b + eps_t / gamma(t) g`.
/// Fails if `gamma` vanishes inside the window while `eps_t > 0`.
pub fn integrate_sde<R: Rng + ?Sized>(
    drift_b: &dyn VelocityField,
    denoiser_g: &dyn VelocityField,
    y: &[f64],
    latent: Option<&[f64]>,
    rng: &mut R,
    cfg: &TransportConfig,
    sched: &Schedule,
) -> Result<Vec<f64>> {
    let cfg = TransportConfig { mode: Mode::Sde, scheme: Scheme::EulerMaruyama, ..*cfg };
    single(Drift::DriftDenoiser { b: drift_b, g: denoiser_g }, y, latent, rng, &cfg, sched)
}

/// Euler-Maruyama with an already-combined velocity field; valid for any
/// schedule since no division by `gamma` is needed.
pub fn integrate_sde_velocity<R: Rng + ?Sized>(
    velocity: &dyn VelocityField,
    y: &[f64],
    latent: Option<&[f64]>,
    rng: &mut R,
    cfg: &TransportConfig,
    sched: &Schedule,
) -> Result<Vec<f64>> {
    let cfg = TransportConfig { mode: Mode::Sde, scheme: Scheme::EulerMaruyama, ..*cfg };
    single(Drift::Velocity(velocity), y, latent, rng, &cfg, sched)
}
