//! The self-consistency iteration.
//!
//! Each outer iteration freezes the current transport `Phi`. Every inner step
//! then draws observations `y`, maps them back to `x = Phi(y)`, draws a fresh
//! observation `F(x)` of each (or keeps `y` with probability `1 - mix_p`),
//! and takes one Adam step on the interpolant regression between `x` and that
//! observation. Nothing differentiates through the transport or the channel:
//! both only produce training data.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::gaussian::{symmetrize, AffineGaussianField, GaussianModel, MatrixFn};
use crate::nn::{save_checkpoint, Adam, AdamConfig, Architecture, Checkpoint, LrSchedule, Regressor};
use crate::schedule::{InterpolantBatch, ResidualKind, Schedule, DEFAULT_T_MIN};
use crate::transport::{pushforward, Drift, Mode, Scheme, TransportConfig, VelocityField};

/// Which fields the network learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// The drift `b` alone; transport by the probability-flow ODE.
    Drift,
    /// The combined SDE drift `v = b + eps/gamma g` in one network.
    Combined,
    /// Separate drift and denoiser networks.
    DriftAndDenoiser,
}

/// An observation set with optional per-observation latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub y: Array2<f64>,
    pub latent: Option<Array2<f64>>,
}

impl Observations {
    pub fn new(y: Array2<f64>, latent: Option<Array2<f64>>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::Empty("observations"));
        }
        if let Some(l) = &latent {
            ensure_dim(y.nrows(), l.nrows())?;
        }
        Ok(Self { y, latent })
    }

    /// Corrupts every row of `x` through the channel, one generator stream per
    /// row derived from `seed`.
    pub fn from_channel(x: ArrayView2<f64>, channel: &ChannelSpec, seed: u64) -> Result<Self> {
        let d = x.ncols();
        let ld = channel.latent_dim(d);
        let mut y = Array2::zeros(x.raw_dim());
        let mut latent = Array2::zeros((x.nrows(), ld));
        for (r, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let out = channel.apply(&row.to_vec(), &mut rng)?;
            y.row_mut(r).assign(&ndarray::ArrayView1::from(&out.y));
            latent.row_mut(r).assign(&ndarray::ArrayView1::from(&out.latent));
        }
        Self::new(y, (ld > 0).then_some(latent))
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.as_ref().map_or(0, |l| l.ncols())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer iterations `K`.
    pub outer_iters: usize,
    /// Inner optimizer steps per outer iteration.
    pub inner_steps: usize,
    /// Probability of regressing towards a regenerated observation `F(x)`
    /// instead of the original `y`.
    pub mix_p: f64,
    /// Interpolant pairs per optimizer step.
    pub batch_size: usize,
    /// Number of channel draws per transported point; the transport runs on
    /// `batch_size / resample_factor` observations per step.
    pub resample_factor: usize,
    pub objective: Objective,
    pub lr: f64,
    /// Fraction of all optimizer steps spent in linear warmup before the
    /// cosine decay.
    pub warmup_fraction: f64,
    pub t_min: f64,
    pub seed: u64,
    /// Emit one record per this many outer iterations (losses averaged).
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iters: 1000,
            inner_steps: 1,
            mix_p: 0.9,
            batch_size: 256,
            resample_factor: 1,
            objective: Objective::Drift,
            lr: 5e-4,
            warmup_fraction: 0.05,
            t_min: DEFAULT_T_MIN,
            seed: 0,
            record_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(invalid("outer_iters must be >= 1"));
        }
        if self.inner_steps == 0 {
            return Err(invalid("inner_steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_p) {
            return Err(invalid("mix_p must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.resample_factor == 0 || self.batch_size % self.resample_factor != 0 {
            return Err(invalid("batch_size must be a positive multiple of resample_factor"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.t_min) {
            return Err(invalid("t_min must lie in [0, 0.5)"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be >= 1"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.outer_iters * self.inner_steps) as u64
    }

    pub fn adam(&self) -> AdamConfig {
        let total = self.total_steps();
        AdamConfig {
            lr: self.lr,
            schedule: LrSchedule::CosineWarmup {
                warmup: (self.warmup_fraction * total as f64).round() as u64,
                total,
            },
            ..AdamConfig::default()
        }
    }

    /// Every outer iteration when `K <= 100`, else every `ceil(K / 100)`.
    pub fn checkpoint_every(&self) -> usize {
        if self.outer_iters <= 100 {
            1
        } else {
            self.outer_iters.div_ceil(100)
        }
    }
}

/// Metrics for one outer iteration, or a block of `record_every` of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// 1-based index of the last outer iteration in the block.
    pub k: usize,
    pub mean_loss: f64,
    /// Seconds since training started.
    pub wall_time: f64,
    pub w2: Option<f64>,
    pub checkpoint: Option<String>,
}

/// One or two regressors together with their optimizers.
#[derive(Clone, Debug)]
pub struct NeuralModel {
    objective: Objective,
    nets: Vec<Regressor>,
    opts: Vec<Adam>,
}

impl NeuralModel {
    /// Fresh networks whose output starts close to zero, so the initial
    /// transport is close to the identity.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, objective: Objective, adam: AdamConfig, rng: &mut R) -> Result<Self> {
        let count = if objective == Objective::DriftAndDenoiser { 2 } else { 1 };
        let nets = (0..count)
            .map(|_| Regressor::init(arch.clone(), 0.01, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_networks(objective, nets, adam)
    }

    pub fn from_networks(objective: Objective, nets: Vec<Regressor>, adam: AdamConfig) -> Result<Self> {
        let expected = if objective == Objective::DriftAndDenoiser { 2 } else { 1 };
        ensure_dim(expected, nets.len())?;
        let opts = nets.iter().map(|n| Adam::new(n.param_count(), adam)).collect();
        Ok(Self { objective, nets, opts })
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn networks(&self) -> &[Regressor] {
        &self.nets
    }

    pub fn network_names(&self) -> &'static [&'static str] {
        match self.objective {
            Objective::Drift => &["drift"],
            Objective::Combined => &["velocity"],
            Objective::DriftAndDenoiser => &["drift", "denoiser"],
        }
    }

    pub fn set_adam(&mut self, adam: AdamConfig) {
        self.opts = self.nets.iter().map(|n| Adam::new(n.param_count(), adam)).collect();
    }

    pub fn step_count(&self) -> u64 {
        self.opts[0].step_count()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step_count(),
            networks: self
                .network_names()
                .iter()
                .zip(&self.nets)
                .map(|(n, r)| (n.to_string(), r.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, adam: AdamConfig) -> Result<Self> {
        let names: Vec<&str> = ckpt.networks.iter().map(|(n, _)| n.as_str()).collect();
        let objective = match names.as_slice() {
            ["drift"] => Objective::Drift,
            ["velocity"] => Objective::Combined,
            ["drift", "denoiser"] => Objective::DriftAndDenoiser,
            other => return Err(Error::Checkpoint(format!("unrecognized network set {other:?}"))),
        };
        let nets = ckpt.networks.iter().map(|(_, r)| r.clone()).collect();
        Self::from_networks(objective, nets, adam)
    }

    fn drift(&self) -> Drift<'_> {
        match self.objective {
            Objective::Drift | Objective::Combined => Drift::Velocity(&self.nets[0]),
            Objective::DriftAndDenoiser => Drift::DriftDenoiser { b: &self.nets[0], g: &self.nets[1] },
        }
    }

    /// The learned transport applied to a batch of observations.
    pub fn transport<R: Rng + ?Sized>(
        &self,
        ys: ArrayView2<f64>,
        latents: Option<ArrayView2<f64>>,
        rng: &mut R,
        cfg: &TransportConfig,
        sched: &Schedule,
    ) -> Result<Array2<f64>> {
        pushforward(self.drift(), ys, latents, rng, cfg, sched)
    }

    fn residual_kinds(&self) -> &'static [ResidualKind] {
        match self.objective {
            Objective::Drift => &[ResidualKind::Drift],
            Objective::Combined => &[ResidualKind::Combined],
            Objective::DriftAndDenoiser => &[ResidualKind::Drift, ResidualKind::Denoiser],
        }
    }

    /// One optimizer step per network; returns the summed batch loss.
    pub fn train_step(&mut self, batch: &InterpolantBatch, sched: &Schedule) -> Result<f64> {
        let kinds = self.residual_kinds();
        let mut total = 0.0;
        for ((net, opt), kind) in self.nets.iter_mut().zip(self.opts.iter_mut()).zip(kinds) {
            let (loss, grad) = net.backward(batch, *kind, sched)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite);
            }
            opt.step(net.params_mut(), &grad);
            total += loss;
        }
        Ok(total)
    }
}

/// Restored samples: the learned transport applied to observations.
pub fn restore<R: Rng + ?Sized>(
    model: &NeuralModel,
    transport: &TransportConfig,
    sched: &Schedule,
    obs: &Observations,
    rng: &mut R,
) -> Result<Array2<f64>> {
    model.transport(obs.y.view(), obs.latent.as_ref().map(|l| l.view()), rng, transport, sched)
}

/// Side effects during training.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Where checkpoints are written, on the cadence of
    /// [`TrainConfig::checkpoint_every`].
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after each record block; a returned value is stored as the
    /// record's distance to the truth.
    #[allow(clippy::type_complexity)]
    pub evaluate: Option<Box<dyn FnMut(usize, &NeuralModel) -> Result<Option<f64>> + 'a>>,
    /// Called after each record is produced.
    pub on_record: Option<Box<dyn FnMut(&RunRecord) + 'a>>,
}

/// Endpoints drawn for one inner step.
struct PairBatch {
    x0: Array2<f64>,
    x1: Array2<f64>,
    latent: Option<Array2<f64>>,
    regenerated: usize,
}

#[allow(clippy::too_many_arguments)]
fn draw_pairs(
    frozen: &NeuralModel,
    data: &Observations,
    channel: &ChannelSpec,
    cfg: &TrainConfig,
    transport: &TransportConfig,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let m = cfg.batch_size / cfg.resample_factor;
    let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..data.len())).collect();
    let ys = data.y.select(Axis(0), &idx);
    let ls = data.latent.as_ref().map(|l| l.select(Axis(0), &idx));
    let xs = frozen.transport(ys.view(), ls.as_ref().map(|l| l.view()), rng, transport, sched)?;
    let d = data.dim();
    let ld = data.latent_dim();
    let n = cfg.batch_size;
    let mut x0 = Array2::zeros((n, d));
    let mut x1 = Array2::zeros((n, d));
    let mut latent = Array2::zeros((n, ld));
    let mut regenerated = 0;
    for rep in 0..cfg.resample_factor {
        for i in 0..m {
            let r = rep * m + i;
            x0.row_mut(r).assign(&xs.row(i));
            if rng.random::<f64>() < cfg.mix_p {
                let out = channel.apply(&xs.row(i).to_vec(), rng)?;
                x1.row_mut(r).assign(&ndarray::ArrayView1::from(&out.y));
                if ld > 0 {
                    latent.row_mut(r).assign(&ndarray::ArrayView1::from(&out.latent));
                }
                regenerated += 1;
            } else {
                x1.row_mut(r).assign(&ys.row(i));
                if let Some(l) = &ls {
                    latent.row_mut(r).assign(&l.row(i));
                }
            }
        }
    }
    Ok(PairBatch { x0, x1, latent: (ld > 0).then_some(latent), regenerated })
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    /// Fraction of training pairs whose second endpoint was regenerated.
    pub regenerated_fraction: f64,
}

/// Runs the self-consistency iteration on `model` in place.
pub fn scsi_train(
    data: &Observations,
    channel: &ChannelSpec,
    cfg: &TrainConfig,
    transport: &TransportConfig,
    sched: &Schedule,
    model: &mut NeuralModel,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    transport.validate()?;
    channel.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("observations"));
    }
    let d = data.dim();
    if channel.latent_dim(d) != data.latent_dim() {
        return Err(invalid(format!(
            "channel emits {}-dimensional latents but observations carry {}",
            channel.latent_dim(d),
            data.latent_dim()
        )));
    }
    let arch = model.networks()[0].architecture();
    ensure_dim(arch.state_dim, d)?;
    ensure_dim(arch.latent_dim, data.latent_dim())?;
    if transport.mode == Mode::Sde && model.objective() == Objective::Drift {
        return Err(invalid("sde transport needs a combined or drift-and-denoiser objective"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let ckpt_every = cfg.checkpoint_every();
    let mut last_checkpoint: Option<String> = None;
    let mut records = Vec::new();
    let mut block_loss = 0.0;
    let mut block_steps = 0usize;
    let mut regenerated = 0usize;
    let mut pairs = 0usize;

    for k in 1..=cfg.outer_iters {
        let frozen = model.clone();
        for _ in 0..cfg.inner_steps {
            let batch = match draw_pairs(&frozen, data, channel, cfg, transport, sched, &mut rng) {
                Ok(b) => b,
                Err(e @ (Error::Diverged { .. } | Error::NonFinite)) => {
                    return Err(Error::TrainingAborted { outer: k, last_checkpoint, source: Box::new(e) })
                }
                Err(e) => return Err(e),
            };
            regenerated += batch.regenerated;
            pairs += batch.x0.nrows();
            let interp = InterpolantBatch::sample(
                batch.x0.view(),
                batch.x1.view(),
                batch.latent.as_ref().map(|l| l.view()),
                sched,
                cfg.t_min,
                &mut rng,
            )?;
            let loss = model.train_step(&interp, sched).map_err(|e| Error::TrainingAborted {
                outer: k,
                last_checkpoint: last_checkpoint.clone(),
                source: Box::new(e),
            })?;
            block_loss += loss;
            block_steps += 1;
        }

        let mut checkpoint = None;
        if let Some(dir) = &hooks.checkpoint_dir {
            if k % ckpt_every == 0 || k == cfg.outer_iters {
                let path = checkpoint_path(dir, k);
                save_checkpoint(&path, &model.checkpoint())?;
                let name = path.display().to_string();
                last_checkpoint = Some(name.clone());
                checkpoint = Some(name);
            }
        }
        if k % cfg.record_every == 0 || k == cfg.outer_iters {
            let w2 = match hooks.evaluate.as_mut() {
                Some(eval) => eval(k, model)?,
                None => None,
            };
            let record = RunRecord {
                k,
                mean_loss: block_loss / block_steps as f64,
                wall_time: start.elapsed().as_secs_f64(),
                w2,
                checkpoint: checkpoint.or_else(|| last_checkpoint.clone()),
            };
            if let Some(cb) = hooks.on_record.as_mut() {
                cb(&record);
            }
            records.push(record);
            block_loss = 0.0;
            block_steps = 0;
        }
    }
    Ok(TrainOutcome { records, regenerated_fraction: regenerated as f64 / pairs.max(1) as f64 })
}

pub fn checkpoint_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("ckpt-{k:06}.bin"))
}

/// The self-consistency iteration for a Gaussian prior behind unit AWGN,
/// run on distributions rather than samples.
///
/// The model family is the exact affine field of `N(b~, S~)` under the
/// square-root schedule. Each outer step pushes the observation law through
/// the current model's transport by integrating the mean and covariance
/// equations of the reverse dynamics numerically, passes the result through
/// the channel, and solves the inner regression exactly: the affine family
/// contains the true field of the new interpolant, so the minimizer is the
/// Gaussian with the transported mean and covariance.
#[derive(Clone, Debug)]
pub struct ExactAffineScsi {
    observed: GaussianModel,
    model: GaussianModel,
    /// Diffusion in the convention of [`crate::gaussian`].
    eps: f64,
    steps: usize,
}

/// Mean-covariance dynamics of the reverse SDE driven by an affine field,
/// packed as `[m | vec(P)]`. In forward time `m' = A (m - b~)` and
/// `P' = A P + P A - eps I`.
struct MomentField {
    field: AffineGaussianField,
    mean: DVector<f64>,
    eps: f64,
}

impl VelocityField for MomentField {
    fn dim(&self) -> usize {
        let d = self.mean.len();
        d + d * d
    }

    fn eval_batch(&self, t: f64, x: ArrayView2<f64>, _latent: Option<ArrayView2<f64>>, out: &mut Array2<f64>) -> Result<()> {
        let d = self.mean.len();
        let a = self.field.matrix(t);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        for (row, mut o) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let m = DVector::from_fn(d, |i, _| row[i]);
            let p = DMatrix::from_fn(d, d, |i, j| row[d + i * d + j]);
            let dm = &a * (m - &self.mean);
            let dp = &a * &p + &p * &a - DMatrix::identity(d, d) * self.eps;
            for i in 0..d {
                o[i] = dm[i];
                for j in 0..d {
                    o[d + i * d + j] = dp[(i, j)];
                }
            }
        }
        Ok(())
    }
}

impl ExactAffineScsi {
    /// `truth` is the prior; the observations are `N(b, S + I)`. The model
    /// covariance must stay positive definite because the transport runs all
    /// the way to `t = 0`.
    pub fn new(truth: &GaussianModel, start: GaussianModel, eps: f64, steps: usize) -> Result<Self> {
        ensure_dim(truth.dim(), start.dim())?;
        if steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        Ok(Self { observed: truth.observed(1.0), model: start, eps, steps })
    }

    pub fn model(&self) -> &GaussianModel {
        &self.model
    }

    /// Law of `Phi(y)` for `y` drawn from the observation law.
    pub fn transported(&self) -> Result<GaussianModel> {
        let d = self.model.dim();
        let field = MomentField {
            field: AffineGaussianField::sqrt_awgn(&self.model, self.eps),
            mean: self.model.mean().clone(),
            eps: self.eps,
        };
        let mut state = Array2::zeros((1, d + d * d));
        for i in 0..d {
            state[[0, i]] = self.observed.mean()[i];
            for j in 0..d {
                state[[0, d + i * d + j]] = self.observed.cov()[(i, j)];
            }
        }
        let cfg = TransportConfig { steps: self.steps, mode: Mode::Ode, epsilon: 0.0, scheme: Scheme::Heun, t_min: 0.0 };
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = pushforward(Drift::Velocity(&field), state.view(), None, &mut unused, &cfg, &Schedule::sqrt_awgn())?;
        let row = out.slice(s![0, ..]);
        let mean = DVector::from_fn(d, |i, _| row[i]);
        let cov = DMatrix::from_fn(d, d, |i, j| row[d + i * d + j]);
        GaussianModel::new(mean, symmetrize(&cov))
    }

    /// One outer iteration; returns the new model.
    pub fn step(&mut self) -> Result<&GaussianModel> {
        let x = self.transported()?;
        // The regenerated interpolant between x and x + xi has exactly the
        // marginals of the affine model N(mean(x), cov(x)), which therefore
        // minimizes the drift regression.
        let min_eig = MatrixFn::new(x.cov()).eigenvalues().min();
        if min_eig <= 0.0 {
            return Err(Error::Singular);
        }
        self.model = x;
        Ok(&self.model)
    }
}
