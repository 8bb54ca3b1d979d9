//! Canned experiments shared by the command-line tool and the test suites.

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::error::{invalid, Result};
use crate::gaussian::{covariance_error_trajectory, gaussian_w2sq, transport_cost, wishart_sample};
use crate::metrics::{w2sq_exact, SampleSet};
use crate::nn::{Activation, Architecture};
use crate::schedule::Schedule;
use crate::trainer::{restore, scsi_train, NeuralModel, Observations, TrainConfig, TrainHooks, TrainOutcome};
use crate::transport::TransportConfig;

/// Two interleaved half circles of radius 1, the second shifted by
/// `(1, 0.5)` and flipped.
pub fn two_moons<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let theta = rng.random::<f64>() * std::f64::consts::PI;
        if rng.random::<bool>() {
            row[0] = theta.cos();
            row[1] = theta.sin();
        } else {
            row[0] = 1.0 - theta.cos();
            row[1] = 0.5 - theta.sin();
        }
    }
    out
}

/// Everything needed to reproduce one restoration run apart from the clean
/// data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub channel: ChannelSpec,
    pub schedule: Schedule,
    pub transport: TransportConfig,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Evaluate W2 every this many outer iterations (0 = only at the end).
    pub eval_every: usize,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_eval: 2000,
            channel: ChannelSpec::Awgn { sigma: 0.5 },
            schedule: Schedule::ode_linear(),
            transport: TransportConfig::default(),
            train: TrainConfig::default(),
            hidden: vec![128, 128, 128],
            activation: Activation::Gelu,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestorationRun {
    pub outcome: TrainOutcome,
    pub truth: Array2<f64>,
    pub observed: Array2<f64>,
    pub restored: Array2<f64>,
    /// `sqrt(w2sq_exact)` between restored and clean held-out points.
    pub w2: f64,
    /// The same distance for the corrupted held-out points.
    pub w2_observed: f64,
    pub model: NeuralModel,
}

/// Square-root exact W2 between two equally sized point clouds.
pub fn w2(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(w2sq_exact(&SampleSet::new(a.clone())?, &SampleSet::new(b.clone())?)?.sqrt())
}

/// Generates `n_train + n_eval` two-moon points and runs [`run_restoration`].
pub fn run_twomoon(cfg: &RestorationConfig, seed: u64, hooks: TrainHooks<'_>) -> Result<RestorationRun> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6f6e);
    let clean = two_moons(cfg.n_train + cfg.n_eval, &mut data_rng);
    run_restoration(clean, cfg, seed, hooks)
}

/// Corrupts clean points through the channel, trains on the first `n_train`
/// observations and evaluates on the next `n_eval`.
///
/// Channel draws, initialization, training and evaluation each take their
/// own generator derived from `seed`.
pub fn run_restoration(
    clean: Array2<f64>,
    cfg: &RestorationConfig,
    seed: u64,
    mut hooks: TrainHooks<'_>,
) -> Result<RestorationRun> {
    if cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(invalid("restoration needs nonempty train and eval splits"));
    }
    if clean.nrows() < cfg.n_train + cfg.n_eval {
        return Err(invalid(format!(
            "need {} clean points, got {}",
            cfg.n_train + cfg.n_eval,
            clean.nrows()
        )));
    }
    let clean = clean.slice(s![..cfg.n_train + cfg.n_eval, ..]).to_owned();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let channel_seed: u64 = seeds.random();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.random());
    let train_seed: u64 = seeds.random();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seeds.random());
    let eval_seed: u64 = seeds.random();

    let all = Observations::from_channel(clean.view(), &cfg.channel, channel_seed)?;
    let split = |a: &Array2<f64>, train: bool| {
        if train {
            a.slice(s![..cfg.n_train, ..]).to_owned()
        } else {
            a.slice(s![cfg.n_train.., ..]).to_owned()
        }
    };
    let train = Observations::new(split(&all.y, true), all.latent.as_ref().map(|l| split(l, true)))?;
    let eval = Observations::new(split(&all.y, false), all.latent.as_ref().map(|l| split(l, false)))?;
    let truth = split(&clean, false);

    let train_cfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
    let arch = Architecture { hidden: cfg.hidden.clone(), activation: cfg.activation, ..Architecture::default_for(clean.ncols(), train.latent_dim()) };
    let mut model = NeuralModel::new(arch, train_cfg.objective, train_cfg.adam(), &mut init_rng)?;

    if cfg.eval_every > 0 && hooks.evaluate.is_none() {
        let every = cfg.eval_every;
        let (transport, schedule) = (cfg.transport.clone(), cfg.schedule.clone());
        let (eval_obs, truth_eval) = (eval.clone(), truth.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        hooks.evaluate = Some(Box::new(move |k, m: &NeuralModel| {
            if k % every != 0 {
                return Ok(None);
            }
            let x = restore(m, &transport, &schedule, &eval_obs, &mut rng)?;
            Ok(Some(w2(&x, &truth_eval)?))
        }));
    }
    let outcome = scsi_train(&train, &cfg.channel, &train_cfg, &cfg.transport, &cfg.schedule, &mut model, hooks)?;
    let restored = restore(&model, &cfg.transport, &cfg.schedule, &eval, &mut eval_rng)?;
    Ok(RestorationRun {
        w2: w2(&restored, &truth)?,
        w2_observed: w2(&eval.y, &truth)?,
        outcome,
        truth,
        observed: eval.y,
        restored,
        model,
    })
}

/// Error trajectories `||S - S_k||_F^2` of the exact iteration for each
/// diffusion level, from `S_0 = I` towards a Wishart `S`. Row `k` holds
/// `k` followed by one column per `eps`.
pub fn gaussian_rates(d: usize, dof: usize, eps_list: &[f64], iters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = wishart_sample(d, dof, 1.0, &mut rng)?;
    let start = DMatrix::identity(d, d);
    let columns = eps_list
        .iter()
        .map(|&e| covariance_error_trajectory(&truth, &start, e, iters))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=iters)
        .map(|k| std::iter::once(k as f64).chain(columns.iter().map(|c| c[k])).collect())
        .collect())
}

/// Least-squares slope of `log y` against `log k` over rows with
/// `k in [lo, hi]` and positive `y`.
pub fn loglog_slope(ks: &[f64], ys: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(ys)
        .filter(|(k, y)| **k >= lo && **k <= hi && **y > 0.0)
        .map(|(k, y)| (k.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    Some(sxy / sxx)
}

/// One point of the transport-cost scatter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub scale: f64,
    pub transport_cost: f64,
    pub w2sq: f64,
}

/// `n_pairs` independent Wishart pairs `(A, B)` at the given scale, each
/// reduced to the transport discrepancy and the squared W2 distance.
pub fn w2_scatter(d: usize, dof: usize, scale: f64, n_pairs: usize, eps: f64, seed: u64) -> Result<Vec<ScatterPoint>> {
    if n_pairs == 0 {
        return Err(invalid("n_pairs must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let a = wishart_sample(d, dof, scale, &mut rng)?;
            let b = wishart_sample(d, dof, scale, &mut rng)?;
            Ok(ScatterPoint { scale, transport_cost: transport_cost(&a, &b, eps), w2sq: gaussian_w2sq(&a, &b) })
        })
        .collect()
}

/// Fraction of points strictly below the diagonal `transport_cost = w2sq`.
pub fn below_diagonal_fraction(points: &[ScatterPoint]) -> f64 {
    points.iter().filter(|p| p.transport_cost < p.w2sq).count() as f64 / points.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_lie_on_the_two_arcs() {
        let x = two_moons(500, &mut ChaCha8Rng::seed_from_u64(0));
        let mut upper = 0;
        for r in x.rows() {
            let a = (r[0] * r[0] + r[1] * r[1]).sqrt();
            let b = ((r[0] - 1.0).powi(2) + (r[1] - 0.5).powi(2)).sqrt();
            if (a - 1.0).abs() < 1e-12 && r[1] >= 0.0 {
                upper += 1;
            } else {
                assert!((b - 1.0).abs() < 1e-12 && r[1] <= 0.5);
            }
        }
        assert!((200..300).contains(&upper), "{upper}");
    }

    #[test]
    fn slope_of_a_power_law() {
        let ks: Vec<f64> = (1..=1000).map(f64::from).collect();
        let ys: Vec<f64> = ks.iter().map(|k| 3.0 / (k * k)).collect();
        assert!((loglog_slope(&ks, &ys, 100.0, 1000.0).unwrap() + 2.0).abs() < 1e-12);
        assert!(loglog_slope(&ks, &ys, 2000.0, 3000.0).is_none());
    }

    #[test]
    fn zero_iterations_give_one_row() {
        let rows = gaussian_rates(3, 6, &[0.0, 1.0], 0, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].len(), 3);
    }

    #[test]
    fn identical_pair_sits_at_the_origin() {
        let a = wishart_sample(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(transport_cost(&a, &a, 0.0) < 1e-12);
        assert!(gaussian_w2sq(&a, &a) < 1e-10);
    }

    #[test]
    fn near_identity_channel_restores_observations() {
        let cfg = RestorationConfig {
            n_train: 256,
            n_eval: 128,
            channel: ChannelSpec::Awgn { sigma: 1e-4 },
            transport: TransportConfig::ode(8, crate::transport::Scheme::Heun),
            train: TrainConfig { outer_iters: 50, batch_size: 64, ..TrainConfig::default() },
            hidden: vec![16],
            ..RestorationConfig::default()
        };
        let run = run_twomoon(&cfg, 3, TrainHooks::default()).unwrap();
        assert!(run.w2_observed < 1e-3);
        assert!(run.w2 < 0.02, "{}", run.w2);
    }
}
