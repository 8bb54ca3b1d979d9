mod config;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scsi_core::experiments::{
    below_diagonal_fraction, gaussian_rates, loglog_slope, run_restoration, run_twomoon, w2_scatter,
    RestorationConfig, RestorationRun,
};
use scsi_core::nn::{load_checkpoint, Activation, AdamConfig};
use scsi_core::trainer::{NeuralModel, Objective, Observations, TrainConfig, TrainHooks};
use scsi_core::{
    restore, w2_sliced, w2sq_exact, ChannelSpec, Mode, SampleSet, Schedule, ScheduleKind, Scheme, TransportConfig,
};
use serde_json::json;

use crate::config::{content_hash, DataSpec, EvalSection, ExperimentConfig, ModelSection};
use crate::output::{read_points, write_csv, write_points, Plot, Series};

#[derive(Parser, Debug)]
#[command(name = "scsi", version, about = "Self-consistent stochastic interpolants")]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Covariance error of the exact Gaussian iteration for several diffusion levels.
    GaussianRates {
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Wishart degrees of freedom (defaults to 2d).
        #[arg(long)]
        dof: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
    /// Transport discrepancy against squared W2 for random Wishart pairs.
    W2Scatter {
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long)]
        dof: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// Restore two-moon data corrupted by additive Gaussian noise.
    Twomoon(TwomoonArgs),
    /// Run an experiment described by a TOML file.
    Run { config: PathBuf },
    /// Squared W2 distance between two point sets.
    Eval {
        a: PathBuf,
        b: PathBuf,
        /// Use the sliced distance with this many projections.
        #[arg(long)]
        sliced: Option<usize>,
    },
    /// Apply a trained transport to observations.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observations; columns past the state dimension are latents.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "ode-linear")]
        schedule: ScheduleKind,
        #[command(flatten)]
        transport: TransportArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Ode,
    Sde,
}

#[derive(Args, Debug, Clone)]
struct TransportArgs {
    /// Integration steps.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, value_enum, default_value = "ode")]
    mode: ModeArg,
    /// Diffusion scale in SDE mode.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Defaults to heun for ode and euler-maruyama for sde.
    #[arg(long)]
    scheme: Option<SchemeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Euler,
    Heun,
    EulerMaruyama,
}

impl TransportArgs {
    fn config(&self) -> TransportConfig {
        let mode = match self.mode {
            ModeArg::Ode => Mode::Ode,
            ModeArg::Sde => Mode::Sde,
        };
        let scheme = match (self.scheme, mode) {
            (Some(SchemeArg::Euler), _) => Scheme::Euler,
            (Some(SchemeArg::Heun), _) => Scheme::Heun,
            (Some(SchemeArg::EulerMaruyama), _) | (None, Mode::Sde) => Scheme::EulerMaruyama,
            (None, Mode::Ode) => Scheme::Heun,
        };
        TransportConfig {
            steps: self.steps,
            mode,
            epsilon: if mode == Mode::Sde { self.epsilon } else { 0.0 },
            scheme,
            ..TransportConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TwomoonArgs {
    /// Channel noise level.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[command(flatten)]
    transport: TransportArgs,
    /// Outer iterations K.
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    /// Optimizer steps per outer iteration.
    #[arg(long, default_value_t = 1)]
    inner: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    resample: usize,
    #[arg(long, default_value_t = 0.9)]
    mix_p: f64,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "128,128,128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_eval: usize,
    /// Evaluate W2 every this many outer iterations (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

impl TwomoonArgs {
    fn experiment(&self, seed: u64) -> ExperimentConfig {
        let transport = self.transport.config();
        let (schedule, objective) = match transport.mode {
            Mode::Ode => (Schedule::ode_linear(), Objective::Drift),
            Mode::Sde => (Schedule::sde_linear(), Objective::DriftAndDenoiser),
        };
        ExperimentConfig {
            name: "twomoon".into(),
            seed: Some(seed),
            output: None,
            data: DataSpec::TwoMoon { n_train: self.n_train, n_eval: self.n_eval },
            schedule,
            channel: ChannelSpec::Awgn { sigma: self.sigma },
            transport,
            train: TrainConfig {
                outer_iters: self.iters,
                inner_steps: self.inner,
                mix_p: self.mix_p,
                batch_size: self.batch,
                resample_factor: self.resample,
                objective,
                lr: self.lr,
                record_every: self.iters.div_ceil(1000).max(1),
                ..TrainConfig::default()
            },
            model: ModelSection { hidden: self.hidden.clone(), activation: Activation::Gelu },
            eval: EvalSection { every: self.eval_every },
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    match cli.command {
        Command::GaussianRates { d, dof, eps, iters } => cmd_gaussian_rates(&cli.out, d, dof.unwrap_or(2 * d), &eps, iters, cli.seed),
        Command::W2Scatter { d, dof, scales, pairs, eps } => {
            cmd_w2_scatter(&cli.out, d, dof.unwrap_or(2 * d), &scales, pairs, eps, cli.seed)
        }
        Command::Twomoon(args) => {
            if !(args.sigma > 0.0) {
                bail!("--sigma must be > 0");
            }
            let cfg = args.experiment(cli.seed);
            cfg.validate()?;
            cmd_experiment(&cfg, &cli.out, cli.seed)
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cfg.output.clone().unwrap_or(cli.out);
            let seed = cfg.seed.unwrap_or(cli.seed);
            cmd_experiment(&cfg, &out, seed)
        }
        Command::Eval { a, b, sliced } => cmd_eval(&cli.out, &a, &b, sliced, cli.seed),
        Command::Restore { checkpoint, input, schedule, transport } => {
            cmd_restore(&cli.out, &checkpoint, &input, Schedule::with_defaults(schedule), &transport.config(), cli.seed)
        }
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn options_hash(value: &serde_json::Value) -> String {
    content_hash(value.to_string().as_bytes())
}

fn cmd_gaussian_rates(out: &Path, d: usize, dof: usize, eps: &[f64], iters: usize, seed: u64) -> Result<()> {
    prepare_out(out)?;
    let hash = options_hash(&json!({"command": "gaussian-rates", "d": d, "dof": dof, "eps": eps, "iters": iters, "seed": seed}));
    if iters == 0 {
        write_csv(&out.join("rates.csv"), &hash, &["k", "eps", "error_sq"], std::iter::empty())?;
        return Ok(());
    }
    let rows = gaussian_rates(d, dof, eps, iters, seed)?;
    let long = eps.iter().enumerate().flat_map(|(j, e)| {
        rows.iter().map(move |r| vec![(r[0] as usize).to_string(), e.to_string(), r[j + 1].to_string()])
    });
    write_csv(&out.join("rates.csv"), &hash, &["k", "eps", "error_sq"], long)?;

    let ks: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mut series = Vec::new();
    for (j, e) in eps.iter().enumerate() {
        let ys: Vec<f64> = rows.iter().map(|r| r[j + 1]).collect();
        match loglog_slope(&ks, &ys, 100.0, 1000.0) {
            Some(s) => println!("eps={e}: log-log slope over k in [100, 1000] = {s:.3}"),
            None => println!("eps={e}: not enough iterations for a slope over k in [100, 1000]"),
        }
        series.push(Series {
            label: format!("eps = {e}"),
            points: ks.iter().copied().zip(ys).filter(|(k, _)| *k >= 1.0).collect(),
            line: true,
            dashed: false,
        });
    }
    let anchor = rows.get(1).map_or(1.0, |r| r[1..].iter().copied().fold(0.0, f64::max));
    for (label, p) in [("1/k", 1), ("1/k^2", 2)] {
        series.push(Series {
            label: label.into(),
            points: ks.iter().filter(|k| **k >= 1.0).map(|k| (*k, anchor / k.powi(p))).collect(),
            line: true,
            dashed: true,
        });
    }
    Plot {
        title: format!("covariance error, d = {d}, dof = {dof}"),
        x_label: "iteration k".into(),
        y_label: "squared Frobenius error".into(),
        log_x: true,
        log_y: true,
        diagonal: false,
        series,
    }
    .save(&out.join("rates.svg"))
}

fn cmd_w2_scatter(out: &Path, d: usize, dof: usize, scales: &[f64], pairs: usize, eps: f64, seed: u64) -> Result<()> {
    if pairs == 0 {
        bail!("--pairs must be >= 1");
    }
    prepare_out(out)?;
    let hash = options_hash(
        &json!({"command": "w2-scatter", "d": d, "dof": dof, "scales": scales, "pairs": pairs, "eps": eps, "seed": seed}),
    );
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (i, &scale) in scales.iter().enumerate() {
        let pts = w2_scatter(d, dof, scale, pairs, eps, seed.wrapping_add(i as u64))?;
        println!("scale={scale}: fraction below diagonal = {:.4}", below_diagonal_fraction(&pts));
        // normalize so that different scales share one picture
        let norm = pts.iter().map(|p| p.w2sq).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        series.push(Series {
            label: format!("scale {scale}"),
            points: pts.iter().map(|p| (p.w2sq / norm, p.transport_cost / norm)).collect(),
            line: false,
            dashed: false,
        });
        rows.extend(pts.into_iter().map(|p| vec![scale.to_string(), p.transport_cost.to_string(), p.w2sq.to_string()]));
    }
    write_csv(&out.join("scatter.csv"), &hash, &["scale", "transport_cost", "w2sq"], rows)?;
    Plot {
        title: format!("transport cost vs W2^2, d = {d}"),
        x_label: "W2^2 (normalized per scale)".into(),
        y_label: "transport cost (same normalization)".into(),
        log_x: false,
        log_y: false,
        diagonal: true,
        series,
    }
    .save(&out.join("scatter.svg"))
}

fn load_clean(cfg: &ExperimentConfig) -> Result<Option<ndarray::Array2<f64>>> {
    match &cfg.data {
        DataSpec::TwoMoon { .. } => Ok(None),
        DataSpec::Csv { path, .. } => Ok(Some(read_points(path)?)),
    }
}

fn cmd_experiment(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<()> {
    prepare_out(out)?;
    let toml_text = cfg.to_toml()?;
    let hash = content_hash(toml_text.as_bytes());
    std::fs::write(out.join("config.toml"), &toml_text)?;
    let restoration: RestorationConfig = cfg.restoration();
    let start = Instant::now();
    let hooks = TrainHooks {
        checkpoint_dir: Some(out.join("checkpoints")),
        on_record: Some(Box::new(|r| {
            let w2 = r.w2.map_or(String::new(), |w| format!(" w2 {w:.4}"));
            eprintln!("k {:>7} loss {:.5}{w2} ({:.0}s)", r.k, r.mean_loss, r.wall_time);
        })),
        ..TrainHooks::default()
    };
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let run: RestorationRun = match load_clean(cfg)? {
        None => run_twomoon(&restoration, seed, hooks)?,
        Some(clean) => run_restoration(clean, &restoration, seed, hooks)?,
    };
    let elapsed = start.elapsed().as_secs_f64();

    let rows = run.outcome.records.iter().map(|r| {
        vec![r.k.to_string(), r.mean_loss.to_string(), r.w2.map_or(String::new(), |w| w.to_string())]
    });
    write_csv(&out.join("run.csv"), &hash, &["k", "mean_loss", "w2"], rows)?;
    write_points(&out.join("restored.csv"), &hash, &run.restored)?;
    write_points(&out.join("observed.csv"), &hash, &run.observed)?;
    write_points(&out.join("truth.csv"), &hash, &run.truth)?;
    if run.truth.ncols() >= 2 {
        let pts = |a: &ndarray::Array2<f64>| a.rows().into_iter().map(|r| (r[0], r[1])).collect();
        Plot {
            title: format!("{}: W2 = {:.4}", cfg.name, run.w2),
            x_label: "x0".into(),
            y_label: "x1".into(),
            log_x: false,
            log_y: false,
            diagonal: false,
            series: vec![
                Series { label: "observed".into(), points: pts(&run.observed), line: false, dashed: false },
                Series { label: "restored".into(), points: pts(&run.restored), line: false, dashed: false },
                Series { label: "truth".into(), points: pts(&run.truth), line: false, dashed: false },
            ],
        }
        .save(&out.join("scatter.svg"))?;
    }
    let manifest = json!({
        "name": cfg.name,
        "seed": seed,
        "config_hash": hash,
        "w2": run.w2,
        "w2_observed": run.w2_observed,
        "regenerated_fraction": run.outcome.regenerated_fraction,
        "wall_time_s": elapsed,
        "last_checkpoint": run.outcome.records.last().and_then(|r| r.checkpoint.clone()),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("w2 {:.5} (observations {:.5})", run.w2, run.w2_observed);
    Ok(())
}

fn cmd_eval(out: &Path, a: &Path, b: &Path, sliced: Option<usize>, seed: u64) -> Result<()> {
    let sa = SampleSet::new(read_points(a)?)?;
    let sb = SampleSet::new(read_points(b)?)?;
    let (metric, value) = match sliced {
        Some(n) => ("w2sq_sliced", w2_sliced(&sa, &sb, n, &mut ChaCha8Rng::seed_from_u64(seed))?),
        None => ("w2sq_exact", w2sq_exact(&sa, &sb)?),
    };
    println!("{metric} {value}");
    println!("w2 {}", value.sqrt());
    prepare_out(out)?;
    let hash = options_hash(&json!({"command": "eval", "a": a, "b": b, "sliced": sliced, "seed": seed}));
    write_csv(&out.join("eval.csv"), &hash, &["metric", "value"], [vec![metric.to_string(), value.to_string()]])
}

fn cmd_restore(
    out: &Path,
    checkpoint: &Path,
    input: &Path,
    schedule: Schedule,
    transport: &TransportConfig,
    seed: u64,
) -> Result<()> {
    transport.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = NeuralModel::from_checkpoint(&ckpt, AdamConfig::default())?;
    let arch = model.networks()[0].architecture().clone();
    let data = read_points(input)?;
    if data.ncols() != arch.state_dim + arch.latent_dim {
        bail!(
            "{} has {} columns; the checkpoint expects {} state and {} latent columns",
            input.display(),
            data.ncols(),
            arch.state_dim,
            arch.latent_dim
        );
    }
    let y = data.slice(ndarray::s![.., ..arch.state_dim]).to_owned();
    let latent = (arch.latent_dim > 0).then(|| data.slice(ndarray::s![.., arch.state_dim..]).to_owned());
    let obs = Observations::new(y, latent)?;
    let x = restore(&model, transport, &schedule, &obs, &mut ChaCha8Rng::seed_from_u64(seed))?;
    prepare_out(out)?;
    let hash = options_hash(&json!({
        "command": "restore", "checkpoint": checkpoint, "input": input, "schedule": schedule,
        "transport": transport, "seed": seed,
    }));
    write_points(&out.join("restored.csv"), &hash, &x)?;
    println!("restored {} points to {}", x.nrows(), out.join("restored.csv").display());
    Ok(())
}
