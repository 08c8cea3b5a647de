//! `stiffbench` command-line driver.
//!
//! Every subcommand accepts `--config FILE`, a flat `key = value` file whose
//! keys are the long flag names (`max_epochs` and `max-epochs` both work).
//! Flags given on the command line take precedence over the file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
//! error, 3 divergence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use stiffbench_core::datagen::{
    build_dataset, generate_trajectory, load_dataset, save_dataset, DataGenConfig, TrajectoryRecord,
};
use stiffbench_core::eval::{
    aggregate, error_decomposition, evaluate_rollouts, penetration_stats, read_metrics_csv, write_metrics_csv,
    LearnedPredictor, MetricRow, OraclePredictor, RolloutConfig,
};
use stiffbench_core::experiment::{
    architecture_1d, eval_trajectories, pool_indices, preset, run_1d_study, run_cell_on, CellSettings, Profile,
    Study1DSettings,
};
use stiffbench_core::nn::{Architecture, Checkpoint, ModelConfig, TargetMode};
use stiffbench_core::sim::{Stiffness, SystemParams, Trajectory};
use stiffbench_core::sim1d::{sample_1d_dataset, Config1D};
use stiffbench_core::training::{hyperparameter_sweep, train, write_sweep_csv, SweepSpace, TrainHyper};
use stiffbench_core::{rng, Error};

const CI_LEVEL: f64 = 0.95;

#[derive(Parser, Debug)]
#[command(name = "stiffbench", version, about = "Learned dynamics under stiff contact")]
struct Cli {
    /// Flat `key = value` file with default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample noisy velocity pairs of the bouncing point mass.
    #[command(args_override_self = true)]
    Gen1d(Gen1dArgs),
    /// Simulate cube-toss trajectories, one directory per stiffness.
    #[command(args_override_self = true)]
    Gen3d(Gen3dArgs),
    /// Train a velocity predictor on a trajectory directory.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Grid search over model and optimizer settings.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Error decomposition and rollout errors of a checkpoint.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Run a full study and write per-run and aggregate metrics.
    #[command(args_override_self = true)]
    Experiment(ExperimentArgs),
    /// Split experiment metrics into one table per plot.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Gen1dArgs {
    /// Contact stiffness, N/(kg·m).
    #[arg(long, default_value_t = 2500.0)]
    k: f64,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variance of the velocity noise, (m/s)².
    #[arg(long, default_value_t = 0.01)]
    noise_var: f64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gen3dArgs {
    #[arg(long, value_delimiter = ',', default_value = "hard,medium,soft")]
    stiffness: Vec<Stiffness>,
    /// Number of training-pool trajectories to write.
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    /// Number of evaluation trajectories to write.
    #[arg(long, default_value_t = 20)]
    n_eval: usize,
    /// Size of the training pool; evaluation indices start after it.
    #[arg(long, default_value_t = 10_000)]
    pool_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true")]
    noiseless: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "gru")]
    arch: Architecture,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Input window length; forced to 1 for the MLP.
    #[arg(long, default_value_t = 16)]
    history: usize,
    #[arg(long, default_value = "v_next")]
    target: TargetMode,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let base = match self.arch {
            Architecture::Mlp => ModelConfig::mlp(self.hidden),
            Architecture::Gru => ModelConfig::gru(self.hidden, self.history),
        };
        base.with_target(self.target)
    }
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
}

impl OptimArgs {
    fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            learning_rate: self.lr,
            weight_decay: self.wd,
            batch_size: self.batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..TrainHyper::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of trajectory files.
    #[arg(long)]
    data: PathBuf,
    /// Use only the first `n` trajectories.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Seeds the split, the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "gru")]
    arch: Architecture,
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<TargetMode>>,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    hiddens: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    histories: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    wds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    /// Seeds the split; replicate `r` trains with `seed + 2r`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training trajectories the checkpoint was fitted on.
    #[arg(long)]
    data: PathBuf,
    /// Held-out trajectories for rollouts.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 16)]
    start: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum System {
    #[value(name = "3d")]
    Cube,
    #[value(name = "1d")]
    Bounce,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, value_enum, default_value = "3d")]
    system: System,
    #[arg(long, value_delimiter = ',', default_value = "hard,soft")]
    stiffness: Vec<Stiffness>,
    /// Training-set sizes in trajectories.
    #[arg(long, value_delimiter = ',', default_value = "50,500")]
    sizes: Vec<usize>,
    /// Replicates per (stiffness, size).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    target: Option<TargetMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Evaluation trajectories per stiffness.
    #[arg(long, default_value_t = 50)]
    n_eval: usize,
    #[arg(long, default_value_t = 10_000)]
    pool_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stiffness values of the 1-D study, N/(kg·m).
    #[arg(long, value_delimiter = ',', default_value = "100,2500")]
    k: Vec<f64>,
    /// Models per setting in the 1-D study.
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    /// Learning-rate grid of the 1-D study.
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    /// Weight-decay grid of the 1-D study.
    #[arg(long, value_delimiter = ',')]
    wds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory written by `experiment`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Core(Error::InvalidData(e.to_string()))
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::Diverged(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Gen1d(a) => gen1d(a),
        Command::Gen3d(a) => gen3d(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Insert the flags of a `--config` file right after the subcommand name so
/// that later command-line flags override them.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            config = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (config, sub) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config `{path}`: {e}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected `key = value`", n + 1))?;
        extra.push(format!("--{}={}", k.trim().replace('_', "-"), v.trim()));
    }
    let mut out = argv[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn stiffness_label(k: f64) -> String {
    Stiffness::ALL
        .iter()
        .find(|s| s.k() == k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("k{k}"))
}

fn gen1d(a: Gen1dArgs) -> CliResult {
    let cfg = Config1D { noise_var: a.noise_var, ..Config1D::new(a.k) };
    let pairs = sample_1d_dataset(a.n, &cfg, &mut rng::stream(a.seed, rng::Purpose::OneDim, 0))?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["zdot_t", "zdot_next"])?;
    for (v0, v1) in pairs {
        w.write_record([v0.to_string(), v1.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn generate_parallel(
    pool: &rayon::ThreadPool,
    cfg: &DataGenConfig,
    prm: &SystemParams,
    indices: &[u64],
) -> CliResult<Vec<TrajectoryRecord>> {
    let recs: Vec<_> = pool.install(|| {
        indices
            .par_iter()
            .map(|&index| {
                generate_trajectory(cfg, prm, index).map(|trajectory| TrajectoryRecord {
                    index,
                    noisy: cfg.has_noise(),
                    trajectory,
                })
            })
            .collect()
    });
    Ok(recs.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn gen3d(a: Gen3dArgs) -> CliResult {
    if a.n_train > a.pool_size {
        return Err(Failure::Usage("--n-train exceeds --pool-size".into()));
    }
    let mut cfg = DataGenConfig { n_train_pool: a.pool_size, n_eval: a.n_eval, ..DataGenConfig::with_seed(a.seed) };
    if a.noiseless {
        cfg = cfg.noiseless();
    }
    cfg.validate()?;
    let pool = thread_pool(a.jobs)?;
    let train_idx: Vec<u64> = (0..a.n_train as u64).collect();
    let eval_idx: Vec<u64> = (0..a.n_eval).map(|i| cfg.eval_index(i)).collect();
    for st in &a.stiffness {
        let prm = st.params();
        let dir = a.out.join(st.name());
        let train = generate_parallel(&pool, &cfg, &prm, &train_idx)?;
        let eval = generate_parallel(&pool, &cfg, &prm, &eval_idx)?;
        save_dataset(&dir.join("train"), &train)?;
        save_dataset(&dir.join("eval"), &eval)?;
        let trajs: Vec<Trajectory> = train.into_iter().map(|r| r.trajectory).collect();
        let pen = if trajs.is_empty() { f64::NAN } else { penetration_stats(&trajs) };
        println!(
            "{st}: {} train, {} eval trajectories in {}; mean max penetration {pen:.2} mm",
            trajs.len(),
            eval.len(),
            dir.display()
        );
    }
    Ok(())
}

fn load_trajectories(dir: &Path, n: Option<usize>) -> CliResult<(SystemParams, Vec<Trajectory>)> {
    let mut recs = load_dataset(dir)?;
    if let Some(n) = n {
        if n > recs.len() {
            return Err(Failure::Usage(format!("{} holds {} trajectories, {n} requested", dir.display(), recs.len())));
        }
        recs.truncate(n);
    }
    let first = recs
        .first()
        .ok_or_else(|| Error::InvalidData(format!("no trajectories in {}", dir.display())))?;
    let prm = first.trajectory.params;
    if recs.iter().any(|r| r.trajectory.params != prm) {
        return Err(Error::InvalidData(format!("mixed system parameters in {}", dir.display())).into());
    }
    Ok((prm, recs.into_iter().map(|r| r.trajectory).collect()))
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let (prm, trajs) = load_trajectories(&a.data, a.n)?;
    let cfg = a.model.config();
    let data = build_dataset(&trajs, cfg.history, a.seed)?;
    let res = train(&cfg, &data, &a.optim.hyper(a.seed))?;
    let mut meta = BTreeMap::new();
    meta.insert("stiffness".to_string(), prm.stiffness.to_string());
    meta.insert("n_traj".to_string(), trajs.len().to_string());
    meta.insert("seed".to_string(), a.seed.to_string());
    meta.insert("learning_rate".to_string(), a.optim.lr.to_string());
    meta.insert("weight_decay".to_string(), a.optim.wd.to_string());
    meta.insert("epochs".to_string(), res.epochs.to_string());
    meta.insert("best_epoch".to_string(), res.best_epoch.to_string());
    meta.insert("train_loss".to_string(), res.train_loss.to_string());
    meta.insert("val_loss".to_string(), res.val_loss.to_string());
    if let Some(t) = res.test_loss {
        meta.insert("test_loss".to_string(), t.to_string());
    }
    let ck = Checkpoint { model: res.model, normalization: data.normalization.clone(), metadata: meta };
    ck.save(&a.out)?;
    if let Some(log) = &a.log {
        let mut w = csv::Writer::from_path(log)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &res.history {
            w.write_record([e.epoch.to_string(), e.train.to_string(), e.val.to_string()])?;
        }
        w.flush()?;
    }
    println!(
        "trained {} on {} trajectories: {} epochs (best {}), train {:.4e}, val {:.4e}, test {:.4e}",
        cfg.architecture,
        trajs.len(),
        res.epochs,
        res.best_epoch,
        res.train_loss,
        res.val_loss,
        res.test_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let (_, trajs) = load_trajectories(&a.data, a.n)?;
    let full = SweepSpace::full();
    let space = SweepSpace {
        targets: a.targets.clone().unwrap_or(full.targets),
        learning_rates: a.lrs.clone().unwrap_or(full.learning_rates),
        hidden_sizes: a.hiddens.clone().unwrap_or(full.hidden_sizes),
        histories: match a.arch {
            Architecture::Mlp => vec![1],
            Architecture::Gru => a.histories.clone().unwrap_or(full.histories),
        },
        weight_decays: a.wds.clone().unwrap_or(full.weight_decays),
    };
    let base = match a.arch {
        Architecture::Mlp => ModelConfig::mlp(64),
        Architecture::Gru => ModelConfig::gru(64, 16),
    };
    let hyper = TrainHyper {
        batch_size: a.batch,
        max_epochs: a.max_epochs,
        patience: a.patience,
        ..TrainHyper::default()
    };
    let points = space.points(&base, &hyper);
    let seed = a.seed;
    let data = |h: usize| build_dataset(&trajs, h, seed);
    let res = hyperparameter_sweep(points, a.replicates, a.seed, &data, a.jobs)?;
    write_sweep_csv(&a.out, &res)?;
    let b = &res.points[res.best];
    println!(
        "best of {} points: target {}, lr {}, hidden {}, history {}, wd {} (mean test loss {:.4e})",
        res.points.len(),
        b.model.target,
        b.hyper.learning_rate,
        b.model.hidden_size,
        b.model.history,
        b.hyper.weight_decay,
        res.mean_test[res.best]
    );
    Ok(())
}

fn meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str, path: &Path) -> CliResult<T> {
    ck.metadata.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| {
        Failure::Core(Error::Malformed { path: path.to_path_buf(), reason: format!("missing metadata `{key}`") })
    })
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let n_traj: usize = meta(&ck, "n_traj", &a.checkpoint)?;
    let seed: u64 = meta(&ck, "seed", &a.checkpoint)?;
    let (prm, trajs) = load_trajectories(&a.data, Some(n_traj))?;
    let (eval_prm, evals) = load_trajectories(&a.eval_data, a.n_eval)?;
    if eval_prm != prm {
        return Err(Error::InvalidData("training and evaluation data use different system parameters".into()).into());
    }
    let data = build_dataset(&trajs, ck.model.config.history, seed)?;
    if data.normalization != ck.normalization {
        return Err(Error::InvalidData("checkpoint normalization does not match the training data".into()).into());
    }
    let d = error_decomposition(&ck.model, &prm, &data);
    let rc = RolloutConfig { horizon: a.horizon, start: a.start, dt: prm.dt };
    let learned = LearnedPredictor { model: &ck.model, normalization: &ck.normalization };
    let model_ro = evaluate_rollouts(&learned, &evals, &rc, prm.side)?;
    let oracle_ro = evaluate_rollouts(&OraclePredictor(prm), &evals, &rc, prm.side)?;
    let values = [
        ("oracle_train_loss", d.oracle_train),
        ("model_train_loss", d.model_train),
        ("model_test_loss", d.model_test),
        ("training_gap", d.training_gap),
        ("generalization_gap", d.generalization_gap),
        ("e_pos", model_ro.e_pos),
        ("e_rot", model_ro.e_rot),
        ("oracle_e_pos", oracle_ro.e_pos),
        ("oracle_e_rot", oracle_ro.e_rot),
        ("diverged_rollouts", model_ro.diverged as f64),
    ];
    let rows: Vec<MetricRow> = values
        .iter()
        .map(|(m, v)| MetricRow {
            stiffness: stiffness_label(prm.stiffness),
            n_traj,
            architecture: ck.model.config.architecture.to_string(),
            seed: Some(seed),
            metric: m.to_string(),
            value: *v,
            ci: None,
            n: 1,
        })
        .collect();
    write_metrics_csv(&a.out, &rows)?;
    for (m, v) in values {
        println!("{m:>20} {v:.6e}");
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult {
    std::fs::create_dir_all(&a.out)?;
    match a.system {
        System::Cube => experiment_3d(&a),
        System::Bounce => experiment_1d(&a),
    }
}

fn cell_settings(a: &ExperimentArgs, st: Stiffness, n_traj: usize) -> CliResult<CellSettings> {
    let (mut model, mut hyper) = preset(a.profile, st, n_traj);
    if let Some(arch) = a.arch {
        model = match arch {
            Architecture::Mlp => ModelConfig::mlp(model.hidden_size),
            Architecture::Gru => ModelConfig::gru(model.hidden_size, model.history),
        }
        .with_target(model.target);
    }
    if let Some(h) = a.hidden {
        model.hidden_size = h;
    }
    if let (Some(h), Architecture::Gru) = (a.history, model.architecture) {
        model.history = h;
    }
    if let Some(t) = a.target {
        model.target = t;
    }
    hyper.learning_rate = a.lr.unwrap_or(hyper.learning_rate);
    hyper.weight_decay = a.wd.unwrap_or(hyper.weight_decay);
    hyper.batch_size = a.batch.unwrap_or(hyper.batch_size);
    hyper.max_epochs = a.max_epochs.unwrap_or(hyper.max_epochs);
    hyper.patience = a.patience.unwrap_or(hyper.patience);
    model.validate()?;
    hyper.validate()?;
    let datagen = DataGenConfig { n_train_pool: a.pool_size, n_eval: a.n_eval, ..DataGenConfig::with_seed(a.seed) };
    datagen.validate()?;
    Ok(CellSettings { datagen, model, hyper, rollout: RolloutConfig::default(), n_eval: a.n_eval })
}

fn experiment_3d(a: &ExperimentArgs) -> CliResult {
    if a.seeds == 0 || a.sizes.is_empty() || a.stiffness.is_empty() {
        return Err(Failure::Usage("need at least one stiffness, size and seed".into()));
    }
    let pool = thread_pool(a.jobs)?;
    let mut rows = Vec::new();
    for &st in &a.stiffness {
        let settings: Vec<CellSettings> =
            a.sizes.iter().map(|&n| cell_settings(a, st, n)).collect::<CliResult<_>>()?;
        let prm = st.params();
        let evals = eval_trajectories(&settings[0].datagen, st, a.n_eval)?;
        let cells: Vec<(usize, u64)> = (0..a.sizes.len())
            .flat_map(|i| (0..a.seeds as u64).map(move |r| (i, a.seed + 2 * r)))
            .collect();
        let results: Vec<_> = pool.install(|| {
            cells
                .par_iter()
                .map(|&(i, seed)| {
                    let (n, settings) = (a.sizes[i], &settings[i]);
                    let idx = pool_indices(&settings.datagen, n, seed)?;
                    let trajs = idx
                        .into_iter()
                        .map(|i| generate_trajectory(&settings.datagen, &prm, i))
                        .collect::<Result<Vec<_>, _>>()?;
                    run_cell_on(st, &trajs, &evals, seed, settings)
                })
                .collect()
        });
        for res in results {
            let cell = res?;
            eprintln!(
                "{st} N={} seed={}: training gap {:.3e}, generalization gap {:.3e}, rollout {:.2}% / {:.2} deg",
                cell.n_traj,
                cell.seed,
                cell.decomposition.training_gap,
                cell.decomposition.generalization_gap,
                cell.model_rollout.e_pos,
                cell.model_rollout.e_rot
            );
            rows.extend(cell.rows());
        }
    }
    let agg = aggregate(&rows, CI_LEVEL);
    rows.extend(agg);
    let path = a.out.join("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn experiment_1d(a: &ExperimentArgs) -> CliResult {
    let defaults = Study1DSettings::default();
    let settings = Study1DSettings {
        replicates: a.replicates,
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        learning_rates: a.lrs.clone().unwrap_or(defaults.learning_rates.clone()),
        weight_decays: a.wds.clone().unwrap_or(defaults.weight_decays.clone()),
        hidden: a.hidden.unwrap_or(defaults.hidden),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        patience: a.patience.unwrap_or(defaults.patience),
        seed: a.seed,
        ..defaults
    };
    let pool = thread_pool(a.jobs)?;
    let studies: Vec<_> = pool.install(|| a.k.par_iter().map(|&k| run_1d_study(k, &settings)).collect());
    let mut rows = Vec::new();
    let mut grid_w = csv::Writer::from_path(a.out.join("grid_1d.csv"))?;
    grid_w.write_record([
        "k", "learning_rate", "weight_decay", "mean_train_loss", "mean_ground_truth_mse", "prediction_variance",
        "selected",
    ])?;
    let mut pred_w = csv::Writer::from_path(a.out.join("predictions_1d.csv"))?;
    pred_w.write_record(["k", "zdot_t", "truth", "mean", "std"])?;
    for study in studies {
        let study = study?;
        let label = format!("k{}", study.k);
        for (i, p) in study.points.iter().enumerate() {
            grid_w.write_record([
                study.k.to_string(),
                p.learning_rate.to_string(),
                p.weight_decay.to_string(),
                p.mean_train_loss().to_string(),
                p.mean_ground_truth_mse().to_string(),
                p.prediction_variance().to_string(),
                (i == study.best).to_string(),
            ])?;
        }
        let sel = study.selected();
        let (mean, std) = (sel.mean_prediction(), sel.std_prediction());
        for j in 0..study.grid.len() {
            pred_w.write_record([
                study.k.to_string(),
                study.grid[j].to_string(),
                study.truth[j].to_string(),
                mean[j].to_string(),
                std[j].to_string(),
            ])?;
        }
        let row = |seed: Option<u64>, metric: &str, value: f64, n: usize| MetricRow {
            stiffness: label.clone(),
            n_traj: settings.n_train,
            architecture: architecture_1d(),
            seed,
            metric: metric.to_string(),
            value,
            ci: None,
            n,
        };
        for r in 0..sel.train_losses.len() {
            rows.push(row(Some(r as u64), "train_loss", sel.train_losses[r], 1));
            rows.push(row(Some(r as u64), "ground_truth_mse", sel.ground_truth_mse[r], 1));
        }
        rows.push(row(None, "prediction_variance", sel.prediction_variance(), sel.predictions.len()));
        println!(
            "k={}: lr {} wd {}; train loss {:.4e}, ground-truth mse {:.4e}, prediction variance {:.4e}",
            study.k,
            sel.learning_rate,
            sel.weight_decay,
            sel.mean_train_loss(),
            sel.mean_ground_truth_mse(),
            sel.prediction_variance()
        );
    }
    grid_w.flush()?;
    pred_w.flush()?;
    let agg = aggregate(&rows, CI_LEVEL);
    rows.extend(agg);
    write_metrics_csv(&a.out.join("metrics_1d.csv"), &rows)?;
    Ok(())
}

/// Output table name and metric for each plot of the 3-D study.
const REPORT_TABLES: [(&str, &str); 4] = [
    ("training_gap.csv", "training_gap"),
    ("generalization_gap.csv", "generalization_gap"),
    ("rollout_position.csv", "e_pos"),
    ("rollout_rotation.csv", "e_rot"),
];

fn report(a: ReportArgs) -> CliResult {
    std::fs::create_dir_all(&a.out)?;
    let mut written = 0;
    let metrics = a.input.join("metrics.csv");
    if metrics.exists() {
        let per_run: Vec<MetricRow> = read_metrics_csv(&metrics)?.into_iter().filter(|r| r.seed.is_some()).collect();
        for (file, metric) in REPORT_TABLES {
            let mut rows: Vec<MetricRow> = per_run.iter().filter(|r| r.metric == metric).cloned().collect();
            rows.extend(aggregate(&rows, CI_LEVEL));
            write_metrics_csv(&a.out.join(file), &rows)?;
            written += 1;
        }
    }
    let bounce = a.input.join("metrics_1d.csv");
    if bounce.exists() {
        let rows = read_metrics_csv(&bounce)?;
        let summary: Vec<MetricRow> = rows.into_iter().filter(|r| r.seed.is_none()).collect();
        write_metrics_csv(&a.out.join("bounce_summary.csv"), &summary)?;
        std::fs::copy(a.input.join("predictions_1d.csv"), a.out.join("bounce_predictions.csv"))?;
        written += 2;
    }
    if written == 0 {
        return Err(Error::InvalidData(format!("no experiment metrics in {}", a.input.display())).into());
    }
    println!("wrote {written} tables to {}", a.out.display());
    Ok(())
}
