//! End-to-end experiment cells shared by the command-line runner and the
//! acceptance suite.
//!
//! A 3-D cell is one (stiffness, data-set size, seed) triple: sample `N`
//! trajectories from the training pool, slice and split them, train a
//! predictor, and measure the error decomposition and rollout errors on a
//! fixed set of evaluation trajectories. The 1-D study trains replicate MLPs
//! on tiny noisy data sets of the bouncing point mass.

use rand::seq::index::sample;

use crate::datagen::{build_dataset, generate_trajectories, DataGenConfig};
use crate::error::{Error, Result};
use crate::eval::{
    error_decomposition, evaluate_rollouts, ErrorDecomposition, LearnedPredictor, MetricRow, OraclePredictor,
    RolloutConfig, RolloutSummary,
};
use crate::nn::{Architecture, ModelConfig, TargetMode};
use crate::rng::{self, Purpose};
use crate::sim::{Stiffness, Trajectory};
use crate::sim1d::{sample_1d_dataset, velocity_map, Config1D};
use crate::training::{train_examples, train_with_retry, Examples, Split, TrainHyper, TrainResult};

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// The tuned values reported for each stiffness (hidden 128, patience 30,
    /// per-stiffness learning rate and weight decay).
    Full,
    /// Reduced model and epoch budget that runs on a single core.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidConfig(format!("unknown profile `{other}`"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

/// Epoch cap of the desk profile. Small data sets get more epochs so that
/// every size sees a few thousand optimizer steps.
pub fn desk_epoch_cap(n_traj: usize) -> usize {
    (30_000 / n_traj.max(1)).clamp(150, 300)
}

/// Model and optimizer settings for a stiffness and data-set size under a
/// profile.
pub fn preset(profile: Profile, stiffness: Stiffness, n_traj: usize) -> (ModelConfig, TrainHyper) {
    match profile {
        Profile::Full => {
            let (lr, wd) = match stiffness {
                Stiffness::Hard => (1e-4, 0.0),
                Stiffness::Medium | Stiffness::Soft => (1e-5, 4e-5),
            };
            (
                ModelConfig::gru(128, 16).with_target(TargetMode::NextVelocity),
                TrainHyper { learning_rate: lr, weight_decay: wd, ..TrainHyper::default() },
            )
        }
        Profile::Desk => (
            ModelConfig::gru(64, 16),
            TrainHyper {
                learning_rate: 1e-3,
                weight_decay: 0.0,
                batch_size: 64,
                max_epochs: desk_epoch_cap(n_traj),
                ..TrainHyper::default()
            },
        ),
    }
}

/// Everything needed to run 3-D cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSettings {
    pub datagen: DataGenConfig,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub rollout: RolloutConfig,
    /// Number of evaluation trajectories used for rollouts.
    pub n_eval: usize,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub stiffness: Stiffness,
    pub n_traj: usize,
    pub seed: u64,
    pub decomposition: ErrorDecomposition,
    pub model_rollout: RolloutSummary,
    pub oracle_rollout: RolloutSummary,
    pub training: TrainResult,
}

impl CellResult {
    pub fn rows(&self) -> Vec<MetricRow> {
        let d = &self.decomposition;
        let metrics = [
            ("oracle_train_loss", d.oracle_train),
            ("model_train_loss", d.model_train),
            ("model_test_loss", d.model_test),
            ("training_gap", d.training_gap),
            ("generalization_gap", d.generalization_gap),
            ("e_pos", self.model_rollout.e_pos),
            ("e_rot", self.model_rollout.e_rot),
            ("oracle_e_pos", self.oracle_rollout.e_pos),
            ("oracle_e_rot", self.oracle_rollout.e_rot),
            ("diverged_rollouts", self.model_rollout.diverged as f64),
            ("epochs", self.training.epochs as f64),
        ];
        metrics
            .iter()
            .map(|(m, v)| MetricRow {
                stiffness: self.stiffness.to_string(),
                n_traj: self.n_traj,
                architecture: self.training.model.config.architecture.to_string(),
                seed: Some(self.seed),
                metric: m.to_string(),
                value: *v,
                ci: None,
                n: 1,
            })
            .collect()
    }
}

/// Pool indices of the `n` training trajectories used by `seed`.
pub fn pool_indices(cfg: &DataGenConfig, n: usize, seed: u64) -> Result<Vec<u64>> {
    if n == 0 || n > cfg.n_train_pool {
        return Err(Error::InvalidConfig(format!(
            "data-set size {n} must be in 1..={}",
            cfg.n_train_pool
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Experiment, 0);
    let mut idx: Vec<u64> = sample(&mut rng, cfg.n_train_pool, n).into_iter().map(|i| i as u64).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Evaluation trajectories shared by every cell of a stiffness.
pub fn eval_trajectories(cfg: &DataGenConfig, stiffness: Stiffness, n_eval: usize) -> Result<Vec<Trajectory>> {
    Ok(generate_trajectories(cfg, &stiffness.params(), (0..n_eval).map(|i| cfg.eval_index(i)))?
        .into_iter()
        .map(|r| r.trajectory)
        .collect())
}

/// Train on `train_trajs` and evaluate against `eval_trajs`. A diverged
/// training run is retried once with `seed + 1`; the seed that produced the
/// model is reported.
pub fn run_cell_on(
    stiffness: Stiffness,
    train_trajs: &[Trajectory],
    eval_trajs: &[Trajectory],
    seed: u64,
    settings: &CellSettings,
) -> Result<CellResult> {
    let prm = stiffness.params();
    let data = build_dataset(train_trajs, settings.model.history, seed)?;
    let hyper = TrainHyper { seed, ..settings.hyper.clone() };
    let (seed, training) = train_with_retry(&settings.model, &data, &hyper);
    let training = training?;
    let decomposition = error_decomposition(&training.model, &prm, &data);
    let predictor = LearnedPredictor { model: &training.model, normalization: &data.normalization };
    let rc = RolloutConfig { dt: prm.dt, ..settings.rollout };
    let model_rollout = evaluate_rollouts(&predictor, eval_trajs, &rc, prm.side)?;
    let oracle_rollout = evaluate_rollouts(&OraclePredictor(prm), eval_trajs, &rc, prm.side)?;
    Ok(CellResult {
        stiffness,
        n_traj: train_trajs.len(),
        seed,
        decomposition,
        model_rollout,
        oracle_rollout,
        training,
    })
}

/// Generate the data of one cell and run it.
pub fn run_cell(stiffness: Stiffness, n_traj: usize, seed: u64, settings: &CellSettings) -> Result<CellResult> {
    let prm = stiffness.params();
    let idx = pool_indices(&settings.datagen, n_traj, seed)?;
    let train_trajs: Vec<Trajectory> =
        generate_trajectories(&settings.datagen, &prm, idx)?.into_iter().map(|r| r.trajectory).collect();
    let eval_trajs = eval_trajectories(&settings.datagen, stiffness, settings.n_eval)?;
    run_cell_on(stiffness, &train_trajs, &eval_trajs, seed, settings)
}

/// Settings of the replicate study on the bouncing point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Study1DSettings {
    pub replicates: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Number of evenly spaced evaluation points over the velocity range.
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for Study1DSettings {
    fn default() -> Self {
        Study1DSettings {
            replicates: 100,
            n_train: 20,
            n_val: 20,
            hidden: 128,
            batch_size: 4,
            patience: 10,
            max_epochs: 5000,
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            weight_decays: vec![1e-2, 1e-4, 0.0],
            grid_points: 200,
            seed: 0,
        }
    }
}

/// Replicate statistics at one (learning rate, weight decay) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Study1DPoint {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_losses: Vec<f64>,
    pub ground_truth_mse: Vec<f64>,
    /// Per-model predictions on the grid, `replicates × grid_points`.
    pub predictions: Vec<Vec<f64>>,
}

impl Study1DPoint {
    pub fn mean_train_loss(&self) -> f64 {
        mean(&self.train_losses)
    }

    pub fn mean_ground_truth_mse(&self) -> f64 {
        mean(&self.ground_truth_mse)
    }

    /// Across-model variance of the prediction, averaged over the grid.
    pub fn prediction_variance(&self) -> f64 {
        let r = self.predictions.len() as f64;
        let g = self.predictions[0].len();
        (0..g)
            .map(|j| {
                let m = self.predictions.iter().map(|p| p[j]).sum::<f64>() / r;
                self.predictions.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / r
            })
            .sum::<f64>()
            / g as f64
    }

    pub fn mean_prediction(&self) -> Vec<f64> {
        let r = self.predictions.len() as f64;
        (0..self.predictions[0].len())
            .map(|j| self.predictions.iter().map(|p| p[j]).sum::<f64>() / r)
            .collect()
    }

    pub fn std_prediction(&self) -> Vec<f64> {
        let r = self.predictions.len() as f64;
        let m = self.mean_prediction();
        (0..m.len())
            .map(|j| (self.predictions.iter().map(|p| (p[j] - m[j]).powi(2)).sum::<f64>() / r).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study1DResult {
    pub k: f64,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub points: Vec<Study1DPoint>,
    /// Index of the setting with the lowest mean ground-truth error.
    pub best: usize,
}

impl Study1DResult {
    pub fn selected(&self) -> &Study1DPoint {
        &self.points[self.best]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train `replicates` scalar MLPs per grid setting on fresh noisy samples
/// and select the setting with the lowest ground-truth error.
pub fn run_1d_study(k: f64, s: &Study1DSettings) -> Result<Study1DResult> {
    let cfg = Config1D::new(k);
    cfg.validate()?;
    if s.replicates < 2 || s.batch_size == 0 || s.n_train == 0 || s.n_val == 0 || s.grid_points < 2 {
        return Err(Error::InvalidConfig("1-D study needs ≥ 2 replicates and non-empty sets".into()));
    }
    let (lo, hi) = cfg.zdot_range;
    let grid: Vec<f64> = (0..s.grid_points).map(|i| lo + (hi - lo) * i as f64 / (s.grid_points - 1) as f64).collect();
    let truth: Vec<f64> = grid.iter().map(|&v| velocity_map(v, &cfg)).collect();
    let model = ModelConfig::mlp_1d(s.hidden);

    // the same replicate data sets are reused across grid settings
    let data: Vec<Vec<(f64, f64)>> = (0..s.replicates)
        .map(|r| sample_1d_dataset(s.n_train + s.n_val, &cfg, &mut rng::stream(s.seed, Purpose::OneDim, r as u64)))
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    for &lr in &s.learning_rates {
        for &wd in &s.weight_decays {
            let mut p = Study1DPoint {
                learning_rate: lr,
                weight_decay: wd,
                train_losses: Vec::new(),
                ground_truth_mse: Vec::new(),
                predictions: Vec::new(),
            };
            for (r, pairs) in data.iter().enumerate() {
                let inputs: Vec<f64> = pairs.iter().map(|(a, _)| *a).collect();
                let targets: Vec<f64> = pairs.iter().map(|(_, b)| *b).collect();
                let offsets = vec![0.0; pairs.len()];
                let ex = Examples { inputs: &inputs, targets: &targets, offsets: &offsets, in_len: 1, out_dim: 1 };
                let split = Split {
                    train: (0..s.n_train).collect(),
                    val: (s.n_train..s.n_train + s.n_val).collect(),
                    test: Vec::new(),
                };
                let hyper = TrainHyper {
                    learning_rate: lr,
                    weight_decay: wd,
                    batch_size: s.batch_size,
                    max_epochs: s.max_epochs,
                    patience: s.patience,
                    seed: rng::child_seed(s.seed, Purpose::Init, r as u64),
                    ..TrainHyper::default()
                };
                let res = train_examples(&model, &ex, &split, &hyper)?;
                let pred = res.model.forward_batch(&grid, grid.len());
                let gt = pred.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / grid.len() as f64;
                p.train_losses.push(res.train_loss);
                p.ground_truth_mse.push(gt);
                p.predictions.push(pred);
            }
            points.push(p);
        }
    }
    let best = (0..points.len())
        .min_by(|&a, &b| points[a].mean_ground_truth_mse().total_cmp(&points[b].mean_ground_truth_mse()))
        .expect("non-empty grid");
    Ok(Study1DResult { k, grid, truth, points, best })
}

/// Architecture label used in metric rows of the 1-D study.
pub fn architecture_1d() -> String {
    Architecture::Mlp.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_indices_are_distinct_sorted_and_seeded() {
        let cfg = DataGenConfig { n_train_pool: 40, ..DataGenConfig::default() };
        let a = pool_indices(&cfg, 10, 3).unwrap();
        assert_eq!(a, pool_indices(&cfg, 10, 3).unwrap());
        assert_ne!(a, pool_indices(&cfg, 10, 5).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 40));
        assert_eq!(pool_indices(&cfg, 40, 0).unwrap(), (0..40).collect::<Vec<u64>>());
        assert!(pool_indices(&cfg, 41, 0).is_err());
        assert!(pool_indices(&cfg, 0, 0).is_err());
    }

    #[test]
    fn presets() {
        let (m, h) = preset(Profile::Full, Stiffness::Hard, 500);
        assert_eq!((m.hidden_size, m.history, h.learning_rate, h.weight_decay), (128, 16, 1e-4, 0.0));
        let (_, h) = preset(Profile::Full, Stiffness::Soft, 500);
        assert_eq!((h.learning_rate, h.weight_decay), (1e-5, 4e-5));
        let (m, h) = preset(Profile::Desk, Stiffness::Soft, 50);
        assert_eq!((m.hidden_size, h.max_epochs), (64, 300));
        assert_eq!(preset(Profile::Desk, Stiffness::Soft, 500).1.max_epochs, 150);
        assert_eq!("Desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("lab".parse::<Profile>().is_err());
    }

    #[test]
    fn small_1d_study_selects_lowest_error() {
        let s = Study1DSettings {
            replicates: 3,
            hidden: 8,
            max_epochs: 20,
            learning_rates: vec![1e-2, 1e-4],
            weight_decays: vec![0.0],
            grid_points: 25,
            ..Study1DSettings::default()
        };
        let r = run_1d_study(100.0, &s).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.grid.len(), 25);
        assert_eq!((r.grid[0], r.grid[24]), (-3.0, 5.0));
        let best = r.selected().mean_ground_truth_mse();
        assert!(r.points.iter().all(|p| p.mean_ground_truth_mse() >= best));
        let p = r.selected();
        assert_eq!(p.predictions.len(), 3);
        let sd = p.std_prediction();
        let var = sd.iter().map(|v| v * v).sum::<f64>() / sd.len() as f64;
        assert!((var - p.prediction_variance()).abs() < 1e-12);
        assert_eq!(r, run_1d_study(100.0, &s).unwrap());
    }
}
