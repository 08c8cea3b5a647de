//! Mini-batch Adam training with early stopping, and the replicate-based
//! hyperparameter sweep.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::datagen::SlicedDataset;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig, TargetMode};
use crate::rng::{self, Purpose};

/// Borrowed supervised examples: `inputs` rows of `in_len`, `targets` and
/// `offsets` rows of `out_dim`. Offsets are the current velocities used by
/// the velocity-difference target mode.
#[derive(Debug, Clone, Copy)]
pub struct Examples<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
    pub offsets: &'a [f64],
    pub in_len: usize,
    pub out_dim: usize,
}

impl<'a> Examples<'a> {
    pub fn from_dataset(d: &'a SlicedDataset) -> Self {
        Examples {
            inputs: &d.inputs,
            targets: &d.targets,
            offsets: &d.velocities,
            in_len: d.input_len(),
            out_dim: crate::sim::VELOCITY_DIM,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.out_dim
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn gather(&self, idx: &[usize], x: &mut Vec<f64>, y: &mut Vec<f64>, o: &mut Vec<f64>) {
        x.clear();
        y.clear();
        o.clear();
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * self.in_len..(i + 1) * self.in_len]);
            y.extend_from_slice(&self.targets[i * self.out_dim..(i + 1) * self.out_dim]);
            o.extend_from_slice(&self.offsets[i * self.out_dim..(i + 1) * self.out_dim]);
        }
    }
}

/// Mean over `idx` of the squared 2-norm of the next-velocity residual.
pub fn mse_loss(model: &Model, ex: &Examples, idx: &[usize]) -> f64 {
    assert!(!idx.is_empty(), "loss over an empty set");
    let (mut x, mut y, mut o) = (Vec::new(), Vec::new(), Vec::new());
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        ex.gather(chunk, &mut x, &mut y, &mut o);
        let pred = model.predict_batch(&x, &o, chunk.len());
        total += pred.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    total / idx.len() as f64
}

/// Squared-norm loss of arbitrary predictions against targets, both
/// `n × dim` row-major.
pub fn mse_of(pred: &[f64], targets: &[f64], dim: usize) -> f64 {
    assert_eq!(pred.len(), targets.len());
    assert!(!pred.is_empty());
    let n = pred.len() / dim;
    pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 256,
            max_epochs: 2000,
            patience: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate and weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig("batch size, epoch cap and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("invalid Adam moment settings".into()));
        }
        Ok(())
    }
}

/// Adam moments; weight decay is added to the gradient before the moment
/// update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], hyper: &TrainHyper) {
        self.t += 1;
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = hyper.learning_rate;
        let wd = hyper.weight_decay;
        for i in 0..theta.len() {
            let g = grad[i] + wd * theta[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
}

/// Patience-based stopping rule on a sequence of validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, since: 0 }
    }

    /// Record the loss of `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

/// Index sets of a train/validation/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn of(d: &SlicedDataset) -> Self {
        Split { train: d.train.clone(), val: d.val.clone(), test: d.test.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochLoss>,
    pub initial_train_loss: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: Option<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
}

pub fn train(cfg: &ModelConfig, data: &SlicedDataset, hyper: &TrainHyper) -> Result<TrainResult> {
    if cfg.history != data.history {
        return Err(Error::InvalidConfig(format!(
            "model history {} does not match dataset history {}",
            cfg.history, data.history
        )));
    }
    train_examples(cfg, &Examples::from_dataset(data), &Split::of(data), hyper)
}

/// Train from a fresh initialization drawn from `hyper.seed`.
pub fn train_examples(cfg: &ModelConfig, ex: &Examples, split: &Split, hyper: &TrainHyper) -> Result<TrainResult> {
    cfg.validate()?;
    hyper.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidData("training needs non-empty train and validation sets".into()));
    }
    if ex.in_len != cfg.window_len() || ex.out_dim != cfg.output_dim {
        return Err(Error::InvalidConfig("example dimensions do not match the model".into()));
    }
    let mut model = Model::init(*cfg, &mut rng::stream(hyper.seed, Purpose::Init, 0))?;
    let initial_train_loss = mse_loss(&model, ex, &split.train);
    if !initial_train_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut best = model.params.theta.clone();
    let mut adam = Adam::new(model.num_params());
    let mut stopper = EarlyStopping::new(hyper.patience);
    let mut grad = vec![0.0; model.num_params()];
    let mut order = split.train.clone();
    let (mut x, mut y, mut o) = (Vec::new(), Vec::new(), Vec::new());
    let mut history = Vec::new();
    let mut epochs = 0;
    for epoch in 1..=hyper.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng::stream(hyper.seed, Purpose::Shuffle, epoch as u64));
        let mut sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            ex.gather(batch, &mut x, &mut y, &mut o);
            let loss = model.loss_and_gradient(&model.params.theta, &x, &y, &o, batch.len(), &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut model.params.theta, &grad, hyper);
        }
        let val = mse_loss(&model, ex, &split.val);
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(EpochLoss { epoch, train: sum / order.len() as f64, val });
        let (improved, stop) = stopper.update(epoch, val);
        if improved {
            best.clone_from(&model.params.theta);
        }
        if stop {
            break;
        }
    }
    model.params.theta = best;
    let train_loss = mse_loss(&model, ex, &split.train);
    let test_loss = (!split.test.is_empty()).then(|| mse_loss(&model, ex, &split.test));
    Ok(TrainResult {
        model,
        history,
        initial_train_loss,
        train_loss,
        val_loss: stopper.best,
        test_loss,
        epochs,
        best_epoch: stopper.best_epoch,
    })
}

/// Cartesian hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpace {
    pub targets: Vec<TargetMode>,
    pub learning_rates: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub histories: Vec<usize>,
    pub weight_decays: Vec<f64>,
}

impl SweepSpace {
    /// The full search grid for recurrent models.
    pub fn full() -> Self {
        SweepSpace {
            targets: vec![TargetMode::NextVelocity, TargetMode::DeltaVelocity],
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            hidden_sizes: vec![128, 256, 512],
            histories: vec![4, 8, 16],
            weight_decays: vec![0.0, 4e-5, 4e-3],
        }
    }

    pub fn points(&self, base: &ModelConfig, hyper: &TrainHyper) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &target in &self.targets {
            for &lr in &self.learning_rates {
                for &hidden in &self.hidden_sizes {
                    for &history in &self.histories {
                        for &wd in &self.weight_decays {
                            let mut cfg = *base;
                            cfg.target = target;
                            cfg.hidden_size = hidden;
                            if cfg.architecture == crate::nn::Architecture::Gru {
                                cfg.history = history;
                            }
                            let hyper = TrainHyper { learning_rate: lr, weight_decay: wd, ..hyper.clone() };
                            if !out.iter().any(|p: &SweepPoint| p.model == cfg && p.hyper == hyper) {
                                out.push(SweepPoint { model: cfg, hyper });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub point: usize,
    pub replicate: usize,
    /// Seed of the run that produced the losses (after any retry).
    pub seed: u64,
    pub diverged: bool,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub records: Vec<SweepRecord>,
    /// Mean test loss per point over non-diverged replicates.
    pub mean_test: Vec<f64>,
    pub best: usize,
}

/// Train a single replicate; a diverged run is retried once with `seed + 1`.
pub fn train_with_retry(cfg: &ModelConfig, data: &SlicedDataset, hyper: &TrainHyper) -> (u64, Result<TrainResult>) {
    match train(cfg, data, hyper) {
        Err(Error::NonFiniteLoss { .. }) => {
            let retry = TrainHyper { seed: hyper.seed + 1, ..hyper.clone() };
            (retry.seed, train(cfg, data, &retry))
        }
        other => (hyper.seed, other),
    }
}

/// Run `replicates` trainings per grid point, ranking points by mean test
/// loss. `data` supplies the sliced dataset for a given history length.
/// Jobs run on up to `jobs` threads; results do not depend on scheduling.
pub fn hyperparameter_sweep(
    points: Vec<SweepPoint>,
    replicates: usize,
    root_seed: u64,
    data: &(dyn Fn(usize) -> Result<SlicedDataset> + Sync),
    jobs: usize,
) -> Result<SweepResult> {
    use rayon::prelude::*;
    if points.is_empty() || replicates == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one point and one replicate".into()));
    }
    let mut histories: Vec<usize> = points.iter().map(|p| p.model.history).collect();
    histories.sort_unstable();
    histories.dedup();
    let datasets: Vec<(usize, SlicedDataset)> =
        histories.into_iter().map(|h| data(h).map(|d| (h, d))).collect::<Result<_>>()?;
    let lookup = |h: usize| &datasets.iter().find(|(k, _)| *k == h).expect("dataset for history").1;

    let tasks: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|p| (0..replicates).map(move |r| (p, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let records: Vec<Result<SweepRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, r)| {
                let point = &points[p];
                // replicate seeds are spaced so a retry never collides
                let hyper = TrainHyper { seed: root_seed + 2 * r as u64, ..point.hyper.clone() };
                let (seed, res) = train_with_retry(&point.model, lookup(point.model.history), &hyper);
                match res {
                    Ok(t) => Ok(SweepRecord {
                        point: p,
                        replicate: r,
                        seed,
                        diverged: false,
                        train_loss: t.train_loss,
                        val_loss: t.val_loss,
                        test_loss: t.test_loss.unwrap_or(f64::NAN),
                        epochs: t.epochs,
                    }),
                    Err(Error::NonFiniteLoss { epoch }) => Ok(SweepRecord {
                        point: p,
                        replicate: r,
                        seed,
                        diverged: true,
                        train_loss: f64::NAN,
                        val_loss: f64::NAN,
                        test_loss: f64::NAN,
                        epochs: epoch,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let records: Vec<SweepRecord> = records.into_iter().collect::<Result<_>>()?;
    let mean_test: Vec<f64> = (0..points.len())
        .map(|p| {
            let ok: Vec<f64> = records
                .iter()
                .filter(|r| r.point == p && !r.diverged)
                .map(|r| r.test_loss)
                .collect();
            if ok.is_empty() {
                f64::INFINITY
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            }
        })
        .collect();
    let best = (0..points.len())
        .min_by(|&a, &b| mean_test[a].total_cmp(&mean_test[b]))
        .expect("non-empty grid");
    Ok(SweepResult { points, records, mean_test, best })
}

pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "point", "architecture", "target", "learning_rate", "hidden_size", "history", "weight_decay",
        "replicate", "seed", "diverged", "train_loss", "val_loss", "test_loss", "epochs",
    ])
    .map_err(csv_err)?;
    for r in &result.records {
        let p = &result.points[r.point];
        w.write_record([
            r.point.to_string(),
            p.model.architecture.to_string(),
            p.model.target.to_string(),
            p.hyper.learning_rate.to_string(),
            p.model.hidden_size.to_string(),
            p.model.history.to_string(),
            p.hyper.weight_decay.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.diverged.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.test_loss.to_string(),
            r.epochs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidData(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_definition() {
        let t = [0.0; 6];
        assert_eq!(mse_of(&t, &t, 6), 0.0);
        assert_eq!(mse_of(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &t, 6), 1.0);
        let p = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(mse_of(&p, &[0.0; 12], 6), 2.0);
    }

    #[test]
    fn adam_first_step() {
        let hyper = TrainHyper { learning_rate: 0.01, ..TrainHyper::default() };
        for g in [3.0, -0.2, 1e-3] {
            let mut theta = [1.0];
            let mut adam = Adam::new(1);
            adam.step(&mut theta, &[g], &hyper);
            let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
            let delta = theta[0] - 1.0;
            assert!((delta.abs() - expected).abs() < 1e-15);
            assert_eq!(delta.signum(), -g.signum());
        }
        let mut theta = [0.5, -2.0];
        let mut adam = Adam::new(2);
        adam.step(&mut theta, &[0.0, 0.0], &hyper);
        assert_eq!(theta, [0.5, -2.0]);
        let frozen = TrainHyper { learning_rate: 0.0, weight_decay: 0.1, ..hyper };
        adam.step(&mut theta, &[1.0, -1.0], &frozen);
        assert_eq!(theta, [0.5, -2.0]);
    }

    #[test]
    fn stops_after_patience_when_validation_worsens() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..100 {
            let (_, stop) = s.update(epoch, epoch as f64);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch, 1);
    }
}
