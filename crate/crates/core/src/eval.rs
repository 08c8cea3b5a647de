//! Oracle baselines, test-error decomposition, multi-step rollouts,
//! penetration statistics and log-normal confidence intervals.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::datagen::{Normalization, SlicedDataset};
use crate::error::{Error, Result};
use crate::math::quat_angle;
use crate::nn::Model;
use crate::sim::{integrate_configuration, oracle_predict, State, SystemParams, Trajectory, STATE_DIM, VELOCITY_DIM};
use crate::training::{csv_err, mse_loss, Examples};

/// Loss of the simulator's own one-step prediction from the current (noisy)
/// state over the examples `idx`.
pub fn oracle_loss(prm: &SystemParams, data: &SlicedDataset, idx: &[usize]) -> f64 {
    assert!(!idx.is_empty(), "loss over an empty set");
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let p = oracle_predict(&data.current[i], prm);
            p.iter().zip(data.target(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    total / idx.len() as f64
}

/// Three-term split of the test loss:
/// `test = oracle_train + (model_train − oracle_train) + (model_test − model_train)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDecomposition {
    pub oracle_train: f64,
    pub model_train: f64,
    pub model_test: f64,
    pub training_gap: f64,
    pub generalization_gap: f64,
}

impl ErrorDecomposition {
    pub fn from_losses(oracle_train: f64, model_train: f64, model_test: f64) -> Self {
        ErrorDecomposition {
            oracle_train,
            model_train,
            model_test,
            training_gap: model_train - oracle_train,
            generalization_gap: model_test - model_train,
        }
    }

    pub fn reconstructed_test(&self) -> f64 {
        self.oracle_train + self.training_gap + self.generalization_gap
    }
}

pub fn error_decomposition(model: &Model, prm: &SystemParams, data: &SlicedDataset) -> ErrorDecomposition {
    let ex = Examples::from_dataset(data);
    ErrorDecomposition::from_losses(
        oracle_loss(prm, data, &data.train),
        mse_loss(model, &ex, &data.train),
        mse_loss(model, &ex, &data.test),
    )
}

/// One-step velocity predictor driven by a window of past states, oldest
/// first.
pub trait VelocityPredictor {
    fn history(&self) -> usize;
    fn predict_velocity(&self, window: &[State]) -> [f64; VELOCITY_DIM];
}

/// A trained network with the normalization of its training data.
pub struct LearnedPredictor<'a> {
    pub model: &'a Model,
    pub normalization: &'a Normalization,
}

impl VelocityPredictor for LearnedPredictor<'_> {
    fn history(&self) -> usize {
        self.model.config.history
    }

    fn predict_velocity(&self, window: &[State]) -> [f64; VELOCITY_DIM] {
        let mut x = vec![0.0; window.len() * STATE_DIM];
        for (s, dst) in window.iter().zip(x.chunks_exact_mut(STATE_DIM)) {
            self.normalization.apply(&s.to_array(), dst);
        }
        let current = window.last().expect("non-empty window").velocity();
        let out = self.model.predict(&x, &current);
        let mut v = [0.0; VELOCITY_DIM];
        v.copy_from_slice(&out[..VELOCITY_DIM]);
        v
    }
}

/// The simulator used as a predictor.
pub struct OraclePredictor(pub SystemParams);

impl VelocityPredictor for OraclePredictor {
    fn history(&self) -> usize {
        1
    }

    fn predict_velocity(&self, window: &[State]) -> [f64; VELOCITY_DIM] {
        oracle_predict(window.last().expect("non-empty window"), &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Number of predicted steps.
    pub horizon: usize,
    /// Index of the first predicted state.
    pub start: usize,
    pub dt: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { horizon: 50, start: 16, dt: 6.74e-3 }
    }
}

/// Predicted states for indices `start .. start + horizon`, seeded with the
/// `history` ground-truth states that precede `start`.
pub fn rollout(predictor: &dyn VelocityPredictor, traj: &Trajectory, rc: &RolloutConfig) -> Result<Vec<State>> {
    let h = predictor.history();
    if rc.horizon == 0 || rc.start < h || rc.start < 1 || traj.states.len() < rc.start + rc.horizon {
        return Err(Error::InvalidConfig(format!(
            "rollout needs start ≥ history ({h}) and {} states, trajectory has {}",
            rc.start + rc.horizon,
            traj.states.len()
        )));
    }
    let mut window: Vec<State> = traj.states[rc.start - h..rc.start].to_vec();
    let mut out = Vec::with_capacity(rc.horizon);
    for j in 0..rc.horizon {
        let v = predictor.predict_velocity(&window);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!("non-finite prediction at rollout step {j}")));
        }
        let last = *window.last().expect("non-empty window");
        let pdot = crate::math::Vec3::new(v[0], v[1], v[2]);
        let omega = crate::math::Vec3::new(v[3], v[4], v[5]);
        let next = integrate_configuration(&last, pdot, omega, rc.dt);
        if !next.is_finite() {
            return Err(Error::Diverged(format!("non-finite state at rollout step {j}")));
        }
        out.push(next);
        window.remove(0);
        window.push(next);
    }
    Ok(out)
}

/// Time-averaged position error (percent of `side`) and rotation error
/// (degrees).
pub fn rollout_metrics(pred: &[State], truth: &[State], side: f64) -> (f64, f64) {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    assert!(!pred.is_empty());
    let n = pred.len() as f64;
    let pos: f64 = pred.iter().zip(truth).map(|(a, b)| (a.p - b.p).norm()).sum::<f64>() / n;
    let rot: f64 = pred.iter().zip(truth).map(|(a, b)| quat_angle(a.q, b.q)).sum::<f64>() / n;
    (100.0 * pos / side, rot)
}

/// Mean rollout errors over trajectories; diverged rollouts are counted
/// separately and left out of the means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSummary {
    pub e_pos: f64,
    pub e_rot: f64,
    pub evaluated: usize,
    pub diverged: usize,
}

pub fn evaluate_rollouts(
    predictor: &dyn VelocityPredictor,
    trajs: &[Trajectory],
    rc: &RolloutConfig,
    side: f64,
) -> Result<RolloutSummary> {
    let (mut sp, mut sr, mut ok, mut bad) = (0.0, 0.0, 0usize, 0usize);
    for t in trajs {
        match rollout(predictor, t, rc) {
            Ok(pred) => {
                let (p, r) = rollout_metrics(&pred, &t.states[rc.start..rc.start + rc.horizon], side);
                sp += p;
                sr += r;
                ok += 1;
            }
            Err(Error::Diverged(_)) => bad += 1,
            Err(e) => return Err(e),
        }
    }
    let mean = |s: f64| if ok > 0 { s / ok as f64 } else { f64::NAN };
    Ok(RolloutSummary { e_pos: mean(sp), e_rot: mean(sr), evaluated: ok, diverged: bad })
}

/// Log-normal point estimate and confidence interval of the mean by Cox's
/// method, using the normal quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxInterval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    pub n: usize,
}

pub fn cox_ci(samples: &[f64], level: f64) -> Result<CoxInterval> {
    if samples.len() < 2 {
        return Err(Error::InvalidData("a confidence interval needs at least two samples".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level} outside (0, 1)")));
    }
    if let Some(&bad) = samples.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::NonPositiveSample(bad));
    }
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    let half = z * (var / n + var * var / (2.0 * (n - 1.0))).sqrt();
    let centre = mean + var / 2.0;
    Ok(CoxInterval {
        estimate: centre.exp(),
        low: (centre - half).exp(),
        high: (centre + half).exp(),
        n: samples.len(),
    })
}

/// Mean over trajectories of the deepest penetration, in millimetres.
pub fn penetration_stats(trajs: &[Trajectory]) -> f64 {
    assert!(!trajs.is_empty());
    1e3 * trajs.iter().map(|t| t.max_penetration).sum::<f64>() / trajs.len() as f64
}

/// One line of a metrics table. Per-run rows carry a seed and no interval;
/// aggregate rows carry the log-normal estimate and its interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stiffness: String,
    pub n_traj: usize,
    pub architecture: String,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub n: usize,
}

pub const METRIC_COLUMNS: [&str; 9] =
    ["stiffness", "n_traj", "architecture", "seed", "metric", "value", "ci_low", "ci_high", "n"];

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let (lo, hi) = match r.ci {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.stiffness.clone(),
            r.n_traj.to_string(),
            r.architecture.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_else(|| "all".into()),
            r.metric.clone(),
            r.value.to_string(),
            lo,
            hi,
            r.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != METRIC_COLUMNS {
        return Err(Error::SchemaMismatch {
            path: path.to_path_buf(),
            expected: METRIC_COLUMNS.join(","),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    let malformed = |reason: String| Error::Malformed { path: path.to_path_buf(), reason };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| malformed(format!("bad number `{}`", &rec[i])))
        };
        let ci = if rec[6].is_empty() { None } else { Some((num(6)?, num(7)?)) };
        rows.push(MetricRow {
            stiffness: rec[0].to_string(),
            n_traj: rec[1].parse().map_err(|_| malformed(format!("bad size `{}`", &rec[1])))?,
            architecture: rec[2].to_string(),
            seed: if &rec[3] == "all" {
                None
            } else {
                Some(rec[3].parse().map_err(|_| malformed(format!("bad seed `{}`", &rec[3])))?)
            },
            metric: rec[4].to_string(),
            value: num(5)?,
            ci,
            n: rec[8].parse().map_err(|_| malformed(format!("bad count `{}`", &rec[8])))?,
        });
    }
    Ok(rows)
}

/// Aggregate per-seed rows into one row per (stiffness, size, architecture,
/// metric) with a Cox interval. Groups with non-positive values keep their
/// arithmetic mean and get no interval.
pub fn aggregate(rows: &[MetricRow], level: f64) -> Vec<MetricRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        groups
            .entry((r.stiffness.clone(), r.n_traj, r.architecture.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((stiffness, n_traj, architecture, metric), vals)| {
            let (value, ci) = match cox_ci(&vals, level) {
                Ok(c) => (c.estimate, Some((c.low, c.high))),
                Err(_) => (vals.iter().sum::<f64>() / vals.len() as f64, None),
            };
            MetricRow { stiffness, n_traj, architecture, seed: None, metric, value, ci, n: vals.len() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quat_exp, Quaternion, Vec3};

    #[test]
    fn cox_examples() {
        let c = cox_ci(&[2.5; 4], 0.95).unwrap();
        assert!((c.low - 2.5).abs() < 1e-12 && (c.high - 2.5).abs() < 1e-12);
        let e = std::f64::consts::E;
        let c = cox_ci(&[1.0, e, e * e], 0.95).unwrap();
        let half = 1.959963984540054 * (1.0f64 / 3.0 + 0.25).sqrt();
        assert!((c.low - (1.5 - half).exp()).abs() < 1e-12);
        assert!((c.high - (1.5 + half).exp()).abs() < 1e-9);
        assert!((c.low - 1.0030).abs() < 1e-4 && (c.high - 20.02).abs() < 1e-2);
        assert!(c.low <= c.estimate && c.estimate <= c.high);
        assert!(matches!(cox_ci(&[1.0, 0.0], 0.95), Err(Error::NonPositiveSample(_))));
        assert!(cox_ci(&[1.0], 0.95).is_err());
    }

    #[test]
    fn decomposition_identity() {
        let d = ErrorDecomposition::from_losses(0.0836, 0.31, 0.77);
        assert!((d.reconstructed_test() - d.model_test).abs() <= 1e-12 * d.model_test);
        let same = ErrorDecomposition::from_losses(0.1, 0.1, 0.3);
        assert_eq!(same.training_gap, 0.0);
    }

    fn pose(p: Vec3, q: Quaternion) -> State {
        State { p, q, ..State::default() }
    }

    #[test]
    fn metric_definitions() {
        let truth: Vec<State> = (0..5)
            .map(|i| pose(Vec3::new(i as f64, 0.0, 0.0), quat_exp(Vec3::new(0.0, 0.1 * i as f64, 0.0))))
            .collect();
        assert_eq!(rollout_metrics(&truth, &truth, 0.1), (0.0, 0.0));
        let shifted: Vec<State> = truth.iter().map(|s| pose(s.p + Vec3::new(0.0, 1e-3, 0.0), s.q)).collect();
        let (p, r) = rollout_metrics(&shifted, &truth, 0.1);
        assert!((p - 1.0).abs() < 1e-9);
        assert_eq!(r, 0.0);
    }

    struct Still;
    impl VelocityPredictor for Still {
        fn history(&self) -> usize {
            3
        }
        fn predict_velocity(&self, _: &[State]) -> [f64; 6] {
            [0.0; 6]
        }
    }

    #[test]
    fn zero_velocity_rollout_freezes_pose() {
        let prm = SystemParams::default();
        let x0 = State { p: Vec3::new(0.0, 0.0, 1.0), omega: Vec3::new(1.0, 2.0, 3.0), ..State::default() };
        let traj = crate::sim::simulate(&x0, &prm, 80, 0).unwrap();
        let rc = RolloutConfig::default();
        let pred = rollout(&Still, &traj, &rc).unwrap();
        let last = traj.states[rc.start - 1];
        for s in &pred {
            assert_eq!(s.p, last.p);
            assert!(quat_angle(s.q, last.q) < 1e-9);
            assert!((s.q.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn penetration_mean_above_ground_is_zero() {
        let prm = SystemParams::default();
        let x0 = State { p: Vec3::new(0.0, 0.0, 2.0), ..State::default() };
        let t = crate::sim::simulate(&x0, &prm, 2, 0).unwrap();
        assert_eq!(penetration_stats(&[t]), 0.0);
    }
}
