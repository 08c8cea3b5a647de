//! Noisy trajectory generation, velocity reconstruction, slicing into
//! supervised examples, and the on-disk trajectory format.
//!
//! A trajectory starts from a random perturbation of a nominal throw, is
//! simulated without noise, and then has its configurations corrupted by a
//! constant drift plus i.i.d. per-sample offsets. Velocities are rebuilt from
//! the noisy configurations by inverting the integrator's configuration
//! update, exactly as a tracking system would.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math::{quat_exp, quat_log, random_axis, Quaternion, Vec3};
use crate::rng::{self, Purpose, Rng};
use crate::sim::{
    nominal_initial_state, simulate, State, SystemParams, Trajectory, STATE_DIM, TRAJECTORY_LEN,
    VELOCITY_DIM,
};

pub const TRAJECTORY_SCHEMA: &str = "stiffbench-trajectory/1";
const RNG_SCHEME: &str = "chacha8:seed_from_u64+stream(purpose<<48|index)";

/// Sampling and noise settings. All bounds are half-widths of symmetric
/// uniform intervals; angles rotate about a uniformly drawn axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGenConfig {
    pub x0_ref: State,
    /// m per axis
    pub init_position: f64,
    /// rad
    pub init_angle: f64,
    /// m/s per axis
    pub init_velocity: f64,
    /// rad/s per axis
    pub init_angular_velocity: f64,
    /// m per axis
    pub drift_position: f64,
    /// deg
    pub drift_angle_deg: f64,
    /// m per axis
    pub sample_position: f64,
    /// deg
    pub sample_angle_deg: f64,
    pub n_train_pool: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            x0_ref: nominal_initial_state(),
            init_position: 0.1,
            init_angle: 1.0,
            init_velocity: 0.1,
            init_angular_velocity: 0.1,
            drift_position: 1e-3,
            drift_angle_deg: 1.0,
            sample_position: 1e-5,
            sample_angle_deg: 0.01,
            n_train_pool: 10_000,
            n_eval: 1_000,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn with_seed(seed: u64) -> Self {
        DataGenConfig { seed, ..Self::default() }
    }

    /// Same sampling, no measurement noise.
    pub fn noiseless(mut self) -> Self {
        self.drift_position = 0.0;
        self.drift_angle_deg = 0.0;
        self.sample_position = 0.0;
        self.sample_angle_deg = 0.0;
        self
    }

    pub fn has_noise(&self) -> bool {
        self.drift_position > 0.0
            || self.drift_angle_deg > 0.0
            || self.sample_position > 0.0
            || self.sample_angle_deg > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = [
            self.init_position,
            self.init_angle,
            self.init_velocity,
            self.init_angular_velocity,
            self.drift_position,
            self.drift_angle_deg,
            self.sample_position,
            self.sample_angle_deg,
        ];
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidConfig("noise and perturbation bounds must be non-negative".into()));
        }
        Ok(())
    }

    /// Stream counter of the `i`-th evaluation trajectory; evaluation
    /// trajectories never share streams with the training pool.
    pub fn eval_index(&self, i: usize) -> u64 {
        (self.n_train_pool + i) as u64
    }
}

fn uniform_vec<R: rand::Rng + ?Sized>(rng: &mut R, half: f64) -> Vec3 {
    if half == 0.0 {
        return Vec3::ZERO;
    }
    Vec3::new(
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
    )
}

fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R, half_angle: f64) -> Quaternion {
    if half_angle == 0.0 {
        return Quaternion::IDENTITY;
    }
    let theta = rng.random_range(-half_angle..=half_angle);
    quat_exp(random_axis(rng) * theta)
}

pub fn sample_initial_state<R: rand::Rng + ?Sized>(cfg: &DataGenConfig, rng: &mut R) -> State {
    let r = cfg.x0_ref;
    let dp = uniform_vec(rng, cfg.init_position);
    let dq = random_rotation(rng, cfg.init_angle);
    let dv = uniform_vec(rng, cfg.init_velocity);
    let dw = uniform_vec(rng, cfg.init_angular_velocity);
    State {
        p: r.p + dp,
        q: (r.q.normalized() * dq).normalized(),
        pdot: r.pdot + dv,
        omega: r.omega + dw,
    }
}

/// Noisy configurations `(p_t, q_t)` of a trajectory: one drift offset for
/// the whole trajectory, then an independent offset per sample.
pub fn add_trajectory_noise<R: rand::Rng + ?Sized>(
    traj: &Trajectory,
    cfg: &DataGenConfig,
    rng: &mut R,
) -> Vec<(Vec3, Quaternion)> {
    let drift_p = uniform_vec(rng, cfg.drift_position);
    let drift_q = random_rotation(rng, cfg.drift_angle_deg.to_radians());
    traj.states
        .iter()
        .map(|s| {
            let dp = uniform_vec(rng, cfg.sample_position);
            let dq = random_rotation(rng, cfg.sample_angle_deg.to_radians());
            let q = if cfg.drift_angle_deg == 0.0 && cfg.sample_angle_deg == 0.0 {
                s.q
            } else {
                (s.q * drift_q * dq).normalized()
            };
            (s.p + drift_p + dp, q)
        })
        .collect()
}

/// Finite-difference velocities that invert the configuration update
/// `p' = p + ṗ'·dt`, `q' = q ⊗ Q(ω'·dt)`. The first state reuses the
/// velocity of the second.
pub fn reconstruct_velocities(configs: &[(Vec3, Quaternion)], dt: f64) -> Result<Vec<State>> {
    if configs.len() < 2 {
        return Err(Error::InvalidData("velocity reconstruction needs at least two configurations".into()));
    }
    let mut out: Vec<State> = Vec::with_capacity(configs.len());
    for i in 1..configs.len() {
        let (p0, q0) = configs[i - 1];
        let (p1, q1) = configs[i];
        out.push(State {
            p: p1,
            q: q1,
            pdot: (p1 - p0) / dt,
            omega: quat_log(q0.conjugate() * q1) / dt,
        });
    }
    let (p, q) = configs[0];
    let first = State { p, q, pdot: out[0].pdot, omega: out[0].omega };
    out.insert(0, first);
    Ok(out)
}

/// Simulate trajectory `index` of a data set. The same `(seed, index)` yields
/// the same initial state and noise draws at every stiffness.
pub fn generate_trajectory(
    cfg: &DataGenConfig,
    prm: &SystemParams,
    index: u64,
) -> Result<Trajectory> {
    let mut rng: Rng = rng::stream(cfg.seed, Purpose::Trajectory, index);
    let x0 = sample_initial_state(cfg, &mut rng);
    let clean = simulate(&x0, prm, TRAJECTORY_LEN, cfg.seed)?;
    if !cfg.has_noise() {
        return Ok(clean);
    }
    let configs = add_trajectory_noise(&clean, cfg, &mut rng);
    Ok(Trajectory {
        states: reconstruct_velocities(&configs, prm.dt)?,
        ..clean
    })
}

/// Trajectories for stream counters `indices`.
pub fn generate_trajectories(
    cfg: &DataGenConfig,
    prm: &SystemParams,
    indices: impl IntoIterator<Item = u64>,
) -> Result<Vec<TrajectoryRecord>> {
    indices
        .into_iter()
        .map(|index| {
            Ok(TrajectoryRecord {
                index,
                noisy: cfg.has_noise(),
                trajectory: generate_trajectory(cfg, prm, index)?,
            })
        })
        .collect()
}

/// Per-dimension affine normalization of the 13 state coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; STATE_DIM],
    pub std: [f64; STATE_DIM],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { mean: [0.0; STATE_DIM], std: [1.0; STATE_DIM] }
    }

    pub fn apply(&self, state: &[f64], out: &mut [f64]) {
        for j in 0..STATE_DIM {
            out[j] = (state[j] - self.mean[j]) / self.std[j];
        }
    }
}

/// Sliced supervised examples `x_{t−h+1:t} → v_{t+1}`.
#[derive(Debug, Clone)]
pub struct SlicedDataset {
    pub history: usize,
    /// Normalized windows, `len × history × 13`, oldest state first.
    pub inputs: Vec<f64>,
    /// Raw next velocities, `len × 6`.
    pub targets: Vec<f64>,
    /// Raw current state `x_t` of each example.
    pub current: Vec<State>,
    /// Raw current velocities `v_t`, `len × 6`; the offset of the
    /// velocity-difference target mode.
    pub velocities: Vec<f64>,
    pub normalization: Normalization,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SlicedDataset {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.history * STATE_DIM
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.input_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * VELOCITY_DIM..(i + 1) * VELOCITY_DIM]
    }

    /// Raw current velocity `v_t`.
    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * VELOCITY_DIM..(i + 1) * VELOCITY_DIM]
    }
}

/// Split sizes for `n` examples in 70:20:10 proportions.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Slice trajectories into windows of `history` states, shuffle the windows
/// with `seed`, split 70:20:10 and normalize with training statistics.
pub fn build_dataset(trajs: &[Trajectory], history: usize, seed: u64) -> Result<SlicedDataset> {
    if history == 0 {
        return Err(Error::InvalidConfig("history length must be at least 1".into()));
    }
    let mut raw = Vec::new();
    let mut targets = Vec::new();
    let mut current = Vec::new();
    let mut velocities = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        if traj.states.len() < history + 1 {
            return Err(Error::InvalidData(format!(
                "trajectory {ti} has {} states, need at least {}",
                traj.states.len(),
                history + 1
            )));
        }
        for t in history - 1..traj.states.len() - 1 {
            for s in &traj.states[t + 1 - history..=t] {
                raw.extend_from_slice(&s.to_array());
            }
            targets.extend_from_slice(&traj.states[t + 1].velocity());
            current.push(traj.states[t]);
            velocities.extend_from_slice(&traj.states[t].velocity());
        }
    }
    let n = current.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let (n_train, n_val, _) = split_sizes(n);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();

    let normalization = fit_normalization(&raw, history, &train);
    let mut inputs = vec![0.0; raw.len()];
    for (src, dst) in raw.chunks_exact(STATE_DIM).zip(inputs.chunks_exact_mut(STATE_DIM)) {
        normalization.apply(src, dst);
    }
    Ok(SlicedDataset {
        history,
        inputs,
        targets,
        current,
        velocities,
        normalization,
        train,
        val,
        test,
    })
}

fn fit_normalization(raw: &[f64], history: usize, train: &[usize]) -> Normalization {
    let w = history * STATE_DIM;
    let count = (train.len() * history) as f64;
    if count == 0.0 {
        return Normalization::identity();
    }
    let mut mean = [0.0; STATE_DIM];
    for &i in train {
        for s in raw[i * w..(i + 1) * w].chunks_exact(STATE_DIM) {
            for j in 0..STATE_DIM {
                mean[j] += s[j];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = [0.0; STATE_DIM];
    for &i in train {
        for s in raw[i * w..(i + 1) * w].chunks_exact(STATE_DIM) {
            for j in 0..STATE_DIM {
                var[j] += (s[j] - mean[j]).powi(2);
            }
        }
    }
    let std = var.map(|v| {
        let sd = (v / count).sqrt();
        if sd > 1e-12 {
            sd
        } else {
            1.0
        }
    });
    Normalization { mean, std }
}

/// One trajectory together with the metadata needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Stream counter the trajectory was drawn from.
    pub index: u64,
    pub noisy: bool,
    pub trajectory: Trajectory,
}

impl TrajectoryRecord {
    pub fn to_text(&self) -> String {
        let t = &self.trajectory;
        let p = &t.params;
        let mut s = String::new();
        let header: [(&str, String); 16] = [
            ("schema", TRAJECTORY_SCHEMA.to_string()),
            ("rng", RNG_SCHEME.to_string()),
            ("seed", t.seed.to_string()),
            ("index", self.index.to_string()),
            ("noisy", self.noisy.to_string()),
            ("k", p.stiffness.to_string()),
            ("zeta", p.damping_ratio.to_string()),
            ("dt", p.dt.to_string()),
            ("mass", p.mass.to_string()),
            ("inertia", p.inertia.to_string()),
            ("side", p.side.to_string()),
            ("gravity", p.gravity.to_string()),
            ("friction", p.friction.to_string()),
            ("contact_regularization", p.contact_regularization.to_string()),
            ("solver_iterations", p.solver_iterations.to_string()),
            ("max_penetration", t.max_penetration.to_string()),
        ];
        for (k, v) in header {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let _ = writeln!(s, "# rows = {}", t.states.len());
        for st in &t.states {
            let row: Vec<String> = st.to_array().iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed { path: path.to_path_buf(), reason };
        let mut lines = text.lines().peekable();
        let mut header = std::collections::BTreeMap::new();
        while let Some(line) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| malformed(format!("bad header line `{line}`")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
            lines.next();
        }
        match header.get("schema") {
            Some(v) if v == TRAJECTORY_SCHEMA => {}
            found => {
                return Err(Error::SchemaMismatch {
                    path: path.to_path_buf(),
                    expected: TRAJECTORY_SCHEMA.to_string(),
                    found: found.cloned().unwrap_or_else(|| "<none>".to_string()),
                })
            }
        }
        let get = |k: &str| -> Result<&String> {
            header.get(k).ok_or_else(|| malformed(format!("missing header key `{k}`")))
        };
        fn parse<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
            v.parse().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("bad value `{v}` for `{k}`"),
            })
        }
        let num = |k: &str| -> Result<f64> { parse(get(k)?, k, path) };
        let params = SystemParams {
            mass: num("mass")?,
            inertia: num("inertia")?,
            side: num("side")?,
            gravity: num("gravity")?,
            friction: num("friction")?,
            stiffness: num("k")?,
            damping_ratio: num("zeta")?,
            dt: num("dt")?,
            contact_regularization: num("contact_regularization")?,
            solver_iterations: parse(get("solver_iterations")?, "solver_iterations", path)?,
        };
        let rows: usize = parse(get("rows")?, "rows", path)?;
        let mut states = Vec::with_capacity(rows);
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| parse(v, "state", path))
                .collect::<Result<_>>()?;
            if vals.len() != STATE_DIM {
                return Err(malformed(format!("row {i} has {} values, expected {STATE_DIM}", vals.len())));
            }
            states.push(State::from_slice(&vals));
        }
        if states.len() != rows {
            return Err(malformed(format!("expected {rows} rows, found {}", states.len())));
        }
        Ok(TrajectoryRecord {
            index: parse(get("index")?, "index", path)?,
            noisy: parse(get("noisy")?, "noisy", path)?,
            trajectory: Trajectory {
                states,
                params,
                seed: parse(get("seed")?, "seed", path)?,
                max_penetration: num("max_penetration")?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}

pub fn trajectory_file_name(index: u64) -> String {
    format!("traj_{index:06}.txt")
}

/// Write one file per trajectory into `dir`.
pub fn save_dataset(dir: &Path, records: &[TrajectoryRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(trajectory_file_name(r.index));
            r.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Load every trajectory file of `dir`, ordered by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("traj_") && n.ends_with(".txt"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidData(format!("no trajectory files in {}", dir.display())));
    }
    paths.iter().map(|p| TrajectoryRecord::load(p)).collect()
}
