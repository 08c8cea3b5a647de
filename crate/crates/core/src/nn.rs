//! From-scratch velocity predictors with exact gradients.
//!
//! Two architectures share one flat parameter vector layout:
//!
//! * MLP: `L × (affine + ReLU)` followed by an affine output layer.
//! * GRU: a gated recurrent cell run over the history window from a zero
//!   hidden state, then a decoder `affine + ReLU + affine` with hidden width
//!   `H/2`.
//!
//! The GRU cell is
//!
//! ```text
//! r  = σ(W_r x + b_r + U_r h)
//! z  = σ(W_z x + b_z + U_z h)
//! n  = tanh(W_n x + b_n + U_n (r ⊙ h))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! All batched products go through `matrixmultiply`. Every example is a row
//! of `window_len()` inputs (oldest state first for the GRU) and the network
//! output is a prediction of the target variable; in velocity-difference
//! mode the caller supplies the current velocity as an additive offset so the
//! loss is always measured on the next velocity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::datagen::Normalization;
use crate::error::{Error, Result};
use crate::sim::STATE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mlp,
    Gru,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Mlp => "mlp",
            Architecture::Gru => "gru",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(Architecture::Mlp),
            "gru" => Ok(Architecture::Gru),
            other => Err(Error::InvalidConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

/// What the network output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetMode {
    /// `v_{t+1}`
    NextVelocity,
    /// `v_{t+1} − v_t`
    DeltaVelocity,
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::NextVelocity => "v_next",
            TargetMode::DeltaVelocity => "delta_v",
        })
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v_next" | "vnext" | "next" => Ok(TargetMode::NextVelocity),
            "delta_v" | "deltav" | "delta" => Ok(TargetMode::DeltaVelocity),
            other => Err(Error::InvalidConfig(format!("unknown target mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_size: usize,
    pub history: usize,
    pub target: TargetMode,
    /// Features per history step.
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layers of the MLP; unused by the GRU.
    pub mlp_hidden_layers: usize,
}

impl ModelConfig {
    pub fn mlp(hidden_size: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Mlp,
            hidden_size,
            history: 1,
            target: TargetMode::NextVelocity,
            input_dim: STATE_DIM,
            output_dim: 6,
            mlp_hidden_layers: 4,
        }
    }

    pub fn gru(hidden_size: usize, history: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Gru,
            history,
            ..Self::mlp(hidden_size)
        }
    }

    /// Scalar-in, scalar-out MLP with two hidden layers.
    pub fn mlp_1d(hidden_size: usize) -> Self {
        ModelConfig {
            input_dim: 1,
            output_dim: 1,
            mlp_hidden_layers: 2,
            ..Self::mlp(hidden_size)
        }
    }

    pub fn with_target(mut self, target: TargetMode) -> Self {
        self.target = target;
        self
    }

    pub fn window_len(&self) -> usize {
        self.history * self.input_dim
    }

    pub fn decoder_width(&self) -> usize {
        (self.hidden_size / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.history == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.architecture == Architecture::Mlp {
            if self.history != 1 {
                return Err(Error::InvalidConfig("an MLP uses history length 1".into()));
            }
            if self.mlp_hidden_layers == 0 {
                return Err(Error::InvalidConfig("an MLP needs at least one hidden layer".into()));
            }
        }
        Ok(())
    }
}

/// Named block of the flat parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub shapes: Vec<ParamShape>,
}

pub fn layout(cfg: &ModelConfig) -> Vec<ParamShape> {
    let mut shapes = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        shapes.push(ParamShape { name, rows, cols, offset });
        offset += rows * cols;
    };
    let h = cfg.hidden_size;
    match cfg.architecture {
        Architecture::Mlp => {
            let mut prev = cfg.window_len();
            for i in 0..cfg.mlp_hidden_layers {
                push(format!("dense{i}.w"), h, prev);
                push(format!("dense{i}.b"), 1, h);
                prev = h;
            }
            push("out.w".into(), cfg.output_dim, prev);
            push("out.b".into(), 1, cfg.output_dim);
        }
        Architecture::Gru => {
            let d = cfg.decoder_width();
            push("gru.w".into(), 3 * h, cfg.input_dim);
            push("gru.u".into(), 3 * h, h);
            push("gru.b".into(), 1, 3 * h);
            push("dec0.w".into(), d, h);
            push("dec0.b".into(), 1, d);
            push("out.w".into(), cfg.output_dim, d);
            push("out.b".into(), 1, cfg.output_dim);
        }
    }
    shapes
}

/// Weights uniform in `±√(6/(fan_in + fan_out))`, biases zero.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ModelParams {
    let shapes = layout(cfg);
    let total = shapes.iter().map(ParamShape::len).sum();
    let mut theta = vec![0.0; total];
    for s in &shapes {
        if s.is_bias() {
            continue;
        }
        let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
        for v in &mut theta[s.offset..s.offset + s.len()] {
            *v = rng.random_range(-a..a);
        }
    }
    ModelParams { theta, shapes }
}

/// `c = α·op(a)·op(b) + β·c` on row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(rsa, csa, m, k));
    assert!(b.len() >= last(rsb, csb, k, n));
    assert!(c.len() >= last(rsc, 1, m, n));
    // SAFETY: the asserts above bound every index touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

impl Dense {
    fn from_shapes(w: &ParamShape, b: &ParamShape) -> Self {
        Dense { w: w.offset, b: b.offset, out: w.rows, inp: w.cols }
    }

    /// `y = x Wᵀ + b` for `n` rows of `x` spaced `rsx` apart.
    fn forward(&self, theta: &[f64], x: &[f64], rsx: usize, n: usize, y: &mut [f64]) {
        let bias = &theta[self.b..self.b + self.out];
        for row in y[..n * self.out].chunks_exact_mut(self.out) {
            row.copy_from_slice(bias);
        }
        let w = &theta[self.w..self.w + self.out * self.inp];
        gemm(n, self.inp, self.out, 1.0, x, (rsx, 1), w, (1, self.inp), 1.0, y, self.out);
    }

    /// Accumulate parameter gradients and optionally write `dx = dy W`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        theta: &[f64],
        x: &[f64],
        rsx: usize,
        n: usize,
        dy: &[f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let (out, inp) = (self.out, self.inp);
        gemm(out, n, inp, 1.0, dy, (1, out), x, (rsx, 1), 1.0, &mut grad[self.w..self.w + out * inp], inp);
        let gb = &mut grad[self.b..self.b + out];
        for row in dy[..n * out].chunks_exact(out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if let Some(dx) = dx {
            let w = &theta[self.w..self.w + out * inp];
            gemm(n, out, inp, 1.0, dy, (out, 1), w, (inp, 1), 0.0, dx, inp);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

struct MlpCache {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

struct GruCache {
    /// Hidden state before each step, `T × B × H`, plus the final state.
    hs: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    rh: Vec<Vec<f64>>,
    dec_pre: Vec<f64>,
    dec_act: Vec<f64>,
}

enum Cache {
    Mlp(MlpCache),
    Gru(GruCache),
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if params.shapes != expected {
            return Err(Error::InvalidConfig("parameter layout does not match the model configuration".into()));
        }
        let total: usize = expected.iter().map(ParamShape::len).sum();
        if params.theta.len() != total {
            return Err(Error::InvalidConfig(format!(
                "expected {total} parameters, found {}",
                params.theta.len()
            )));
        }
        Ok(Model { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.theta.len()
    }

    fn dense(&self, w: usize) -> Dense {
        Dense::from_shapes(&self.params.shapes[w], &self.params.shapes[w + 1])
    }

    fn forward_cached(&self, theta: &[f64], x: &[f64], n: usize, out: &mut [f64]) -> Cache {
        let cfg = &self.config;
        let win = cfg.window_len();
        match cfg.architecture {
            Architecture::Mlp => {
                let h = cfg.hidden_size;
                let mut pre = Vec::with_capacity(cfg.mlp_hidden_layers);
                let mut act: Vec<Vec<f64>> = Vec::with_capacity(cfg.mlp_hidden_layers);
                for l in 0..cfg.mlp_hidden_layers {
                    let mut p = vec![0.0; n * h];
                    match act.last() {
                        None => self.dense(2 * l).forward(theta, x, win, n, &mut p),
                        Some(a) => self.dense(2 * l).forward(theta, a, h, n, &mut p),
                    }
                    act.push(p.iter().map(|v| v.max(0.0)).collect());
                    pre.push(p);
                }
                let last = act.last().expect("at least one hidden layer");
                self.dense(2 * cfg.mlp_hidden_layers).forward(theta, last, h, n, out);
                Cache::Mlp(MlpCache { pre, act })
            }
            Architecture::Gru => {
                let h = cfg.hidden_size;
                let d_in = cfg.input_dim;
                let shapes = &self.params.shapes;
                let (w, u, b) = (shapes[0].offset, shapes[1].offset, shapes[2].offset);
                let wm = &theta[w..w + 3 * h * d_in];
                let um = &theta[u..u + 3 * h * h];
                let bias = &theta[b..b + 3 * h];
                let mut cache = GruCache {
                    hs: vec![vec![0.0; n * h]],
                    r: Vec::new(),
                    z: Vec::new(),
                    n: Vec::new(),
                    rh: Vec::new(),
                    dec_pre: Vec::new(),
                    dec_act: Vec::new(),
                };
                let mut gx = vec![0.0; n * 3 * h];
                let mut gh = vec![0.0; n * 2 * h];
                let mut ghn = vec![0.0; n * h];
                for t in 0..cfg.history {
                    let hp = cache.hs.last().expect("initial state");
                    for row in gx.chunks_exact_mut(3 * h) {
                        row.copy_from_slice(bias);
                    }
                    gemm(n, d_in, 3 * h, 1.0, &x[t * d_in..], (win, 1), wm, (1, d_in), 1.0, &mut gx, 3 * h);
                    gemm(n, h, 2 * h, 1.0, hp, (h, 1), um, (1, h), 0.0, &mut gh, 2 * h);
                    let mut r = vec![0.0; n * h];
                    let mut z = vec![0.0; n * h];
                    let mut rh = vec![0.0; n * h];
                    for i in 0..n {
                        for j in 0..h {
                            let rv = sigmoid(gx[i * 3 * h + j] + gh[i * 2 * h + j]);
                            let zv = sigmoid(gx[i * 3 * h + h + j] + gh[i * 2 * h + h + j]);
                            r[i * h + j] = rv;
                            z[i * h + j] = zv;
                            rh[i * h + j] = rv * hp[i * h + j];
                        }
                    }
                    gemm(n, h, h, 1.0, &rh, (h, 1), &um[2 * h * h..], (1, h), 0.0, &mut ghn, h);
                    let mut nn = vec![0.0; n * h];
                    let mut hn = vec![0.0; n * h];
                    for i in 0..n {
                        for j in 0..h {
                            let k = i * h + j;
                            let nv = (gx[i * 3 * h + 2 * h + j] + ghn[k]).tanh();
                            nn[k] = nv;
                            hn[k] = (1.0 - z[k]) * nv + z[k] * hp[k];
                        }
                    }
                    cache.r.push(r);
                    cache.z.push(z);
                    cache.n.push(nn);
                    cache.rh.push(rh);
                    cache.hs.push(hn);
                }
                let dw = cfg.decoder_width();
                let mut dp = vec![0.0; n * dw];
                self.dense(3).forward(theta, cache.hs.last().expect("final state"), h, n, &mut dp);
                let da: Vec<f64> = dp.iter().map(|v| v.max(0.0)).collect();
                self.dense(5).forward(theta, &da, dw, n, out);
                cache.dec_pre = dp;
                cache.dec_act = da;
                Cache::Gru(cache)
            }
        }
    }

    /// Raw network outputs for `n` rows of `x`.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.config.output_dim];
        self.forward_cached(&self.params.theta, x, n, &mut out);
        out
    }

    /// Next-velocity predictions: network output plus the offset in
    /// velocity-difference mode.
    pub fn predict_batch(&self, x: &[f64], offsets: &[f64], n: usize) -> Vec<f64> {
        let mut out = self.forward_batch(x, n);
        if self.config.target == TargetMode::DeltaVelocity {
            for (o, v) in out.iter_mut().zip(offsets) {
                *o += v;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64], offset: &[f64]) -> Vec<f64> {
        self.predict_batch(x, offset, 1)
    }

    /// Batch MSE (mean squared 2-norm of the residual) and its gradient with
    /// respect to `theta`, written into `grad`.
    pub fn loss_and_gradient(
        &self,
        theta: &[f64],
        x: &[f64],
        targets: &[f64],
        offsets: &[f64],
        n: usize,
        grad: &mut [f64],
    ) -> f64 {
        assert!(n > 0, "empty batch");
        let cfg = &self.config;
        let od = cfg.output_dim;
        let mut out = vec![0.0; n * od];
        let cache = self.forward_cached(theta, x, n, &mut out);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let delta = cfg.target == TargetMode::DeltaVelocity;
        let mut loss = 0.0;
        let mut dout = vec![0.0; n * od];
        for i in 0..n * od {
            let pred = out[i] + if delta { offsets[i] } else { 0.0 };
            let r = pred - targets[i];
            loss += r * r;
            dout[i] = 2.0 * r / n as f64;
        }
        match cache {
            Cache::Mlp(c) => self.mlp_backward(theta, x, n, &c, &dout, grad),
            Cache::Gru(c) => self.gru_backward(theta, x, n, &c, &dout, grad),
        }
        loss / n as f64
    }

    fn mlp_backward(&self, theta: &[f64], x: &[f64], n: usize, c: &MlpCache, dout: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let h = cfg.hidden_size;
        let layers = cfg.mlp_hidden_layers;
        let mut dact = vec![0.0; n * h];
        self.dense(2 * layers).backward(theta, &c.act[layers - 1], h, n, dout, grad, Some(&mut dact));
        for l in (0..layers).rev() {
            let mut dpre = dact.clone();
            for (d, p) in dpre.iter_mut().zip(&c.pre[l]) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
            if l == 0 {
                self.dense(0).backward(theta, x, cfg.window_len(), n, &dpre, grad, None);
            } else {
                self.dense(2 * l).backward(theta, &c.act[l - 1], h, n, &dpre, grad, Some(&mut dact));
            }
        }
    }

    fn gru_backward(&self, theta: &[f64], x: &[f64], n: usize, c: &GruCache, dout: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let h = cfg.hidden_size;
        let d_in = cfg.input_dim;
        let win = cfg.window_len();
        let dw = cfg.decoder_width();

        let mut dda = vec![0.0; n * dw];
        self.dense(5).backward(theta, &c.dec_act, dw, n, dout, grad, Some(&mut dda));
        for (d, p) in dda.iter_mut().zip(&c.dec_pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dh = vec![0.0; n * h];
        self.dense(3).backward(theta, c.hs.last().expect("final state"), h, n, &dda, grad, Some(&mut dh));

        let shapes = &self.params.shapes;
        let (w, u, b) = (shapes[0].offset, shapes[1].offset, shapes[2].offset);
        let um = &theta[u..u + 3 * h * h];
        let mut dgx = vec![0.0; n * 3 * h];
        let mut dghn = vec![0.0; n * h];
        let mut dhp = vec![0.0; n * h];
        let mut drh = vec![0.0; n * h];
        for t in (0..cfg.history).rev() {
            let hp = &c.hs[t];
            let (r, z, nv) = (&c.r[t], &c.z[t], &c.n[t]);
            for i in 0..n {
                for j in 0..h {
                    let k = i * h + j;
                    let dn = dh[k] * (1.0 - z[k]);
                    let dz = dh[k] * (hp[k] - nv[k]);
                    dhp[k] = dh[k] * z[k];
                    let dan = dn * (1.0 - nv[k] * nv[k]);
                    dghn[k] = dan;
                    dgx[i * 3 * h + 2 * h + j] = dan;
                    dgx[i * 3 * h + h + j] = dz * z[k] * (1.0 - z[k]);
                }
            }
            gemm(h, n, h, 1.0, &dghn, (1, h), &c.rh[t], (h, 1), 1.0, &mut grad[u + 2 * h * h..u + 3 * h * h], h);
            gemm(n, h, h, 1.0, &dghn, (h, 1), &um[2 * h * h..], (h, 1), 0.0, &mut drh, h);
            for i in 0..n {
                for j in 0..h {
                    let k = i * h + j;
                    let dr = drh[k] * hp[k];
                    dhp[k] += drh[k] * r[k];
                    dgx[i * 3 * h + j] = dr * r[k] * (1.0 - r[k]);
                }
            }
            // r and z rows of U see the previous hidden state directly; the
            // gate pre-activations are the first 2H columns of dgx.
            gemm(2 * h, n, h, 1.0, &dgx, (1, 3 * h), hp, (h, 1), 1.0, &mut grad[u..u + 2 * h * h], h);
            gemm(n, 2 * h, h, 1.0, &dgx, (3 * h, 1), um, (h, 1), 1.0, &mut dhp, h);
            gemm(3 * h, n, d_in, 1.0, &dgx, (1, 3 * h), &x[t * d_in..], (win, 1), 1.0, &mut grad[w..w + 3 * h * d_in], d_in);
            let gb = &mut grad[b..b + 3 * h];
            for row in dgx.chunks_exact(3 * h) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            std::mem::swap(&mut dh, &mut dhp);
        }
    }

    /// Final hidden state of the recurrent cell (GRU only), for inspection.
    pub fn gru_hidden(&self, x: &[f64], n: usize) -> Option<Vec<f64>> {
        if self.config.architecture != Architecture::Gru {
            return None;
        }
        let mut out = vec![0.0; n * self.config.output_dim];
        match self.forward_cached(&self.params.theta, x, n, &mut out) {
            Cache::Gru(c) => c.hs.last().cloned(),
            Cache::Mlp(_) => None,
        }
    }
}

pub const CHECKPOINT_SCHEMA: &str = "stiffbench-checkpoint/1";

/// A trained model together with the input normalization it expects and
/// free-form training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalization: Normalization,
    pub metadata: BTreeMap<String, String>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = &self.model.config;
        let mut s = String::new();
        let _ = writeln!(s, "# schema = {CHECKPOINT_SCHEMA}");
        let _ = writeln!(s, "# architecture = {}", c.architecture);
        let _ = writeln!(s, "# hidden_size = {}", c.hidden_size);
        let _ = writeln!(s, "# history = {}", c.history);
        let _ = writeln!(s, "# target = {}", c.target);
        let _ = writeln!(s, "# input_dim = {}", c.input_dim);
        let _ = writeln!(s, "# output_dim = {}", c.output_dim);
        let _ = writeln!(s, "# mlp_hidden_layers = {}", c.mlp_hidden_layers);
        let _ = writeln!(s, "# norm_mean = {}", join(&self.normalization.mean));
        let _ = writeln!(s, "# norm_std = {}", join(&self.normalization.std));
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# meta.{k} = {v}");
        }
        let _ = writeln!(s, "# params = {}", self.model.params.theta.len());
        for v in &self.model.params.theta {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed { path: path.to_path_buf(), reason };
        let mut header = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut body = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once('=').ok_or_else(|| malformed(format!("bad header line `{line}`")))?;
                let (k, v) = (k.trim(), v.trim().to_string());
                match k.strip_prefix("meta.") {
                    Some(m) => metadata.insert(m.to_string(), v),
                    None => header.insert(k.to_string(), v),
                };
            } else if !line.trim().is_empty() {
                body.push(line.trim().parse::<f64>().map_err(|_| malformed(format!("bad parameter `{line}`")))?);
            }
        }
        match header.get("schema") {
            Some(v) if v == CHECKPOINT_SCHEMA => {}
            found => {
                return Err(Error::SchemaMismatch {
                    path: path.to_path_buf(),
                    expected: CHECKPOINT_SCHEMA.to_string(),
                    found: found.cloned().unwrap_or_else(|| "<none>".into()),
                })
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| malformed(format!("missing header key `{k}`")));
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| malformed(format!("bad integer for `{k}`")))
        };
        let vec13 = |k: &str| -> Result<[f64; STATE_DIM]> {
            let v: Vec<f64> = get(k)?
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| malformed(format!("bad values for `{k}`")))?;
            v.try_into().map_err(|_| malformed(format!("`{k}` needs {STATE_DIM} values")))
        };
        let config = ModelConfig {
            architecture: get("architecture")?.parse()?,
            hidden_size: int("hidden_size")?,
            history: int("history")?,
            target: get("target")?.parse()?,
            input_dim: int("input_dim")?,
            output_dim: int("output_dim")?,
            mlp_hidden_layers: int("mlp_hidden_layers")?,
        };
        let count = int("params")?;
        if body.len() != count {
            return Err(malformed(format!("expected {count} parameters, found {}", body.len())));
        }
        let shapes = layout(&config);
        let model = Model::new(config, ModelParams { theta: body, shapes })
            .map_err(|e| malformed(e.to_string()))?;
        Ok(Checkpoint {
            model,
            normalization: Normalization { mean: vec13("norm_mean")?, std: vec13("norm_std")? },
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn random_model(cfg: ModelConfig, seed: u64) -> Model {
        Model::init(cfg, &mut stream(seed, Purpose::Init, 0)).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Purpose::Shuffle, 0);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layer_shapes() {
        let shapes = layout(&ModelConfig::mlp(128));
        let dims: Vec<(usize, usize)> = shapes.iter().filter(|s| !s.is_bias()).map(|s| (s.rows, s.cols)).collect();
        let one = init_params(&ModelConfig::mlp_1d(4), &mut stream(0, Purpose::Init, 0));
        let out = one.shapes.iter().find(|s| s.name == "out.w").unwrap();
        assert!(one.theta[out.offset..out.offset + out.len()].iter().all(|v| *v != 0.0));
        assert_eq!(dims, vec![(128, 13), (128, 128), (128, 128), (128, 128), (6, 128)]);
        let gru = layout(&ModelConfig::gru(128, 16));
        let dec = gru.iter().find(|s| s.name == "dec0.w").unwrap();
        assert_eq!((dec.rows, dec.cols), (64, 128));
        let a = random_model(ModelConfig::gru(8, 4), 3);
        let b = random_model(ModelConfig::gru(8, 4), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        for cfg in [ModelConfig::mlp(8), ModelConfig::gru(8, 3)] {
            let mut m = random_model(cfg, 1);
            m.params.theta.iter_mut().for_each(|v| *v = 0.0);
            let ob = m.params.shapes.iter().find(|s| s.name == "out.b").unwrap().clone();
            for (i, v) in m.params.theta[ob.offset..ob.offset + 6].iter_mut().enumerate() {
                *v = i as f64 - 2.5;
            }
            let x = random_vec(cfg.window_len(), 2);
            assert_eq!(m.forward_batch(&x, 1), vec![-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]);
            if cfg.architecture == Architecture::Gru {
                assert!(m.gru_hidden(&x, 1).unwrap().iter().all(|h| *h == 0.0));
            }
        }
    }

    #[test]
    fn last_layer_is_linear() {
        let m = random_model(ModelConfig::mlp(16), 4);
        let x = random_vec(13, 5);
        let y0 = m.forward_batch(&x, 1);
        let mut m2 = m.clone();
        let ow = m.params.shapes.iter().find(|s| s.name == "out.w").unwrap().clone();
        let ob = m.params.shapes.iter().find(|s| s.name == "out.b").unwrap().clone();
        m2.params.theta[ow.offset..ow.offset + ow.len()].iter_mut().for_each(|v| *v *= 3.0);
        let y1 = m2.forward_batch(&x, 1);
        for j in 0..6 {
            let b = m.params.theta[ob.offset + j];
            assert!(((y1[j] - b) - 3.0 * (y0[j] - b)).abs() < 1e-12);
        }
    }

    /// Independent scalar evaluation of the MLP.
    fn mlp_reference(m: &Model, x: &[f64]) -> Vec<f64> {
        let t = &m.params.theta;
        let mut a = x.to_vec();
        let shapes = &m.params.shapes;
        let layers = shapes.len() / 2;
        for l in 0..layers {
            let (w, b) = (&shapes[2 * l], &shapes[2 * l + 1]);
            let mut y = vec![0.0; w.rows];
            for i in 0..w.rows {
                let mut s = t[b.offset + i];
                for j in 0..w.cols {
                    s += t[w.offset + i * w.cols + j] * a[j];
                }
                y[i] = if l + 1 < layers { s.max(0.0) } else { s };
            }
            a = y;
        }
        a
    }

    #[test]
    fn mlp_matches_reference() {
        let m = random_model(ModelConfig::mlp(7), 9);
        let x = random_vec(13 * 5, 10);
        let batch = m.forward_batch(&x, 5);
        for i in 0..5 {
            let r = mlp_reference(&m, &x[i * 13..(i + 1) * 13]);
            for j in 0..6 {
                assert!((batch[i * 6 + j] - r[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_width_two_by_hand() {
        let cfg = ModelConfig { input_dim: 1, output_dim: 1, ..ModelConfig::gru(2, 2) };
        let mut m = random_model(cfg, 1);
        let theta: Vec<f64> = (0..m.num_params()).map(|i| 0.1 * ((i % 7) as f64 - 3.0)).collect();
        m.params.theta = theta.clone();
        let x = [0.5, -1.0];
        // hand evaluation with W (6×1), U (6×2), b (6)
        let w = &theta[0..6];
        let u = &theta[6..18];
        let b = &theta[18..24];
        let mut h = [0.0f64; 2];
        for &xt in &x {
            let s = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut r = [0.0; 2];
            let mut z = [0.0; 2];
            for j in 0..2 {
                r[j] = s(w[j] * xt + b[j] + u[2 * j] * h[0] + u[2 * j + 1] * h[1]);
                z[j] = s(w[2 + j] * xt + b[2 + j] + u[2 * (2 + j)] * h[0] + u[2 * (2 + j) + 1] * h[1]);
            }
            let mut hn = [0.0; 2];
            for j in 0..2 {
                let cand = (w[4 + j] * xt
                    + b[4 + j]
                    + u[2 * (4 + j)] * r[0] * h[0]
                    + u[2 * (4 + j) + 1] * r[1] * h[1])
                    .tanh();
                hn[j] = (1.0 - z[j]) * cand + z[j] * h[j];
            }
            h = hn;
        }
        let got = m.gru_hidden(&x, 1).unwrap();
        assert!((got[0] - h[0]).abs() < 1e-14 && (got[1] - h[1]).abs() < 1e-14);
        // decoder: width 1, weights 24 (1×2), bias 26, out 27 (1×1), bias 28
        let d = (theta[24] * h[0] + theta[25] * h[1] + theta[26]).max(0.0);
        let y = theta[27] * d + theta[28];
        assert!((m.forward_batch(&x, 1)[0] - y).abs() < 1e-14);
    }

    #[test]
    fn gru_hidden_is_bounded() {
        let m = random_model(ModelConfig::gru(6, 16), 2);
        let x = random_vec(16 * 13 * 4, 3);
        assert!(m.gru_hidden(&x, 4).unwrap().iter().all(|h| h.abs() < 1.0));
        // saturated gates can round to exactly ±1 but never beyond
        let big: Vec<f64> = x.iter().map(|v| 50.0 * v).collect();
        assert!(m.gru_hidden(&big, 4).unwrap().iter().all(|h| h.abs() <= 1.0));
    }

    fn gradient_check(cfg: ModelConfig, n: usize, seed: u64) -> f64 {
        let m = random_model(cfg, seed);
        let x = random_vec(n * cfg.window_len(), seed + 1);
        let y = random_vec(n * cfg.output_dim, seed + 2);
        let off = random_vec(n * cfg.output_dim, seed + 3);
        let mut g = vec![0.0; m.num_params()];
        m.loss_and_gradient(&m.params.theta, &x, &y, &off, n, &mut g);
        let mut rng = stream(seed, Purpose::Shuffle, 9);
        let mut scratch = vec![0.0; m.num_params()];
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = rng.random_range(0..m.num_params());
            let eps = 1e-5;
            let mut tp = m.params.theta.clone();
            tp[i] += eps;
            let lp = m.loss_and_gradient(&tp, &x, &y, &off, n, &mut scratch);
            tp[i] -= 2.0 * eps;
            let lm = m.loss_and_gradient(&tp, &x, &y, &off, n, &mut scratch);
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(gradient_check(ModelConfig::mlp(12), 5, 1) < 1e-4);
        assert!(gradient_check(ModelConfig::gru(10, 16), 4, 2) < 1e-4);
        let delta = ModelConfig::gru(6, 3).with_target(TargetMode::DeltaVelocity);
        assert!(gradient_check(delta, 3, 3) < 1e-4);
        assert!(gradient_check(ModelConfig::mlp_1d(16), 7, 4) < 1e-4);
    }

    #[test]
    fn zero_residual_zero_gradient_and_batch_linearity() {
        let m = random_model(ModelConfig::gru(5, 4), 7);
        let n = 6;
        let x = random_vec(n * 52, 8);
        let off = vec![0.0; n * 6];
        let y = m.forward_batch(&x, n);
        let mut g = vec![0.0; m.num_params()];
        assert_eq!(m.loss_and_gradient(&m.params.theta, &x, &y, &off, n, &mut g), 0.0);
        assert!(g.iter().all(|v| *v == 0.0));

        let y = random_vec(n * 6, 9);
        m.loss_and_gradient(&m.params.theta, &x, &y, &off, n, &mut g);
        let mut mean = vec![0.0; m.num_params()];
        let mut gi = vec![0.0; m.num_params()];
        for i in 0..n {
            m.loss_and_gradient(&m.params.theta, &x[i * 52..(i + 1) * 52], &y[i * 6..(i + 1) * 6], &off[..6], 1, &mut gi);
            for (a, b) in mean.iter_mut().zip(&gi) {
                *a += b / n as f64;
            }
        }
        for (a, b) in mean.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_mode_adds_current_velocity() {
        let cfg = ModelConfig::mlp(8);
        let m = random_model(cfg, 1);
        let md = Model { config: cfg.with_target(TargetMode::DeltaVelocity), params: m.params.clone() };
        let x = random_vec(13, 2);
        let v = random_vec(6, 3);
        let a = m.predict(&x, &v);
        let b = md.predict(&x, &v);
        for j in 0..6 {
            assert_eq!(b[j], a[j] + v[j]);
        }
    }
}
