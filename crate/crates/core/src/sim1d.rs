//! One-dimensional bouncing point mass.
//!
//! Above the ground the mass falls freely; below it a critically damped
//! spring pushes it back. Because the contact time constant `1/√k` is far
//! shorter than the one-second sampling interval, the map from initial to
//! final velocity has a sharp kink whose sharpness grows with `k`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State1D {
    /// m
    pub z: f64,
    /// m/s
    pub zdot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config1D {
    /// N/(kg·m)
    pub k: f64,
    /// s
    pub duration: f64,
    /// Variance of the Gaussian noise added to both velocities, (m/s)².
    pub noise_var: f64,
    /// Range of the initial velocity, m/s.
    pub zdot_range: (f64, f64),
    /// Initial height, m.
    pub z0: f64,
}

impl Config1D {
    pub fn new(k: f64) -> Self {
        Config1D {
            k,
            duration: 1.0,
            noise_var: 0.01,
            zdot_range: (-3.0, 5.0),
            z0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidConfig(format!("k must be positive, got {}", self.k)));
        }
        if !(self.duration > 0.0) || !(self.noise_var >= 0.0) || !(self.zdot_range.0 < self.zdot_range.1) {
            return Err(Error::InvalidConfig("invalid 1-D benchmark settings".into()));
        }
        Ok(())
    }

    /// Integration step `min(1e-4, 0.01/√k)` s.
    pub fn step_size(&self) -> f64 {
        (0.01 / self.k.sqrt()).min(1e-4)
    }
}

pub fn accel_1d(s: State1D, k: f64) -> f64 {
    if s.z <= 0.0 {
        -k * s.z - 2.0 * k.sqrt() * s.zdot - GRAVITY
    } else {
        -GRAVITY
    }
}

fn rk4(s: State1D, k: f64, dt: f64) -> State1D {
    let deriv = |s: State1D| (s.zdot, accel_1d(s, k));
    let (k1z, k1v) = deriv(s);
    let (k2z, k2v) = deriv(State1D { z: s.z + 0.5 * dt * k1z, zdot: s.zdot + 0.5 * dt * k1v });
    let (k3z, k3v) = deriv(State1D { z: s.z + 0.5 * dt * k2z, zdot: s.zdot + 0.5 * dt * k2v });
    let (k4z, k4v) = deriv(State1D { z: s.z + dt * k3z, zdot: s.zdot + dt * k3v });
    State1D {
        z: s.z + dt / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z),
        zdot: s.zdot + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    }
}

fn ballistic(s: State1D, t: f64) -> State1D {
    State1D { z: s.z + s.zdot * t - 0.5 * GRAVITY * t * t, zdot: s.zdot - GRAVITY * t }
}

/// Time at which a ballistic arc starting above ground reaches `z = 0`.
fn landing_time(s: State1D) -> f64 {
    // z + ż·t − g·t²/2 = 0, larger root
    let disc = s.zdot * s.zdot + 2.0 * GRAVITY * s.z;
    (s.zdot + disc.sqrt()) / GRAVITY
}

/// Fixed-step RK4 over `duration` seconds with steps of at most `h`.
///
/// The damping term makes the acceleration jump when the mass crosses
/// `z = 0` with nonzero velocity, so a step that straddles the crossing is
/// split there: free flight is advanced in closed form up to the landing
/// time, and lift-off inside a contact step is located by bisection on the
/// step length.
pub fn integrate_with_step(s0: State1D, k: f64, duration: f64, h: f64) -> State1D {
    let mut s = s0;
    let mut t = 0.0;
    while duration - t > 1e-15 {
        let dt = h.min(duration - t);
        if s.z > 0.0 {
            let land = landing_time(s);
            if land >= dt {
                s = ballistic(s, dt);
                t += dt;
            } else {
                s = ballistic(s, land);
                s.z = 0.0;
                t += land;
            }
            continue;
        }
        let next = rk4(s, k, dt);
        if next.z <= 0.0 {
            s = next;
            t += dt;
            continue;
        }
        let (mut lo, mut hi) = (0.0, dt);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if rk4(s, k, mid).z <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lift = if lo > 0.0 { lo } else { hi };
        s = rk4(s, k, lift);
        if s.z <= 0.0 {
            // move just past the boundary so free flight takes over
            s.z = f64::MIN_POSITIVE;
        }
        t += lift;
    }
    s
}

pub fn integrate_1d(s0: State1D, cfg: &Config1D) -> State1D {
    integrate_with_step(s0, cfg.k, cfg.duration, cfg.step_size())
}

/// Noiseless map `ż_t ↦ ż_{t+1}`.
pub fn velocity_map(zdot: f64, cfg: &Config1D) -> f64 {
    integrate_1d(State1D { z: cfg.z0, zdot }, cfg).zdot
}

/// `n` noisy `(ż_t, ż_{t+1})` pairs.
pub fn sample_1d_dataset<R: Rng + ?Sized>(n: usize, cfg: &Config1D, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (lo, hi) = cfg.zdot_range;
    Ok((0..n)
        .map(|_| {
            let v0 = rng.random_range(lo..=hi);
            let v1 = velocity_map(v0, cfg);
            if cfg.noise_var == 0.0 {
                (v0, v1)
            } else {
                (v0 + noise.sample(rng), v1 + noise.sample(rng))
            }
        })
        .collect())
}
