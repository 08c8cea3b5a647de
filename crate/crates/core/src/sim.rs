//! Semi-implicit compliant-contact simulator for a single cube on flat ground.
//!
//! Each penetrating corner is a contact whose penetration is driven toward
//! zero by the spring-damper law `r̈ = −b·ṙ − k·r`. Contact forces are the
//! solution of a small regularized constraint problem in contact space
//! (normal force non-negative, friction inside the Coulomb cone), so the law
//! holds per corner with the true effective mass of the cube at that corner.
//! The integrator is the semi-implicit Euler scheme used by the data
//! generator: velocities first, then positions from the new velocities.

use crate::error::{Error, Result};
use crate::math::{quat_exp, rotate, Quaternion, Vec3};

pub const STATE_DIM: usize = 13;
pub const VELOCITY_DIM: usize = 6;
pub const TRAJECTORY_LEN: usize = 80;

/// Magnitude beyond which a state is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Rigid-body state: world position, orientation, world linear velocity and
/// body-frame angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub p: Vec3,
    pub q: Quaternion,
    pub pdot: Vec3,
    pub omega: Vec3,
}

impl State {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut a = [0.0; STATE_DIM];
        a[0..3].copy_from_slice(&self.p.to_array());
        a[3..7].copy_from_slice(&self.q.to_array());
        a[7..10].copy_from_slice(&self.pdot.to_array());
        a[10..13].copy_from_slice(&self.omega.to_array());
        a
    }

    pub fn from_slice(a: &[f64]) -> Self {
        assert!(a.len() >= STATE_DIM, "state slice too short");
        State {
            p: Vec3::new(a[0], a[1], a[2]),
            q: Quaternion::new(a[3], a[4], a[5], a[6]),
            pdot: Vec3::new(a[7], a[8], a[9]),
            omega: Vec3::new(a[10], a[11], a[12]),
        }
    }

    /// Generalized velocity `[ṗ; ω]`.
    pub fn velocity(&self) -> [f64; VELOCITY_DIM] {
        [
            self.pdot.x,
            self.pdot.y,
            self.pdot.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        ]
    }

    pub fn with_velocity(mut self, v: &[f64; VELOCITY_DIM]) -> Self {
        self.pdot = Vec3::new(v[0], v[1], v[2]);
        self.omega = Vec3::new(v[3], v[4], v[5]);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.q.is_finite() && self.pdot.is_finite() && self.omega.is_finite()
    }

    fn exceeds(&self, limit: f64) -> bool {
        self.to_array().iter().any(|v| !v.is_finite() || v.abs() > limit)
    }
}

/// Named stiffness settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stiffness {
    Hard,
    Medium,
    Soft,
}

impl Stiffness {
    pub const ALL: [Stiffness; 3] = [Stiffness::Hard, Stiffness::Medium, Stiffness::Soft];

    /// Contact stiffness in N/(kg·m).
    pub fn k(self) -> f64 {
        match self {
            Stiffness::Hard => 2500.0,
            Stiffness::Medium => 300.0,
            Stiffness::Soft => 100.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stiffness::Hard => "hard",
            Stiffness::Medium => "medium",
            Stiffness::Soft => "soft",
        }
    }

    pub fn params(self) -> SystemParams {
        SystemParams::with_stiffness(self.k())
    }
}

impl std::fmt::Display for Stiffness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stiffness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(Stiffness::Hard),
            "medium" => Ok(Stiffness::Medium),
            "soft" => Ok(Stiffness::Soft),
            other => Err(Error::InvalidConfig(format!("unknown stiffness setting `{other}`"))),
        }
    }
}

/// Physical constants of the die and the contact model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    /// kg
    pub mass: f64,
    /// Scalar moment of inertia, kg·m².
    pub inertia: f64,
    /// Cube side length, m.
    pub side: f64,
    /// m/s²
    pub gravity: f64,
    /// Coulomb friction coefficient.
    pub friction: f64,
    /// Contact stiffness `k`, N/(kg·m).
    pub stiffness: f64,
    /// Damping ratio `ζ = b / (2√k)`.
    pub damping_ratio: f64,
    /// Time step, s.
    pub dt: f64,
    /// Relative diagonal regularization of the contact-space system.
    pub contact_regularization: f64,
    /// Maximum Newton iterations of the contact solve per step.
    pub solver_iterations: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::with_stiffness(Stiffness::Hard.k())
    }
}

impl SystemParams {
    pub fn with_stiffness(k: f64) -> Self {
        SystemParams {
            mass: 0.37,
            inertia: 6.167e-4,
            side: 0.1,
            gravity: 9.81,
            friction: 1.0,
            stiffness: k,
            damping_ratio: 1.04,
            dt: 6.74e-3,
            contact_regularization: 1e-3,
            solver_iterations: 50,
        }
    }

    /// Damping coefficient `b = 2ζ√k`, 1/s.
    pub fn damping(&self) -> f64 {
        2.0 * self.damping_ratio * self.stiffness.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("side", self.side),
            ("gravity", self.gravity),
            ("friction", self.friction),
            ("stiffness", self.stiffness),
            ("damping_ratio", self.damping_ratio),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.contact_regularization >= 0.0) || self.solver_iterations == 0 {
            return Err(Error::InvalidConfig("invalid contact solver settings".into()));
        }
        Ok(())
    }
}

/// Aggregate contact wrench and per-corner penetrations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactResult {
    /// Total contact force, world frame, N.
    pub force: Vec3,
    /// Total contact torque, body frame, N·m.
    pub torque: Vec3,
    /// Per-corner penetration depth, m (zero when not touching).
    pub penetrations: [f64; 8],
}

impl ContactResult {
    pub fn max_penetration(&self) -> f64 {
        self.penetrations.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub params: SystemParams,
    pub seed: u64,
    /// Deepest corner penetration over all states of the noiseless rollout, m.
    pub max_penetration: f64,
}

/// Corner offsets in the body frame, `{±l/2}³`.
pub fn corner_offsets(side: f64) -> [Vec3; 8] {
    let h = 0.5 * side;
    let mut out = [Vec3::ZERO; 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = Vec3::new(
            if i & 4 != 0 { h } else { -h },
            if i & 2 != 0 { h } else { -h },
            if i & 1 != 0 { h } else { -h },
        );
    }
    out
}

/// World positions of the eight corners.
pub fn corner_positions(s: &State, prm: &SystemParams) -> [Vec3; 8] {
    corner_offsets(prm.side).map(|d| s.p + rotate(s.q, d))
}

/// Deepest geometric penetration of any corner below `z = 0`.
pub fn penetration_depth(s: &State, prm: &SystemParams) -> f64 {
    corner_positions(s, prm)
        .iter()
        .map(|c| -c.z)
        .fold(0.0, f64::max)
}

/// Contact force and torque for the current state.
///
/// A corner is in contact when its height is `≤ 0`. Each contact `i` has a
/// reference acceleration `a_ref = (k·r + b·ṙ, −b·ċ_x, −b·ċ_y)` in
/// (normal, tangent, tangent) coordinates, with `r = −c_z` and `ṙ = −ċ_z`.
/// The contact forces are those of the regularized constrained problem
///
/// ```text
/// min_a ½(a − a₀)ᵀM(a − a₀) + Σᵢ ½ρᵢ‖Π_K(−(Jᵢa − a_ref,i)/ρᵢ)‖²
/// ```
///
/// over the 6-D body acceleration `a`, where `K` is the Coulomb cone and
/// `ρᵢ = ε·(Jᵢ M⁻¹ Jᵢᵀ)_nn`. The force of contact `i` is
/// `λᵢ = Π_K(−(Jᵢa − a_ref,i)/ρᵢ)`. The objective is convex and piecewise
/// quadratic; it is minimized with a damped Newton method.
pub fn contact_forces(s: &State, prm: &SystemParams) -> ContactResult {
    let omega_world = rotate(s.q, s.omega);
    let k = prm.stiffness;
    let b = prm.damping();

    let mut result = ContactResult::default();
    let mut contacts: Vec<Contact> = Vec::with_capacity(8);
    for (i, d) in corner_offsets(prm.side).iter().enumerate() {
        let arm = rotate(s.q, *d);
        let c = s.p + arm;
        if c.z > 0.0 {
            continue;
        }
        let v = s.pdot + omega_world.cross(arm);
        let r = -c.z;
        result.penetrations[i] = r;
        let inv_mass_n = 1.0 / prm.mass + arm.cross(Vec3::Z).norm_squared() / prm.inertia;
        contacts.push(Contact {
            arm,
            reference: [k * r - b * v.z, -b * v.x, -b * v.y],
            rho: (prm.contact_regularization * inv_mass_n).max(f64::MIN_POSITIVE),
        });
    }
    if contacts.is_empty() {
        return result;
    }

    let problem = ContactProblem {
        contacts: &contacts,
        mass: prm.mass,
        inertia: prm.inertia,
        gravity: prm.gravity,
        mu: prm.friction,
    };
    let accel = problem.solve(prm.solver_iterations);

    let mut torque_world = Vec3::ZERO;
    for c in &contacts {
        let l = problem.force(c, &accel);
        let f = Vec3::new(l[1], l[2], l[0]);
        result.force += f;
        torque_world += c.arm.cross(f);
    }
    result.torque = rotate(s.q.conjugate(), torque_world);
    result
}

struct Contact {
    arm: Vec3,
    /// (normal, x, y)
    reference: [f64; 3],
    rho: f64,
}

/// Directions of the contact frame rows: normal first.
const DIRECTIONS: [Vec3; 3] = [Vec3::Z, Vec3::X, Vec3::Y];

struct ContactProblem<'a> {
    contacts: &'a [Contact],
    mass: f64,
    inertia: f64,
    gravity: f64,
    mu: f64,
}

impl ContactProblem<'_> {
    fn free_accel(&self) -> [f64; 6] {
        [0.0, 0.0, -self.gravity, 0.0, 0.0, 0.0]
    }

    fn metric(&self, i: usize) -> f64 {
        if i < 3 {
            self.mass
        } else {
            self.inertia
        }
    }

    /// Contact-frame acceleration `J a` of a contact point.
    fn contact_accel(&self, c: &Contact, a: &[f64; 6]) -> [f64; 3] {
        let lin = Vec3::new(a[0], a[1], a[2]);
        let ang = Vec3::new(a[3], a[4], a[5]);
        let p = lin + ang.cross(c.arm);
        [p.z, p.x, p.y]
    }

    fn jacobian(&self, c: &Contact) -> [[f64; 6]; 3] {
        let mut j = [[0.0; 6]; 3];
        for (row, e) in DIRECTIONS.iter().enumerate() {
            let ang = c.arm.cross(*e);
            j[row] = [e.x, e.y, e.z, ang.x, ang.y, ang.z];
        }
        j
    }

    fn force(&self, c: &Contact, a: &[f64; 6]) -> [f64; 3] {
        let ja = self.contact_accel(c, a);
        let x = [
            -(ja[0] - c.reference[0]) / c.rho,
            -(ja[1] - c.reference[1]) / c.rho,
            -(ja[2] - c.reference[2]) / c.rho,
        ];
        project_cone(x, self.mu)
    }

    fn objective(&self, a: &[f64; 6]) -> f64 {
        let a0 = self.free_accel();
        let mut f = 0.0;
        for i in 0..6 {
            f += 0.5 * self.metric(i) * (a[i] - a0[i]).powi(2);
        }
        for c in self.contacts {
            let l = self.force(c, a);
            f += 0.5 * c.rho * (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]);
        }
        f
    }

    fn gradient(&self, a: &[f64; 6]) -> [f64; 6] {
        let a0 = self.free_accel();
        let mut g = [0.0; 6];
        for i in 0..6 {
            g[i] = self.metric(i) * (a[i] - a0[i]);
        }
        for c in self.contacts {
            let l = self.force(c, a);
            let j = self.jacobian(c);
            for row in 0..3 {
                for col in 0..6 {
                    g[col] -= j[row][col] * l[row];
                }
            }
        }
        g
    }

    fn hessian(&self, a: &[f64; 6]) -> [[f64; 6]; 6] {
        let mut h = [[0.0; 6]; 6];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = self.metric(i);
        }
        for c in self.contacts {
            let ja = self.contact_accel(c, a);
            let x = [
                -(ja[0] - c.reference[0]) / c.rho,
                -(ja[1] - c.reference[1]) / c.rho,
                -(ja[2] - c.reference[2]) / c.rho,
            ];
            let dp = cone_projection_jacobian(x, self.mu);
            let j = self.jacobian(c);
            // Jᵀ (DΠ / ρ) J
            for p in 0..6 {
                for q in 0..6 {
                    let mut v = 0.0;
                    for r in 0..3 {
                        for t in 0..3 {
                            v += j[r][p] * dp[r][t] * j[t][q];
                        }
                    }
                    h[p][q] += v / c.rho;
                }
            }
        }
        h
    }

    fn solve(&self, max_iter: usize) -> [f64; 6] {
        let mut a = self.free_accel();
        let mut f = self.objective(&a);
        for _ in 0..max_iter {
            let g = self.gradient(&a);
            let gnorm = (0..6).map(|i| g[i] * g[i] / self.metric(i)).sum::<f64>().sqrt();
            let scale = (self.mass).sqrt() * self.gravity.max(1.0);
            if gnorm <= 1e-14 * scale {
                break;
            }
            let h = self.hessian(&a);
            let Some(d) = solve_spd6(h, g.map(|v| -v)) else {
                break;
            };
            let slope: f64 = (0..6).map(|i| g[i] * d[i]).sum();
            if slope >= 0.0 {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: [f64; 6] = std::array::from_fn(|i| a[i] + t * d[i]);
                let ft = self.objective(&trial);
                if ft <= f + 1e-4 * t * slope {
                    a = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        a
    }
}

/// Euclidean projection onto `{(n, t): ‖t‖ ≤ μ·n}`.
fn project_cone(x: [f64; 3], mu: f64) -> [f64; 3] {
    let s = (x[1] * x[1] + x[2] * x[2]).sqrt();
    if s <= mu * x[0] {
        return x;
    }
    if mu * s <= -x[0] {
        return [0.0; 3];
    }
    let alpha = (x[0] + mu * s) / (1.0 + mu * mu);
    [alpha, mu * alpha * x[1] / s, mu * alpha * x[2] / s]
}

fn cone_projection_jacobian(x: [f64; 3], mu: f64) -> [[f64; 3]; 3] {
    let s = (x[1] * x[1] + x[2] * x[2]).sqrt();
    if s <= mu * x[0] {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    if mu * s <= -x[0] {
        return [[0.0; 3]; 3];
    }
    let u = [x[1] / s, x[2] / s];
    let alpha = (x[0] + mu * s) / (1.0 + mu * mu);
    let c = 1.0 / (1.0 + mu * mu);
    let tang = mu * alpha / s;
    let mut m = [[0.0; 3]; 3];
    m[0][0] = c;
    for i in 0..2 {
        m[0][i + 1] = c * mu * u[i];
        m[i + 1][0] = c * mu * u[i];
        for j in 0..2 {
            let delta = if i == j { 1.0 } else { 0.0 };
            m[i + 1][j + 1] = c * mu * mu * u[i] * u[j] + tang * (delta - u[i] * u[j]);
        }
    }
    m
}

/// Cholesky solve of a 6×6 symmetric positive definite system.
fn solve_spd6(mut h: [[f64; 6]; 6], mut rhs: [f64; 6]) -> Option<[f64; 6]> {
    for j in 0..6 {
        let mut d = h[j][j];
        for k in 0..j {
            d -= h[j][k] * h[j][k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        h[j][j] = d;
        for i in j + 1..6 {
            let mut v = h[i][j];
            for k in 0..j {
                v -= h[i][k] * h[j][k];
            }
            h[i][j] = v / d;
        }
    }
    for i in 0..6 {
        for k in 0..i {
            rhs[i] -= h[i][k] * rhs[k];
        }
        rhs[i] /= h[i][i];
    }
    for i in (0..6).rev() {
        for k in i + 1..6 {
            rhs[i] -= h[k][i] * rhs[k];
        }
        rhs[i] /= h[i][i];
    }
    Some(rhs)
}

/// Next generalized velocity from the current state.
fn next_velocity(s: &State, prm: &SystemParams) -> (Vec3, Vec3) {
    let contact = contact_forces(s, prm);
    let accel = contact.force / prm.mass - Vec3::Z * prm.gravity;
    let pdot = s.pdot + accel * prm.dt;
    let omega = s.omega + contact.torque * (prm.dt / prm.inertia);
    (pdot, omega)
}

/// Advance the configuration with a given next velocity.
pub fn integrate_configuration(s: &State, pdot: Vec3, omega: Vec3, dt: f64) -> State {
    State {
        p: s.p + pdot * dt,
        q: (s.q * quat_exp(omega * dt)).normalized(),
        pdot,
        omega,
    }
}

/// One semi-implicit step.
pub fn step(s: &State, prm: &SystemParams) -> State {
    let (pdot, omega) = next_velocity(s, prm);
    integrate_configuration(s, pdot, omega, prm.dt)
}

/// Roll out `n_steps` states (including `x0`).
pub fn simulate(x0: &State, prm: &SystemParams, n_steps: usize, seed: u64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n_steps);
    let mut max_penetration = 0.0f64;
    let mut s = *x0;
    for i in 0..n_steps {
        if s.exceeds(DIVERGENCE_LIMIT) {
            return Err(Error::Diverged(format!("simulation diverged at step {i}")));
        }
        max_penetration = max_penetration.max(penetration_depth(&s, prm));
        states.push(s);
        if i + 1 < n_steps {
            s = step(&s, prm);
        }
    }
    Ok(Trajectory {
        states,
        params: *prm,
        seed,
        max_penetration,
    })
}

/// One-step velocity prediction of the simulator from the current state only.
pub fn oracle_predict(s: &State, prm: &SystemParams) -> [f64; VELOCITY_DIM] {
    let (pdot, omega) = next_velocity(s, prm);
    [pdot.x, pdot.y, pdot.z, omega.x, omega.y, omega.z]
}

/// Kinetic plus gravitational energy.
pub fn mechanical_energy(s: &State, prm: &SystemParams) -> f64 {
    0.5 * prm.mass * s.pdot.norm_squared()
        + 0.5 * prm.inertia * s.omega.norm_squared()
        + prm.mass * prm.gravity * s.p.z
}

/// Nominal initial state with its quaternion normalized.
pub fn nominal_initial_state() -> State {
    State {
        p: Vec3::new(0.186, 0.026, 0.122),
        q: Quaternion::new(-0.525, 0.394, -0.296, -0.678).normalized(),
        pdot: Vec3::new(0.014, 1.291, -0.212),
        omega: Vec3::new(1.463, -4.854, 9.870),
    }
}

/// Flat resting pose at the static equilibrium of the contact model.
///
/// With four symmetric contacts each carrying `m·g/4`, the regularized solve
/// balances when `k·r = ε·A_ii·m·g/4`, where `A_ii` is the corner's inverse
/// effective mass; this is `≈ ε·g/k` for a uniform cube.
pub fn resting_state(prm: &SystemParams) -> State {
    let inv_mass = 1.0 / prm.mass + 0.5 * prm.side * prm.side / prm.inertia;
    let sag = prm.contact_regularization * inv_mass * 0.25 * prm.mass * prm.gravity / prm.stiffness;
    State {
        p: Vec3::new(0.0, 0.0, 0.5 * prm.side - sag),
        ..State::default()
    }
}
