//! Built-in environments: a one-step continuous bandit with three reward
//! peaks, and the classic pendulum swing-up task.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, QvpoError, Result};

/// Per-coordinate box `[low, high]` of admissible actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_len("action bounds", low.len(), high.len())?;
        if low.is_empty() {
            return Err(QvpoError::Config("action bounds must be non-empty".into()));
        }
        for (i, (l, h)) in low.iter().zip(&high).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(QvpoError::Config(format!(
                    "action bound {i} must satisfy finite low < high, got [{l}, {h}]"
                )));
            }
        }
        Ok(ActionBounds { low, high })
    }

    /// The same interval on every coordinate.
    pub fn symmetric_box(dim: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(vec![low; dim], vec![high; dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn clamp(&self, action: &mut [f64]) {
        for ((a, l), h) in action.iter_mut().zip(&self.low).zip(&self.high) {
            *a = a.clamp(*l, *h);
        }
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.dim()
            && action
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(a, (l, h))| *l <= *a && *a <= *h)
    }

    /// One draw from the uniform distribution over the box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| rng.random_range(*l..*h))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub bounds: ActionBounds,
    pub horizon: usize,
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over and the environment must be reset.
    pub done: bool,
    /// The episode ended in a true terminal state. Time-limit endings are
    /// `done` but not `terminal`, so value bootstrapping continues through them.
    pub terminal: bool,
}

/// Exponent convention of the bandit reward peaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeakExponent {
    /// `exp(-|x - mu|^2 / (2 sigma))`, the form the reward is published with.
    AsWritten,
    /// `exp(-|x - mu|^2 / (2 sigma^2))`, a true Gaussian density shape.
    Gaussian,
}

impl FromStr for PeakExponent {
    type Err = QvpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(PeakExponent::AsWritten),
            "gaussian" => Ok(PeakExponent::Gaussian),
            other => Err(QvpoError::Config(format!(
                "unknown bandit exponent `{other}` (expected as_written or gaussian)"
            ))),
        }
    }
}

impl fmt::Display for PeakExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeakExponent::AsWritten => "as_written",
            PeakExponent::Gaussian => "gaussian",
        })
    }
}

/// Reward landscape of the three-peak bandit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditParams {
    pub weights: [f64; 3],
    pub sigmas: [f64; 3],
    pub means: [[f64; 2]; 3],
    pub exponent: PeakExponent,
}

impl Default for BanditParams {
    fn default() -> Self {
        BanditParams {
            weights: [1.5; 3],
            sigmas: [0.1; 3],
            means: [[-1.35, 0.65], [-0.65, 1.35], [-1.61, 1.61]],
            exponent: PeakExponent::AsWritten,
        }
    }
}

impl BanditParams {
    pub fn with_exponent(exponent: PeakExponent) -> Self {
        BanditParams {
            exponent,
            ..Self::default()
        }
    }

    pub fn peaks(&self) -> Vec<Vec<f64>> {
        self.means.iter().map(|m| m.to_vec()).collect()
    }
}

/// `sum_i w_i / (2 pi sigma_i^2) * exp(-c_i |x - mu_i|^2)` where `c_i` follows
/// `params.exponent`.
pub fn bandit_reward(params: &BanditParams, x: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), 2);
    let mut total = 0.0;
    for i in 0..3 {
        let sigma = params.sigmas[i];
        let dx = x[0] - params.means[i][0];
        let dy = x[1] - params.means[i][1];
        let sq = dx * dx + dy * dy;
        let rate = match params.exponent {
            PeakExponent::AsWritten => 1.0 / (2.0 * sigma),
            PeakExponent::Gaussian => 1.0 / (2.0 * sigma * sigma),
        };
        total += params.weights[i] / (2.0 * PI * sigma * sigma) * (-rate * sq).exp();
    }
    total
}

/// Single-step bandit: the observation is the constant `[0]` and every
/// action ends the episode.
#[derive(Debug, Clone)]
pub struct Bandit {
    params: BanditParams,
    spec: EnvSpec,
}

impl Bandit {
    pub fn new(params: BanditParams) -> Self {
        Bandit {
            params,
            spec: EnvSpec {
                obs_dim: 1,
                action_dim: 2,
                bounds: ActionBounds::symmetric_box(2, -2.0, 2.0).expect("static bounds"),
                horizon: 1,
            },
        }
    }

    pub fn params(&self) -> &BanditParams {
        &self.params
    }

    pub fn reset(&mut self) -> Vec<f64> {
        vec![0.0]
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_len("bandit action", 2, action.len())?;
        let mut a = action.to_vec();
        self.spec.bounds.clamp(&mut a);
        let reward = bandit_reward(&self.params, &a);
        Ok(StepOutcome {
            observation: vec![0.0],
            reward,
            done: true,
            terminal: true,
        })
    }
}

/// Physical constants of the pendulum.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    pub horizon: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
            horizon: 200,
        }
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    theta - 2.0 * PI * ((theta - PI) / (2.0 * PI)).ceil()
}

/// Swing-up pendulum. Angle zero is upright; observations are
/// `[cos(theta), sin(theta), theta_dot]`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    elapsed: usize,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        let spec = EnvSpec {
            obs_dim: 3,
            action_dim: 1,
            bounds: ActionBounds::symmetric_box(1, -params.max_torque, params.max_torque)
                .expect("positive torque limit"),
            horizon: params.horizon,
        };
        Pendulum {
            params,
            spec,
            theta: PI,
            theta_dot: 0.0,
            elapsed: 0,
        }
    }

    /// Places the pendulum at a given angle and angular velocity.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.elapsed = 0;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Rod energy with the upright position at maximum potential.
    pub fn energy(&self) -> f64 {
        let p = &self.params;
        p.mass * p.length * p.length / 6.0 * self.theta_dot * self.theta_dot
            + 0.5 * p.mass * p.gravity * p.length * self.theta.cos()
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.theta = rng.random_range(-PI..=PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.elapsed = 0;
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_len("pendulum action", 1, action.len())?;
        let p = &self.params;
        let u = action[0].clamp(-p.max_torque, p.max_torque);
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);

        let accel = 3.0 * p.gravity / (2.0 * p.length) * self.theta.sin()
            + 3.0 / (p.mass * p.length * p.length) * u;
        let theta_dot = (self.theta_dot + accel * p.dt).clamp(-p.max_speed, p.max_speed);
        let theta = self.theta + theta_dot * p.dt;
        if !(theta.is_finite() && theta_dot.is_finite() && reward.is_finite()) {
            return Err(QvpoError::NonFinite(format!(
                "pendulum state after action {u}"
            )));
        }
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.elapsed += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.elapsed >= p.horizon,
            terminal: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    Bandit,
    Pendulum,
}

impl FromStr for EnvKind {
    type Err = QvpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandit" => Ok(EnvKind::Bandit),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(QvpoError::Config(format!(
                "unknown env `{other}` (expected bandit or pendulum)"
            ))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Bandit => "bandit",
            EnvKind::Pendulum => "pendulum",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    Bandit(Bandit),
    Pendulum(Pendulum),
}

impl Env {
    pub fn new(kind: EnvKind, exponent: PeakExponent) -> Self {
        match kind {
            EnvKind::Bandit => Env::Bandit(Bandit::new(BanditParams::with_exponent(exponent))),
            EnvKind::Pendulum => Env::Pendulum(Pendulum::new(PendulumParams::default())),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            Env::Bandit(b) => &b.spec,
            Env::Pendulum(p) => &p.spec,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        match self {
            Env::Bandit(b) => b.reset(),
            Env::Pendulum(p) => p.reset(rng),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        match self {
            Env::Bandit(b) => b.step(action),
            Env::Pendulum(p) => p.step(action),
        }
    }
}
