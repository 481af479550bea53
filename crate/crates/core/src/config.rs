//! Training configuration and its `key = value` text format.
//!
//! Every key is a field name of [`TrainConfig`]. Blank lines and lines starting
//! with `#` are ignored. Command-line flags use the same names and are applied
//! on top of the file with [`TrainConfig::set`].

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envs::{EnvKind, PeakExponent};
use crate::error::{QvpoError, Result};
use crate::policy::WeightTransform;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub total_steps: usize,
    pub seed: u64,

    pub n_d: usize,
    pub n_e: usize,
    pub k_b: usize,
    pub k_t: usize,
    pub omega_ent: f64,
    pub transform: WeightTransform,
    pub qcut_epsilon: f64,

    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// States of each mini-batch used for the policy update; 0 means all of them.
    pub policy_batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden_dim: usize,
    pub warmup_steps: usize,

    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,

    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub k_eval: usize,
    /// Policy samples drawn for the bandit mode-coverage columns.
    pub coverage_samples: usize,
    pub coverage_radius: f64,
    pub bandit_exponent: PeakExponent,

    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: EnvKind::Bandit,
            total_steps: 20_000,
            seed: 0,
            n_d: 64,
            n_e: 10,
            k_b: 4,
            k_t: 2,
            omega_ent: 0.01,
            transform: WeightTransform::Qadv,
            qcut_epsilon: 1e-6,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            policy_batch_size: 0,
            buffer_capacity: 1_000_000,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden_dim: 256,
            warmup_steps: 1000,
            diffusion_steps: 20,
            beta_min: 0.01,
            beta_max: 0.4,
            eval_interval: 1000,
            eval_episodes: 10,
            k_eval: 32,
            coverage_samples: 1000,
            coverage_radius: 0.3,
            bandit_exponent: PeakExponent::AsWritten,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| QvpoError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "total_steps",
        "seed",
        "n_d",
        "n_e",
        "k_b",
        "k_t",
        "omega_ent",
        "transform",
        "qcut_epsilon",
        "gamma",
        "tau",
        "batch_size",
        "policy_batch_size",
        "buffer_capacity",
        "actor_lr",
        "critic_lr",
        "hidden_dim",
        "warmup_steps",
        "diffusion_steps",
        "beta_min",
        "beta_max",
        "eval_interval",
        "eval_episodes",
        "k_eval",
        "coverage_samples",
        "coverage_radius",
        "bandit_exponent",
        "output_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" => self.env = v.parse()?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "n_d" => self.n_d = parse(key, v)?,
            "n_e" => self.n_e = parse(key, v)?,
            "k_b" => self.k_b = parse(key, v)?,
            "k_t" => self.k_t = parse(key, v)?,
            "omega_ent" => self.omega_ent = parse(key, v)?,
            "transform" => self.transform = v.parse()?,
            "qcut_epsilon" => self.qcut_epsilon = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "policy_batch_size" => self.policy_batch_size = parse(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, v)?,
            "actor_lr" => self.actor_lr = parse(key, v)?,
            "critic_lr" => self.critic_lr = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "k_eval" => self.k_eval = parse(key, v)?,
            "coverage_samples" => self.coverage_samples = parse(key, v)?,
            "coverage_radius" => self.coverage_radius = parse(key, v)?,
            "bandit_exponent" => self.bandit_exponent = v.parse()?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(QvpoError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| QvpoError::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| QvpoError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Serialises every key in [`TrainConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("env", self.env.to_string());
        put("total_steps", self.total_steps.to_string());
        put("seed", self.seed.to_string());
        put("n_d", self.n_d.to_string());
        put("n_e", self.n_e.to_string());
        put("k_b", self.k_b.to_string());
        put("k_t", self.k_t.to_string());
        put("omega_ent", self.omega_ent.to_string());
        put("transform", self.transform.to_string());
        put("qcut_epsilon", self.qcut_epsilon.to_string());
        put("gamma", self.gamma.to_string());
        put("tau", self.tau.to_string());
        put("batch_size", self.batch_size.to_string());
        put("policy_batch_size", self.policy_batch_size.to_string());
        put("buffer_capacity", self.buffer_capacity.to_string());
        put("actor_lr", self.actor_lr.to_string());
        put("critic_lr", self.critic_lr.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_min", self.beta_min.to_string());
        put("beta_max", self.beta_max.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("k_eval", self.k_eval.to_string());
        put("coverage_samples", self.coverage_samples.to_string());
        put("coverage_radius", self.coverage_radius.to_string());
        put("bandit_exponent", self.bandit_exponent.to_string());
        put("output_dir", self.output_dir.display().to_string());
        out
    }

    /// Number of mini-batch states fed to the policy update.
    pub fn effective_policy_batch(&self) -> usize {
        if self.policy_batch_size == 0 {
            self.batch_size
        } else {
            self.policy_batch_size.min(self.batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_d", self.n_d),
            ("k_b", self.k_b),
            ("k_t", self.k_t),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("hidden_dim", self.hidden_dim),
            ("diffusion_steps", self.diffusion_steps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("k_eval", self.k_eval),
            ("coverage_samples", self.coverage_samples),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(QvpoError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.k_t > self.k_b {
            return Err(QvpoError::Config(format!(
                "k_t ({}) must not exceed k_b ({})",
                self.k_t, self.k_b
            )));
        }
        for (name, value) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(QvpoError::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.coverage_radius > 0.0) {
            return Err(QvpoError::Config("`coverage_radius` must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_every_field() {
        let mut cfg = TrainConfig::default();
        cfg.env = EnvKind::Pendulum;
        cfg.omega_ent = 0.0;
        cfg.transform = WeightTransform::Qcut;
        cfg.qcut_epsilon = 2.5e-7;
        cfg.output_dir = PathBuf::from("out/x");
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = TrainConfig::from_text("# run\n\nseed = 7\n  total_steps=12  \n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.total_steps, 12);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = TrainConfig::from_text("seed = 1\nbogus\n").unwrap_err();
        assert!(matches!(err, QvpoError::Parse { line: 2, .. }), "{err}");
        let err = TrainConfig::from_text("seed = 1\n\nwhat = 3\n").unwrap_err();
        assert!(matches!(err, QvpoError::Parse { line: 3, .. }), "{err}");
        let err = TrainConfig::from_text("k_b = four\n").unwrap_err();
        assert!(matches!(err, QvpoError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn validation_catches_bad_counts() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.k_t = 9;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            eval_interval: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn policy_batch_defaults_to_full_batch() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.effective_policy_batch(), 256);
        cfg.policy_batch_size = 16;
        assert_eq!(cfg.effective_policy_batch(), 16);
    }
}
