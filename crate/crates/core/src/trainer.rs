//! The online training loop, evaluation and model persistence.
//!
//! Randomness comes only from the configured seed. Every consumer gets its own
//! ChaCha8 stream of that seed (see [`stream_rng`]):
//!
//! | stream            | used for                                         |
//! |-------------------|--------------------------------------------------|
//! | 0                 | network initialisation                           |
//! | 1                 | environment resets, acting, replay, updates      |
//! | 2 + row index     | the evaluation written in metrics row `index`    |

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::critic::{critic_update, td_targets, CriticOptimizers, TwinCritic};
use crate::diffusion::{DiffusionSchedule, NoisePredictor};
use crate::envs::{Env, EnvKind, PeakExponent};
use crate::error::{QvpoError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::nn::Adam;
use crate::policy::{behavior_select, build_training_batch, policy_update, sample_actions, PolicyConfig};
use crate::replay::{ReplayBuffer, Transition};
use crate::verify::mode_coverage;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.txt";

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM_BASE: u64 = 2;

/// Independent generator number `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Networks and optimizer state of a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub env: EnvKind,
    pub bandit_exponent: PeakExponent,
    pub schedule: DiffusionSchedule,
    pub predictor: NoisePredictor,
    pub critic: TwinCritic,
    pub actor_adam: Adam,
    pub critic_adam: CriticOptimizers,
}

impl Agent {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let env = Env::new(config.env, config.bandit_exponent);
        let spec = env.spec();
        let mut rng = stream_rng(config.seed, INIT_STREAM);
        let schedule =
            DiffusionSchedule::linear(config.diffusion_steps, config.beta_min, config.beta_max)?;
        let predictor =
            NoisePredictor::new(spec.action_dim, spec.obs_dim, config.hidden_dim, &mut rng)?;
        let critic = TwinCritic::new(
            spec.obs_dim,
            spec.action_dim,
            config.hidden_dim,
            config.tau,
            config.gamma,
            &mut rng,
        )?;
        let actor_adam = Adam::for_mlp(predictor.net(), config.actor_lr);
        let critic_adam = CriticOptimizers::new(&critic, config.critic_lr);
        Ok(Agent {
            env: config.env,
            bandit_exponent: config.bandit_exponent,
            schedule,
            predictor,
            critic,
            actor_adam,
            critic_adam,
        })
    }

    pub fn make_env(&self) -> Env {
        Env::new(self.env, self.bandit_exponent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn policy_config(config: &TrainConfig, env: &Env) -> PolicyConfig {
    PolicyConfig {
        n_d: config.n_d,
        n_e: config.n_e,
        k_b: config.k_b,
        k_t: config.k_t,
        omega_ent: config.omega_ent,
        transform: config.transform,
        qcut_epsilon: config.qcut_epsilon,
        bounds: env.spec().bounds.clone(),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `episodes` episodes acting with best-of-`k_eval` selection and returns
/// the mean and (population) standard deviation of episode returns. Nothing
/// is learned.
pub fn evaluate(
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    critic: &TwinCritic,
    env: &mut Env,
    episodes: usize,
    k_eval: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(QvpoError::Contract("evaluation needs at least one episode".into()));
    }
    let bounds = env.spec().bounds.clone();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        loop {
            let action = behavior_select(predictor, schedule, critic, &obs, k_eval, rng, &bounds)?;
            let out = env.step(&action)?;
            total += out.reward;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Mean and standard deviation of returns under uniformly random actions.
pub fn uniform_baseline(env: &mut Env, episodes: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(QvpoError::Contract("baseline needs at least one episode".into()));
    }
    let bounds = env.spec().bounds.clone();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(rng);
        let mut total = 0.0;
        loop {
            let out = env.step(&bounds.sample_uniform(rng))?;
            total += out.reward;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub model_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub agent: Agent,
}

#[derive(Default)]
struct LossTally {
    policy: f64,
    critic: f64,
    positive_weight: f64,
    zero_fraction: f64,
    updates: usize,
}

impl LossTally {
    fn means(&self) -> [f64; 4] {
        if self.updates == 0 {
            return [0.0; 4];
        }
        let n = self.updates as f64;
        [
            self.policy / n,
            self.critic / n,
            self.positive_weight / n,
            self.zero_fraction / n,
        ]
    }
}

/// Trains an agent according to `config`, writing `metrics.csv`, `config.txt`
/// and `model.json` into `config.output_dir`.
///
/// A metrics row is written every `eval_interval` steps plus one final row at
/// `total_steps`; a run of zero steps produces a header-only file.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join(CONFIG_FILE), config.to_text())?;
    let metrics_path = config.output_dir.join(METRICS_FILE);
    let mut writer = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?;

    let mut agent = Agent::new(config)?;
    let mut env = agent.make_env();
    let spec = env.spec().clone();
    let pcfg = policy_config(config, &env);
    pcfg.validate()?;
    let mut eval_env = agent.make_env();

    let mut buffer = ReplayBuffer::new(config.buffer_capacity, spec.obs_dim, spec.action_dim)?;
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    let mut obs = env.reset(&mut rng);
    let mut episodes = 0usize;
    let mut tally = LossTally::default();
    let mut rows = Vec::new();
    let policy_batch = config.effective_policy_batch();

    let mut emit_row = |agent: &Agent, step: usize, episodes: usize, tally: &LossTally, rows: &mut Vec<MetricsRow>| -> Result<()> {
        let mut eval_rng = stream_rng(config.seed, EVAL_STREAM_BASE + rows.len() as u64);
        let (mean, std) = evaluate(
            &agent.predictor,
            &agent.schedule,
            &agent.critic,
            &mut eval_env,
            config.eval_episodes,
            config.k_eval,
            &mut eval_rng,
        )?;
        let coverage = match &eval_env {
            Env::Bandit(b) => {
                let actions = sample_actions(
                    &agent.predictor,
                    &agent.schedule,
                    &[0.0],
                    config.coverage_samples,
                    &mut eval_rng,
                    &spec.bounds,
                )?;
                let c = mode_coverage(&actions, &b.params().peaks(), config.coverage_radius)?;
                Some([c[0], c[1], c[2]])
            }
            Env::Pendulum(_) => None,
        };
        let [policy_loss, critic_loss, mean_positive_weight, zero_weight_fraction] = tally.means();
        let row = MetricsRow {
            step,
            episodes,
            eval_return_mean: mean,
            eval_return_std: std,
            policy_loss,
            critic_loss,
            mean_positive_weight,
            zero_weight_fraction,
            coverage,
        };
        writer.write_row(&row)?;
        rows.push(row);
        Ok(())
    };

    for step in 1..=config.total_steps {
        let action = if step <= config.warmup_steps {
            spec.bounds.sample_uniform(&mut rng)
        } else {
            behavior_select(
                &agent.predictor,
                &agent.schedule,
                &agent.critic,
                &obs,
                config.k_b,
                &mut rng,
                &spec.bounds,
            )?
        };
        let out = env.step(&action)?;
        buffer.push(Transition {
            state: obs.clone(),
            action,
            reward: out.reward,
            next_state: out.observation.clone(),
            done: out.terminal,
        })?;
        obs = if out.done {
            episodes += 1;
            env.reset(&mut rng)
        } else {
            out.observation
        };

        if step > config.warmup_steps {
            let batch = buffer.sample_batch(config.batch_size, &mut rng)?;
            let states: Vec<Vec<f64>> =
                batch[..policy_batch].iter().map(|t| t.state.clone()).collect();
            let training = build_training_batch(
                &agent.predictor,
                &agent.schedule,
                &agent.critic,
                &states,
                &pcfg,
                &mut rng,
            )?;
            let policy_loss = policy_update(
                &mut agent.predictor,
                &mut agent.actor_adam,
                &agent.schedule,
                &training.samples,
                &mut rng,
            )?;
            let targets = td_targets(
                &agent.critic,
                &agent.predictor,
                &agent.schedule,
                &batch,
                config.k_t,
                &mut rng,
                &spec.bounds,
            )?;
            let critic_loss =
                critic_update(&mut agent.critic, &mut agent.critic_adam, &batch, &targets)?;
            agent.critic.polyak_update();

            tally.policy += policy_loss;
            tally.critic += critic_loss;
            tally.positive_weight += training.mean_positive_weight;
            tally.zero_fraction += training.zero_weight_fraction;
            tally.updates += 1;
        }

        if step % config.eval_interval == 0 {
            emit_row(&agent, step, episodes, &tally, &mut rows)?;
            tally = LossTally::default();
        }
    }
    if config.total_steps > 0 {
        emit_row(&agent, config.total_steps, episodes, &tally, &mut rows)?;
    }
    drop(emit_row);

    let model_path = config.output_dir.join(MODEL_FILE);
    agent.save(&model_path)?;
    Ok(TrainOutcome {
        metrics_path,
        model_path,
        rows,
        agent,
    })
}
