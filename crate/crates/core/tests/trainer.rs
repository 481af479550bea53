//! End-to-end checks of the training loop, evaluation and metrics files.

use std::fs;
use std::path::Path;

use qvpo::config::TrainConfig;
use qvpo::envs::EnvKind;
use qvpo::metrics::{parse_metrics, HEADER};
use qvpo::trainer::{evaluate, stream_rng, train, uniform_baseline, Agent, METRICS_FILE, MODEL_FILE};

fn small(env: EnvKind, steps: usize, dir: &Path) -> TrainConfig {
    TrainConfig {
        env,
        total_steps: steps,
        warmup_steps: 100,
        batch_size: 16,
        policy_batch_size: 4,
        n_d: 4,
        n_e: 2,
        hidden_dim: 16,
        eval_interval: 100,
        eval_episodes: 2,
        k_eval: 4,
        coverage_samples: 50,
        buffer_capacity: 10_000,
        output_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(EnvKind::Bandit, 0, dir.path())).unwrap();
    assert!(out.rows.is_empty());
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text, format!("{HEADER}\n"));
}

#[test]
fn row_count_is_intervals_plus_final() {
    let dir = tempfile::tempdir().unwrap();
    for (steps, interval) in [(250, 100), (300, 100), (40, 100)] {
        let cfg = TrainConfig {
            eval_interval: interval,
            ..small(EnvKind::Bandit, steps, dir.path())
        };
        train(&cfg).unwrap();
        let rows = parse_metrics(&fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(rows.len(), steps / interval + 1, "steps {steps}");
        assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
        assert_eq!(rows.last().unwrap().step, steps);
        assert!(rows.iter().all(|r| r.coverage.is_some()));
    }
}

#[test]
fn identical_seeds_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        train(&small(EnvKind::Pendulum, 400, dir)).unwrap();
    }
    let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(
        fs::read(a.path().join(MODEL_FILE)).unwrap(),
        fs::read(b.path().join(MODEL_FILE)).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        seed: 1,
        ..small(EnvKind::Pendulum, 400, c.path())
    };
    train(&cfg).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn pendulum_rows_leave_coverage_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(EnvKind::Pendulum, 200, dir.path())).unwrap();
    assert!(out.rows.iter().all(|r| r.coverage.is_none()));
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",,,")));
}

#[test]
fn saved_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(EnvKind::Bandit, 150, dir.path())).unwrap();
    let loaded = Agent::load(&out.model_path).unwrap();
    assert_eq!(loaded, out.agent);
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        k_t: 10,
        k_b: 2,
        ..small(EnvKind::Bandit, 10, &dir.path().join("run"))
    };
    let err = train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn evaluation_has_no_side_effects_and_is_seeded() {
    let agent = Agent::new(&TrainConfig {
        hidden_dim: 16,
        ..TrainConfig::default()
    })
    .unwrap();
    let before = agent.clone();
    let mut env = agent.make_env();
    let run = |env: &mut qvpo::envs::Env| {
        evaluate(&agent.predictor, &agent.schedule, &agent.critic, env, 20, 4, &mut stream_rng(3, 9)).unwrap()
    };
    let first = run(&mut env);
    let second = run(&mut env);
    assert_eq!(first, second);
    assert_eq!(agent, before);
    assert!(evaluate(&agent.predictor, &agent.schedule, &agent.critic, &mut env, 0, 4, &mut stream_rng(0, 0)).is_err());
}

#[test]
fn untrained_single_sample_policy_is_near_uniform_baseline() {
    let agent = Agent::new(&TrainConfig {
        hidden_dim: 16,
        ..TrainConfig::default()
    })
    .unwrap();
    let mut env = agent.make_env();
    let (policy, _) =
        evaluate(&agent.predictor, &agent.schedule, &agent.critic, &mut env, 1000, 1, &mut stream_rng(5, 0)).unwrap();
    let (uniform, spread) = uniform_baseline(&mut env, 1000, &mut stream_rng(5, 1)).unwrap();
    assert!((policy - uniform).abs() < spread, "policy {policy}, uniform {uniform} +/- {spread}");
}

#[test]
fn larger_evaluation_selection_does_not_hurt_a_trained_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 3000,
        warmup_steps: 1000,
        batch_size: 64,
        policy_batch_size: 16,
        n_d: 16,
        n_e: 10,
        hidden_dim: 64,
        eval_interval: 3000,
        output_dir: dir.path().to_path_buf(),
        ..TrainConfig::default()
    };
    let agent = train(&cfg).unwrap().agent;
    let mut env = agent.make_env();
    let episodes = 400;
    let mut stats = Vec::new();
    for (k, stream) in [(1, 0), (32, 1)] {
        let (mean, std) = evaluate(
            &agent.predictor,
            &agent.schedule,
            &agent.critic,
            &mut env,
            episodes,
            k,
            &mut stream_rng(11, stream),
        )
        .unwrap();
        stats.push((mean, std / (episodes as f64).sqrt()));
    }
    let (one, many) = (stats[0], stats[1]);
    assert!(many.0 - one.0 > -3.0 * (one.1.powi(2) + many.1.powi(2)).sqrt(), "{stats:?}");
}
