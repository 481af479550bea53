//! Command-line front end: `train`, `eval`, `plot` and `verify`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qvpo::config::TrainConfig;
use qvpo::plot::plot_metrics;
use qvpo::selfcheck;
use qvpo::trainer::{evaluate, stream_rng, train, uniform_baseline, Agent};
use qvpo::{QvpoError, Result};

#[derive(Parser)]
#[command(name = "qvpo", version, about = "Q-weighted diffusion policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent. Extra `--key value` pairs override config entries.
    Train {
        /// `key = value` config file applied on top of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved model with best-of-K action selection.
    Eval {
        /// `model.json` written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 32)]
        k_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also report the uniform-random policy over the same number of episodes.
        #[arg(long)]
        baseline: bool,
    },
    /// Render a metrics CSV as an SVG learning curve.
    Plot {
        metrics: PathBuf,
        /// Defaults to the metrics path with an `.svg` extension.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| QvpoError::Config(format!("expected `--key`, got `{flag}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| QvpoError::Config(format!("missing value for `{flag}`")))?;
        out.push((key.replace('-', "_"), value.clone()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = config {
                cfg.apply_text(&fs::read_to_string(path)?)?;
            }
            for (k, v) in parse_overrides(&overrides)? {
                cfg.set(&k, &v)?;
            }
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {}: eval return {:.3} +/- {:.3}",
                    last.step, last.eval_return_mean, last.eval_return_std
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("model: {}", outcome.model_path.display());
        }
        Command::Eval {
            model,
            episodes,
            k_eval,
            seed,
            baseline,
        } => {
            let agent = Agent::load(&model)?;
            let mut env = agent.make_env();
            let mut rng = stream_rng(seed, 0);
            let (mean, std) = evaluate(
                &agent.predictor,
                &agent.schedule,
                &agent.critic,
                &mut env,
                episodes,
                k_eval,
                &mut rng,
            )?;
            println!("policy (K={k_eval}): {mean:.4} +/- {std:.4} over {episodes} episodes");
            if baseline {
                let mut rng = stream_rng(seed, 1);
                let (mean, std) = uniform_baseline(&mut env, episodes, &mut rng)?;
                println!("uniform: {mean:.4} +/- {std:.4} over {episodes} episodes");
            }
        }
        Command::Plot { metrics, output } => {
            let svg = plot_metrics(&fs::read_to_string(&metrics)?)?;
            let output = output.unwrap_or_else(|| metrics.with_extension("svg"));
            fs::write(&output, svg)?;
            println!("wrote {}", output.display());
        }
        Command::Verify => {
            let results = selfcheck::run_all();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {}: {}", r.name, r.detail);
            }
            if failed > 0 {
                return Err(QvpoError::Degenerate(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
