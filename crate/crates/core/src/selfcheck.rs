//! Quick oracle suite behind `qvpo verify`. Each check compares library
//! output against an independent computation and reports pass or fail.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::critic::{critic_mse, CriticView, TwinCritic};
use crate::diffusion::{forward_noise, weighted_ddpm_loss, DiffusionSchedule, NoisePredictor, WeightedSample};
use crate::envs::{bandit_reward, ActionBounds, BanditParams};
use crate::error::Result;
use crate::nn::{gradient_check, Mlp};
use crate::policy::{qadv_weights, qcut_weights, select_best_of_k_batch};
use crate::verify::{brute_force_optimal, mode_coverage, theorem2_optimal, total_variation, GridPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn gradients() -> Result<CheckResult> {
    let schedule = DiffusionSchedule::linear(20, 0.01, 0.4)?;
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predictor = NoisePredictor::new(2, 3, 16, &mut rng)?;
        let batch: Vec<WeightedSample> = (0..6)
            .map(|_| WeightedSample {
                state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                weight: rng.random_range(0.0..2.0),
            })
            .collect();
        worst = worst.max(gradient_check(
            predictor.net(),
            |net| {
                let p = NoisePredictor::from_net(net.clone(), 2, 3).expect("same shape");
                weighted_ddpm_loss(&schedule, &p, &batch, &mut ChaCha8Rng::seed_from_u64(seed))
                    .expect("valid batch")
            },
            150,
            seed,
        ));

        let q = Mlp::two_hidden(5, 16, 1, &mut rng)?;
        let x = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        worst = worst.max(gradient_check(
            &q,
            |net| critic_mse(net, x.view(), &y).expect("valid batch"),
            150,
            seed,
        ));
    }
    Ok(check(
        "gradient check (noise predictor and critic)",
        worst < 1e-4,
        format!("max relative error {worst:.2e}"),
    ))
}

fn noising_moments() -> Result<CheckResult> {
    let schedule = DiffusionSchedule::linear(20, 0.01, 0.4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a0 = 0.7;
    let n = 20_000;
    let mut worst_z: f64 = 0.0;
    for t in [1, 10, 20] {
        let ab = schedule.alpha_bar(t);
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_noise(&schedule, &[a0], t, &[rng.sample(StandardNormal)]).map(|v| v[0]))
            .collect::<Result<_>>()?;
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target_var = 1.0 - ab;
        let z_mean = (mean - ab.sqrt() * a0).abs() / (target_var / n as f64).sqrt();
        let z_var = (var - target_var).abs() / (target_var * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    Ok(check(
        "forward noising moments",
        worst_z < 3.0,
        format!("largest deviation {worst_z:.2} standard errors"),
    ))
}

fn theorem2() -> Result<CheckResult> {
    let prior = GridPolicy::uniform(100, 100, [-2.0, -2.0], [2.0, 2.0])?;
    let q = prior.tabulate(|a| bandit_reward(&BanditParams::default(), a));
    let positive = total_variation(
        theorem2_optimal(&prior, &q)?.masses(),
        &brute_force_optimal(100, 100, prior.masses(), &q),
    );
    let top = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = q.iter().map(|v| v - top - 1.0).collect();
    let negative = total_variation(
        theorem2_optimal(&prior, &shifted)?.masses(),
        &brute_force_optimal(100, 100, prior.masses(), &shifted),
    );
    Ok(check(
        "optimal one-step policy vs brute force",
        positive < 1e-12 && negative < 1e-12,
        format!("TV {positive:.1e} (Q > 0), {negative:.1e} (Q <= 0)"),
    ))
}

fn transforms() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0usize;
    let trials = 1000;
    for _ in 0..trials {
        let n = rng.random_range(1..20);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c = rng.random_range(-5.0..5.0);
        let w = qadv_weights(&q)?;
        let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
        let ws = qadv_weights(&shifted)?;
        if w.iter().any(|x| *x < 0.0) || w.iter().zip(&ws).any(|(a, b)| (a - b).abs() > 1e-9) {
            failures += 1;
        }
        let cut = qcut_weights(&q, 1e-6)?;
        if cut.iter().filter(|x| **x != 0.0).count() != 1 {
            failures += 1;
        }
    }
    Ok(check(
        "weight transform properties",
        failures == 0,
        format!("{failures} failures in {trials} trials"),
    ))
}

fn selection() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let schedule = DiffusionSchedule::linear(20, 0.01, 0.4)?;
    let predictor = NoisePredictor::new(1, 3, 16, &mut rng)?;
    let critic = TwinCritic::new(3, 1, 16, 0.005, 0.99, &mut rng)?;
    let bounds = ActionBounds::symmetric_box(1, -2.0, 2.0)?;
    let n = 2000;
    let states = Array2::from_elem((n, 3), 0.3);
    let mut stats = Vec::new();
    for k in [1, 2, 4, 8] {
        let (_, q) = select_best_of_k_batch(
            &predictor, &schedule, &critic, CriticView::Online, states.view(), k, &mut rng, &bounds,
        )?;
        let mean = q.iter().sum::<f64>() / n as f64;
        let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        stats.push((mean, (var / n as f64).sqrt()));
    }
    let ok = stats
        .windows(2)
        .all(|w| w[1].0 - w[0].0 > -3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    let means: Vec<String> = stats.iter().map(|(m, _)| format!("{m:.4}")).collect();
    Ok(check(
        "best-of-K selection monotone in K",
        ok,
        format!("mean Q for K=1,2,4,8: {}", means.join(", ")),
    ))
}

fn coverage() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10_000;
    let actions: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let p = std::f64::consts::PI * 0.09 / 16.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let fractions = mode_coverage(&actions, &BanditParams::default().peaks(), 0.3)?;
    let worst = fractions
        .iter()
        .map(|f| (f - p).abs() / se)
        .fold(0.0, f64::max);
    Ok(check(
        "mode coverage of uniform actions",
        worst < 3.0,
        format!("largest deviation {worst:.2} standard errors"),
    ))
}

/// Runs every check. Errors inside a check count as failures.
pub fn run_all() -> Vec<CheckResult> {
    let suite: [(&'static str, fn() -> Result<CheckResult>); 6] = [
        ("gradient check", gradients),
        ("forward noising moments", noising_moments),
        ("optimal one-step policy", theorem2),
        ("weight transforms", transforms),
        ("best-of-K selection", selection),
        ("mode coverage", coverage),
    ];
    suite
        .into_iter()
        .map(|(name, f)| f().unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
