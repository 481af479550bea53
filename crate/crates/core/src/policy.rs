//! The diffusion policy layer: sampling, Q-weight transforms, entropy-sample
//! injection, training-batch construction and best-of-K action selection.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticView, TwinCritic};
pub use crate::diffusion::WeightedSample;
use crate::diffusion::{sample_reverse_batch, weighted_ddpm_loss, DiffusionSchedule, NoisePredictor};
use crate::envs::ActionBounds;
use crate::error::{check_len, QvpoError, Result};
use crate::nn::{row_to_vec, stack_rows, Adam};

/// Maps raw Q estimates of one state's candidate actions to nonnegative weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightTransform {
    /// Advantage against the candidates' mean Q, clipped at zero.
    Qadv,
    /// Only the best candidate keeps a weight: its Q, or a small epsilon when negative.
    Qcut,
}

impl FromStr for WeightTransform {
    type Err = QvpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qadv" => Ok(WeightTransform::Qadv),
            "qcut" => Ok(WeightTransform::Qcut),
            other => Err(QvpoError::Config(format!(
                "unknown transform `{other}` (expected qadv or qcut)"
            ))),
        }
    }
}

impl fmt::Display for WeightTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightTransform::Qadv => "qadv",
            WeightTransform::Qcut => "qcut",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Diffusion samples scored per training state.
    pub n_d: usize,
    /// Uniform samples injected per training state.
    pub n_e: usize,
    /// Best-of-K count for acting.
    pub k_b: usize,
    /// Best-of-K count for TD targets.
    pub k_t: usize,
    pub omega_ent: f64,
    pub transform: WeightTransform,
    pub qcut_epsilon: f64,
    pub bounds: ActionBounds,
}

impl PolicyConfig {
    pub fn with_bounds(bounds: ActionBounds) -> Self {
        PolicyConfig {
            n_d: 64,
            n_e: 10,
            k_b: 4,
            k_t: 2,
            omega_ent: 0.01,
            transform: WeightTransform::Qadv,
            qcut_epsilon: 1e-6,
            bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(QvpoError::Config(msg));
        if self.n_d == 0 {
            return fail("n_d must be at least 1".into());
        }
        if self.k_b == 0 || self.k_t == 0 || self.k_t > self.k_b {
            return fail(format!(
                "selection counts must satisfy 1 <= k_t <= k_b, got k_t = {}, k_b = {}",
                self.k_t, self.k_b
            ));
        }
        if !(self.omega_ent >= 0.0 && self.omega_ent.is_finite()) {
            return fail(format!("omega_ent must be finite and >= 0, got {}", self.omega_ent));
        }
        if !(self.qcut_epsilon > 0.0 && self.qcut_epsilon.is_finite()) {
            return fail(format!("qcut_epsilon must be > 0, got {}", self.qcut_epsilon));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `max(q_i - mean(q), 0)` for every candidate.
pub fn qadv_weights(q_values: &[f64]) -> Result<Vec<f64>> {
    if q_values.is_empty() {
        return Err(QvpoError::Contract("qadv needs at least one Q value".into()));
    }
    let baseline = q_values.iter().sum::<f64>() / q_values.len() as f64;
    Ok(q_values.iter().map(|q| (q - baseline).max(0.0)).collect())
}

/// Zero everywhere except the first maximiser, which gets `max(Q)` when it is
/// nonnegative and `epsilon` otherwise.
pub fn qcut_weights(q_values: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(QvpoError::Contract(format!("qcut epsilon must be > 0, got {epsilon}")));
    }
    let best = argmax_first(q_values)
        .ok_or_else(|| QvpoError::Contract("qcut needs at least one Q value".into()))?;
    let mut out = vec![0.0; q_values.len()];
    let q = q_values[best];
    out[best] = if q >= 0.0 { q } else { epsilon };
    Ok(out)
}

pub fn transform_weights(transform: WeightTransform, q_values: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    match transform {
        WeightTransform::Qadv => qadv_weights(q_values),
        WeightTransform::Qcut => qcut_weights(q_values, epsilon),
    }
}

/// Repeats every row of `states` `times` times, keeping copies adjacent.
fn repeat_rows(states: ArrayView2<'_, f64>, times: usize) -> Array2<f64> {
    let mut out = Array2::zeros((states.nrows() * times, states.ncols()));
    for (i, row) in states.rows().into_iter().enumerate() {
        for k in 0..times {
            out.row_mut(i * times + k).assign(&row);
        }
    }
    out
}

/// `n` independent draws from the diffusion policy at `state`.
pub fn sample_actions<R: Rng + ?Sized>(
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    state: &[f64],
    n: usize,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(QvpoError::Contract("sample count must be at least 1".into()));
    }
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    let states = repeat_rows(s, n);
    let actions = sample_reverse_batch(schedule, predictor, states.view(), rng, bounds)?;
    Ok(actions.rows().into_iter().map(row_to_vec).collect())
}

/// Best-of-`k` selection for every row of `states`: draws `k` actions per
/// state and keeps the one with the highest twin-minimum Q under `view`.
/// Returns the chosen actions and their Q values.
#[allow(clippy::too_many_arguments)]
pub fn select_best_of_k_batch<R: Rng + ?Sized>(
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    critic: &TwinCritic,
    view: CriticView,
    states: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if k == 0 {
        return Err(QvpoError::Contract("selection count must be at least 1".into()));
    }
    let repeated = repeat_rows(states, k);
    let candidates = sample_reverse_batch(schedule, predictor, repeated.view(), rng, bounds)?;
    let q = critic.q_min_batch(view, repeated.view(), candidates.view())?;
    let mut chosen = Array2::zeros((states.nrows(), candidates.ncols()));
    let mut best_q = Vec::with_capacity(states.nrows());
    for (i, qs) in q.chunks(k).enumerate() {
        let j = argmax_first(qs).expect("k >= 1");
        chosen.row_mut(i).assign(&candidates.row(i * k + j));
        best_q.push(qs[j]);
    }
    Ok((chosen, best_q))
}

/// The efficient behavior policy: best of `k` diffusion samples under the
/// online twin-minimum Q.
pub fn behavior_select<R: Rng + ?Sized>(
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    critic: &TwinCritic,
    state: &[f64],
    k: usize,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    let (actions, _) =
        select_best_of_k_batch(predictor, schedule, critic, CriticView::Online, s, k, rng, bounds)?;
    Ok(row_to_vec(actions.row(0)))
}

/// Weighted samples for one policy update plus bookkeeping about the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub samples: Vec<WeightedSample>,
    /// Mean selected-sample weight over states whose weight is positive.
    pub mean_positive_weight: f64,
    /// Fraction of states whose selected sample has zero weight.
    pub zero_weight_fraction: f64,
}

/// Builds the policy training set for a group of states.
///
/// Per state: `n_d` diffusion samples are scored with the online twin-minimum
/// Q and transformed to weights; the maximum-weight sample is kept. Then
/// `n_e` uniform actions are added, each weighted `omega_ent` times the kept
/// sample's weight. All diffusion draws are taken before the uniform draws.
pub fn build_training_batch<R: Rng + ?Sized>(
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    critic: &TwinCritic,
    states: &[Vec<f64>],
    config: &PolicyConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if states.is_empty() {
        return Err(QvpoError::Contract("training batch needs at least one state".into()));
    }
    check_len("policy bounds", predictor.action_dim(), config.bounds.dim())?;
    let s = stack_rows(states, predictor.state_dim())?;
    let repeated = repeat_rows(s.view(), config.n_d);
    let candidates = sample_reverse_batch(schedule, predictor, repeated.view(), rng, &config.bounds)?;
    let q = critic.q_min_batch(CriticView::Online, repeated.view(), candidates.view())?;

    let mut selected = Vec::with_capacity(states.len());
    for (i, qs) in q.chunks(config.n_d).enumerate() {
        let weights = transform_weights(config.transform, qs, config.qcut_epsilon)?;
        let j = argmax_first(&weights).expect("n_d >= 1");
        selected.push((row_to_vec(candidates.row(i * config.n_d + j)), weights[j]));
    }

    let mut samples = Vec::with_capacity(states.len() * (1 + config.n_e));
    for (state, (action, weight)) in states.iter().zip(&selected) {
        samples.push(WeightedSample {
            state: state.clone(),
            action: action.clone(),
            weight: *weight,
        });
        let entropy_weight = config.omega_ent * weight;
        for _ in 0..config.n_e {
            samples.push(WeightedSample {
                state: state.clone(),
                action: config.bounds.sample_uniform(rng),
                weight: entropy_weight,
            });
        }
    }

    let positive: Vec<f64> = selected.iter().map(|(_, w)| *w).filter(|w| *w > 0.0).collect();
    let mean_positive_weight = if positive.is_empty() {
        0.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let zero_weight_fraction = (states.len() - positive.len()) as f64 / states.len() as f64;
    Ok(TrainingBatch {
        samples,
        mean_positive_weight,
        zero_weight_fraction,
    })
}

/// One Adam step on the weighted noise-prediction loss over `samples`.
/// Returns the loss before the step. A batch whose weights are all zero
/// carries no signal and leaves the predictor and optimizer untouched.
pub fn policy_update<R: Rng + ?Sized>(
    predictor: &mut NoisePredictor,
    adam: &mut Adam,
    schedule: &DiffusionSchedule,
    samples: &[WeightedSample],
    rng: &mut R,
) -> Result<f64> {
    let (loss, grads) = weighted_ddpm_loss(schedule, predictor, samples, rng)?;
    if !loss.is_finite() {
        return Err(QvpoError::NonFinite(format!("policy loss {loss}")));
    }
    if samples.iter().any(|s| s.weight > 0.0) {
        adam.step(predictor.net_mut(), &grads)?;
    }
    Ok(loss)
}

/// Row-wise mean of a matrix of actions, handy for summaries.
pub fn mean_action(actions: &Array2<f64>) -> Vec<f64> {
    actions
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}
