//! Twin Q networks with Polyak-averaged shadow copies.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, NoisePredictor};
use crate::envs::ActionBounds;
use crate::error::{check_len, QvpoError, Result};
use crate::nn::{stack_rows, Adam, Mlp};
use crate::policy::select_best_of_k_batch;
use crate::replay::Transition;

/// Which pair of networks answers a Q query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticView {
    Online,
    Shadow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinCritic {
    online: [Mlp; 2],
    shadow: [Mlp; 2],
    pub tau: f64,
    pub gamma: f64,
    state_dim: usize,
    action_dim: usize,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        tau: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let q1 = Mlp::two_hidden(state_dim + action_dim, hidden, 1, rng)?;
        let q2 = Mlp::two_hidden(state_dim + action_dim, hidden, 1, rng)?;
        Self::from_nets(q1, q2, state_dim, action_dim, tau, gamma)
    }

    /// Shadows start as exact copies of the online networks.
    pub fn from_nets(
        q1: Mlp,
        q2: Mlp,
        state_dim: usize,
        action_dim: usize,
        tau: f64,
        gamma: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(QvpoError::Config(format!("tau must lie in (0, 1], got {tau}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(QvpoError::Config(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        for q in [&q1, &q2] {
            check_len("critic input", state_dim + action_dim, q.input_dim())?;
            check_len("critic output", 1, q.output_dim())?;
        }
        if !q1.same_shape(&q2) {
            return Err(QvpoError::Config("twin critics must share an architecture".into()));
        }
        Ok(TwinCritic {
            shadow: [q1.clone(), q2.clone()],
            online: [q1, q2],
            tau,
            gamma,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn online(&self) -> &[Mlp; 2] {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut [Mlp; 2] {
        &mut self.online
    }

    pub fn shadow(&self) -> &[Mlp; 2] {
        &self.shadow
    }

    fn nets(&self, view: CriticView) -> &[Mlp; 2] {
        match view {
            CriticView::Online => &self.online,
            CriticView::Shadow => &self.shadow,
        }
    }

    fn inputs(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("critic state width", self.state_dim, states.ncols())?;
        check_len("critic action width", self.action_dim, actions.ncols())?;
        check_len("critic rows", states.nrows(), actions.nrows())?;
        Ok(concatenate(Axis(1), &[states, actions]).expect("row counts checked"))
    }

    /// Both Q estimates for every `(state, action)` row pair.
    pub fn q_pair_batch(
        &self,
        view: CriticView,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.inputs(states, actions)?;
        let [q1, q2] = self.nets(view);
        let a = q1.forward_batch(x.view())?;
        let b = q2.forward_batch(x.view())?;
        Ok((a.into_raw_vec_and_offset().0, b.into_raw_vec_and_offset().0))
    }

    /// Pointwise minimum of the twin estimates.
    pub fn q_min_batch(
        &self,
        view: CriticView,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        let (a, b) = self.q_pair_batch(view, states, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    fn q_min_single(&self, view: CriticView, state: &[f64], action: &[f64]) -> Result<f64> {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        let a = ArrayView2::from_shape((1, action.len()), action).expect("row");
        Ok(self.q_min_batch(view, s, a)?[0])
    }

    pub fn q_min(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.q_min_single(CriticView::Online, state, action)
    }

    pub fn q_min_shadow(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.q_min_single(CriticView::Shadow, state, action)
    }

    /// `shadow <- tau * online + (1 - tau) * shadow` for both networks.
    pub fn polyak_update(&mut self) {
        for (shadow, online) in self.shadow.iter_mut().zip(&self.online) {
            shadow.soft_update_from(online, self.tau);
        }
    }
}

/// Adam state for each of the two online critics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticOptimizers {
    pub q1: Adam,
    pub q2: Adam,
}

impl CriticOptimizers {
    pub fn new(critic: &TwinCritic, lr: f64) -> Self {
        CriticOptimizers {
            q1: Adam::for_mlp(&critic.online[0], lr),
            q2: Adam::for_mlp(&critic.online[1], lr),
        }
    }
}

/// Mean squared error of one network on `(x, targets)` with its gradient.
pub fn critic_mse(net: &Mlp, x: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, crate::nn::ParamGrads)> {
    let n = targets.len();
    let (pred, cache) = net.forward_cached(x)?;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((n, 1));
    for i in 0..n {
        let r = pred[[i, 0]] - targets[i];
        loss += r * r;
        upstream[[i, 0]] = 2.0 * r / n as f64;
    }
    loss /= n as f64;
    let (grads, _) = net.backward_batch(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// One Adam step of each online critic toward `targets`. Returns the mean of
/// the two networks' mean squared errors measured before the step.
pub fn critic_update(
    critic: &mut TwinCritic,
    optimizers: &mut CriticOptimizers,
    batch: &[Transition],
    targets: &[f64],
) -> Result<f64> {
    check_len("critic targets", batch.len(), targets.len())?;
    if batch.is_empty() {
        return Err(QvpoError::Contract("critic update needs a non-empty batch".into()));
    }
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
    let actions: Vec<Vec<f64>> = batch.iter().map(|t| t.action.clone()).collect();
    let s = stack_rows(&states, critic.state_dim)?;
    let a = stack_rows(&actions, critic.action_dim)?;
    let x = critic.inputs(s.view(), a.view())?;

    let (l1, g1) = critic_mse(&critic.online[0], x.view(), targets)?;
    let (l2, g2) = critic_mse(&critic.online[1], x.view(), targets)?;
    if !(l1.is_finite() && l2.is_finite()) {
        return Err(QvpoError::NonFinite(format!("critic loss ({l1}, {l2})")));
    }
    let [q1, q2] = &mut critic.online;
    optimizers.q1.step(q1, &g1)?;
    optimizers.q2.step(q2, &g2)?;
    Ok(0.5 * (l1 + l2))
}

/// TD targets `r + gamma * min_shadow_Q(s', a')` with `a'` chosen by best-of-`k`
/// selection under the shadow critics; terminal transitions yield `r`.
///
/// Only non-terminal transitions consume randomness.
pub fn td_targets<R: Rng + ?Sized>(
    critic: &TwinCritic,
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    batch: &[Transition],
    k: usize,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(QvpoError::Contract("target selection count must be at least 1".into()));
    }
    let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].done).collect();
    let mut targets: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    if live.is_empty() {
        return Ok(targets);
    }
    let next: Vec<Vec<f64>> = live.iter().map(|&i| batch[i].next_state.clone()).collect();
    let next = stack_rows(&next, critic.state_dim)?;
    let (_, q_next) = select_best_of_k_batch(
        predictor,
        schedule,
        critic,
        CriticView::Shadow,
        next.view(),
        k,
        rng,
        bounds,
    )?;
    for (&i, q) in live.iter().zip(q_next) {
        targets[i] += critic.gamma * q;
    }
    Ok(targets)
}

/// Single-transition form of [`td_targets`].
pub fn td_target<R: Rng + ?Sized>(
    critic: &TwinCritic,
    predictor: &NoisePredictor,
    schedule: &DiffusionSchedule,
    transition: &Transition,
    k: usize,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<f64> {
    Ok(td_targets(
        critic,
        predictor,
        schedule,
        std::slice::from_ref(transition),
        k,
        rng,
        bounds,
    )?[0])
}
