//! DDPM machinery: variance schedule, forward noising, state-conditioned
//! reverse sampling and the per-sample weighted noise-prediction loss.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::ActionBounds;
use crate::error::{check_len, QvpoError, Result};
use crate::nn::{Mlp, ParamGrads};

/// Width of the sinusoidal diffusion-step embedding fed to the noise predictor.
pub const TIME_EMBED_DIM: usize = 16;

/// Per-step variance tables. All accessors take 1-based steps `t in [1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas linearly interpolated from `beta_min` to `beta_max` over `steps`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(QvpoError::Config("diffusion steps must be at least 1".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(QvpoError::Config(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(QvpoError::Config("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(QvpoError::Config(format!(
                "beta at step {} must lie in (0, 1), got {b}",
                i + 1
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(QvpoError::Contract(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )))
        }
    }
}

/// Samples `a_t ~ q(a_t | a_0)` given explicit noise: `sqrt(ab) a0 + sqrt(1 - ab) eps`.
pub fn forward_noise(
    schedule: &DiffusionSchedule,
    a0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_len("forward noise", a0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| signal * a + noise * e).collect())
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// The noise-prediction network `eps_theta(a_t, s, t)`.
///
/// Input rows are `[a_t, s, embed(t)]`; output rows have the action dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePredictor {
    net: Mlp,
    action_dim: usize,
    state_dim: usize,
}

impl NoisePredictor {
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        state_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::two_hidden(action_dim + state_dim + TIME_EMBED_DIM, hidden, action_dim, rng)?;
        Self::from_net(net, action_dim, state_dim)
    }

    pub fn from_net(net: Mlp, action_dim: usize, state_dim: usize) -> Result<Self> {
        check_len(
            "noise predictor input",
            action_dim + state_dim + TIME_EMBED_DIM,
            net.input_dim(),
        )?;
        check_len("noise predictor output", action_dim, net.output_dim())?;
        Ok(NoisePredictor {
            net,
            action_dim,
            state_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Assembles network input rows; `steps[i]` is the diffusion step of row `i`.
    fn build_input(
        &self,
        noisy: ArrayView2<'_, f64>,
        states: ArrayView2<'_, f64>,
        steps: &[usize],
    ) -> Result<Array2<f64>> {
        check_len("noisy action width", self.action_dim, noisy.ncols())?;
        check_len("state width", self.state_dim, states.ncols())?;
        check_len("state rows", noisy.nrows(), states.nrows())?;
        check_len("step count", noisy.nrows(), steps.len())?;
        let (ad, sd) = (self.action_dim, self.state_dim);
        let mut input = Array2::zeros((noisy.nrows(), ad + sd + TIME_EMBED_DIM));
        let mut cached_t = usize::MAX;
        let mut embed = [0.0; TIME_EMBED_DIM];
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            if steps[i] != cached_t {
                cached_t = steps[i];
                embed = time_embedding(cached_t);
            }
            for j in 0..ad {
                row[j] = noisy[[i, j]];
            }
            for j in 0..sd {
                row[ad + j] = states[[i, j]];
            }
            for (j, e) in embed.iter().enumerate() {
                row[ad + sd + j] = *e;
            }
        }
        Ok(input)
    }

    /// Predicted noise for every row of `noisy`.
    pub fn predict_batch(
        &self,
        noisy: ArrayView2<'_, f64>,
        states: ArrayView2<'_, f64>,
        steps: &[usize],
    ) -> Result<Array2<f64>> {
        let input = self.build_input(noisy, states, steps)?;
        self.net.forward_batch(input.view())
    }

    pub fn predict(&self, noisy: &[f64], state: &[f64], t: usize) -> Result<Vec<f64>> {
        let a = ArrayView2::from_shape((1, noisy.len()), noisy).expect("row");
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        Ok(self.predict_batch(a, s, &[t])?.into_raw_vec_and_offset().0)
    }
}

/// Runs the reverse chain for every row of `states` in lockstep.
///
/// Random draws are consumed in a fixed order: first the initial `a_T` of all
/// chains (row-major), then for each step `t = T..2` one noise matrix
/// (row-major). A batch of one chain therefore uses the stream exactly like a
/// single-chain call.
pub fn sample_reverse_batch<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    predictor: &NoisePredictor,
    states: ArrayView2<'_, f64>,
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<Array2<f64>> {
    check_len("action bounds", predictor.action_dim(), bounds.dim())?;
    let n = states.nrows();
    let d = predictor.action_dim();
    let mut a = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let mut steps = vec![0; n];
    for t in (1..=schedule.steps()).rev() {
        steps.fill(t);
        let eps = predictor.predict_batch(a.view(), states, &steps)?;
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        a.zip_mut_with(&eps, |x, e| *x = inv_sqrt_alpha * (*x - coef * e));
        if t > 1 {
            let sigma = schedule.sigma(t);
            a.mapv_inplace(|x| x + sigma * rng.sample::<f64, _>(StandardNormal));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(QvpoError::NonFinite(format!(
                "reverse diffusion produced a non-finite action at step {t}"
            )));
        }
    }
    for mut row in a.rows_mut() {
        bounds.clamp(row.as_slice_mut().expect("standard layout"));
    }
    Ok(a)
}

/// One action drawn from the diffusion policy at `state`.
pub fn sample_reverse<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    predictor: &NoisePredictor,
    state: &[f64],
    rng: &mut R,
    bounds: &ActionBounds,
) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    Ok(sample_reverse_batch(schedule, predictor, s, rng, bounds)?
        .into_raw_vec_and_offset()
        .0)
}

/// A training pair `(s, a0)` with its nonnegative loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub weight: f64,
}

/// Weighted noise-prediction loss
/// `mean_i w_i |eps_i - eps_theta(sqrt(ab_t) a0_i + sqrt(1 - ab_t) eps_i, s_i, t_i)|^2`
/// with `t_i` uniform on `[1, T]` and `eps_i` standard normal, together with
/// its exact gradient.
///
/// For each sample the step is drawn first, then the noise coordinates.
pub fn weighted_ddpm_loss<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    predictor: &NoisePredictor,
    batch: &[WeightedSample],
    rng: &mut R,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(QvpoError::Contract("weighted loss needs a non-empty batch".into()));
    }
    let (ad, sd) = (predictor.action_dim(), predictor.state_dim());
    let n = batch.len();

    // Draw randomness for every sample, including zero-weight ones, so the
    // stream does not depend on the weights.
    let mut draws = Vec::with_capacity(n);
    for sample in batch {
        if !(sample.weight >= 0.0) || !sample.weight.is_finite() {
            return Err(QvpoError::Contract(format!(
                "sample weights must be finite and nonnegative, got {}",
                sample.weight
            )));
        }
        check_len("sample action", ad, sample.action.len())?;
        check_len("sample state", sd, sample.state.len())?;
        let t = rng.random_range(1..=schedule.steps());
        let eps: Vec<f64> = (0..ad).map(|_| rng.sample(StandardNormal)).collect();
        draws.push((t, eps));
    }

    let active: Vec<usize> = (0..n).filter(|&i| batch[i].weight > 0.0).collect();
    let net = predictor.net();
    if active.is_empty() {
        return Ok((0.0, ParamGrads::zeros(net.num_params())));
    }

    let m = active.len();
    let mut noisy = Array2::zeros((m, ad));
    let mut states = Array2::zeros((m, sd));
    let mut steps = Vec::with_capacity(m);
    for (row, &i) in active.iter().enumerate() {
        let (t, eps) = &draws[i];
        let ab = schedule.alpha_bar(*t);
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..ad {
            noisy[[row, j]] = signal * batch[i].action[j] + noise * eps[j];
        }
        for j in 0..sd {
            states[[row, j]] = batch[i].state[j];
        }
        steps.push(*t);
    }
    let input = predictor.build_input(noisy.view(), states.view(), &steps)?;
    let (pred, cache) = net.forward_cached(input.view())?;

    let mut loss = 0.0;
    let mut upstream = Array2::zeros((m, ad));
    for (row, &i) in active.iter().enumerate() {
        let w = batch[i].weight;
        let eps = &draws[i].1;
        for j in 0..ad {
            let r = pred[[row, j]] - eps[j];
            loss += w * r * r;
            upstream[[row, j]] = 2.0 * w * r / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(QvpoError::NonFinite("weighted diffusion loss".into()));
    }
    let (grads, _) = net.backward_batch(&cache, upstream.view())?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Adam};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_schedule_products() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn one_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn twenty_step_alpha_bar_matches_log_space_product() {
        let s = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();
        // Independent route: betas written out by index, product through logs.
        let log_sum: f64 = (0..20)
            .map(|k| (1.0 - (1e-4 + k as f64 * (0.02 - 1e-4) / 19.0)).ln())
            .sum();
        assert!((s.alpha_bar(20) - log_sum.exp()).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_configuration() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(5, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn noiseless_forward_scales_signal() {
        let s = DiffusionSchedule::linear(10, 0.01, 0.2).unwrap();
        let out = forward_noise(&s, &[1.0, -2.0], 4, &[0.0, 0.0]).unwrap();
        let k = s.alpha_bar(4).sqrt();
        assert_eq!(out, vec![k, -2.0 * k]);
    }

    #[test]
    fn forward_of_zero_signal_scales_noise() {
        // beta = 0.75 gives alpha_bar = 0.25 at t = 1.
        let s = DiffusionSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_noise(&s, &[0.0], 1, &[2.0]).unwrap();
        assert!((out[0] - 0.75f64.sqrt() * 2.0).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_out_of_range_step() {
        let s = DiffusionSchedule::linear(3, 0.1, 0.2).unwrap();
        assert!(forward_noise(&s, &[0.0], 0, &[0.0]).is_err());
        assert!(forward_noise(&s, &[0.0], 4, &[0.0]).is_err());
    }

    fn zero_predictor(action_dim: usize, state_dim: usize) -> NoisePredictor {
        let net = Mlp::zeros(
            &[action_dim + state_dim + TIME_EMBED_DIM, 8, 8, action_dim],
            Activation::Mish,
        )
        .unwrap();
        NoisePredictor::from_net(net, action_dim, state_dim).unwrap()
    }

    #[test]
    fn zero_noise_limit_returns_initial_draw() {
        let s = DiffusionSchedule::from_betas(vec![1e-12]).unwrap();
        let p = zero_predictor(2, 1);
        let bounds = ActionBounds::symmetric_box(2, -100.0, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut shadow = rng.clone();
        let start: Vec<f64> = (0..2).map(|_| shadow.sample(StandardNormal)).collect();
        let out = sample_reverse(&s, &p, &[0.0], &mut rng, &bounds).unwrap();
        for (o, a) in out.iter().zip(&start) {
            assert!((o - a).abs() < 1e-11);
        }
    }

    #[test]
    fn reverse_sampling_is_seed_deterministic_and_bounded() {
        let s = DiffusionSchedule::linear(20, 0.01, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NoisePredictor::new(2, 1, 16, &mut rng).unwrap();
        let bounds = ActionBounds::symmetric_box(2, -0.5, 0.5).unwrap();
        let a = sample_reverse(&s, &p, &[0.0], &mut ChaCha8Rng::seed_from_u64(7), &bounds).unwrap();
        let b = sample_reverse(&s, &p, &[0.0], &mut ChaCha8Rng::seed_from_u64(7), &bounds).unwrap();
        assert_eq!(a, b);
        assert!(bounds.contains(&a));
    }

    #[test]
    fn batch_of_one_matches_single_chain() {
        let s = DiffusionSchedule::linear(5, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(1, 3, 8, &mut rng).unwrap();
        let bounds = ActionBounds::symmetric_box(1, -2.0, 2.0).unwrap();
        let state = [0.1, 0.2, 0.3];
        let single =
            sample_reverse(&s, &p, &state, &mut ChaCha8Rng::seed_from_u64(3), &bounds).unwrap();
        let batch = sample_reverse_batch(
            &s,
            &p,
            ArrayView2::from_shape((1, 3), &state).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(3),
            &bounds,
        )
        .unwrap();
        assert_eq!(single, batch.row(0).to_vec());
    }

    fn sample(state: f64, action: f64, weight: f64) -> WeightedSample {
        WeightedSample {
            state: vec![state],
            action: vec![action],
            weight,
        }
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let s = DiffusionSchedule::linear(5, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(1, 1, 8, &mut rng).unwrap();
        let batch = vec![sample(0.0, 0.3, 0.0), sample(1.0, -0.2, 0.0)];
        let (loss, grads) = weighted_ddpm_loss(&s, &p, &batch, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let s = DiffusionSchedule::linear(5, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(1, 1, 8, &mut rng).unwrap();
        let batch = vec![sample(0.0, 0.3, 0.7), sample(1.0, -0.2, 1.9)];
        let doubled: Vec<_> = batch
            .iter()
            .map(|b| WeightedSample {
                weight: 2.0 * b.weight,
                ..b.clone()
            })
            .collect();
        let (l1, g1) = weighted_ddpm_loss(&s, &p, &batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (l2, g2) =
            weighted_ddpm_loss(&s, &p, &doubled, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((b - 2.0 * a).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn negative_weight_is_a_contract_violation() {
        let s = DiffusionSchedule::linear(5, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(1, 1, 8, &mut rng).unwrap();
        let err = weighted_ddpm_loss(&s, &p, &[sample(0.0, 0.0, -1.0)], &mut rng).unwrap_err();
        assert!(matches!(err, QvpoError::Contract(_)));
    }

    #[test]
    fn weighted_loss_gradient_matches_finite_differences() {
        let s = DiffusionSchedule::linear(10, 0.01, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NoisePredictor::new(2, 1, 12, &mut rng).unwrap();
        let batch: Vec<_> = (0..6)
            .map(|i| WeightedSample {
                state: vec![0.1 * i as f64],
                action: vec![-0.5 + 0.2 * i as f64, 0.4],
                weight: 0.25 * i as f64,
            })
            .collect();
        let err = crate::nn::gradient_check(
            p.net(),
            |net| {
                let q = NoisePredictor::from_net(net.clone(), 2, 1).unwrap();
                weighted_ddpm_loss(&s, &q, &batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
            },
            200,
            1,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_on_a_point_mass_concentrates_samples() {
        let s = DiffusionSchedule::linear(20, 0.01, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = NoisePredictor::new(1, 1, 32, &mut rng).unwrap();
        let mut adam = Adam::for_mlp(p.net(), 1e-3);
        let batch = vec![sample(0.0, 0.5, 1.0); 64];
        for _ in 0..1500 {
            let (_, g) = weighted_ddpm_loss(&s, &p, &batch, &mut rng).unwrap();
            adam.step(p.net_mut(), &g).unwrap();
        }
        let bounds = ActionBounds::symmetric_box(1, -3.0, 3.0).unwrap();
        let states = Array2::zeros((10_000, 1));
        let draws = sample_reverse_batch(&s, &p, states.view(), &mut rng, &bounds).unwrap();
        let mean = draws.mean().unwrap();
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    }
}
