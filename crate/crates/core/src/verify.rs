//! Reference computations used to check the learner: the closed-form optimal
//! one-step policy on a discretised action grid, an independent brute-force
//! normaliser for it, and the mode-coverage measurement.

use crate::error::{check_len, QvpoError, Result};

/// Probability mass over a regular `nx` by `ny` grid of cells covering the box
/// `[low, high]`. Cell `(ix, iy)` is stored at `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPolicy {
    nx: usize,
    ny: usize,
    low: [f64; 2],
    high: [f64; 2],
    mass: Vec<f64>,
}

impl GridPolicy {
    pub fn uniform(nx: usize, ny: usize, low: [f64; 2], high: [f64; 2]) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(QvpoError::Config("grid must have at least one cell".into()));
        }
        let n = nx * ny;
        Self::from_masses(nx, ny, low, high, vec![1.0 / n as f64; n])
    }

    pub fn from_masses(
        nx: usize,
        ny: usize,
        low: [f64; 2],
        high: [f64; 2],
        mass: Vec<f64>,
    ) -> Result<Self> {
        check_len("grid masses", nx * ny, mass.len())?;
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(QvpoError::Contract("grid masses must be finite and nonnegative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(QvpoError::Contract(format!("grid masses sum to {total}, not 1")));
        }
        Ok(GridPolicy {
            nx,
            ny,
            low,
            high,
            mass,
        })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    /// Centre of the cell at flat index `index`.
    pub fn cell_center(&self, index: usize) -> [f64; 2] {
        let (ix, iy) = (index % self.nx, index / self.nx);
        let wx = (self.high[0] - self.low[0]) / self.nx as f64;
        let wy = (self.high[1] - self.low[1]) / self.ny as f64;
        [
            self.low[0] + (ix as f64 + 0.5) * wx,
            self.low[1] + (iy as f64 + 0.5) * wy,
        ]
    }

    /// Evaluates `f` at every cell centre.
    pub fn tabulate(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.cell_center(i))).collect()
    }

    fn with_masses(&self, mass: Vec<f64>) -> GridPolicy {
        GridPolicy {
            mass,
            ..self.clone()
        }
    }
}

/// Optimal improved policy for one state given behaviour prior and Q on the
/// grid.
///
/// If some cell has `Q > 0`, mass is proportional to `prior * Q` on those
/// cells and zero elsewhere. Otherwise mass is spread evenly over the cells
/// that attain the maximum Q and have positive prior.
pub fn theorem2_optimal(prior: &GridPolicy, q_on_grid: &[f64]) -> Result<GridPolicy> {
    check_len("grid Q values", prior.len(), q_on_grid.len())?;
    if q_on_grid.iter().any(|q| !q.is_finite()) {
        return Err(QvpoError::NonFinite("Q value on grid".into()));
    }
    if q_on_grid.iter().any(|q| *q > 0.0) {
        let unnormalized: Vec<f64> = prior
            .mass
            .iter()
            .zip(q_on_grid)
            .map(|(p, q)| if *q > 0.0 { p * q } else { 0.0 })
            .collect();
        let z: f64 = unnormalized.iter().sum();
        if z <= 0.0 {
            return Err(QvpoError::Degenerate(
                "prior has no mass where Q is positive".into(),
            ));
        }
        return Ok(prior.with_masses(unnormalized.into_iter().map(|m| m / z).collect()));
    }

    let q_max = q_on_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let support: Vec<usize> = (0..prior.len())
        .filter(|&i| q_on_grid[i] == q_max && prior.mass[i] > 0.0)
        .collect();
    if support.is_empty() {
        return Err(QvpoError::Degenerate(
            "prior has no mass on the maximising cells".into(),
        ));
    }
    let share = 1.0 / support.len() as f64;
    let mut mass = vec![0.0; prior.len()];
    for i in support {
        mass[i] = share;
    }
    Ok(prior.with_masses(mass))
}

/// Half the L1 distance between two mass vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Brute-force counterpart of [`theorem2_optimal`], written independently:
/// walks the grid by `(ix, iy)`, sums with Kahan compensation, and finds the
/// maximising set by sorting.
pub fn brute_force_optimal(nx: usize, ny: usize, prior: &[f64], q: &[f64]) -> Vec<f64> {
    let cell = |ix: usize, iy: usize| iy * nx + ix;
    let any_positive = (0..ny).any(|iy| (0..nx).any(|ix| q[cell(ix, iy)] > 0.0));
    let mut out = vec![0.0; nx * ny];
    if any_positive {
        let (mut sum, mut carry) = (0.0f64, 0.0f64);
        for iy in 0..ny {
            for ix in 0..nx {
                let k = cell(ix, iy);
                let indicator = if q[k] > 0.0 { 1.0 } else { 0.0 };
                let term = indicator * prior[k] * q[k] - carry;
                let next = sum + term;
                carry = (next - sum) - term;
                sum = next;
            }
        }
        for iy in 0..ny {
            for ix in 0..nx {
                let k = cell(ix, iy);
                if q[k] > 0.0 {
                    out[k] = prior[k] * q[k] / sum;
                }
            }
        }
    } else {
        let mut order: Vec<usize> = (0..nx * ny).collect();
        order.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
        let top = q[order[0]];
        let ties: Vec<usize> = order
            .into_iter()
            .take_while(|&k| q[k] == top)
            .filter(|&k| prior[k] > 0.0)
            .collect();
        for &k in &ties {
            out[k] = 1.0 / ties.len() as f64;
        }
    }
    out
}

/// Fraction of `actions` lying within Euclidean distance `radius` of each peak.
pub fn mode_coverage(actions: &[Vec<f64>], peaks: &[Vec<f64>], radius: f64) -> Result<Vec<f64>> {
    if actions.is_empty() {
        return Err(QvpoError::Contract("mode coverage needs at least one action".into()));
    }
    if !(radius > 0.0) {
        return Err(QvpoError::Contract(format!("radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    peaks
        .iter()
        .map(|peak| {
            let mut hits = 0usize;
            for a in actions {
                check_len("coverage action", peak.len(), a.len())?;
                let d2: f64 = a.iter().zip(peak).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 <= r2 {
                    hits += 1;
                }
            }
            Ok(hits as f64 / actions.len() as f64)
        })
        .collect()
}

/// Number of peaks whose coverage fraction reaches `threshold`.
pub fn peaks_covered(fractions: &[f64], threshold: f64) -> usize {
    fractions.iter().filter(|f| **f >= threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bandit_reward, BanditParams};

    #[test]
    fn three_cell_positive_branch() {
        let prior = GridPolicy::uniform(3, 1, [0.0, 0.0], [3.0, 1.0]).unwrap();
        let out = theorem2_optimal(&prior, &[1.0, 3.0, 0.0]).unwrap();
        let expected = [0.25, 0.75, 0.0];
        for (a, b) in out.masses().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn all_negative_branch_is_point_mass() {
        let prior = GridPolicy::uniform(4, 1, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let out = theorem2_optimal(&prior, &[-3.0, -0.5, -2.0, -1.0]).unwrap();
        assert_eq!(out.masses(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn all_negative_ties_share_mass() {
        let prior = GridPolicy::from_masses(4, 1, [0.0, 0.0], [1.0, 1.0], vec![0.5, 0.0, 0.25, 0.25]).unwrap();
        let out = theorem2_optimal(&prior, &[-1.0, -1.0, -1.0, -2.0]).unwrap();
        assert_eq!(out.masses(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn argmax_without_prior_mass_is_degenerate() {
        let prior = GridPolicy::from_masses(2, 1, [0.0, 0.0], [1.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            theorem2_optimal(&prior, &[-1.0, -2.0]),
            Err(QvpoError::Degenerate(_))
        ));
    }

    #[test]
    fn bandit_grid_matches_brute_force() {
        let prior = GridPolicy::uniform(100, 100, [-2.0, -2.0], [2.0, 2.0]).unwrap();
        let params = BanditParams::default();
        let q = prior.tabulate(|a| bandit_reward(&params, a));
        let fast = theorem2_optimal(&prior, &q).unwrap();
        let slow = brute_force_optimal(100, 100, prior.masses(), &q);
        assert!(total_variation(fast.masses(), &slow) < 1e-12);
        assert!((fast.masses().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_masses_are_rejected() {
        assert!(GridPolicy::from_masses(2, 1, [0.0, 0.0], [1.0, 1.0], vec![0.7, 0.7]).is_err());
        assert!(GridPolicy::from_masses(2, 1, [0.0, 0.0], [1.0, 1.0], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let peaks = BanditParams::default().peaks();
        let at_first = vec![peaks[0].clone(); 10];
        assert_eq!(mode_coverage(&at_first, &peaks, 0.3).unwrap(), vec![1.0, 0.0, 0.0]);
        let far = vec![vec![2.0, -2.0]; 5];
        assert_eq!(mode_coverage(&far, &peaks, 0.3).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(mode_coverage(&[], &peaks, 0.3).is_err());
        assert!(mode_coverage(&far, &peaks, 0.0).is_err());
        assert_eq!(peaks_covered(&[0.1, 0.09, 0.5], 0.1), 2);
    }

    #[test]
    fn uniform_actions_cover_area_fraction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let actions: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let peaks = BanditParams::default().peaks();
        let p = std::f64::consts::PI * 0.09 / 16.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for f in mode_coverage(&actions, &peaks, 0.3).unwrap() {
            assert!((f - p).abs() < 3.0 * se, "{f} vs {p}");
        }
    }
}
