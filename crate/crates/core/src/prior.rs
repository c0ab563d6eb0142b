//! Gaussian-process prior over bundle values with a linear covariance on
//! bundle indicator features.
//!
//! Every training bid (bundle, value) is one observation. With indicator
//! features x(b) ∈ {0,1}^m and a linear kernel k(b, b') = σ_w² x(b)·x(b'),
//! the GP is exactly Bayesian linear regression with weight prior
//! N(0, σ_w² I), so the model is fit in weight space: an m×m system
//! instead of an N×N one. Predictions are the usual GP predictive mean
//! and standard deviation, with observation noise included in the
//! variance. Hyperparameters are picked by maximizing the log marginal
//! likelihood over a small log-spaced grid.
//!
//! A fixed jitter is folded into the noise term before factorization,
//! which keeps duplicate observation rows harmless and keeps the weight
//! and function space computations describing the same model.

use crate::instance::BidderPool;
use crate::model::{Bundle, ModelError};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Diagonal jitter folded into the noise variance before factorization.
pub const KERNEL_JITTER: f64 = 1e-8;

/// Hyperparameters used when the targets are degenerate (all identical)
/// and marginal likelihood cannot meaningfully rank grid cells.
pub const DEGENERATE_SIGMA_W2: f64 = 1.0;
pub const DEGENERATE_SIGMA_N2: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("need at least 2 training observations, got {found}")]
    TooFewObservations { found: usize },
    #[error("hyperparameter {value} must be positive and finite")]
    BadHyperparameter { value: f64 },
    #[error("kernel matrix is not positive definite after jitter")]
    NotPositiveDefinite,
    #[error("line {line}: cannot parse saved model: {content:?}")]
    ParseError { line: usize, content: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Log-spaced hyperparameter grid searched during fitting.
#[derive(Clone, Debug)]
pub struct HyperSearch {
    pub signal_grid: Vec<f64>,
    pub noise_grid: Vec<f64>,
}

impl Default for HyperSearch {
    fn default() -> Self {
        HyperSearch {
            signal_grid: vec![1e-2, 1e-1, 1.0, 1e1, 1e2],
            noise_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1],
        }
    }
}

impl HyperSearch {
    /// A single-cell grid, pinning both hyperparameters.
    pub fn fixed(sigma_w2: f64, sigma_n2: f64) -> Self {
        HyperSearch { signal_grid: vec![sigma_w2], noise_grid: vec![sigma_n2] }
    }
}

/// Fitted prior: training observations, selected hyperparameters, and the
/// cached weight-space factorization.
#[derive(Clone, Debug)]
pub struct PriorModel {
    items: usize,
    observations: Vec<(Bundle, f64)>,
    sigma_w2: f64,
    sigma_n2: f64,
    weight_mean: DVector<f64>,
    precision_chol: Cholesky<f64, Dyn>,
}

/// Precomputed sufficient statistics: XᵀX, Xᵀy, yᵀy, N.
struct Design {
    items: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
}

impl Design {
    fn build(items: usize, observations: &[(Bundle, f64)]) -> Design {
        let mut xtx = DMatrix::zeros(items, items);
        let mut xty = DVector::zeros(items);
        let mut yty = 0.0;
        for (bundle, value) in observations {
            for a in bundle.iter() {
                for b in bundle.iter() {
                    xtx[(a, b)] += 1.0;
                }
                xty[a] += value;
            }
            yty += value * value;
        }
        Design { items, xtx, xty, yty, n: observations.len() }
    }

    /// Log marginal likelihood of y under hyperparameters (σ_w², σ_n²),
    /// with the jitter folded into the noise.
    fn log_marginal(&self, sigma_w2: f64, sigma_n2: f64) -> Result<f64, PriorError> {
        let noise = sigma_n2 + KERNEL_JITTER;
        let ratio = noise / sigma_w2;
        let m = self.items;
        let mut inner = self.xtx.clone();
        for j in 0..m {
            inner[(j, j)] += ratio;
        }
        let chol = inner.cholesky().ok_or(PriorError::NotPositiveDefinite)?;
        let solved = chol.solve(&self.xty);
        let quad = (self.yty - self.xty.dot(&solved)) / noise;
        let mut log_det_inner = 0.0;
        let l = chol.l_dirty();
        for j in 0..m {
            log_det_inner += 2.0 * l[(j, j)].ln();
        }
        let log_det =
            self.n as f64 * noise.ln() + log_det_inner - m as f64 * ratio.ln();
        Ok(-0.5 * quad - 0.5 * log_det
            - 0.5 * self.n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Weight-space posterior: mean vector and Cholesky factor of the
    /// precision A = XᵀX/noise + I/σ_w².
    fn posterior(
        &self,
        sigma_w2: f64,
        sigma_n2: f64,
    ) -> Result<(DVector<f64>, Cholesky<f64, Dyn>), PriorError> {
        let noise = sigma_n2 + KERNEL_JITTER;
        let mut precision = &self.xtx / noise;
        for j in 0..self.items {
            precision[(j, j)] += 1.0 / sigma_w2;
        }
        let chol = precision.cholesky().ok_or(PriorError::NotPositiveDefinite)?;
        let mean = chol.solve(&(&self.xty / noise));
        Ok((mean, chol))
    }
}

impl PriorModel {
    /// Fits on every bid of every bidder in the pool, selecting
    /// hyperparameters by grid search on marginal likelihood. Degenerate
    /// all-identical targets skip the search and use fixed defaults.
    pub fn fit(train: &BidderPool, search: &HyperSearch) -> Result<PriorModel, PriorError> {
        let observations: Vec<(Bundle, f64)> = train
            .bidders()
            .iter()
            .flat_map(|v| v.atoms().iter().copied())
            .collect();
        PriorModel::fit_observations(train.item_count(), observations, search)
    }

    /// Fits directly on (bundle, value) observations.
    pub fn fit_observations(
        items: usize,
        observations: Vec<(Bundle, f64)>,
        search: &HyperSearch,
    ) -> Result<PriorModel, PriorError> {
        if observations.len() < 2 {
            return Err(PriorError::TooFewObservations { found: observations.len() });
        }
        for &value in search.signal_grid.iter().chain(&search.noise_grid) {
            if !(value.is_finite() && value > 0.0) {
                return Err(PriorError::BadHyperparameter { value });
            }
        }
        let design = Design::build(items, &observations);

        let first = observations[0].1;
        let degenerate = observations.iter().all(|&(_, y)| y == first);
        let (sigma_w2, sigma_n2) = if degenerate
            && (search.signal_grid.len() > 1 || search.noise_grid.len() > 1)
        {
            (DEGENERATE_SIGMA_W2, DEGENERATE_SIGMA_N2)
        } else {
            let mut best = (search.signal_grid[0], search.noise_grid[0]);
            let mut best_lml = f64::NEG_INFINITY;
            for &sw in &search.signal_grid {
                for &sn in &search.noise_grid {
                    let lml = design.log_marginal(sw, sn)?;
                    if lml > best_lml {
                        best_lml = lml;
                        best = (sw, sn);
                    }
                }
            }
            best
        };

        let (weight_mean, precision_chol) = design.posterior(sigma_w2, sigma_n2)?;
        Ok(PriorModel {
            items,
            observations,
            sigma_w2,
            sigma_n2,
            weight_mean,
            precision_chol,
        })
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    /// Selected (σ_w², σ_n²).
    pub fn hyperparameters(&self) -> (f64, f64) {
        (self.sigma_w2, self.sigma_n2)
    }

    pub fn observation_count(&self) -> usize {
        self.observations.len()
    }

    /// Predictive mean and standard deviation for a bundle's value. The
    /// variance includes the (jittered) observation noise, so the returned
    /// deviation is always positive.
    pub fn predict(&self, bundle: &Bundle) -> (f64, f64) {
        let mut x = DVector::zeros(self.items);
        for j in bundle.iter() {
            x[j] = 1.0;
        }
        let mean = self.weight_mean.dot(&x);
        let solved = self.precision_chol.solve(&x);
        let noise = self.sigma_n2 + KERNEL_JITTER;
        let variance = x.dot(&solved) + noise;
        (mean, variance.sqrt())
    }

    /// Log marginal likelihood of the training targets under the selected
    /// hyperparameters.
    pub fn log_marginal_likelihood(&self) -> Result<f64, PriorError> {
        Design::build(self.items, &self.observations)
            .log_marginal(self.sigma_w2, self.sigma_n2)
    }

    /// Serializes hyperparameters and the training set as flat text.
    pub fn save(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("items {}\n", self.items));
        out.push_str(&format!("sigma_w2 {}\n", self.sigma_w2));
        out.push_str(&format!("sigma_n2 {}\n", self.sigma_n2));
        out.push_str(&format!("observations {}\n", self.observations.len()));
        for (bundle, value) in &self.observations {
            out.push_str(&format!("{} {}\n", bundle.mask(), value));
        }
        out
    }

    /// Rebuilds a model saved by [`PriorModel::save`]. The refit uses the
    /// saved hyperparameters directly, so predictions match the original
    /// bit for bit.
    pub fn load(text: &str) -> Result<PriorModel, PriorError> {
        let bad = |line: usize, content: &str| PriorError::ParseError {
            line,
            content: content.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let mut field = |key: &str| -> Result<(usize, String), PriorError> {
            match lines.next() {
                Some((idx, raw)) => {
                    let mut parts = raw.split_whitespace();
                    if parts.next() != Some(key) {
                        return Err(bad(idx + 1, raw));
                    }
                    match parts.next() {
                        Some(v) if parts.next().is_none() => Ok((idx + 1, v.to_string())),
                        _ => Err(bad(idx + 1, raw)),
                    }
                }
                None => Err(bad(0, "unexpected end of input")),
            }
        };
        let (line, items) = field("items")?;
        let items: usize = items.parse().map_err(|_| bad(line, &items))?;
        let (line, sw) = field("sigma_w2")?;
        let sigma_w2: f64 = sw.parse().map_err(|_| bad(line, &sw))?;
        let (line, sn) = field("sigma_n2")?;
        let sigma_n2: f64 = sn.parse().map_err(|_| bad(line, &sn))?;
        let (line, count) = field("observations")?;
        let count: usize = count.parse().map_err(|_| bad(line, &count))?;

        let mut observations = Vec::with_capacity(count);
        for _ in 0..count {
            let (idx, raw) = lines.next().ok_or_else(|| bad(0, "unexpected end of input"))?;
            let parts: Vec<&str> = raw.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(bad(idx + 1, raw));
            }
            let mask: u32 = parts[0].parse().map_err(|_| bad(idx + 1, raw))?;
            let value: f64 = parts[1].parse().map_err(|_| bad(idx + 1, raw))?;
            let bundle = Bundle::from_mask(items, mask)?;
            observations.push((bundle, value));
        }
        PriorModel::fit_observations(
            items,
            observations,
            &HyperSearch::fixed(sigma_w2, sigma_n2),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn b(items: usize, indices: &[usize]) -> Bundle {
        Bundle::from_indices(items, indices).unwrap()
    }

    /// Function-space oracle: the N×N kernel route, with the same jitter
    /// folded into the noise.
    struct FunctionSpace {
        items: usize,
        observations: Vec<(Bundle, f64)>,
        sigma_w2: f64,
        noise: f64,
        alpha: DVector<f64>,
        chol: Cholesky<f64, Dyn>,
    }

    impl FunctionSpace {
        fn fit(
            items: usize,
            observations: Vec<(Bundle, f64)>,
            sigma_w2: f64,
            sigma_n2: f64,
        ) -> FunctionSpace {
            let noise = sigma_n2 + KERNEL_JITTER;
            let n = observations.len();
            let dot = |a: &Bundle, bb: &Bundle| (a.mask() & bb.mask()).count_ones() as f64;
            let mut ky = DMatrix::from_fn(n, n, |i, j| {
                sigma_w2 * dot(&observations[i].0, &observations[j].0)
            });
            for i in 0..n {
                ky[(i, i)] += noise;
            }
            let chol = ky.cholesky().unwrap();
            let y = DVector::from_fn(n, |i, _| observations[i].1);
            let alpha = chol.solve(&y);
            FunctionSpace { items, observations, sigma_w2, noise, alpha, chol }
        }

        fn predict(&self, x: &Bundle) -> (f64, f64) {
            let n = self.observations.len();
            let dot = |a: &Bundle, bb: &Bundle| (a.mask() & bb.mask()).count_ones() as f64;
            let k_star =
                DVector::from_fn(n, |i, _| self.sigma_w2 * dot(&self.observations[i].0, x));
            let mean = k_star.dot(&self.alpha);
            let solved = self.chol.solve(&k_star);
            let prior = self.sigma_w2 * x.len() as f64;
            let variance = prior + self.noise - k_star.dot(&solved);
            (mean, variance.max(0.0).sqrt())
        }

        fn log_marginal(&self) -> f64 {
            let n = self.observations.len();
            let y = DVector::from_fn(n, |i, _| self.observations[i].1);
            let mut log_det = 0.0;
            let l = self.chol.l_dirty();
            for i in 0..n {
                log_det += 2.0 * l[(i, i)].ln();
            }
            let _ = self.items;
            -0.5 * y.dot(&self.alpha)
                - 0.5 * log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        }
    }

    #[test]
    fn additive_training_data_is_recovered() {
        let obs = vec![(b(2, &[0]), 1.0), (b(2, &[1]), 2.0), (b(2, &[0, 1]), 3.0)];
        let model =
            PriorModel::fit_observations(2, obs, &HyperSearch::default()).unwrap();
        let (mean, _) = model.predict(&b(2, &[0, 1]));
        let (_, sigma_n2) = model.hyperparameters();
        assert!((mean - 3.0).abs() < sigma_n2.sqrt() + 0.05, "mean {mean}");
    }

    #[test]
    fn repeated_observation_interpolates_with_tiny_noise() {
        let obs = vec![(b(1, &[0]), 5.0); 3];
        let model =
            PriorModel::fit_observations(1, obs, &HyperSearch::fixed(10.0, 1e-6)).unwrap();
        let (mean, sd) = model.predict(&b(1, &[0]));
        assert_abs_diff_eq!(mean, 5.0, epsilon = 1e-3);
        assert!(sd < 0.01);
    }

    #[test]
    fn empty_bundle_predicts_zero_with_noise_deviation() {
        let obs = vec![(b(3, &[0]), 4.0), (b(3, &[1, 2]), 6.0)];
        let model =
            PriorModel::fit_observations(3, obs, &HyperSearch::fixed(1.0, 0.25)).unwrap();
        let (mean, sd) = model.predict(&Bundle::empty(3));
        assert_eq!(mean, 0.0);
        assert_abs_diff_eq!(sd, (0.25f64 + KERNEL_JITTER).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn predictive_variance_bounded_by_prior() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let items = 6;
        let obs: Vec<(Bundle, f64)> = (0..10)
            .map(|_| {
                let mask = rng.random_range(1u32..(1 << items));
                (Bundle::from_mask(items, mask).unwrap(), rng.random_range(0.0..10.0))
            })
            .collect();
        let model =
            PriorModel::fit_observations(items, obs, &HyperSearch::default()).unwrap();
        let (sigma_w2, sigma_n2) = model.hyperparameters();
        for mask in 0u32..(1 << items) {
            let bundle = Bundle::from_mask(items, mask).unwrap();
            let (_, sd) = model.predict(&bundle);
            let bound = sigma_w2 * bundle.len() as f64 + sigma_n2 + KERNEL_JITTER;
            assert!(sd * sd <= bound + 1e-9);
            assert!(sd * sd >= sigma_n2, "variance at least the noise floor");
        }
    }

    #[test]
    fn single_standard_observation_marginal() {
        // One observation with zero target whose marginal variance
        // σ_w²·|x| + noise comes out to exactly 1.
        let model = PriorModel {
            items: 1,
            observations: vec![(b(1, &[0]), 0.0)],
            sigma_w2: 0.5,
            sigma_n2: 0.5 - KERNEL_JITTER,
            weight_mean: DVector::zeros(1),
            precision_chol: DMatrix::identity(1, 1).cholesky().unwrap(),
        };
        let lml = model.log_marginal_likelihood().unwrap();
        assert_abs_diff_eq!(
            lml,
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn weight_and_function_space_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for case in 0..30 {
            let items = 2 + (case % 5);
            let n = 2 + (case % 7);
            let obs: Vec<(Bundle, f64)> = (0..n)
                .map(|_| {
                    let mask = rng.random_range(1u32..(1 << items));
                    (
                        Bundle::from_mask(items, mask).unwrap(),
                        rng.random_range(0.0..10.0),
                    )
                })
                .collect();
            let sigma_w2 = [0.1, 1.0, 10.0][case % 3];
            let sigma_n2 = [0.01, 0.1, 1.0][(case / 3) % 3];
            let model = PriorModel::fit_observations(
                items,
                obs.clone(),
                &HyperSearch::fixed(sigma_w2, sigma_n2),
            )
            .unwrap();
            let oracle = FunctionSpace::fit(items, obs, sigma_w2, sigma_n2);

            for mask in 0u32..(1 << items) {
                let bundle = Bundle::from_mask(items, mask).unwrap();
                let (m1, s1) = model.predict(&bundle);
                let (m2, s2) = oracle.predict(&bundle);
                assert_abs_diff_eq!(m1, m2, epsilon = 1e-8);
                assert_abs_diff_eq!(s1, s2, epsilon = 1e-8);
            }
            assert_abs_diff_eq!(
                model.log_marginal_likelihood().unwrap(),
                oracle.log_marginal(),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn predictor_is_additive_over_disjoint_bundles() {
        let obs = vec![
            (b(4, &[0]), 1.5),
            (b(4, &[1]), 2.5),
            (b(4, &[2, 3]), 7.0),
            (b(4, &[0, 2]), 5.0),
        ];
        let model =
            PriorModel::fit_observations(4, obs, &HyperSearch::fixed(1.0, 1e-12)).unwrap();
        let (ma, _) = model.predict(&b(4, &[0, 1]));
        let (m0, _) = model.predict(&b(4, &[0]));
        let (m1, _) = model.predict(&b(4, &[1]));
        assert_abs_diff_eq!(ma, m0 + m1, epsilon = 1e-8);
    }

    #[test]
    fn marginal_likelihood_invariant_to_observation_order() {
        let obs = vec![
            (b(3, &[0]), 1.0),
            (b(3, &[1]), 2.0),
            (b(3, &[2]), 3.0),
            (b(3, &[0, 2]), 4.5),
        ];
        let mut reversed = obs.clone();
        reversed.reverse();
        let search = HyperSearch::fixed(1.0, 0.1);
        let a = PriorModel::fit_observations(3, obs, &search).unwrap();
        let bm = PriorModel::fit_observations(3, reversed, &search).unwrap();
        assert_abs_diff_eq!(
            a.log_marginal_likelihood().unwrap(),
            bm.log_marginal_likelihood().unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn marginal_likelihood_prefers_low_noise_on_clean_additive_data() {
        let obs: Vec<(Bundle, f64)> = vec![
            (b(3, &[0]), 1.0),
            (b(3, &[1]), 2.0),
            (b(3, &[2]), 3.0),
            (b(3, &[0, 1]), 3.0),
            (b(3, &[1, 2]), 5.0),
            (b(3, &[0, 1, 2]), 6.0),
        ];
        let model =
            PriorModel::fit_observations(3, obs, &HyperSearch::default()).unwrap();
        let (_, sigma_n2) = model.hyperparameters();
        assert!(sigma_n2 <= 0.01, "clean data should select low noise, got {sigma_n2}");
    }

    #[test]
    fn degenerate_targets_fall_back_to_defaults() {
        let obs = vec![(b(2, &[0]), 4.0), (b(2, &[1]), 4.0), (b(2, &[0, 1]), 4.0)];
        let model =
            PriorModel::fit_observations(2, obs, &HyperSearch::default()).unwrap();
        assert_eq!(model.hyperparameters(), (DEGENERATE_SIGMA_W2, DEGENERATE_SIGMA_N2));
    }

    #[test]
    fn too_few_observations_rejected() {
        let obs = vec![(b(2, &[0]), 4.0)];
        assert!(matches!(
            PriorModel::fit_observations(2, obs, &HyperSearch::default()),
            Err(PriorError::TooFewObservations { found: 1 })
        ));
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let items = 5;
        let obs: Vec<(Bundle, f64)> = (0..12)
            .map(|_| {
                let mask = rng.random_range(1u32..(1 << items));
                (Bundle::from_mask(items, mask).unwrap(), rng.random_range(0.0..10.0))
            })
            .collect();
        let model =
            PriorModel::fit_observations(items, obs, &HyperSearch::default()).unwrap();
        let loaded = PriorModel::load(&model.save()).unwrap();
        assert_eq!(loaded.hyperparameters(), model.hyperparameters());
        for mask in 0u32..(1 << items) {
            let bundle = Bundle::from_mask(items, mask).unwrap();
            let (m1, s1) = model.predict(&bundle);
            let (m2, s2) = loaded.predict(&bundle);
            assert_eq!(m1.to_bits(), m2.to_bits());
            assert_eq!(s1.to_bits(), s2.to_bits());
        }
    }

    #[test]
    fn load_rejects_garbage_with_line_numbers() {
        assert!(matches!(
            PriorModel::load("items 3\nsigma_w2 oops\n"),
            Err(PriorError::ParseError { line: 2, .. })
        ));
        assert!(matches!(
            PriorModel::load("wrong 3\n"),
            Err(PriorError::ParseError { line: 1, .. })
        ));
    }

    #[test]
    fn fit_from_pool_flattens_all_bids() {
        let file = crate::cats::parse_cats(
            "goods 2\nbids 3\ndummy 1\n0 1 0 2 #\n1 2 1 2 #\n2 3 0 1 #\n",
        )
        .unwrap();
        let pool =
            crate::instance::group_bidders(&file, crate::instance::BidderMode::MultiMinded)
                .unwrap();
        let model = PriorModel::fit(&pool, &HyperSearch::default()).unwrap();
        assert_eq!(model.observation_count(), 3);
        let (mean, _) = model.predict(&b(2, &[0, 1]));
        assert!((mean - 3.0).abs() < 0.6);
    }
}
