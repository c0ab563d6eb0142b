//! Factorized Gaussian beliefs over bidder bundle values, updated by
//! assumed density filtering against probit bid/decline evidence.
//!
//! Each bidder carries one independent Gaussian per bundle they have bid
//! on. A bid on bundle b at price θ(b) multiplies that Gaussian by
//! Φ(β(v − θ(b))) (the value is probably above the price); a decline
//! multiplies every tracked Gaussian by Φ(β(θ(b) − v)). The product is
//! projected back to a Gaussian by matching its first two moments, which
//! have a closed form for probit times Gaussian.

use crate::model::{Bundle, ItemPrices, Valuation, ValuationProfile};
use crate::prior::PriorModel;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Smallest posterior standard deviation kept after an update.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// A single Gaussian belief N(mean, sd²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianBelief {
    pub fn new(mean: f64, sd: f64) -> GaussianBelief {
        assert!(sd > 0.0 && sd.is_finite(), "belief deviation must be positive");
        GaussianBelief { mean, sd }
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }
}

/// Which side of the threshold the evidence favors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Evidence that the value exceeds the threshold (a bid).
    Above,
    /// Evidence that the value is below the threshold (a decline).
    Below,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / std::f64::consts::TAU.sqrt()
}

/// Standard normal CDF.
fn cap_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Hazard ratio φ(u)/Φ(u), switching to an asymptotic expansion deep in
/// the lower tail where Φ underflows.
fn hazard(u: f64) -> f64 {
    if u < -30.0 {
        -u - 1.0 / u + 2.0 / (u * u * u)
    } else {
        phi(u) / cap_phi(u)
    }
}

/// Moment-matched Gaussian for Φ(±β(z − threshold)) · N(z; mean, sd²).
///
/// With s² = 1/β² and t = √(s² + σ²), the tilted density has
/// mean μ ± σ²·h/t and variance σ² − (σ⁴/t²)·h·(u + h), where
/// u = ±(μ − threshold)/t and h = φ(u)/Φ(u). The result's deviation is
/// floored at [`SIGMA_FLOOR`]. Never returns NaN.
pub fn probit_gaussian_moments(
    prior: GaussianBelief,
    threshold: f64,
    beta: f64,
    direction: Direction,
) -> GaussianBelief {
    assert!(beta > 0.0 && beta.is_finite(), "probit sharpness must be positive");
    let sign = match direction {
        Direction::Above => 1.0,
        Direction::Below => -1.0,
    };
    let variance = prior.variance();
    let s2 = 1.0 / (beta * beta);
    let t = (s2 + variance).sqrt();
    let u = sign * (prior.mean - threshold) / t;
    let h = hazard(u);
    let mean = prior.mean + sign * variance * h / t;
    let new_variance = variance - (variance * variance / (t * t)) * h * (u + h);
    let sd = new_variance.max(SIGMA_FLOOR * SIGMA_FLOOR).sqrt().max(SIGMA_FLOOR);
    GaussianBelief { mean, sd }
}

/// Belief state across all bidders: per bidder, an ordered map from the
/// bundles they have bid on to Gaussian beliefs, plus the shared probit
/// sharpness β.
#[derive(Clone, Debug)]
pub struct BeliefState {
    items: usize,
    beta: f64,
    bidders: Vec<BTreeMap<Bundle, GaussianBelief>>,
}

impl BeliefState {
    pub fn new(items: usize, bidder_count: usize, beta: f64) -> BeliefState {
        assert!(beta > 0.0 && beta.is_finite(), "probit sharpness must be positive");
        BeliefState { items, beta, bidders: vec![BTreeMap::new(); bidder_count] }
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn bidder_count(&self) -> usize {
        self.bidders.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn get(&self, bidder: usize, bundle: &Bundle) -> Option<&GaussianBelief> {
        self.bidders[bidder].get(bundle)
    }

    /// Tracked bundles and beliefs for one bidder, in bundle order.
    pub fn bundles(
        &self,
        bidder: usize,
    ) -> impl Iterator<Item = (&Bundle, &GaussianBelief)> {
        self.bidders[bidder].iter()
    }

    pub fn tracked_count(&self, bidder: usize) -> usize {
        self.bidders[bidder].len()
    }

    /// Installs a belief directly, replacing any tracked one. Useful for
    /// seeding states with known means in diagnostics and tests.
    pub fn set_belief(&mut self, bidder: usize, bundle: Bundle, belief: GaussianBelief) {
        assert!(!bundle.is_empty(), "beliefs are over nonempty bundles");
        self.bidders[bidder].insert(bundle, belief);
    }

    /// Records a bid by `bidder` on `bundle` at the current prices. A
    /// first-time bundle is seeded from the prior model's predictive
    /// Gaussian, then the belief is tilted above the bundle price. Other
    /// beliefs are untouched.
    pub fn update_on_bid(
        &mut self,
        bidder: usize,
        bundle: Bundle,
        prices: &ItemPrices,
        prior: &PriorModel,
    ) {
        assert!(!bundle.is_empty(), "bids are on nonempty bundles");
        let threshold = prices
            .bundle_price(&bundle)
            .expect("bundle and prices cover the same items");
        let beta = self.beta;
        let entry = self.bidders[bidder].entry(bundle).or_insert_with(|| {
            let (mean, sd) = prior.predict(&bundle);
            GaussianBelief { mean, sd }
        });
        *entry = probit_gaussian_moments(*entry, threshold, beta, Direction::Above);
    }

    /// Records that `bidder` demanded nothing at the current prices:
    /// every tracked belief is tilted below its bundle's price.
    pub fn update_on_decline(&mut self, bidder: usize, prices: &ItemPrices) {
        let beta = self.beta;
        for (bundle, belief) in self.bidders[bidder].iter_mut() {
            let threshold = prices
                .bundle_price(bundle)
                .expect("bundle and prices cover the same items");
            *belief = probit_gaussian_moments(*belief, threshold, beta, Direction::Below);
        }
    }

    /// Draws one valuation profile from the current beliefs: for each
    /// bidder, an independent Gaussian draw per tracked bundle, clamped at
    /// zero. Bidders tracking nothing get the empty valuation.
    pub fn sample_profile(&self, seed: u64) -> ValuationProfile {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.sample_profile_rng(&mut rng)
    }

    fn sample_profile_rng(&self, rng: &mut ChaCha12Rng) -> ValuationProfile {
        let mut valuations = Vec::with_capacity(self.bidders.len());
        for (i, beliefs) in self.bidders.iter().enumerate() {
            if beliefs.is_empty() {
                valuations.push(Valuation::empty(i, self.items));
                continue;
            }
            let atoms: Vec<(Bundle, f64)> = beliefs
                .iter()
                .map(|(bundle, belief)| {
                    let draw: f64 =
                        Normal::new(belief.mean, belief.sd).unwrap().sample(rng);
                    (*bundle, draw.max(0.0))
                })
                .collect();
            valuations.push(
                Valuation::new(i, self.items, atoms)
                    .expect("tracked bundles are distinct and values clamped nonnegative"),
            );
        }
        ValuationProfile::new(self.items, valuations)
            .expect("state dimensions are consistent")
    }
}

/// Anything that can draw valuation profiles on demand from a seed.
pub trait ProfileSampler {
    fn item_count(&self) -> usize;
    fn bidder_count(&self) -> usize;
    fn sample(&self, seed: u64) -> ValuationProfile;
}

impl ProfileSampler for BeliefState {
    fn item_count(&self) -> usize {
        self.items
    }

    fn bidder_count(&self) -> usize {
        self.bidders.len()
    }

    fn sample(&self, seed: u64) -> ValuationProfile {
        self.sample_profile(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{HyperSearch, PriorModel};
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    /// Quadrature oracle: matches the first two moments of
    /// Φ(±β(z−θ))·N(z; μ, σ²) by Simpson integration over ±12σ.
    fn quadrature_moments(
        prior: GaussianBelief,
        threshold: f64,
        beta: f64,
        direction: Direction,
        nodes: usize,
    ) -> (f64, f64) {
        let sign = match direction {
            Direction::Above => 1.0,
            Direction::Below => -1.0,
        };
        let lo = prior.mean - 12.0 * prior.sd;
        let hi = prior.mean + 12.0 * prior.sd;
        let n = if nodes % 2 == 0 { nodes + 1 } else { nodes };
        let h = (hi - lo) / (n - 1) as f64;
        let weight = |z: f64| {
            let standard = (z - prior.mean) / prior.sd;
            cap_phi(sign * beta * (z - threshold)) * phi(standard) / prior.sd
        };
        let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let z = lo + k as f64 * h;
            let simpson = if k == 0 || k == n - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let w = simpson * weight(z);
            w0 += w;
            w1 += w * z;
            w2 += w * z * z;
        }
        let mean = w1 / w0;
        let variance = w2 / w0 - mean * mean;
        (mean, variance)
    }

    #[test]
    fn standard_point_matches_quadrature() {
        let prior = GaussianBelief::new(0.0, 1.0);
        let posterior = probit_gaussian_moments(prior, 0.0, 1.0, Direction::Above);
        assert_abs_diff_eq!(posterior.mean, 0.5642, epsilon = 1e-4);
        assert_abs_diff_eq!(posterior.variance(), 0.6817, epsilon = 1e-4);

        let (qm, qv) = quadrature_moments(prior, 0.0, 1.0, Direction::Above, 40001);
        assert_abs_diff_eq!(posterior.mean, qm, epsilon = 1e-8);
        assert_abs_diff_eq!(posterior.variance(), qv, epsilon = 1e-8);
    }

    #[test]
    fn closed_form_matches_quadrature_over_random_tuples() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for case in 0..200 {
            let mean = rng.random_range(0.0..10.0);
            let sd = rng.random_range(0.1..3.0);
            let beta = [0.5, 1.0, 2.0, 5.0][case % 4];
            let threshold = mean + rng.random_range(-6.0..6.0) * sd;
            let direction = if case % 2 == 0 { Direction::Above } else { Direction::Below };
            let prior = GaussianBelief::new(mean, sd);
            let posterior = probit_gaussian_moments(prior, threshold, beta, direction);
            let (qm, qv) = quadrature_moments(prior, threshold, beta, direction, 40001);
            assert!(
                (posterior.mean - qm).abs() <= 1e-6 * (1.0 + qm.abs()),
                "mean {} vs {qm}",
                posterior.mean
            );
            assert!(
                (posterior.variance() - qv).abs() <= 1e-6 * (1.0 + qv.abs()),
                "var {} vs {qv}",
                posterior.variance()
            );
        }
    }

    #[test]
    fn far_threshold_is_uninformative() {
        let prior = GaussianBelief::new(3.0, 0.8);
        let posterior = probit_gaussian_moments(prior, -1e10, 1.0, Direction::Above);
        assert_abs_diff_eq!(posterior.mean, prior.mean, epsilon = 1e-9);
        assert_abs_diff_eq!(posterior.sd, prior.sd, epsilon = 1e-9);
    }

    #[test]
    fn mirrored_updates_have_mirrored_means() {
        let above = probit_gaussian_moments(
            GaussianBelief::new(2.5, 1.3),
            1.0,
            0.7,
            Direction::Above,
        );
        let below = probit_gaussian_moments(
            GaussianBelief::new(-2.5, 1.3),
            -1.0,
            0.7,
            Direction::Below,
        );
        assert_eq!(above.mean.to_bits(), (-below.mean).to_bits());
        assert_eq!(above.sd.to_bits(), below.sd.to_bits());
    }

    #[test]
    fn deep_tail_fallback_is_finite_and_sane() {
        let prior = GaussianBelief::new(100.0, 1.0);
        let posterior = probit_gaussian_moments(prior, 0.0, 5.0, Direction::Below);
        assert!(posterior.mean.is_finite() && posterior.sd.is_finite());
        assert!(posterior.mean < prior.mean);
        assert!(posterior.mean > -10.0);
    }

    #[test]
    fn variance_strictly_decreases() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for case in 0..100 {
            let prior = GaussianBelief::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(0.05..2.0),
            );
            let threshold = rng.random_range(-6.0..6.0);
            let direction = if case % 2 == 0 { Direction::Above } else { Direction::Below };
            let posterior = probit_gaussian_moments(prior, threshold, 1.0, direction);
            assert!(posterior.variance() < prior.variance());
        }
    }

    #[test]
    fn sigma_floor_holds() {
        let prior = GaussianBelief::new(0.0, 1.2e-4);
        let posterior = probit_gaussian_moments(prior, 0.0, 10.0, Direction::Above);
        assert!(posterior.sd >= SIGMA_FLOOR);
    }

    fn flat_prior() -> PriorModel {
        let b = |idx: &[usize]| Bundle::from_indices(3, idx).unwrap();
        PriorModel::fit_observations(
            3,
            vec![(b(&[0]), 5.0), (b(&[1]), 5.0), (b(&[2]), 5.0), (b(&[0, 1]), 10.0)],
            &HyperSearch::fixed(9.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn bid_seeds_from_prior_then_raises_mean() {
        let prior = flat_prior();
        let bundle = Bundle::from_indices(3, &[2]).unwrap();
        let (prior_mean, prior_sd) = prior.predict(&bundle);

        let mut state = BeliefState::new(3, 2, 1.0);
        let prices = ItemPrices::new(vec![prior_mean, prior_mean, prior_mean]).unwrap();
        state.update_on_bid(0, bundle, &prices, &prior);
        let belief = state.get(0, &bundle).unwrap();
        assert!(belief.mean > prior_mean, "bid at the prior mean raises the mean");
        assert!(belief.sd < prior_sd);
        assert_eq!(state.tracked_count(0), 1);
        assert_eq!(state.tracked_count(1), 0);
    }

    #[test]
    fn bid_far_below_mean_barely_moves_belief() {
        let prior = flat_prior();
        let bundle = Bundle::from_indices(3, &[0]).unwrap();
        let (prior_mean, _) = prior.predict(&bundle);
        let mut state = BeliefState::new(3, 1, 1.0);
        let zeros = ItemPrices::zeros(3);
        state.update_on_bid(0, bundle, &zeros, &prior);
        let belief = *state.get(0, &bundle).unwrap();
        assert!((belief.mean - prior_mean).abs() < 0.02);
    }

    #[test]
    fn bids_never_decrease_mean_and_declines_never_increase_it() {
        let prior = flat_prior();
        let bundle = Bundle::from_indices(3, &[0, 1]).unwrap();
        let mut state = BeliefState::new(3, 1, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..10 {
            let level = rng.random_range(0.0..12.0);
            let prices = ItemPrices::new(vec![level, level, 0.0]).unwrap();
            let before_bid =
                state.get(0, &bundle).map(|b| b.mean).unwrap_or(f64::NEG_INFINITY);
            state.update_on_bid(0, bundle, &prices, &prior);
            let after_bid = state.get(0, &bundle).unwrap().mean;
            assert!(after_bid >= before_bid);

            state.update_on_decline(0, &prices);
            let after_decline = state.get(0, &bundle).unwrap().mean;
            assert!(after_decline <= after_bid);
        }
    }

    #[test]
    fn rising_prices_match_sequential_quadrature() {
        let start = GaussianBelief::new(5.0, 1.0);
        let first = probit_gaussian_moments(start, 4.0, 1.0, Direction::Above);
        let second = probit_gaussian_moments(first, 6.0, 1.0, Direction::Above);
        assert!(first.mean >= start.mean);
        assert!(second.mean >= first.mean);

        let (qm1, qv1) = quadrature_moments(start, 4.0, 1.0, Direction::Above, 40001);
        let stage = GaussianBelief::new(qm1, qv1.sqrt());
        let (qm2, qv2) = quadrature_moments(stage, 6.0, 1.0, Direction::Above, 40001);
        assert_abs_diff_eq!(second.mean, qm2, epsilon = 1e-5);
        assert_abs_diff_eq!(second.variance(), qv2, epsilon = 1e-5);
    }

    #[test]
    fn untouched_beliefs_are_bit_identical() {
        let prior = flat_prior();
        let b01 = Bundle::from_indices(3, &[0, 1]).unwrap();
        let b2 = Bundle::from_indices(3, &[2]).unwrap();
        let mut state = BeliefState::new(3, 2, 1.0);
        let prices = ItemPrices::new(vec![1.0, 1.0, 1.0]).unwrap();
        state.update_on_bid(0, b01, &prices, &prior);
        state.update_on_bid(0, b2, &prices, &prior);
        state.update_on_bid(1, b2, &prices, &prior);

        let frozen_b2 = *state.get(0, &b2).unwrap();
        let frozen_other = *state.get(1, &b2).unwrap();
        let higher = ItemPrices::new(vec![2.0, 2.0, 9.0]).unwrap();
        state.update_on_bid(0, b01, &higher, &prior);
        assert_eq!(state.get(0, &b2).unwrap().mean.to_bits(), frozen_b2.mean.to_bits());
        assert_eq!(state.get(0, &b2).unwrap().sd.to_bits(), frozen_b2.sd.to_bits());
        assert_eq!(
            state.get(1, &b2).unwrap().mean.to_bits(),
            frozen_other.mean.to_bits()
        );
    }

    #[test]
    fn decline_with_nothing_tracked_is_a_noop() {
        let mut state = BeliefState::new(3, 1, 1.0);
        let prices = ItemPrices::new(vec![1.0, 1.0, 1.0]).unwrap();
        state.update_on_decline(0, &prices);
        assert_eq!(state.tracked_count(0), 0);
    }

    #[test]
    fn decline_updates_every_tracked_bundle_independently() {
        let prior = flat_prior();
        let b0 = Bundle::from_indices(3, &[0]).unwrap();
        let b12 = Bundle::from_indices(3, &[1, 2]).unwrap();
        let mut state = BeliefState::new(3, 1, 1.0);
        let prices = ItemPrices::new(vec![3.0, 4.0, 5.0]).unwrap();
        state.update_on_bid(0, b0, &prices, &prior);
        state.update_on_bid(0, b12, &prices, &prior);
        let before_b0 = *state.get(0, &b0).unwrap();
        let before_b12 = *state.get(0, &b12).unwrap();

        state.update_on_decline(0, &prices);
        let want_b0 = probit_gaussian_moments(before_b0, 3.0, 1.0, Direction::Below);
        let want_b12 = probit_gaussian_moments(before_b12, 9.0, 1.0, Direction::Below);
        assert_eq!(state.get(0, &b0).unwrap(), &want_b0);
        assert_eq!(state.get(0, &b12).unwrap(), &want_b12);
    }

    #[test]
    fn sampling_matches_belief_moments() {
        let prior = flat_prior();
        let bundle = Bundle::from_indices(3, &[0, 1]).unwrap();
        let mut state = BeliefState::new(3, 1, 1.0);
        let prices = ItemPrices::new(vec![1.0, 1.0, 0.0]).unwrap();
        state.update_on_bid(0, bundle, &prices, &prior);
        let belief = *state.get(0, &bundle).unwrap();
        assert!(belief.mean > 3.0, "belief mean stays well away from the clamp");

        let draws = 100_000;
        let mut sum = 0.0;
        for k in 0..draws {
            let profile = state.sample_profile(k);
            sum += profile.valuations()[0].atoms()[0].1;
        }
        let sample_mean = sum / draws as f64;
        let se = belief.sd / (draws as f64).sqrt();
        assert!(
            (sample_mean - belief.mean).abs() <= 3.0 * se,
            "sample mean {sample_mean} vs belief mean {}",
            belief.mean
        );
    }

    #[test]
    fn sampling_clamps_at_zero_and_reproduces_by_seed() {
        let mut state = BeliefState::new(2, 2, 1.0);
        let prior = PriorModel::fit_observations(
            2,
            vec![
                (Bundle::from_indices(2, &[0]).unwrap(), 0.05),
                (Bundle::from_indices(2, &[1]).unwrap(), 0.05),
            ],
            &HyperSearch::fixed(4.0, 1.0),
        )
        .unwrap();
        let bundle = Bundle::from_indices(2, &[0]).unwrap();
        let high = ItemPrices::new(vec![8.0, 8.0]).unwrap();
        state.update_on_bid(0, bundle, &high, &prior);
        // Push the mean negative with repeated declines at low prices.
        let low = ItemPrices::zeros(2);
        for _ in 0..50 {
            state.update_on_decline(0, &low);
        }
        assert!(state.get(0, &bundle).unwrap().mean < 0.3);

        for k in 0..2000 {
            let profile = state.sample_profile(k);
            for v in profile.valuations() {
                for &(_, value) in v.atoms() {
                    assert!(value >= 0.0);
                }
            }
        }
        let a = state.sample_profile(99);
        let b = state.sample_profile(99);
        for (va, vb) in a.valuations().iter().zip(b.valuations()) {
            for ((ba, xa), (bb, xb)) in va.atoms().iter().zip(vb.atoms()) {
                assert_eq!(ba, bb);
                assert_eq!(xa.to_bits(), xb.to_bits());
            }
        }
        // An untouched bidder samples as the empty valuation.
        assert_eq!(a.valuations()[1].atom_count(), 0);
    }
}
