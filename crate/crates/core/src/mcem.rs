//! Monte Carlo EM price updates: rejection-sample valuation profiles from
//! the tilted belief posterior, then move prices to the minimizer of the
//! sampled clearing potential via a cutting-plane linear program.
//!
//! The E-step draws profiles from the beliefs and accepts each with
//! probability e^(−λ·Ŵ), where Ŵ is the clearing potential at the current
//! prices; low-potential profiles (those nearly cleared by the prices)
//! survive. The M-step minimizes
//!
//! ```text
//! f(p) = Σ_k Σ_i max(0, max_b (v_ik(b) − p·b)) + ℓ·Σ_j p_j
//! ```
//!
//! over p ≥ 0, the sample average of the seller-plus-bidders surplus. The
//! two steps alternate until the relative price change falls under the
//! configured tolerance.

use crate::beliefs::ProfileSampler;
use crate::model::{ItemPrices, ValuationProfile};
use crate::simplex::{solve, Constraint, LinearProgram, Relation, SimplexError};
use crate::solvers::{indirect_revenue, indirect_utility, wdp_value};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Prices below this after the M-step are snapped to exactly zero.
pub const PRICE_CLAMP: f64 = 1e-8;

/// Cut violation tolerance inside the M-step LP.
const CUT_TOLERANCE: f64 = 1e-9;

/// Iteration cap for each cutting-plane phase.
const MAX_CUT_ROUNDS: usize = 500;

#[derive(Debug, Error)]
pub enum McemError {
    #[error("configuration field {field} has invalid value {value}")]
    BadConfig { field: &'static str, value: f64 },
    #[error("sample pool is empty")]
    EmptyPool,
    #[error("price program did not converge within {iterations} cut rounds")]
    LpStalled { iterations: usize },
    #[error("price program solver failed: {0}")]
    Lp(#[from] SimplexError),
}

/// Tuning for the EM price update.
#[derive(Clone, Debug)]
pub struct McemConfig {
    /// Tilt strength λ ≥ 0; zero disables rejection entirely.
    pub lambda: f64,
    /// Pool size ℓ per E-step.
    pub samples: usize,
    /// Relative price-change threshold ε that stops the EM loop.
    pub tolerance: f64,
    /// EM iteration cap.
    pub max_iterations: usize,
    /// Rejection attempt cap per sample; on exhaustion the attempted draw
    /// with the lowest potential is kept and flagged as forced.
    pub max_attempts: u32,
    /// Master seed for the per-sample RNG streams.
    pub seed: u64,
    /// Use the exact normalized potential Ŵ (surplus minus the efficient
    /// value, solved per draw) instead of the cheaper unnormalized proxy.
    pub normalize: bool,
    /// Start each auction round's EM at the previous round's prices
    /// instead of at zero. Read by the auction engine.
    pub warm_start: bool,
}

impl Default for McemConfig {
    fn default() -> Self {
        McemConfig {
            lambda: 1.0,
            samples: 128,
            tolerance: 0.01,
            max_iterations: 50,
            max_attempts: 10_000,
            seed: 0,
            normalize: true,
            warm_start: true,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<(), McemError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(McemError::BadConfig { field: "lambda", value: self.lambda });
        }
        if self.samples < 1 {
            return Err(McemError::BadConfig { field: "samples", value: 0.0 });
        }
        if !(self.tolerance > 0.0) {
            return Err(McemError::BadConfig { field: "tolerance", value: self.tolerance });
        }
        if self.max_iterations < 1 {
            return Err(McemError::BadConfig { field: "max_iterations", value: 0.0 });
        }
        if self.max_attempts < 1 {
            return Err(McemError::BadConfig { field: "max_attempts", value: 0.0 });
        }
        Ok(())
    }
}

/// Acceptance bookkeeping for one pool slot.
#[derive(Clone, Copy, Debug)]
pub struct SampleStats {
    /// Draws consumed, including the accepted one.
    pub attempts: u32,
    /// True when the attempt cap was hit and the best-seen draw was kept.
    pub forced: bool,
    /// Potential of the kept draw at the E-step prices.
    pub potential: f64,
}

/// Accepted valuation profiles plus acceptance statistics.
#[derive(Clone, Debug)]
pub struct SamplePool {
    items: usize,
    bidders: usize,
    profiles: Vec<ValuationProfile>,
    stats: Vec<SampleStats>,
}

impl SamplePool {
    pub fn from_profiles(profiles: Vec<ValuationProfile>) -> SamplePool {
        assert!(!profiles.is_empty(), "pool needs at least one profile");
        let items = profiles[0].item_count();
        let bidders = profiles[0].bidder_count();
        let stats = profiles
            .iter()
            .map(|_| SampleStats { attempts: 1, forced: false, potential: 0.0 })
            .collect();
        SamplePool { items, bidders, profiles, stats }
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn bidder_count(&self) -> usize {
        self.bidders
    }

    pub fn profiles(&self) -> &[ValuationProfile] {
        &self.profiles
    }

    pub fn stats(&self) -> &[SampleStats] {
        &self.stats
    }

    pub fn total_attempts(&self) -> u64 {
        self.stats.iter().map(|s| s.attempts as u64).sum()
    }

    pub fn forced_count(&self) -> usize {
        self.stats.iter().filter(|s| s.forced).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.len() as f64 / self.total_attempts() as f64
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for pool slot `k` in EM epoch `epoch`.
/// Independent of execution order, so serial and any parallel schedule
/// produce identical pools.
fn stream_seed(seed: u64, epoch: u64, k: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ k)
}

/// Seller revenue plus bidder surplus at these prices; the potential
/// before subtracting the efficient value.
fn gross_surplus(prices: &ItemPrices, profile: &ValuationProfile) -> f64 {
    let utilities: f64 = profile
        .valuations()
        .iter()
        .map(|v| indirect_utility(prices, v))
        .sum();
    utilities + indirect_revenue(prices)
}

/// Cheap upper bound on the efficient allocation value: the smaller of
/// the per-bidder best-atom sum and a fractional per-item cover.
fn efficient_value_upper_bound(profile: &ValuationProfile) -> f64 {
    let mut per_bidder = 0.0;
    let mut per_item = vec![0.0f64; profile.item_count()];
    for valuation in profile.valuations() {
        let mut best = 0.0f64;
        for &(bundle, value) in valuation.atoms() {
            if value > best {
                best = value;
            }
            let share = value / bundle.len() as f64;
            for j in bundle.iter() {
                if share > per_item[j] {
                    per_item[j] = share;
                }
            }
        }
        per_bidder += best;
    }
    per_bidder.min(per_item.iter().sum())
}

/// E-step: fills a pool of `cfg.samples` profiles, each accepted with
/// probability e^(−λ·potential) at the given prices. A draw is kept
/// unconditionally once `cfg.max_attempts` draws for its slot are
/// exhausted: the attempt with the lowest exactly-evaluated potential is
/// used and flagged. Lower bounds on the potential skip the exact
/// efficient-value solve for hopeless draws without changing the
/// accept/reject outcome.
pub fn sample_tilted(
    sampler: &dyn ProfileSampler,
    prices: &ItemPrices,
    cfg: &McemConfig,
    epoch: u64,
) -> SamplePool {
    let mut profiles = Vec::with_capacity(cfg.samples);
    let mut stats = Vec::with_capacity(cfg.samples);
    for k in 0..cfg.samples {
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(cfg.seed, epoch, k as u64));
        let mut best: Option<(f64, ValuationProfile)> = None;
        let mut accepted: Option<(f64, ValuationProfile, u32)> = None;
        for attempt in 1..=cfg.max_attempts {
            let profile = sampler.sample(rng.random());
            let u: f64 = rng.random_range(0.0..1.0);
            if cfg.lambda == 0.0 {
                accepted = Some((0.0, profile, attempt));
                break;
            }
            let threshold = -u.max(f64::MIN_POSITIVE).ln() / cfg.lambda;
            let surplus = gross_surplus(prices, &profile);
            let potential = if cfg.normalize {
                let lower = surplus - efficient_value_upper_bound(&profile);
                let best_so_far = best.as_ref().map(|(w, _)| *w).unwrap_or(f64::INFINITY);
                if lower > threshold && lower >= best_so_far {
                    continue;
                }
                (surplus - wdp_value(&profile)).max(0.0)
            } else {
                surplus
            };
            if potential < best.as_ref().map(|(w, _)| *w).unwrap_or(f64::INFINITY) {
                best = Some((potential, profile.clone()));
            }
            if potential <= threshold {
                accepted = Some((potential, profile, attempt));
                break;
            }
        }
        match accepted {
            Some((potential, profile, attempts)) => {
                profiles.push(profile);
                stats.push(SampleStats { attempts, forced: false, potential });
            }
            None => {
                let (potential, profile) =
                    best.expect("first attempt always evaluates exactly");
                profiles.push(profile);
                stats.push(SampleStats {
                    attempts: cfg.max_attempts,
                    forced: true,
                    potential,
                });
            }
        }
    }
    let items = sampler.item_count();
    let bidders = sampler.bidder_count();
    SamplePool { items, bidders, profiles, stats }
}

/// The M-step objective at the given prices: summed bidder surplus across
/// the pool plus pool-size-weighted revenue.
pub fn pool_objective(pool: &SamplePool, prices: &ItemPrices) -> f64 {
    let surplus: f64 = pool
        .profiles
        .iter()
        .map(|profile| {
            profile
                .valuations()
                .iter()
                .map(|v| indirect_utility(prices, v))
                .sum::<f64>()
        })
        .sum();
    surplus + pool.len() as f64 * indirect_revenue(prices)
}

/// Per-bidder value of the hinge sum and a subgradient row: for bidder i,
/// f_i(p) = Σ_k max(0, max_b (v_ik(b) − p·b)) and coeffs[j] counts how
/// many samples' best bundles contain item j.
fn evaluate_bidders(pool: &SamplePool, prices: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = pool.bidders;
    let m = pool.items;
    let mut values = vec![0.0f64; n];
    let mut coeffs = vec![vec![0.0f64; m]; n];
    for profile in &pool.profiles {
        for (i, valuation) in profile.valuations().iter().enumerate() {
            let mut best = 0.0f64;
            let mut best_mask = 0u32;
            for &(bundle, value) in valuation.atoms() {
                let mut price = 0.0;
                for j in bundle.iter() {
                    price += prices[j];
                }
                let utility = value - price;
                if utility > best {
                    best = utility;
                    best_mask = bundle.mask();
                }
            }
            if best > 0.0 {
                values[i] += best;
                let mut mask = best_mask;
                while mask != 0 {
                    let j = mask.trailing_zeros() as usize;
                    coeffs[i][j] += 1.0;
                    mask &= mask - 1;
                }
            }
        }
    }
    (values, coeffs)
}

struct Cut {
    bidder: usize,
    price_coeffs: Vec<f64>,
    rhs: f64,
}

fn master_constraints(cuts: &[Cut], m: usize, n: usize) -> Vec<Constraint> {
    cuts.iter()
        .map(|cut| {
            let mut coeffs = vec![0.0; m + n];
            coeffs[..m].copy_from_slice(&cut.price_coeffs);
            coeffs[m + cut.bidder] = 1.0;
            Constraint { coeffs, relation: Relation::Ge, rhs: cut.rhs }
        })
        .collect()
}

/// M-step: minimizes the pool objective over nonnegative item prices.
///
/// Kelley cutting planes on the per-bidder hinge sums: the master LP
/// carries the price vector and one epigraph variable per bidder, and
/// each round adds first-order cuts at the master solution until no
/// bidder's true value exceeds its epigraph variable. A second phase
/// maximizes the price total subject to the certified optimal objective,
/// so plateau ties resolve toward higher prices. The objective gap is at
/// most the cut tolerance times the bidder count, well under 1e-6.
pub fn solve_price_lp(pool: &SamplePool) -> Result<ItemPrices, McemError> {
    if pool.is_empty() {
        return Err(McemError::EmptyPool);
    }
    let m = pool.items;
    let n = pool.bidders;
    let l = pool.len() as f64;

    let mut cuts: Vec<Cut> = Vec::new();
    let mut p_hat = vec![0.0f64; m];
    let mut t_hat = vec![0.0f64; n];
    let mut upper = f64::INFINITY;

    for _round in 0..MAX_CUT_ROUNDS {
        let (values, coeffs) = evaluate_bidders(pool, &p_hat);
        let objective_here: f64 =
            values.iter().sum::<f64>() + l * p_hat.iter().sum::<f64>();
        if objective_here < upper {
            upper = objective_here;
        }
        let mut added = false;
        for i in 0..n {
            if values[i] > t_hat[i] + CUT_TOLERANCE {
                let rhs = values[i]
                    + coeffs[i].iter().zip(&p_hat).map(|(c, p)| c * p).sum::<f64>();
                cuts.push(Cut { bidder: i, price_coeffs: coeffs[i].clone(), rhs });
                added = true;
            }
        }
        if !added {
            break;
        }
        let mut objective = vec![l; m];
        objective.extend(std::iter::repeat(1.0).take(n));
        let program = LinearProgram {
            objective,
            constraints: master_constraints(&cuts, m, n),
        };
        let solution = solve(&program)?;
        p_hat = solution.x[..m].to_vec();
        t_hat = solution.x[m..].to_vec();
    }
    let (values, _) = evaluate_bidders(pool, &p_hat);
    if values.iter().zip(&t_hat).any(|(f, t)| *f > t + CUT_TOLERANCE) {
        return Err(McemError::LpStalled { iterations: MAX_CUT_ROUNDS });
    }

    // Tie-break phase: push the price total as high as the certified
    // optimum allows, re-cutting as needed.
    for _round in 0..MAX_CUT_ROUNDS {
        let mut objective = vec![-1.0; m];
        objective.extend(std::iter::repeat(0.0).take(n));
        let mut constraints = master_constraints(&cuts, m, n);
        let mut budget = vec![l; m];
        budget.extend(std::iter::repeat(1.0).take(n));
        constraints.push(Constraint {
            coeffs: budget,
            relation: Relation::Le,
            rhs: upper,
        });
        let program = LinearProgram { objective, constraints };
        let solution = solve(&program)?;
        let p2 = solution.x[..m].to_vec();
        let t2 = &solution.x[m..];
        let (values, coeffs) = evaluate_bidders(pool, &p2);
        let mut added = false;
        for i in 0..n {
            if values[i] > t2[i] + CUT_TOLERANCE {
                let rhs =
                    values[i] + coeffs[i].iter().zip(&p2).map(|(c, p)| c * p).sum::<f64>();
                cuts.push(Cut { bidder: i, price_coeffs: coeffs[i].clone(), rhs });
                added = true;
            }
        }
        if !added {
            let clamped: Vec<f64> = p2
                .iter()
                .map(|&p| if p < PRICE_CLAMP { 0.0 } else { p })
                .collect();
            return Ok(ItemPrices::new(clamped).expect("prices nonnegative and finite"));
        }
    }
    Err(McemError::LpStalled { iterations: MAX_CUT_ROUNDS })
}

/// One EM iteration's diagnostics.
#[derive(Clone, Debug)]
pub struct EmIteration {
    pub prices: ItemPrices,
    pub objective: f64,
    pub acceptance_rate: f64,
    pub forced: usize,
}

/// Result of a full EM price update.
#[derive(Clone, Debug)]
pub struct PriceUpdate {
    pub prices: ItemPrices,
    pub iterations: Vec<EmIteration>,
}

fn euclidean(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs EM to convergence: sample at the current prices, re-solve the
/// price program, stop when the relative price change drops below the
/// tolerance or the iteration cap is reached. Epochs
/// `epoch_base .. epoch_base + iterations` index the RNG streams, so a
/// caller issuing successive updates should advance `epoch_base` by at
/// least `cfg.max_iterations` between calls.
pub fn update_prices(
    sampler: &dyn ProfileSampler,
    init: &ItemPrices,
    cfg: &McemConfig,
    epoch_base: u64,
) -> Result<PriceUpdate, McemError> {
    cfg.validate()?;
    let mut prices = init.clone();
    let mut iterations = Vec::new();
    for tau in 0..cfg.max_iterations {
        let pool = sample_tilted(sampler, &prices, cfg, epoch_base + tau as u64);
        let new_prices = solve_price_lp(&pool)?;
        iterations.push(EmIteration {
            prices: new_prices.clone(),
            objective: pool_objective(&pool, &new_prices),
            acceptance_rate: pool.acceptance_rate(),
            forced: pool.forced_count(),
        });
        let denom = euclidean(prices.as_slice());
        let delta: Vec<f64> = new_prices
            .as_slice()
            .iter()
            .zip(prices.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let diff = euclidean(&delta);
        prices = new_prices;
        // At a zero previous vector the ratio is undefined; fall back to
        // the absolute change, which keeps 0 -> 0 steps convergent.
        let relative = if denom > 0.0 { diff / denom } else { diff };
        if relative < cfg.tolerance {
            break;
        }
    }
    Ok(PriceUpdate { prices, iterations })
}
