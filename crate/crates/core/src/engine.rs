//! The iterative auction loop: truthful myopic bidders respond to per-item
//! prices, a pluggable pricer observes the demands and posts new prices,
//! and the run ends when demands are disjoint and every positively priced
//! item is sold (or a round cap is hit).
//!
//! Traces serialize one round per line:
//!
//! ```text
//! t=2 prices=3.5,0 demands=0|- cleared=false note=em=3 accept=0.812 forced=0
//! ```
//!
//! `prices` are comma-separated item prices at the round start, `demands`
//! lists each bidder's bundle ("-" for the empty demand) separated by `|`,
//! and `note` carries free-form pricer diagnostics through to the end of
//! the line. Re-running an auction with the same inputs reproduces the
//! trace byte for byte.

use crate::beliefs::BeliefState;
use crate::mcem::{update_prices, McemConfig, McemError};
use crate::model::{Allocation, Bundle, ItemPrices, Valuation, ValuationProfile};
use crate::prior::PriorModel;
use crate::solvers::{is_clearing, wdp};
use crate::total_value;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("price update failed in round {round}: {source}")]
    Pricer {
        round: usize,
        trace: String,
        #[source]
        source: McemError,
    },
}

/// New prices plus a one-line diagnostic note for the trace.
#[derive(Clone, Debug)]
pub struct PricerOutput {
    pub prices: ItemPrices,
    pub note: String,
}

/// A price-update strategy. The engine calls `observe` once per
/// non-clearing round with the current prices and the demands reported at
/// them; the returned prices drive the next round.
pub trait Pricer {
    fn observe(
        &mut self,
        prices: &ItemPrices,
        demands: &[Bundle],
    ) -> Result<PricerOutput, McemError>;
}

/// The bidder's utility-maximizing bundle at these prices: the best atom
/// if its surplus is nonnegative, the empty bundle otherwise. Ties prefer
/// a bundle over the empty demand, then fewer items, then the smaller
/// bitmask.
pub fn best_response(valuation: &Valuation, prices: &ItemPrices) -> Bundle {
    let mut best: Option<(f64, Bundle)> = None;
    for &(bundle, value) in valuation.atoms() {
        let utility = value - prices.price_of_mask(bundle.mask());
        if utility < 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((u, b)) => {
                utility > u
                    || (utility == u
                        && (bundle.len() < b.len()
                            || (bundle.len() == b.len() && bundle.mask() < b.mask())))
            }
        };
        if better {
            best = Some((utility, bundle));
        }
    }
    match best {
        Some((_, bundle)) => bundle,
        None => Bundle::empty(valuation.item_count()),
    }
}

/// One auction round as recorded in the trace.
#[derive(Clone, Debug)]
pub struct RoundRecord {
    /// Round index, starting at 1.
    pub round: usize,
    /// Prices the demands were reported at (the round-start prices).
    pub prices: ItemPrices,
    /// One bundle per bidder; empty means the bidder declined.
    pub demands: Vec<Bundle>,
    pub cleared: bool,
    /// Pricer diagnostics, or "cleared" on the final round of a cleared run.
    pub note: String,
}

/// Terminal state of one auction run.
#[derive(Clone, Debug)]
pub struct AuctionOutcome {
    pub cleared: bool,
    /// Rounds executed; equals the cap when the run failed to clear.
    pub rounds: usize,
    /// Clearing prices for cleared runs, otherwise the prices pending
    /// after the last update.
    pub prices: ItemPrices,
    /// The demand profile for cleared runs; otherwise the best feasible
    /// subset of the final round's demands at true values.
    pub allocation: Allocation,
    /// Allocation value over the efficient value, in [0, 1]; 1 when the
    /// instance has zero efficient value.
    pub efficiency: f64,
    pub trace: Vec<RoundRecord>,
}

fn render_record(record: &RoundRecord) -> String {
    let mut line = String::new();
    write!(line, "t={} prices=", record.round).unwrap();
    for (j, p) in record.prices.as_slice().iter().enumerate() {
        if j > 0 {
            line.push(',');
        }
        write!(line, "{p}").unwrap();
    }
    line.push_str(" demands=");
    for (i, d) in record.demands.iter().enumerate() {
        if i > 0 {
            line.push('|');
        }
        write!(line, "{d}").unwrap();
    }
    write!(line, " cleared={} note={}", record.cleared, record.note).unwrap();
    line
}

/// The documented line-per-round text form of a trace.
pub fn render_trace(trace: &[RoundRecord]) -> String {
    let mut out = String::new();
    for record in trace {
        out.push_str(&render_record(record));
        out.push('\n');
    }
    out
}

fn provisional_allocation(
    profile: &ValuationProfile,
    demands: &[Bundle],
    cleared: bool,
) -> Allocation {
    let items = profile.item_count();
    if cleared {
        return Allocation::new(demands.to_vec()).expect("cleared demands are disjoint");
    }
    // Overlapping final demands: award the highest-value feasible subset,
    // each bidder winning their demanded bundle or nothing.
    let restricted = ValuationProfile::new(
        items,
        profile
            .valuations()
            .iter()
            .zip(demands)
            .enumerate()
            .map(|(i, (valuation, demand))| {
                if demand.is_empty() {
                    Valuation::empty(i, items)
                } else {
                    Valuation::new(i, items, vec![(*demand, valuation.value_of(demand))])
                        .expect("demand is a valid bundle")
                }
            })
            .collect(),
    )
    .expect("restricted profile mirrors the original");
    wdp(&restricted).allocation
}

#[cfg(debug_assertions)]
fn assert_truthful(valuation: &Valuation, prices: &ItemPrices, reply: &Bundle) {
    let reply_utility = if reply.is_empty() {
        0.0
    } else {
        valuation.value_of(reply) - prices.price_of_mask(reply.mask())
    };
    assert!(reply_utility >= 0.0, "reported bundle has negative surplus");
    for &(bundle, value) in valuation.atoms() {
        assert!(
            reply_utility >= value - prices.price_of_mask(bundle.mask()),
            "reported bundle is dominated"
        );
    }
}

/// Runs one auction to clearing or the round cap, starting from null
/// prices. Deterministic given the pricer's internal seeds.
pub fn run_auction(
    profile: &ValuationProfile,
    pricer: &mut dyn Pricer,
    max_rounds: usize,
) -> Result<AuctionOutcome, EngineError> {
    assert!(max_rounds >= 1, "round cap must be at least 1");
    let items = profile.item_count();
    let mut prices = ItemPrices::zeros(items);
    let mut trace: Vec<RoundRecord> = Vec::new();
    let mut cleared = false;
    let mut last_demands: Vec<Bundle> = Vec::new();
    let mut rounds = 0;

    for t in 1..=max_rounds {
        rounds = t;
        let demands: Vec<Bundle> = profile
            .valuations()
            .iter()
            .map(|v| best_response(v, &prices))
            .collect();
        #[cfg(debug_assertions)]
        for (valuation, reply) in profile.valuations().iter().zip(&demands) {
            assert_truthful(valuation, &prices, reply);
        }
        if is_clearing(&demands, &prices) {
            trace.push(RoundRecord {
                round: t,
                prices: prices.clone(),
                demands: demands.clone(),
                cleared: true,
                note: "cleared".to_string(),
            });
            last_demands = demands;
            cleared = true;
            break;
        }
        let step = match pricer.observe(&prices, &demands) {
            Ok(step) => step,
            Err(source) => {
                return Err(EngineError::Pricer {
                    round: t,
                    trace: render_trace(&trace),
                    source,
                })
            }
        };
        trace.push(RoundRecord {
            round: t,
            prices: prices.clone(),
            demands: demands.clone(),
            cleared: false,
            note: step.note,
        });
        last_demands = demands;
        prices = step.prices;
    }

    let allocation = provisional_allocation(profile, &last_demands, cleared);
    let efficient = wdp(profile).value;
    let efficiency = if efficient > 0.0 {
        (total_value(&allocation, profile).expect("allocation fits profile") / efficient)
            .clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(AuctionOutcome {
        cleared,
        rounds,
        prices: if cleared {
            trace.last().expect("cleared run has a trace").prices.clone()
        } else {
            prices
        },
        allocation,
        efficiency,
        trace,
    })
}

/// Belief-driven pricer: per round it folds the observed bids and
/// declines into the per-bundle Gaussian beliefs, then re-infers clearing
/// prices by Monte Carlo EM over profiles sampled from those beliefs.
pub struct BayesPricer {
    state: BeliefState,
    prior: PriorModel,
    cfg: McemConfig,
    epoch: u64,
}

impl BayesPricer {
    /// Fresh beliefs: every bundle is seeded from the prior model on its
    /// first appearance in a bid.
    pub fn new(
        prior: PriorModel,
        bidder_count: usize,
        beta: f64,
        cfg: McemConfig,
    ) -> Result<BayesPricer, McemError> {
        cfg.validate()?;
        let state = BeliefState::new(prior.item_count(), bidder_count, beta);
        Ok(BayesPricer { state, prior, cfg, epoch: 0 })
    }

    /// Starts from an explicit belief state (informative per-bidder
    /// beliefs); the prior model still seeds bundles not yet tracked.
    pub fn with_state(
        state: BeliefState,
        prior: PriorModel,
        cfg: McemConfig,
    ) -> Result<BayesPricer, McemError> {
        cfg.validate()?;
        Ok(BayesPricer { state, prior, cfg, epoch: 0 })
    }

    pub fn beliefs(&self) -> &BeliefState {
        &self.state
    }
}

impl Pricer for BayesPricer {
    fn observe(
        &mut self,
        prices: &ItemPrices,
        demands: &[Bundle],
    ) -> Result<PricerOutput, McemError> {
        for (bidder, demand) in demands.iter().enumerate() {
            if demand.is_empty() {
                self.state.update_on_decline(bidder, prices);
            } else {
                self.state.update_on_bid(bidder, *demand, prices, &self.prior);
            }
        }
        let init = if self.cfg.warm_start {
            prices.clone()
        } else {
            ItemPrices::zeros(prices.item_count())
        };
        let update = update_prices(&self.state, &init, &self.cfg, self.epoch)?;
        self.epoch += self.cfg.max_iterations as u64;
        let accept = update
            .iterations
            .last()
            .map(|it| it.acceptance_rate)
            .unwrap_or(1.0);
        let forced: usize = update.iterations.iter().map(|it| it.forced).sum();
        let note = format!(
            "em={} accept={accept:.3} forced={forced}",
            update.iterations.len()
        );
        Ok(PricerOutput { prices: update.prices, note })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beliefs::GaussianBelief;
    use crate::prior::HyperSearch;

    fn b(items: usize, indices: &[usize]) -> Bundle {
        Bundle::from_indices(items, indices).unwrap()
    }

    fn single_minded(items: usize, atoms: &[(Bundle, f64)]) -> ValuationProfile {
        ValuationProfile::new(
            items,
            atoms
                .iter()
                .enumerate()
                .map(|(i, &(bundle, value))| {
                    Valuation::new(i, items, vec![(bundle, value)]).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    /// Fixed-increment pricer used to exercise the loop without any
    /// belief machinery.
    struct FixedStep {
        gamma: f64,
    }

    impl Pricer for FixedStep {
        fn observe(
            &mut self,
            prices: &ItemPrices,
            demands: &[Bundle],
        ) -> Result<PricerOutput, McemError> {
            let m = prices.item_count();
            let mut counts = vec![0.0f64; m];
            for d in demands {
                for j in d.iter() {
                    counts[j] += 1.0;
                }
            }
            let next: Vec<f64> = prices
                .as_slice()
                .iter()
                .zip(&counts)
                .map(|(p, c)| (p + self.gamma * (c - 1.0)).max(0.0))
                .collect();
            Ok(PricerOutput {
                prices: ItemPrices::new(next).unwrap(),
                note: format!("gamma={}", self.gamma),
            })
        }
    }

    #[test]
    fn best_response_picks_the_highest_surplus_atom() {
        let v = Valuation::new(
            0,
            3,
            vec![(b(3, &[0, 1]), 5.0), (b(3, &[1, 2]), 4.0)],
        )
        .unwrap();
        let p = ItemPrices::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(best_response(&v, &p), b(3, &[0, 1]));
    }

    #[test]
    fn best_response_prefers_bundles_at_zero_surplus() {
        let v = Valuation::new(0, 2, vec![(b(2, &[0]), 5.0)]).unwrap();
        let at_value = ItemPrices::new(vec![5.0, 0.0]).unwrap();
        assert_eq!(best_response(&v, &at_value), b(2, &[0]));
        let above = ItemPrices::new(vec![6.0, 0.0]).unwrap();
        assert!(best_response(&v, &above).is_empty());
    }

    #[test]
    fn best_response_ties_prefer_fewer_items_then_smaller_mask() {
        let v = Valuation::new(
            3,
            3,
            vec![(b(3, &[0]), 3.0), (b(3, &[1, 2]), 4.0)],
        )
        .unwrap();
        // Utilities tie at 2.
        let p = ItemPrices::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(best_response(&v, &p), b(3, &[0]));

        let v = Valuation::new(0, 2, vec![(b(2, &[1]), 3.0), (b(2, &[0]), 3.0)]).unwrap();
        assert_eq!(best_response(&v, &ItemPrices::zeros(2)), b(2, &[0]));
    }

    #[test]
    fn disjoint_demands_at_null_prices_clear_in_one_round() {
        let profile = single_minded(2, &[(b(2, &[0]), 5.0), (b(2, &[1]), 5.0)]);
        let mut pricer = FixedStep { gamma: 1.0 };
        let outcome = run_auction(&profile, &mut pricer, 100).unwrap();
        assert!(outcome.cleared);
        assert_eq!(outcome.rounds, 1);
        assert_eq!(outcome.prices.as_slice(), &[0.0, 0.0]);
        assert_eq!(outcome.efficiency, 1.0);
        let awarded = outcome
            .allocation
            .assignments()
            .iter()
            .filter(|b| !b.is_empty())
            .count();
        assert_eq!(awarded, 2);
        assert_eq!(outcome.trace.len(), 1);
        assert!(outcome.trace[0].cleared);
    }

    #[test]
    fn stuck_prices_hit_the_round_cap() {
        let profile = single_minded(1, &[(b(1, &[0]), 5.0), (b(1, &[0]), 5.0)]);
        let mut pricer = FixedStep { gamma: 0.0 };
        let outcome = run_auction(&profile, &mut pricer, 7).unwrap();
        assert!(!outcome.cleared);
        assert_eq!(outcome.rounds, 7);
        assert_eq!(outcome.trace.len(), 7);
        // The fallback allocation hands the item to one of the demanders.
        let awarded = outcome
            .allocation
            .assignments()
            .iter()
            .filter(|b| !b.is_empty())
            .count();
        assert_eq!(awarded, 1);
        assert_eq!(outcome.efficiency, 1.0);
    }

    #[test]
    fn cleared_runs_on_supported_instances_are_efficient() {
        let profile = single_minded(
            3,
            &[(b(3, &[0]), 3.0), (b(3, &[1]), 4.0), (b(3, &[2]), 2.0)],
        );
        let mut pricer = FixedStep { gamma: 0.5 };
        let outcome = run_auction(&profile, &mut pricer, 100).unwrap();
        assert!(outcome.cleared);
        assert!((outcome.efficiency - 1.0).abs() <= 1e-9);
    }

    fn sharp_bayes(profile: &ValuationProfile, cfg: McemConfig) -> BayesPricer {
        let items = profile.item_count();
        let mut state = BeliefState::new(items, profile.bidder_count(), 1.0);
        let mut observations = Vec::new();
        for valuation in profile.valuations() {
            for &(bundle, value) in valuation.atoms() {
                state.set_belief(
                    valuation.bidder(),
                    bundle,
                    GaussianBelief::new(value, 1e-4),
                );
                observations.push((bundle, value));
            }
        }
        observations.push(observations[0]);
        let prior =
            PriorModel::fit_observations(items, observations, &HyperSearch::default())
                .unwrap();
        BayesPricer::with_state(state, prior, cfg).unwrap()
    }

    #[test]
    fn sharp_beliefs_clear_within_budget() {
        let profile = single_minded(
            3,
            &[
                (b(3, &[0]), 3.0),
                (b(3, &[1]), 4.0),
                (b(3, &[2]), 2.0),
                (b(3, &[0, 1]), 5.0),
            ],
        );
        let cfg = McemConfig { samples: 32, seed: 17, ..McemConfig::default() };
        let mut pricer = sharp_bayes(&profile, cfg);
        let outcome = run_auction(&profile, &mut pricer, 10).unwrap();
        assert!(outcome.cleared, "trace:\n{}", render_trace(&outcome.trace));
        assert!((outcome.efficiency - 1.0).abs() <= 1e-9);
        // The package bidder must lose: items 0 and 1 go to the bidders
        // valuing them separately.
        assert!(outcome.allocation.assignments()[3].is_empty());
    }

    #[test]
    fn traces_replay_byte_for_byte() {
        let profile = single_minded(
            2,
            &[(b(2, &[0]), 4.0), (b(2, &[1]), 3.0), (b(2, &[0, 1]), 5.0)],
        );
        let cfg = McemConfig { samples: 16, seed: 3, ..McemConfig::default() };
        let first = run_auction(&profile, &mut sharp_bayes(&profile, cfg.clone()), 20).unwrap();
        let second = run_auction(&profile, &mut sharp_bayes(&profile, cfg), 20).unwrap();
        assert_eq!(render_trace(&first.trace), render_trace(&second.trace));
        assert!(!render_trace(&first.trace).is_empty());
    }

    #[test]
    fn trace_lines_follow_the_documented_format() {
        let record = RoundRecord {
            round: 2,
            prices: ItemPrices::new(vec![3.5, 0.0]).unwrap(),
            demands: vec![b(2, &[0]), Bundle::empty(2)],
            cleared: false,
            note: "gamma=1".to_string(),
        };
        assert_eq!(
            render_trace(&[record]),
            "t=2 prices=3.5,0 demands=0|- cleared=false note=gamma=1\n"
        );
    }
}
