//! Clock-auction baselines: prices move by a scalar step size times the
//! per-item excess demand, projected at zero, with no monotonicity
//! constraint. Two tuned variants differ only in how the step size is
//! chosen: one step size per instance batch, or the best step size for
//! each individual instance.

use crate::engine::{run_auction, Pricer, PricerOutput};
use crate::instance::AuctionInstance;
use crate::mcem::McemError;
use crate::model::{Bundle, ItemPrices};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubgradientError {
    #[error("step size must be positive and finite, got {gamma}")]
    BadStepSize { gamma: f64 },
    #[error("no instances to tune on")]
    NoInstances,
    #[error("step size grid is empty")]
    EmptyGrid,
    #[error("instance {index} cleared under no step size in the grid")]
    Uncleared { index: usize },
}

/// Step-size configuration for a tuned run.
#[derive(Clone, Copy, Debug)]
pub struct SubgradientConfig {
    pub gamma: f64,
}

impl SubgradientConfig {
    pub fn new(gamma: f64) -> Result<SubgradientConfig, SubgradientError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(SubgradientError::BadStepSize { gamma });
        }
        Ok(SubgradientConfig { gamma })
    }
}

/// One price step: p'_j = max(0, p_j + γ·(d_j − 1)) where d_j counts the
/// demanded bundles containing item j against unit supply.
pub fn subgradient_step(prices: &ItemPrices, demands: &[Bundle], gamma: f64) -> ItemPrices {
    let m = prices.item_count();
    let mut counts = vec![0.0f64; m];
    for demand in demands {
        for j in demand.iter() {
            counts[j] += 1.0;
        }
    }
    let next: Vec<f64> = prices
        .as_slice()
        .iter()
        .zip(&counts)
        .map(|(p, d)| (p + gamma * (d - 1.0)).max(0.0))
        .collect();
    ItemPrices::new(next).expect("projected prices are nonnegative and finite")
}

/// Excess-demand pricer over a fixed step size. The step size may be zero
/// here (prices then never move); tuned runs validate positivity through
/// `SubgradientConfig`.
pub struct SubgradientPricer {
    gamma: f64,
}

impl SubgradientPricer {
    pub fn new(gamma: f64) -> SubgradientPricer {
        assert!(gamma >= 0.0 && gamma.is_finite(), "step size must be nonnegative");
        SubgradientPricer { gamma }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Pricer for SubgradientPricer {
    fn observe(
        &mut self,
        prices: &ItemPrices,
        demands: &[Bundle],
    ) -> Result<PricerOutput, McemError> {
        Ok(PricerOutput {
            prices: subgradient_step(prices, demands, self.gamma),
            note: format!("gamma={}", self.gamma),
        })
    }
}

/// The standard tuning grid: `count` evenly spaced step sizes in
/// (0, max_value], i.e. max_value·k/count for k = 1..=count.
pub fn stepsize_grid(count: usize, max_value: f64) -> Vec<f64> {
    (1..=count)
        .map(|k| max_value * k as f64 / count as f64)
        .collect()
}

/// Outcome of one (step size, instance) cell of the tuning sweep.
#[derive(Clone, Copy, Debug)]
pub struct TuningCell {
    pub gamma: f64,
    pub instance: usize,
    pub cleared: bool,
    pub rounds: usize,
}

/// Result of a step-size sweep over an instance batch.
#[derive(Clone, Debug)]
pub struct TuningResult {
    /// The single step size that clears the most instances, breaking ties
    /// by lower mean rounds on its cleared instances, then by the smaller
    /// step size.
    pub batch_gamma: f64,
    /// Per instance, the step size clearing it in the fewest rounds,
    /// together with that round count.
    pub per_instance: Vec<(f64, usize)>,
    /// Every (step size, instance) run, in grid-major order.
    pub cells: Vec<TuningCell>,
}

/// Runs every (step size, instance) pair to the round cap. Never fails;
/// uncleared cells simply carry `cleared = false`.
pub fn sweep_stepsizes(
    instances: &[AuctionInstance],
    grid: &[f64],
    max_rounds: usize,
) -> Vec<TuningCell> {
    let mut cells = Vec::with_capacity(grid.len() * instances.len());
    for &gamma in grid {
        for (index, instance) in instances.iter().enumerate() {
            let mut pricer = SubgradientPricer::new(gamma);
            let outcome = run_auction(&instance.profile, &mut pricer, max_rounds)
                .expect("subgradient pricer cannot fail");
            cells.push(TuningCell {
                gamma,
                instance: index,
                cleared: outcome.cleared,
                rounds: outcome.rounds,
            });
        }
    }
    cells
}

/// The batch step size: most instances cleared, then lower mean rounds on
/// its own cleared set, then the smaller step size (grid order).
pub fn batch_gamma_from_cells(cells: &[TuningCell], grid: &[f64]) -> f64 {
    let mut batch_gamma = grid[0];
    let mut batch_best: Option<(usize, f64)> = None;
    for &gamma in grid {
        let cleared: Vec<_> = cells
            .iter()
            .filter(|c| c.gamma == gamma && c.cleared)
            .collect();
        let count = cleared.len();
        let mean_rounds = if count > 0 {
            cleared.iter().map(|c| c.rounds as f64).sum::<f64>() / count as f64
        } else {
            f64::INFINITY
        };
        let better = match batch_best {
            None => true,
            Some((best_count, best_mean)) => {
                count > best_count || (count == best_count && mean_rounds < best_mean)
            }
        };
        if better {
            batch_best = Some((count, mean_rounds));
            batch_gamma = gamma;
        }
    }
    batch_gamma
}

/// The fastest clearing cell for one instance, if any step size cleared
/// it: (step size, rounds), ties toward the smaller step size.
pub fn best_cell_for_instance(cells: &[TuningCell], index: usize) -> Option<(f64, usize)> {
    cells
        .iter()
        .filter(|c| c.instance == index && c.cleared)
        .min_by(|a, b| {
            a.rounds
                .cmp(&b.rounds)
                .then(a.gamma.partial_cmp(&b.gamma).expect("finite step sizes"))
        })
        .map(|cell| (cell.gamma, cell.rounds))
}

/// Sweeps the grid over the instances and extracts both tuning modes.
/// Per-instance tuning fails if some instance clears under no grid step
/// size.
pub fn tune_stepsize(
    instances: &[AuctionInstance],
    grid: &[f64],
    max_rounds: usize,
) -> Result<TuningResult, SubgradientError> {
    if instances.is_empty() {
        return Err(SubgradientError::NoInstances);
    }
    if grid.is_empty() {
        return Err(SubgradientError::EmptyGrid);
    }
    for &gamma in grid {
        SubgradientConfig::new(gamma)?;
    }
    let cells = sweep_stepsizes(instances, grid, max_rounds);
    let batch_gamma = batch_gamma_from_cells(&cells, grid);
    let mut per_instance = Vec::with_capacity(instances.len());
    for index in 0..instances.len() {
        match best_cell_for_instance(&cells, index) {
            Some(best) => per_instance.push(best),
            None => return Err(SubgradientError::Uncleared { index }),
        }
    }
    Ok(TuningResult { batch_gamma, per_instance, cells })
}

/// Tuning sweep as CSV: one row per (step size, instance) cell.
pub fn tuning_csv(cells: &[TuningCell]) -> String {
    let mut out = String::from("gamma,instance,cleared,rounds\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cell.gamma, cell.instance, cell.cleared, cell.rounds
        ));
    }
    out
}
