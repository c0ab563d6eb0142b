//! Exact solvers for winner determination and the clearing-potential
//! quantities that drive both pricers.
//!
//! Winner determination is a dynamic program over (bidder prefix,
//! available item set): each bidder takes one of their bundles contained
//! in the available set, or nothing. Time is O(n · 2^m · max atoms) and
//! memory O(n · 2^m), so it is exact for the moderate item counts this
//! simulator targets.

use crate::model::{Allocation, Bundle, ItemPrices, Valuation, ValuationProfile};

/// Prices below this are treated as zero (unpriced) by the clearing check.
pub const PRICE_EPSILON: f64 = 1e-9;

/// An optimal allocation and its total value.
#[derive(Clone, Debug)]
pub struct WdpResult {
    pub allocation: Allocation,
    pub value: f64,
}

/// Exact winner determination: maximizes total value over feasible
/// allocations. Ties prefer assigning nothing, then earlier atoms.
pub fn wdp(profile: &ValuationProfile) -> WdpResult {
    let items = profile.item_count();
    let n = profile.bidder_count();
    let full: u64 = if items == 0 { 0 } else { (1u64 << items) - 1 };
    let states = (full + 1) as usize;

    // layers[i][A] = best value for bidders i.. with available set A.
    let mut layers: Vec<Vec<f64>> = vec![vec![0.0; states]; n + 1];
    for i in (0..n).rev() {
        let atoms = profile.valuations()[i].atoms();
        let (next, layer) = {
            let (head, tail) = layers.split_at_mut(i + 1);
            (&tail[0], &mut head[i])
        };
        for state in 0..states {
            let avail = state as u64;
            let mut best = next[state];
            for &(bundle, value) in atoms {
                let mask = bundle.mask() as u64;
                if mask & avail == mask {
                    let rest = next[(avail & !mask) as usize];
                    if value + rest > best {
                        best = value + rest;
                    }
                }
            }
            layer[state] = best;
        }
    }

    // Walk the layers to reconstruct one optimal assignment.
    let mut assignments = Vec::with_capacity(n);
    let mut avail = full;
    for i in 0..n {
        let atoms = profile.valuations()[i].atoms();
        let target = layers[i][avail as usize];
        let mut taken = Bundle::empty(items);
        if layers[i + 1][avail as usize] != target {
            for &(bundle, value) in atoms {
                let mask = bundle.mask() as u64;
                if mask & avail == mask
                    && value + layers[i + 1][(avail & !mask) as usize] == target
                {
                    taken = bundle;
                    break;
                }
            }
        }
        avail &= !(taken.mask() as u64);
        assignments.push(taken);
    }

    let value = layers[0][full as usize];
    let allocation = Allocation::new(assignments).expect("reconstruction is feasible");
    WdpResult { allocation, value }
}

/// Optimal total value only, using two rolling arrays instead of full
/// layers. Same recurrence as [`wdp`].
pub fn wdp_value(profile: &ValuationProfile) -> f64 {
    let items = profile.item_count();
    let full: u64 = if items == 0 { 0 } else { (1u64 << items) - 1 };
    let states = (full + 1) as usize;
    let mut next = vec![0.0f64; states];
    let mut current = vec![0.0f64; states];
    for valuation in profile.valuations().iter().rev() {
        let atoms = valuation.atoms();
        for state in 0..states {
            let avail = state as u64;
            let mut best = next[state];
            for &(bundle, value) in atoms {
                let mask = bundle.mask() as u64;
                if mask & avail == mask {
                    let candidate = value + next[(avail & !mask) as usize];
                    if candidate > best {
                        best = candidate;
                    }
                }
            }
            current[state] = best;
        }
        std::mem::swap(&mut next, &mut current);
    }
    next[full as usize]
}

/// Maximum utility the bidder can reach at these prices across their
/// bundles or by taking nothing; never negative.
pub fn indirect_utility(prices: &ItemPrices, valuation: &Valuation) -> f64 {
    let mut best = 0.0f64;
    for &(bundle, value) in valuation.atoms() {
        let utility = value - prices.price_of_mask(bundle.mask());
        if utility > best {
            best = utility;
        }
    }
    best
}

/// Maximum revenue across feasible allocations: under item prices,
/// selling every item, i.e. the sum of all prices.
pub fn indirect_revenue(prices: &ItemPrices) -> f64 {
    prices.total()
}

/// Seller-plus-bidders surplus at these prices minus the efficient value,
/// before clamping. Nonnegative up to float error by duality.
pub fn clearing_potential_raw(prices: &ItemPrices, profile: &ValuationProfile) -> f64 {
    let utilities: f64 = profile
        .valuations()
        .iter()
        .map(|v| indirect_utility(prices, v))
        .sum();
    utilities + indirect_revenue(prices) - wdp_value(profile)
}

/// [`clearing_potential_raw`] clamped at zero. Zero exactly when the
/// prices clear the profile.
pub fn clearing_potential(prices: &ItemPrices, profile: &ValuationProfile) -> f64 {
    clearing_potential_raw(prices, profile).max(0.0)
}

/// True iff the demanded bundles are pairwise disjoint and every item
/// priced above [`PRICE_EPSILON`] is demanded by someone.
pub fn is_clearing(demands: &[Bundle], prices: &ItemPrices) -> bool {
    let mut sold: u32 = 0;
    for bundle in demands {
        debug_assert_eq!(bundle.item_count(), prices.item_count());
        if bundle.mask() & sold != 0 {
            return false;
        }
        sold |= bundle.mask();
    }
    for (j, &price) in prices.as_slice().iter().enumerate() {
        if price > PRICE_EPSILON && sold & (1 << j) == 0 {
            return false;
        }
    }
    true
}
