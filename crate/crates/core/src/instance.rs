//! Turning parsed bid files into bidder pools and auction instances.
//!
//! A [`BidderPool`] is a collection of valuations over a common item set,
//! produced by grouping a bid file's bids into bidders. Grouping is either
//! single-minded (one bidder per bid) or multi-minded (bids sharing a
//! dummy good form one bidder). Pools are normalized to a common value
//! scale, split into disjoint train and test halves, and sampled into
//! concrete [`AuctionInstance`]s.

use crate::cats::CatsFile;
use crate::model::{Bundle, ModelError, Valuation, ValuationProfile, MAX_ITEMS};
use rand::seq::SliceRandom;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// How bids are grouped into bidders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BidderMode {
    /// Each bid is its own bidder.
    SingleMinded,
    /// Bids sharing a dummy good form one bidder; dummy-free bids stay
    /// solitary.
    MultiMinded,
}

impl fmt::Display for BidderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BidderMode::SingleMinded => write!(f, "single"),
            BidderMode::MultiMinded => write!(f, "multi"),
        }
    }
}

/// Label for where a pool's instances came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistributionTag {
    Paths,
    Regions,
    Arbitrary,
    Scheduling,
    Synthetic,
}

impl fmt::Display for DistributionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DistributionTag::Paths => "paths",
            DistributionTag::Regions => "regions",
            DistributionTag::Arbitrary => "arbitrary",
            DistributionTag::Scheduling => "scheduling",
            DistributionTag::Synthetic => "synthetic",
        };
        write!(f, "{name}")
    }
}

impl FromStr for DistributionTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paths" => Ok(DistributionTag::Paths),
            "regions" => Ok(DistributionTag::Regions),
            "arbitrary" => Ok(DistributionTag::Arbitrary),
            "scheduling" => Ok(DistributionTag::Scheduling),
            "synthetic" => Ok(DistributionTag::Synthetic),
            other => Err(format!("unknown distribution {other:?}")),
        }
    }
}

/// A set of bidder valuations over a shared item universe.
#[derive(Clone, Debug)]
pub struct BidderPool {
    items: usize,
    mode: BidderMode,
    bidders: Vec<Valuation>,
    /// Cumulative multiplicative factor applied to raw bid values.
    scale: f64,
}

impl BidderPool {
    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn mode(&self) -> BidderMode {
        self.mode
    }

    pub fn bidders(&self) -> &[Valuation] {
        &self.bidders
    }

    pub fn len(&self) -> usize {
        self.bidders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bidders.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Appends another pool's bidders; item universes must match. Bidder
    /// ids are reassigned to positions.
    pub fn merge(&mut self, other: &BidderPool) -> Result<(), InstanceError> {
        if other.items != self.items {
            return Err(InstanceError::ItemUniverseMismatch {
                expected: self.items,
                found: other.items,
            });
        }
        for valuation in &other.bidders {
            let id = self.bidders.len();
            self.bidders.push(reassign(valuation, id)?);
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InstanceError {
    #[error("file declares {items} goods but at most {MAX_ITEMS} are supported")]
    TooManyItems { items: usize },
    #[error("all bid values are zero; nothing to normalize")]
    AllZeroValues,
    #[error("pool is empty")]
    EmptyPool,
    #[error("split fraction {fraction} must lie strictly between 0 and 1")]
    BadFraction { fraction: f64 },
    #[error("split leaves an empty side (train {train}, test {test})")]
    EmptySide { train: usize, test: usize },
    #[error("pool has {pool} bidders but {requested} were requested")]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("pools cover different item universes ({expected} vs {found})")]
    ItemUniverseMismatch { expected: usize, found: usize },
    #[error("scale factor {factor} must be finite and positive")]
    BadScale { factor: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn reassign(valuation: &Valuation, bidder: usize) -> Result<Valuation, ModelError> {
    Valuation::new(bidder, valuation.item_count(), valuation.atoms().to_vec())
}

/// Groups a bid file's bids into bidders.
///
/// Dummy item indices (at or above `file.goods`) are stripped from every
/// bundle. Bids whose bundle becomes empty are dropped, as are bidders
/// left with no bids. When one bidder ends up with two bids on the same
/// bundle, the larger value is kept.
pub fn group_bidders(file: &CatsFile, mode: BidderMode) -> Result<BidderPool, InstanceError> {
    let items = file.goods;
    if items > MAX_ITEMS {
        return Err(InstanceError::TooManyItems { items });
    }

    // Group keys in order of first appearance. A bid's key is its first
    // dummy index; dummy-free bids (and everything in single-minded mode)
    // get a fresh group.
    let mut group_atoms: Vec<Vec<(Bundle, f64)>> = Vec::new();
    let mut key_to_group: Vec<(usize, usize)> = Vec::new();
    for bid in &file.bids {
        let real: Vec<usize> = bid.items.iter().copied().filter(|&j| j < items).collect();
        if real.is_empty() {
            continue;
        }
        let bundle = Bundle::from_indices(items, &real)?;
        let group = match mode {
            BidderMode::SingleMinded => None,
            BidderMode::MultiMinded => bid
                .items
                .iter()
                .copied()
                .find(|&j| j >= items)
                .map(|key| match key_to_group.iter().find(|(k, _)| *k == key) {
                    Some(&(_, g)) => g,
                    None => {
                        key_to_group.push((key, group_atoms.len()));
                        group_atoms.push(Vec::new());
                        group_atoms.len() - 1
                    }
                }),
        };
        let g = match group {
            Some(g) => g,
            None => {
                group_atoms.push(Vec::new());
                group_atoms.len() - 1
            }
        };
        match group_atoms[g].iter_mut().find(|(b, _)| *b == bundle) {
            Some(atom) => atom.1 = atom.1.max(bid.value),
            None => group_atoms[g].push((bundle, bid.value)),
        }
    }

    let mut bidders = Vec::new();
    for atoms in group_atoms {
        if atoms.is_empty() {
            continue;
        }
        bidders.push(Valuation::new(bidders.len(), items, atoms)?);
    }
    Ok(BidderPool { items, mode, bidders, scale: 1.0 })
}

/// Rescales all values so the pool's maximum is 10. The relative order of
/// values is unchanged. Fails when every value is zero.
pub fn normalize_values(pool: &BidderPool) -> Result<BidderPool, InstanceError> {
    let max = pool
        .bidders
        .iter()
        .flat_map(|v| v.atoms().iter().map(|&(_, value)| value))
        .fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(InstanceError::AllZeroValues);
    }
    scale_values(pool, 10.0 / max)
}

/// Multiplies every value in the pool by `factor`. Used to put several
/// pools from the same economy family onto one shared scale: normalize a
/// reference pool, then apply its `scale()` to the rest.
pub fn scale_values(pool: &BidderPool, factor: f64) -> Result<BidderPool, InstanceError> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(InstanceError::BadScale { factor });
    }
    let mut bidders = Vec::with_capacity(pool.bidders.len());
    for valuation in &pool.bidders {
        let atoms = valuation
            .atoms()
            .iter()
            .map(|&(bundle, value)| (bundle, value * factor))
            .collect();
        bidders.push(Valuation::new(valuation.bidder(), pool.items, atoms)?);
    }
    Ok(BidderPool {
        items: pool.items,
        mode: pool.mode,
        bidders,
        scale: pool.scale * factor,
    })
}

/// Splits a pool into disjoint train and test halves. The train side gets
/// `floor(fraction * len)` bidders after a seeded shuffle; both sides must
/// end up nonempty.
pub fn split_train_test(
    pool: &BidderPool,
    fraction: f64,
    seed: u64,
) -> Result<(BidderPool, BidderPool), InstanceError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(InstanceError::BadFraction { fraction });
    }
    let n = pool.bidders.len();
    if n == 0 {
        return Err(InstanceError::EmptyPool);
    }
    let train_size = (fraction * n as f64).floor() as usize;
    if train_size == 0 || train_size == n {
        return Err(InstanceError::EmptySide { train: train_size, test: n - train_size });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let build = |indices: &[usize]| -> Result<BidderPool, InstanceError> {
        let mut bidders = Vec::with_capacity(indices.len());
        for (id, &idx) in indices.iter().enumerate() {
            bidders.push(reassign(&pool.bidders[idx], id)?);
        }
        Ok(BidderPool { items: pool.items, mode: pool.mode, bidders, scale: pool.scale })
    };
    let train = build(&order[..train_size])?;
    let test = build(&order[train_size..])?;
    Ok((train, test))
}

/// One concrete auction: a valuation profile plus provenance for reporting.
#[derive(Clone, Debug)]
pub struct AuctionInstance {
    pub profile: ValuationProfile,
    pub tag: DistributionTag,
    pub seed: u64,
    /// Identifier of the pool or file the bidders came from.
    pub prior_source: String,
}

/// Draws `n` bidders from the pool without replacement and packages them
/// as an instance. Deterministic in `seed`.
pub fn sample_instance(
    pool: &BidderPool,
    n: usize,
    seed: u64,
    tag: DistributionTag,
    prior_source: &str,
) -> Result<AuctionInstance, InstanceError> {
    if n > pool.bidders.len() {
        return Err(InstanceError::PoolTooSmall { pool: pool.bidders.len(), requested: n });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.bidders.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut valuations = Vec::with_capacity(n);
    for (id, &idx) in order[..n].iter().enumerate() {
        valuations.push(reassign(&pool.bidders[idx], id)?);
    }
    let profile = ValuationProfile::new(pool.items, valuations)?;
    Ok(AuctionInstance { profile, tag, seed, prior_source: prior_source.to_string() })
}

/// Packages an entire pool as one instance, keeping every bidder.
pub fn instance_from_pool(
    pool: &BidderPool,
    seed: u64,
    tag: DistributionTag,
    prior_source: &str,
) -> Result<AuctionInstance, InstanceError> {
    if pool.bidders.is_empty() {
        return Err(InstanceError::EmptyPool);
    }
    let mut valuations = Vec::with_capacity(pool.bidders.len());
    for (id, valuation) in pool.bidders.iter().enumerate() {
        valuations.push(reassign(valuation, id)?);
    }
    let profile = ValuationProfile::new(pool.items, valuations)?;
    Ok(AuctionInstance { profile, tag, seed, prior_source: prior_source.to_string() })
}
