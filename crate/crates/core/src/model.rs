//! Core market types: bundles of items, multi-minded valuations, item
//! prices, and allocations.
//!
//! Items are indexed `0..m` with `m <= 32`, so a bundle fits in a machine
//! word and subset tests are single instructions. All types are immutable
//! value data after construction; constructors validate their invariants and
//! return [`ModelError`] on violation.

use std::fmt;
use thiserror::Error;

/// Hard cap on the number of items; bundles are stored as `u32` bitsets.
pub const MAX_ITEMS: usize = 32;

/// Errors from constructing or combining core market types.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("item index {index} out of range for {items} items")]
    ItemOutOfRange { index: usize, items: usize },
    #[error("bundle mask {mask:#x} has bits set at or above item count {items}")]
    MaskOutOfRange { mask: u32, items: usize },
    #[error("item count mismatch: expected {expected}, found {found}")]
    ItemCountMismatch { expected: usize, found: usize },
    #[error("bidder count mismatch: expected {expected}, found {found}")]
    BidderCountMismatch { expected: usize, found: usize },
    #[error("atom on the empty bundle is not allowed")]
    EmptyAtom,
    #[error("duplicate atom bundle (mask {mask:#x})")]
    DuplicateAtom { mask: u32 },
    #[error("value {value} is negative or not finite")]
    BadValue { value: f64 },
    #[error("price {value} is negative or not finite")]
    BadPrice { value: f64 },
    #[error("assigned bundles overlap")]
    OverlappingBundles,
    #[error("{items} items exceeds the supported maximum of {MAX_ITEMS}")]
    TooManyItems { items: usize },
}

fn check_item_count(items: usize) -> Result<(), ModelError> {
    if items > MAX_ITEMS {
        return Err(ModelError::TooManyItems { items });
    }
    Ok(())
}

/// A set of items out of `m`, stored as a bitset.
///
/// Ordering is by mask value (then item count), which gives a deterministic
/// total order used for tie-breaking throughout.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bundle {
    mask: u32,
    items: u8,
}

impl Bundle {
    /// The empty bundle over `items` items.
    pub fn empty(items: usize) -> Bundle {
        check_item_count(items).expect("item count within bitset width");
        Bundle { mask: 0, items: items as u8 }
    }

    /// Bundle from an explicit bitmask; every set bit must be below `items`.
    pub fn from_mask(items: usize, mask: u32) -> Result<Bundle, ModelError> {
        check_item_count(items)?;
        if items < 32 && mask >> items != 0 {
            return Err(ModelError::MaskOutOfRange { mask, items });
        }
        Ok(Bundle { mask, items: items as u8 })
    }

    /// Bundle containing exactly the given item indices.
    pub fn from_indices(items: usize, indices: &[usize]) -> Result<Bundle, ModelError> {
        check_item_count(items)?;
        let mut mask = 0u32;
        for &j in indices {
            if j >= items {
                return Err(ModelError::ItemOutOfRange { index: j, items });
            }
            mask |= 1 << j;
        }
        Ok(Bundle { mask, items: items as u8 })
    }

    /// Single-item bundle.
    pub fn singleton(items: usize, index: usize) -> Result<Bundle, ModelError> {
        Bundle::from_indices(items, &[index])
    }

    pub fn item_count(&self) -> usize {
        self.items as usize
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    /// Number of items in the bundle.
    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.items as usize && self.mask & (1 << index) != 0
    }

    pub fn is_subset_of(&self, other: &Bundle) -> bool {
        self.mask & other.mask == self.mask
    }

    pub fn is_disjoint_from(&self, other: &Bundle) -> bool {
        self.mask & other.mask == 0
    }

    /// Union with another bundle over the same item count.
    pub fn union(&self, other: &Bundle) -> Bundle {
        debug_assert_eq!(self.items, other.items);
        Bundle { mask: self.mask | other.mask, items: self.items }
    }

    /// Iterator over the item indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let mask = self.mask;
        (0..self.items as usize).filter(move |j| mask & (1 << j) != 0)
    }
}

impl fmt::Display for Bundle {
    /// Items joined by `+`, or `-` for the empty bundle (trace format).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "-");
        }
        let mut first = true;
        for j in self.iter() {
            if !first {
                write!(f, "+")?;
            }
            write!(f, "{j}")?;
            first = false;
        }
        Ok(())
    }
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bundle({self})")
    }
}

fn check_value(value: f64) -> Result<(), ModelError> {
    if !value.is_finite() || value < 0.0 {
        return Err(ModelError::BadValue { value });
    }
    Ok(())
}

/// A multi-minded valuation: a list of `(bundle, value)` atoms extended by
/// free disposal. The value of an arbitrary bundle is the best atom value
/// among atoms it contains, or zero if it contains none. Single-minded is
/// the one-atom case; an empty atom list is the identically-zero valuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Valuation {
    bidder: usize,
    items: usize,
    atoms: Vec<(Bundle, f64)>,
}

impl Valuation {
    /// Validates that atoms are nonempty bundles over `items` with distinct
    /// masks and nonnegative finite values.
    pub fn new(
        bidder: usize,
        items: usize,
        atoms: Vec<(Bundle, f64)>,
    ) -> Result<Valuation, ModelError> {
        check_item_count(items)?;
        for (idx, (bundle, value)) in atoms.iter().enumerate() {
            if bundle.item_count() != items {
                return Err(ModelError::ItemCountMismatch {
                    expected: items,
                    found: bundle.item_count(),
                });
            }
            if bundle.is_empty() {
                return Err(ModelError::EmptyAtom);
            }
            check_value(*value)?;
            if atoms[..idx].iter().any(|(b, _)| b.mask() == bundle.mask()) {
                return Err(ModelError::DuplicateAtom { mask: bundle.mask() });
            }
        }
        Ok(Valuation { bidder, items, atoms })
    }

    /// The zero valuation (no atoms).
    pub fn empty(bidder: usize, items: usize) -> Valuation {
        Valuation { bidder, items, atoms: Vec::new() }
    }

    pub fn bidder(&self) -> usize {
        self.bidder
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn atoms(&self) -> &[(Bundle, f64)] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Value of an arbitrary bundle under free disposal: the maximum atom
    /// value among atoms contained in `x`, or 0 when none is contained.
    pub fn value_of(&self, x: &Bundle) -> f64 {
        debug_assert_eq!(x.item_count(), self.items);
        let mut best = 0.0f64;
        for (bundle, value) in &self.atoms {
            if bundle.is_subset_of(x) && *value > best {
                best = *value;
            }
        }
        best
    }
}

/// Nonnegative per-item prices; the price of a bundle is the sum of its
/// item prices.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemPrices {
    prices: Vec<f64>,
}

impl ItemPrices {
    pub fn new(prices: Vec<f64>) -> Result<ItemPrices, ModelError> {
        for &p in &prices {
            if !p.is_finite() || p < 0.0 {
                return Err(ModelError::BadPrice { value: p });
            }
        }
        Ok(ItemPrices { prices })
    }

    /// Null prices over `items` items.
    pub fn zeros(items: usize) -> ItemPrices {
        ItemPrices { prices: vec![0.0; items] }
    }

    pub fn item_count(&self) -> usize {
        self.prices.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.prices[index]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.prices
    }

    /// Sum of all item prices.
    pub fn total(&self) -> f64 {
        self.prices.iter().sum()
    }

    /// Price of a bundle: sum of its item prices.
    pub fn bundle_price(&self, x: &Bundle) -> Result<f64, ModelError> {
        if x.item_count() != self.prices.len() {
            return Err(ModelError::ItemCountMismatch {
                expected: self.prices.len(),
                found: x.item_count(),
            });
        }
        Ok(self.price_of_mask(x.mask()))
    }

    /// Fast path for validated masks.
    pub(crate) fn price_of_mask(&self, mask: u32) -> f64 {
        let mut sum = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            sum += self.prices[j];
            bits &= bits - 1;
        }
        sum
    }
}

impl fmt::Display for ItemPrices {
    /// Comma-joined prices (trace format).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for p in &self.prices {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
            first = false;
        }
        Ok(())
    }
}

/// A feasible allocation: one bundle per bidder, pairwise disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    assignments: Vec<Bundle>,
}

impl Allocation {
    /// Validates pairwise disjointness and a uniform item count.
    pub fn new(assignments: Vec<Bundle>) -> Result<Allocation, ModelError> {
        let mut taken = 0u32;
        let mut items = None;
        for bundle in &assignments {
            match items {
                None => items = Some(bundle.item_count()),
                Some(m) if m != bundle.item_count() => {
                    return Err(ModelError::ItemCountMismatch {
                        expected: m,
                        found: bundle.item_count(),
                    })
                }
                _ => {}
            }
            if taken & bundle.mask() != 0 {
                return Err(ModelError::OverlappingBundles);
            }
            taken |= bundle.mask();
        }
        Ok(Allocation { assignments })
    }

    pub fn assignments(&self) -> &[Bundle] {
        &self.assignments
    }

    pub fn bidder_count(&self) -> usize {
        self.assignments.len()
    }

    /// Union mask of all assigned items.
    pub fn assigned_mask(&self) -> u32 {
        self.assignments.iter().fold(0, |acc, b| acc | b.mask())
    }
}

/// One valuation per bidder, all over the same item count.
///
/// An empty profile (no bidders) is permitted; anything that needs bidders
/// validates the count where it is constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationProfile {
    items: usize,
    valuations: Vec<Valuation>,
}

impl ValuationProfile {
    pub fn new(items: usize, valuations: Vec<Valuation>) -> Result<ValuationProfile, ModelError> {
        check_item_count(items)?;
        for v in &valuations {
            if v.item_count() != items {
                return Err(ModelError::ItemCountMismatch {
                    expected: items,
                    found: v.item_count(),
                });
            }
        }
        Ok(ValuationProfile { items, valuations })
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn bidder_count(&self) -> usize {
        self.valuations.len()
    }

    pub fn valuations(&self) -> &[Valuation] {
        &self.valuations
    }

    pub fn get(&self, i: usize) -> &Valuation {
        &self.valuations[i]
    }
}

/// Total value of an allocation under a profile: the sum over bidders of
/// the value of their assigned bundle.
pub fn total_value(a: &Allocation, v: &ValuationProfile) -> Result<f64, ModelError> {
    if a.bidder_count() != v.bidder_count() {
        return Err(ModelError::BidderCountMismatch {
            expected: v.bidder_count(),
            found: a.bidder_count(),
        });
    }
    let mut sum = 0.0;
    for (bundle, valuation) in a.assignments().iter().zip(v.valuations()) {
        if bundle.item_count() != v.item_count() {
            return Err(ModelError::ItemCountMismatch {
                expected: v.item_count(),
                found: bundle.item_count(),
            });
        }
        sum += valuation.value_of(bundle);
    }
    Ok(sum)
}
