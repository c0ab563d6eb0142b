//! CATS bid-file format: parser, serializer, and a synthetic instance
//! generator that emits the same format.
//!
//! ## Grammar
//!
//! Lines starting with `%` are comments and blank lines are skipped, both
//! allowed anywhere. Three header lines must appear before any bid line,
//! in any order:
//!
//! ```text
//! goods N
//! bids N
//! dummy N
//! ```
//!
//! Every following non-comment line is one bid:
//!
//! ```text
//! <id> <value> <g1> <g2> ... <gk> #
//! ```
//!
//! Item indices below `goods` are real items; indices in
//! `goods..goods+dummy` are dummy goods, which group bids into
//! multi-minded bidders (bids sharing a dummy good belong to one bidder).
//! The serializer is the exact inverse of the parser: parsing its output
//! reproduces the structure byte-for-byte.

use rand::prelude::IndexedRandom;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// One bid line: an id, a value, and the item indices it covers (possibly
/// including dummy indices at or above the real-goods count).
#[derive(Clone, Debug, PartialEq)]
pub struct CatsBid {
    pub id: u64,
    pub value: f64,
    pub items: Vec<usize>,
}

/// A parsed CATS file. Bid order is preserved from the input.
#[derive(Clone, Debug, PartialEq)]
pub struct CatsFile {
    pub goods: usize,
    pub dummy: usize,
    pub bids: Vec<CatsBid>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CatsError {
    #[error("line {line}: malformed header: {content:?}")]
    MalformedHeader { line: usize, content: String },
    #[error("missing header line {missing:?}")]
    MissingHeader { missing: &'static str },
    #[error("line {line}: item index {index} out of range for {max} goods (real + dummy)")]
    ItemOutOfRange { line: usize, index: usize, max: usize },
    #[error("line {line}: bid line missing terminal '#'")]
    MissingTerminator { line: usize },
    #[error("line {line}: negative value {value}")]
    NegativeValue { line: usize, value: f64 },
    #[error("line {line}: cannot parse {token:?} as a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: duplicate bid id {id}")]
    DuplicateBidId { line: usize, id: u64 },
    #[error("header declares {expected} bids but file contains {found}")]
    BidCountMismatch { expected: usize, found: usize },
}

/// Parses CATS ASCII text. Whitespace-tolerant; errors carry 1-based line
/// numbers.
pub fn parse_cats(text: &str) -> Result<CatsFile, CatsError> {
    let mut goods: Option<usize> = None;
    let mut bids_declared: Option<usize> = None;
    let mut dummy: Option<usize> = None;
    let mut bids: Vec<CatsBid> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();

        let headers_done = goods.is_some() && bids_declared.is_some() && dummy.is_some();
        if !headers_done {
            let (key, rest) = (tokens[0], &tokens[1..]);
            let slot = match key {
                "goods" => &mut goods,
                "bids" => &mut bids_declared,
                "dummy" => &mut dummy,
                _ => {
                    return Err(CatsError::MalformedHeader {
                        line,
                        content: trimmed.to_string(),
                    })
                }
            };
            if rest.len() != 1 || slot.is_some() {
                return Err(CatsError::MalformedHeader {
                    line,
                    content: trimmed.to_string(),
                });
            }
            let n: usize = rest[0].parse().map_err(|_| CatsError::BadNumber {
                line,
                token: rest[0].to_string(),
            })?;
            *slot = Some(n);
            continue;
        }

        // Bid line.
        let max = goods.unwrap() + dummy.unwrap();
        if tokens.last() != Some(&"#") {
            return Err(CatsError::MissingTerminator { line });
        }
        if tokens.len() < 3 {
            return Err(CatsError::MalformedHeader {
                line,
                content: trimmed.to_string(),
            });
        }
        let id: u64 = tokens[0].parse().map_err(|_| CatsError::BadNumber {
            line,
            token: tokens[0].to_string(),
        })?;
        if bids.iter().any(|b| b.id == id) {
            return Err(CatsError::DuplicateBidId { line, id });
        }
        let value: f64 = tokens[1].parse().map_err(|_| CatsError::BadNumber {
            line,
            token: tokens[1].to_string(),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(CatsError::NegativeValue { line, value });
        }
        let mut items = Vec::with_capacity(tokens.len() - 3);
        for token in &tokens[2..tokens.len() - 1] {
            let index: usize = token.parse().map_err(|_| CatsError::BadNumber {
                line,
                token: token.to_string(),
            })?;
            if index >= max {
                return Err(CatsError::ItemOutOfRange { line, index, max });
            }
            items.push(index);
        }
        bids.push(CatsBid { id, value, items });
    }

    let goods = goods.ok_or(CatsError::MissingHeader { missing: "goods" })?;
    let declared = bids_declared.ok_or(CatsError::MissingHeader { missing: "bids" })?;
    let dummy = dummy.ok_or(CatsError::MissingHeader { missing: "dummy" })?;
    if declared != bids.len() {
        return Err(CatsError::BidCountMismatch {
            expected: declared,
            found: bids.len(),
        });
    }
    Ok(CatsFile { goods, dummy, bids })
}

/// Serializes to canonical CATS text; `parse_cats` on the output returns an
/// equal structure.
pub fn serialize_cats(file: &CatsFile) -> String {
    let mut out = String::new();
    out.push_str(&format!("goods {}\n", file.goods));
    out.push_str(&format!("bids {}\n", file.bids.len()));
    out.push_str(&format!("dummy {}\n", file.dummy));
    for bid in &file.bids {
        out.push_str(&format!("{} {}", bid.id, bid.value));
        for item in &bid.items {
            out.push_str(&format!(" {item}"));
        }
        out.push_str(" #\n");
    }
    out
}

/// Knobs for the synthetic generator. The generator builds economies that
/// are clearable at item prices by construction: items are partitioned
/// among bidders into "winning" bundles priced above their item cost, and
/// the remaining bids are distractors priced below cost.
#[derive(Clone, Debug)]
pub struct SyntheticParams {
    /// Number of multi-minded bidders (dummy-good groups). Must be between
    /// 1 and the item count.
    pub bidders: usize,
    /// Family-level base item values; length must equal the item count, or
    /// empty to draw fresh base values per file.
    pub item_values: Vec<f64>,
    /// Relative per-file jitter applied to base item values.
    pub value_jitter: f64,
    /// Range of the winning bid's surplus over its bundle's item cost.
    pub margin: (f64, f64),
    /// Range of the shortfall of distractor bids below item cost.
    pub distractor_depth: (f64, f64),
    /// Largest distractor bundle size.
    pub max_distractor_size: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            bidders: 10,
            item_values: Vec::new(),
            value_jitter: 0.05,
            margin: (0.8, 1.6),
            distractor_depth: (0.3, 1.2),
            max_distractor_size: 3,
        }
    }
}

/// Generates a synthetic CATS file with `n_bids` bids over `m` items.
/// Deterministic in `seed`. Every bidder's bids share one dummy good, so
/// multi-minded grouping recovers the intended bidders; single-minded
/// grouping treats each bid as its own bidder and the economy stays
/// clearable either way.
pub fn generate_synthetic(
    m: usize,
    n_bids: usize,
    params: &SyntheticParams,
    seed: u64,
) -> CatsFile {
    assert!(m >= 1 && m <= crate::model::MAX_ITEMS, "item count out of range");
    let bidders = params.bidders.clamp(1, m.min(n_bids));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Per-file item prices: family base values (or fresh draws) plus jitter.
    let mut item_prices = Vec::with_capacity(m);
    for j in 0..m {
        let base = if params.item_values.is_empty() {
            rng.random_range(1.0..5.0)
        } else {
            params.item_values[j]
        };
        let jitter = 1.0 + params.value_jitter * rng.random_range(-1.0..=1.0);
        item_prices.push(base * jitter);
    }

    // Partition all items into `bidders` nonempty winning bundles.
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut cuts: Vec<usize> = (1..m).collect();
    for i in (1..cuts.len()).rev() {
        let j = rng.random_range(0..=i);
        cuts.swap(i, j);
    }
    let mut cuts: Vec<usize> = cuts.into_iter().take(bidders - 1).collect();
    cuts.sort_unstable();
    cuts.push(m);
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(bidders);
    let mut start = 0;
    for &end in &cuts {
        groups.push(order[start..end].to_vec());
        start = end;
    }

    let cost = |items: &[usize]| items.iter().map(|&j| item_prices[j]).sum::<f64>();

    let mut bids = Vec::with_capacity(n_bids);
    let mut next_id = 0u64;
    let n_distractors = n_bids.saturating_sub(bidders);
    for (i, group) in groups.iter().enumerate() {
        let dummy_index = m + i;
        let mut items = group.clone();
        items.sort_unstable();
        let value = cost(&items) + rng.random_range(params.margin.0..=params.margin.1);
        items.push(dummy_index);
        bids.push(CatsBid { id: next_id, value, items });
        next_id += 1;

        // Round-robin share of the distractor budget.
        let share = n_distractors / bidders + usize::from(i < n_distractors % bidders);
        let mut used: Vec<Vec<usize>> = vec![group.iter().copied().collect()];
        used[0].sort_unstable();
        let mut produced = 0;
        let mut attempts = 0;
        while produced < share && attempts < 20 * share {
            attempts += 1;
            let size = rng.random_range(1..=params.max_distractor_size.clamp(1, m));
            let mut all: Vec<usize> = (0..m).collect();
            let mut chosen = Vec::with_capacity(size);
            for _ in 0..size {
                let pick = *all.choose(&mut rng).expect("items remain");
                all.retain(|&x| x != pick);
                chosen.push(pick);
            }
            chosen.sort_unstable();
            if used.contains(&chosen) {
                continue;
            }
            used.push(chosen.clone());
            let depth =
                rng.random_range(params.distractor_depth.0..=params.distractor_depth.1);
            let value = (cost(&chosen) - depth).max(0.05);
            let mut items = chosen;
            items.push(dummy_index);
            bids.push(CatsBid { id: next_id, value, items });
            next_id += 1;
            produced += 1;
        }
    }

    CatsFile { goods: m, dummy: bidders, bids }
}
