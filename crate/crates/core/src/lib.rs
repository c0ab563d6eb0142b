//! Simulator for iterative combinatorial auctions with Bayesian price
//! updates.
//!
//! The library covers the full experiment pipeline: CATS-format instance
//! IO ([`cats`], [`instance`]), a Gaussian-process prior over bundle values
//! ([`prior`]), probit belief filtering ([`beliefs`]), exact market
//! arithmetic ([`solvers`]), Monte Carlo EM price inference ([`mcem`]),
//! subgradient clock-auction baselines ([`subgradient`]), the auction loop
//! itself ([`engine`]), and a batch experiment driver ([`harness`]).

pub mod beliefs;
pub mod cats;
pub mod engine;
pub mod harness;
pub mod instance;
pub mod mcem;
pub mod model;
pub mod prior;
pub mod simplex;
pub mod solvers;
pub mod subgradient;

pub use model::{
    total_value, Allocation, Bundle, ItemPrices, ModelError, Valuation, ValuationProfile,
    MAX_ITEMS,
};
