//! Batch clearing of limit orders against automated market makers at a single
//! uniform price vector.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod market;
pub mod orders;
pub mod amm;
pub mod solver;
pub mod clearing;
pub mod cli;

pub use error::{ModelError, ModelResult};
pub use market::{PriceVector, Supply, SupplyFunction, TokenId};
