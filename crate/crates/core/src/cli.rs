//! Batch files, reports, and the `clear` and `verify` commands.
//!
//! A batch file lists tokens by symbol, limit orders, and two-sided pools.
//! Numbers may be given as JSON numbers or as decimal strings. Parsing first
//! normalizes the file (bands resolved to explicit `r1`/`r2`, every config
//! field filled in) and then builds the equilibrium problem from the
//! normalized form, so a normalized file parses back to itself.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::amm::{split_bidirectional_pool, validate_amm, default_amm_grid, Amm, AmmCheck, AmmSystem, PiecewiseAmm, Segment};
use crate::clearing::{settle_at, ClearingConfig, ClearingOutcome, ClearingStatus};
use crate::error::ModelError;
use crate::market::{check_admissibility, default_grid, AdmissibilityTolerance, PriceVector, TokenId};
use crate::orders::{LimitBuyOrder, LimitSellOrder, Order};
use crate::solver::{solve, EquilibriumProblem, SolveError, SolverConfig, Strategy};

pub const BATCH_SCHEMA: &str = "walraswap_batch_v1";
pub const REPORT_SCHEMA: &str = "walraswap_report_v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NO_EQUILIBRIUM: i32 = 2;
pub const EXIT_UNCERTIFIED: i32 = 3;

const DEFAULT_BAND_FRACTION: f64 = 0.001;
const ADMISSIBILITY_SAMPLES: usize = 256;

/// A real number read from either a JSON number or a decimal string.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Decimal(pub f64);

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DecimalVisitor;

        impl Visitor<'_> for DecimalVisitor {
            type Value = Decimal;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number or a decimal string")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Decimal, E> {
                if v.is_finite() {
                    Ok(Decimal(v))
                } else {
                    Err(E::custom(format!("non-finite number {v}")))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Decimal, E> {
                Ok(Decimal(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Decimal, E> {
                Ok(Decimal(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Decimal, E> {
                let text = v.trim();
                let valid = !text.is_empty() && text.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
                match text.parse::<f64>() {
                    Ok(x) if valid && x.is_finite() => Ok(Decimal(x)),
                    _ => Err(E::custom(format!("`{v}` is not a decimal number"))),
                }
            }
        }

        deserializer.deserialize_any(DecimalVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Sell,
    Buy,
}

/// A limit order. `sell_token` is what the trader gives up, `buy_token` what
/// they receive. A sell order's `amount` is in `sell_token` and its limit is
/// the lowest acceptable price of `sell_token` in `buy_token`; a buy order's
/// `amount` is in `buy_token` and its limit is the highest acceptable price of
/// `buy_token` in `sell_token`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSpec {
    pub kind: OrderKind,
    pub sell_token: String,
    pub buy_token: String,
    pub amount: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_price: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_fraction: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<Decimal>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub all_or_nothing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolDirection {
    #[default]
    Both,
    AToB,
    BToA,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentSpec {
    ConstantProduct {
        a: Decimal,
        b: Decimal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        length: Option<Decimal>,
    },
    Linear {
        slope: Decimal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        length: Option<Decimal>,
    },
}

/// A two-sided pool. A constant-product pool holds `reserve_a` of `token_a`
/// and `reserve_b` of `token_b`; a piecewise pool gives the curve of each
/// direction as segments in fee-adjusted input units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSpec {
    ConstantProduct {
        token_a: String,
        token_b: String,
        reserve_a: Decimal,
        reserve_b: Decimal,
        #[serde(default)]
        fee_bps: Decimal,
        #[serde(default)]
        direction: PoolDirection,
    },
    Piecewise {
        token_a: String,
        token_b: String,
        #[serde(default)]
        fee_bps: Decimal,
        /// `token_a` in, `token_b` out.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        forward: Option<Vec<SegmentSpec>>,
        /// `token_b` in, `token_a` out.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backward: Option<Vec<SegmentSpec>>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tol: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surplus_tol: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompose: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hub_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_required: Option<bool>,
    /// Band used by orders that give a limit price without their own band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_fraction: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    pub schema: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub orders: Vec<OrderSpec>,
    #[serde(default)]
    pub pools: Vec<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<Vec<Decimal>>,
    #[serde(default)]
    pub config: BatchConfig,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error(
        "strictness required but not guaranteed: {detail}; every token needs a limit sell order buying it for an equilibrium to be guaranteed"
    )]
    StrictnessRefused { detail: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

fn field_error(field: impl Into<String>, message: impl fmt::Display) -> BatchError {
    BatchError::Field {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Where an AMM of the problem comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmmOrigin {
    pub pool: usize,
    pub direction: PoolDirection,
}

/// A batch ready to solve.
#[derive(Debug, Clone)]
pub struct ParsedBatch {
    /// Normalized file contents.
    pub batch: BatchFile,
    /// SHA-256 of the raw file bytes, hex encoded.
    pub digest: String,
    pub problem: EquilibriumProblem,
    pub solver: SolverConfig,
    pub clearing: ClearingConfig,
    pub strict_required: bool,
    pub amm_origins: Vec<AmmOrigin>,
    pub warnings: Vec<String>,
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn positive(field: &str, value: f64) -> Result<f64, BatchError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(field_error(field, format!("must be positive, got {value}")))
    }
}

fn fee_keep(field: &str, fee_bps: Decimal) -> Result<f64, BatchError> {
    let bps = fee_bps.0;
    if !(0.0..10_000.0).contains(&bps) {
        return Err(field_error(field, format!("must lie in [0, 10000), got {bps}")));
    }
    Ok(1.0 - bps / 10_000.0)
}

/// Resolves defaults: explicit bands on every order, explicit pool fields,
/// and a fully populated config.
pub fn normalize_batch(mut batch: BatchFile) -> Result<BatchFile, BatchError> {
    if batch.schema != BATCH_SCHEMA {
        return Err(field_error("schema", format!("expected `{BATCH_SCHEMA}`, got `{}`", batch.schema)));
    }
    let defaults = SolverConfig::default();
    let clearing = ClearingConfig::default();
    let config = &mut batch.config;
    config.strategy.get_or_insert(defaults.strategy);
    config.residual_tol.get_or_insert(Decimal(defaults.residual_tol));
    config.surplus_tol.get_or_insert(Decimal(clearing.surplus_tol));
    config.max_iterations.get_or_insert(defaults.max_iterations);
    config.damping.get_or_insert(Decimal(defaults.damping));
    config.mesh_depth.get_or_insert(defaults.mesh_depth);
    config.decompose.get_or_insert(defaults.decompose);
    config.strict_required.get_or_insert(false);
    let default_band = config.band_fraction.get_or_insert(Decimal(DEFAULT_BAND_FRACTION)).0;
    if batch.tokens.is_empty() {
        return Err(field_error("tokens", "at least two tokens are required"));
    }
    if config.hub_token.is_none() {
        config.hub_token = Some(batch.tokens[0].clone());
    }

    for (k, order) in batch.orders.iter_mut().enumerate() {
        let at = |name: &str| format!("orders[{k}].{name}");
        if order.all_or_nothing {
            return Err(field_error(at("all_or_nothing"), "all-or-nothing orders are not supported; orders fill partially along their band"));
        }
        match (order.limit_price, order.r1, order.r2) {
            (Some(limit), None, None) => {
                let limit = positive(&at("limit_price"), limit.0)?;
                let band = order.band_fraction.map_or(default_band, |b| b.0);
                let (r1, r2) = match order.kind {
                    OrderKind::Sell => {
                        positive(&at("band_fraction"), band)?;
                        (limit, limit * (1.0 + band))
                    }
                    OrderKind::Buy => {
                        if !(band > 0.0 && band < 1.0) {
                            return Err(field_error(at("band_fraction"), format!("must lie in (0, 1) for a buy order, got {band}")));
                        }
                        (limit * (1.0 - band), limit)
                    }
                };
                order.r1 = Some(Decimal(r1));
                order.r2 = Some(Decimal(r2));
                order.limit_price = None;
                order.band_fraction = None;
            }
            (None, Some(_), Some(_)) => {
                if order.band_fraction.is_some() {
                    return Err(field_error(at("band_fraction"), "cannot be combined with explicit r1/r2"));
                }
            }
            _ => return Err(field_error(at("limit_price"), "give either limit_price (with optional band_fraction) or both r1 and r2")),
        }
    }
    Ok(batch)
}

fn resolve(tokens: &[String], field: String, symbol: &str) -> Result<TokenId, BatchError> {
    tokens
        .iter()
        .position(|t| t == symbol)
        .map(TokenId)
        .ok_or_else(|| field_error(field, format!("unknown token `{symbol}`")))
}

fn build_segments(field: &str, specs: &[SegmentSpec]) -> Result<Vec<Segment>, BatchError> {
    if specs.is_empty() {
        return Err(field_error(field, "needs at least one segment"));
    }
    Ok(specs
        .iter()
        .map(|s| match *s {
            SegmentSpec::ConstantProduct { a, b, length } => Segment::ConstantProduct {
                a: a.0,
                b: b.0,
                length: length.map(|l| l.0),
            },
            SegmentSpec::Linear { slope, length } => Segment::Linear {
                slope: slope.0,
                length: length.map(|l| l.0),
            },
        })
        .collect())
}

/// Builds the problem and configs from a normalized batch.
pub fn build_batch(batch: BatchFile, digest: String) -> Result<ParsedBatch, BatchError> {
    let tokens = &batch.tokens;
    let n = tokens.len();
    if n < 2 {
        return Err(field_error("tokens", format!("at least two tokens are required, got {n}")));
    }
    for (i, t) in tokens.iter().enumerate() {
        if tokens[..i].contains(t) {
            return Err(field_error(format!("tokens[{i}]"), format!("duplicate symbol `{t}`")));
        }
    }
    let model = |field: String| move |e: ModelError| field_error(field, e);

    let mut orders = Vec::with_capacity(batch.orders.len());
    for (k, o) in batch.orders.iter().enumerate() {
        let sell = resolve(tokens, format!("orders[{k}].sell_token"), &o.sell_token)?;
        let buy = resolve(tokens, format!("orders[{k}].buy_token"), &o.buy_token)?;
        let amount = positive(&format!("orders[{k}].amount"), o.amount.0)?;
        let (r1, r2) = (o.r1.expect("normalized").0, o.r2.expect("normalized").0);
        let order = match o.kind {
            OrderKind::Sell => LimitSellOrder::new(sell, buy, amount, r1, r2).map(Order::Sell),
            OrderKind::Buy => LimitBuyOrder::new(buy, sell, amount, r1, r2).map(Order::Buy),
        }
        .map_err(model(format!("orders[{k}]")))?;
        orders.push(order);
    }

    let mut amms = AmmSystem::new();
    let mut amm_origins = Vec::new();
    let mut warnings = Vec::new();
    for (k, pool) in batch.pools.iter().enumerate() {
        let at = |name: &str| format!("pools[{k}].{name}");
        let mut legs: Vec<(PoolDirection, Amm)> = Vec::new();
        let (token_a, token_b) = match pool {
            PoolSpec::ConstantProduct {
                token_a,
                token_b,
                reserve_a,
                reserve_b,
                fee_bps,
                direction,
            } => {
                let gamma = fee_keep(&at("fee_bps"), *fee_bps)?;
                let a = positive(&at("reserve_a"), reserve_a.0)?;
                let b = positive(&at("reserve_b"), reserve_b.0)?;
                let (forward, backward) = split_bidirectional_pool(a, b, gamma).map_err(model(format!("pools[{k}]")))?;
                if *direction != PoolDirection::BToA {
                    legs.push((PoolDirection::AToB, Arc::new(forward)));
                }
                if *direction != PoolDirection::AToB {
                    legs.push((PoolDirection::BToA, Arc::new(backward)));
                }
                (token_a, token_b)
            }
            PoolSpec::Piecewise {
                token_a,
                token_b,
                fee_bps,
                forward,
                backward,
            } => {
                let gamma = fee_keep(&at("fee_bps"), *fee_bps)?;
                if forward.is_none() && backward.is_none() {
                    return Err(field_error(at("forward"), "a piecewise pool needs a forward or backward curve"));
                }
                for (name, dir, specs) in [("forward", PoolDirection::AToB, forward), ("backward", PoolDirection::BToA, backward)] {
                    if let Some(specs) = specs {
                        let segments = build_segments(&at(name), specs)?;
                        let curve = PiecewiseAmm::new(segments, gamma).map_err(model(at(name)))?;
                        legs.push((dir, Arc::new(curve)));
                    }
                }
                (token_a, token_b)
            }
        };
        let a = resolve(tokens, at("token_a"), token_a)?;
        let b = resolve(tokens, at("token_b"), token_b)?;
        if a == b {
            return Err(field_error(at("token_b"), "a pool needs two distinct tokens"));
        }
        for (direction, curve) in legs {
            let report = validate_amm(curve.as_ref(), &default_amm_grid(curve.as_ref()));
            for failure in &report.failures {
                let message = format!("{:?} check failed: {}", failure.check, failure.detail);
                // Linear arcs are usable but only weakly concave.
                if failure.check == AmmCheck::StrictConcavity {
                    warnings.push(format!("pools[{k}] {direction:?}: {message}"));
                } else {
                    return Err(field_error(format!("pools[{k}]"), message));
                }
            }
            let (input, output) = if direction == PoolDirection::AToB { (a, b) } else { (b, a) };
            amms.push(input, output, curve).map_err(model(format!("pools[{k}]")))?;
            amm_origins.push(AmmOrigin { pool: k, direction });
        }
    }

    let config = &batch.config;
    let warm_start = match &batch.warm_start {
        Some(w) if w.len() != n => return Err(field_error("warm_start", format!("expected {n} prices, got {}", w.len()))),
        Some(w) => Some(PriceVector::new(w.iter().map(|d| d.0).collect()).map_err(model("warm_start".into()))?),
        None => None,
    };
    let hub = resolve(tokens, "config.hub_token".into(), config.hub_token.as_deref().expect("normalized"))?;
    let solver = SolverConfig {
        strategy: config.strategy.expect("normalized"),
        residual_tol: positive("config.residual_tol", config.residual_tol.expect("normalized").0)?,
        max_iterations: config.max_iterations.expect("normalized"),
        damping: config.damping.expect("normalized").0,
        warm_start,
        mesh_depth: config.mesh_depth.expect("normalized"),
        decompose: config.decompose.expect("normalized"),
        hub,
    };
    if !(solver.damping > 0.0 && solver.damping <= 1.0) {
        return Err(field_error("config.damping", format!("must lie in (0, 1], got {}", solver.damping)));
    }
    let clearing = ClearingConfig {
        residual_tol: solver.residual_tol,
        surplus_tol: positive("config.surplus_tol", config.surplus_tol.expect("normalized").0)?,
        ..ClearingConfig::default()
    };
    let strict_required = config.strict_required.expect("normalized");
    let problem = EquilibriumProblem::new(n, orders, amms).map_err(|e| field_error("batch", e))?;
    Ok(ParsedBatch {
        batch,
        digest,
        problem,
        solver,
        clearing,
        strict_required,
        amm_origins,
        warnings,
    })
}

pub fn parse_batch_str(text: &str) -> Result<ParsedBatch, BatchError> {
    let file: BatchFile = serde_json::from_str(text)?;
    build_batch(normalize_batch(file)?, digest_hex(text.as_bytes()))
}

pub fn parse_batch(path: &Path) -> Result<ParsedBatch, BatchError> {
    let bytes = fs::read(path).map_err(|source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| field_error(path.display().to_string(), format!("not UTF-8: {e}")))?;
    parse_batch_str(&text)
}

/// Why strictness is not guaranteed, if it is not.
fn strictness_gap(parsed: &ParsedBatch) -> Option<String> {
    let report = parsed.problem.strictness();
    let names = |ids: &[usize]| ids.iter().map(|&i| parsed.batch.tokens[i].clone()).collect::<Vec<_>>().join(", ");
    let mut parts = Vec::new();
    if !report.tokens_without_sell_order.is_empty() {
        parts.push(format!("no limit sell order buys {}", names(&report.tokens_without_sell_order)));
    }
    if !report.strict_ok {
        parts.push(format!("the supply does not stay negative on the face where {} is free", names(&report.failing_tokens())));
    }
    (!parts.is_empty()).then(|| parts.join("; "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportStatus {
    Certified,
    Failed,
    NoEquilibrium,
}

impl fmt::Display for ReportStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportStatus::Certified => "CERTIFIED",
            ReportStatus::Failed => "FAILED",
            ReportStatus::NoEquilibrium => "NO_EQUILIBRIUM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    /// Sums to one.
    pub normalized: Vec<f64>,
    /// Price of each token in units of the first token.
    pub rates_vs_first: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillReport {
    pub order: usize,
    pub kind: OrderKind,
    pub sell_token: String,
    pub buy_token: String,
    pub sold: f64,
    pub bought: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegReport {
    pub pool: usize,
    pub direction: PoolDirection,
    pub in_token: String,
    pub out_token: String,
    pub in_amount: f64,
    pub out_amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsolveReport {
    pub tokens: Vec<String>,
    pub strategy: Strategy,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub strategy_requested: Strategy,
    pub strategy_used: Option<Strategy>,
    pub iterations: usize,
    pub subproblems: Vec<SubsolveReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    /// The token whose price is zero on this face.
    pub token: String,
    pub point: Vec<f64>,
    /// Largest value-form supply of `token` found on the face.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictnessSummary {
    pub strict_ok: bool,
    pub failing_faces: Vec<FaceReport>,
    pub tokens_without_sell_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub status: ReportStatus,
    pub input_digest: String,
    pub tokens: Vec<String>,
    pub residual_tol: f64,
    pub surplus_tol: f64,
    pub prices: Option<PriceReport>,
    pub residual: Option<f64>,
    pub fills: Vec<FillReport>,
    pub legs: Vec<LegReport>,
    pub surplus: Option<Vec<f64>>,
    pub surplus_theorem: Option<Vec<f64>>,
    pub total_value: Option<f64>,
    pub solver: SolverReport,
    pub strictness: StrictnessSummary,
    pub diagnostics: Vec<String>,
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct ClearOptions {
    pub out: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub tol: Option<f64>,
    pub hub_token: Option<String>,
    pub strict_required: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClearRun {
    pub exit_code: i32,
    pub report: Report,
}

fn strictness_summary(parsed: &ParsedBatch) -> StrictnessSummary {
    let report = parsed.problem.strictness();
    let tokens = &parsed.batch.tokens;
    StrictnessSummary {
        strict_ok: report.strict_ok,
        failing_faces: report
            .witnesses
            .iter()
            .map(|w| FaceReport {
                token: tokens[w.token].clone(),
                point: w.point.clone(),
                value: w.value,
            })
            .collect(),
        tokens_without_sell_order: report.tokens_without_sell_order.iter().map(|&i| tokens[i].clone()).collect(),
    }
}

fn apply_options(parsed: &mut ParsedBatch, options: &ClearOptions) -> Result<(), BatchError> {
    if let Some(strategy) = options.strategy {
        parsed.solver.strategy = strategy;
    }
    if let Some(tol) = options.tol {
        let tol = positive("--tol", tol)?;
        parsed.solver.residual_tol = tol;
        parsed.clearing.residual_tol = tol;
    }
    if let Some(hub) = &options.hub_token {
        parsed.solver.hub = resolve(&parsed.batch.tokens, "--hub-token".into(), hub)?;
    }
    parsed.strict_required |= options.strict_required;
    Ok(())
}

fn outcome_report(parsed: &ParsedBatch, report: &mut Report, outcome: &ClearingOutcome) {
    let tokens = &parsed.batch.tokens;
    let p = outcome.price.as_slice();
    report.prices = Some(PriceReport {
        normalized: p.to_vec(),
        rates_vs_first: outcome.price.rates_vs_first(),
    });
    report.residual = Some(outcome.residual);
    report.fills = parsed
        .batch
        .orders
        .iter()
        .zip(&outcome.order_fills)
        .enumerate()
        .map(|(k, (spec, fill))| {
            let sell = tokens.iter().position(|t| *t == spec.sell_token).expect("resolved");
            let buy = tokens.iter().position(|t| *t == spec.buy_token).expect("resolved");
            FillReport {
                order: k,
                kind: spec.kind,
                sell_token: spec.sell_token.clone(),
                buy_token: spec.buy_token.clone(),
                sold: fill[sell],
                bought: -fill[buy],
            }
        })
        .collect();
    report.legs = outcome
        .amm_legs
        .iter()
        .zip(&parsed.amm_origins)
        .map(|(leg, origin)| LegReport {
            pool: origin.pool,
            direction: origin.direction,
            in_token: tokens[leg.in_token.0].clone(),
            out_token: tokens[leg.out_token.0].clone(),
            in_amount: leg.in_amount,
            out_amount: leg.out_amount,
        })
        .collect();
    report.surplus = Some(outcome.surplus.clone());
    report.surplus_theorem = outcome.surplus_theorem.clone();
    report.total_value = Some(outcome.total_value);
    report.diagnostics.extend(outcome.diagnostics.iter().cloned());
}

/// Solves and settles a parsed batch.
pub fn clear_batch(mut parsed: ParsedBatch, options: &ClearOptions) -> Result<ClearRun, BatchError> {
    apply_options(&mut parsed, options)?;
    let gap = strictness_gap(&parsed);
    if parsed.strict_required {
        if let Some(detail) = gap {
            return Err(BatchError::StrictnessRefused { detail });
        }
    }
    let n = parsed.problem.tokens();
    let mut report = Report {
        schema: REPORT_SCHEMA.into(),
        status: ReportStatus::NoEquilibrium,
        input_digest: parsed.digest.clone(),
        tokens: parsed.batch.tokens.clone(),
        residual_tol: parsed.clearing.residual_tol,
        surplus_tol: parsed.clearing.surplus_tol,
        prices: None,
        residual: None,
        fills: Vec::new(),
        legs: Vec::new(),
        surplus: None,
        surplus_theorem: None,
        total_value: None,
        solver: SolverReport {
            strategy_requested: parsed.solver.strategy,
            strategy_used: None,
            iterations: 0,
            subproblems: Vec::new(),
            error: None,
        },
        strictness: strictness_summary(&parsed),
        diagnostics: parsed.warnings.clone(),
    };
    if let Some(detail) = gap {
        report.diagnostics.push(format!("strictness not guaranteed: {detail}"));
    }
    let admissibility = check_admissibility(
        parsed.problem.aggregate(),
        &default_grid(n, ADMISSIBILITY_SAMPLES, 8, options.seed),
        AdmissibilityTolerance::default(),
    );
    if let Some(v) = &admissibility.violation {
        report.diagnostics.push(format!("admissibility check {:?} failed at token {}", v.condition, parsed.batch.tokens[v.token]));
    }

    // Nothing to trade: every price clears.
    let price = if parsed.problem.is_empty() {
        parsed.solver.warm_start.clone().unwrap_or_else(|| PriceVector::uniform(n))
    } else {
        match solve(&parsed.problem, &parsed.solver) {
            Ok(result) => {
                report.solver.strategy_used = Some(result.strategy_used);
                report.solver.iterations = result.iterations;
                report.solver.subproblems = result
                    .subproblem_trace
                    .iter()
                    .map(|r| SubsolveReport {
                        tokens: r.tokens.iter().map(|&i| parsed.batch.tokens[i].clone()).collect(),
                        strategy: r.strategy,
                        iterations: r.iterations,
                        residual: r.residual,
                    })
                    .collect();
                result.price
            }
            Err(err) => {
                report.solver.error = Some(err.to_string());
                if let Some(best) = err.best() {
                    report.solver.iterations = best.iterations;
                    report.diagnostics.push(format!("best residual reached: {:e}", best.residual));
                }
                if let SolveError::Subproblem { tokens, .. } = &err {
                    let names: Vec<&str> = tokens.iter().map(|&i| parsed.batch.tokens[i].as_str()).collect();
                    report.diagnostics.push(format!("failing cluster: {}", names.join(", ")));
                }
                return Ok(ClearRun {
                    exit_code: EXIT_NO_EQUILIBRIUM,
                    report,
                });
            }
        }
    };
    let outcome = settle_at(&parsed.problem, &price, &parsed.clearing).map_err(|e| field_error("settlement", e))?;
    outcome_report(&parsed, &mut report, &outcome);
    let exit_code = match outcome.status {
        ClearingStatus::Certified => {
            report.status = ReportStatus::Certified;
            EXIT_OK
        }
        ClearingStatus::Failed => {
            report.status = ReportStatus::Failed;
            EXIT_UNCERTIFIED
        }
    };
    Ok(ClearRun { exit_code, report })
}

pub fn report_json(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

/// Parses, solves and settles the batch at `path`, writing the report to
/// `options.out` when given.
pub fn run_clear(path: &Path, options: &ClearOptions) -> Result<ClearRun, BatchError> {
    let run = clear_batch(parse_batch(path)?, options)?;
    if let Some(out) = &options.out {
        fs::write(out, report_json(&run.report)).map_err(|source| BatchError::Write {
            path: out.clone(),
            source,
        })?;
    }
    Ok(run)
}

/// Human-readable price and surplus table.
pub fn summary(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "status: {}", report.status);
    match (report.solver.strategy_used, report.residual) {
        (Some(strategy), Some(residual)) => {
            let _ = writeln!(
                out,
                "solver: {strategy}, {} iterations, {} sub-solves, residual {residual:.3e} (tol {:.1e})",
                report.solver.iterations,
                report.solver.subproblems.len(),
                report.residual_tol
            );
        }
        _ => {
            if let Some(err) = &report.solver.error {
                let _ = writeln!(out, "solver: {err}");
            }
        }
    }
    if let (Some(prices), Some(surplus)) = (&report.prices, &report.surplus) {
        let width = report.tokens.iter().map(|t| t.len()).max().unwrap_or(5).max(5);
        let first = &report.tokens[0];
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>14}  {:>14}", "token", "price", format!("rate in {first}"), "surplus");
        for (i, token) in report.tokens.iter().enumerate() {
            let _ = writeln!(
                out,
                "{token:<width$}  {:>14.8}  {:>14.8}  {:>14.6e}",
                prices.normalized[i], prices.rates_vs_first[i], surplus[i]
            );
        }
        if let Some(v) = report.total_value {
            let _ = writeln!(out, "surplus value: {v:.6e}");
        }
    }
    if !report.strictness.strict_ok {
        for face in &report.strictness.failing_faces {
            let _ = writeln!(out, "non-strict face: price of {} is zero (supply value {:e})", face.token, face.value);
        }
    }
    for d in &report.diagnostics {
        let _ = writeln!(out, "note: {d}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub checks_passed: usize,
    /// The first check that failed, if any.
    pub failure: Option<String>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn exit_code(&self) -> i32 {
        if self.ok() {
            EXIT_OK
        } else {
            EXIT_INVALID
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn all_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y))
}

/// Re-checks a report against the batch it claims to clear: digest, the
/// residual at the reported price, surplus both ways, AMM optimality, and
/// agreement of every reported number with a fresh settlement.
pub fn verify_parsed(parsed: &ParsedBatch, report: &Report) -> VerifyOutcome {
    let mut passed = 0;
    let mut check = |ok: bool| {
        if ok {
            passed += 1;
        }
        ok
    };
    let fail = |passed, message: String| VerifyOutcome {
        checks_passed: passed,
        failure: Some(message),
    };
    if !check(report.schema == REPORT_SCHEMA) {
        return fail(passed, format!("report schema `{}` is not `{REPORT_SCHEMA}`", report.schema));
    }
    if !check(report.input_digest == parsed.digest) {
        return fail(passed, format!("input digest mismatch: report has {}, batch hashes to {}", report.input_digest, parsed.digest));
    }
    if !check(report.tokens == parsed.batch.tokens) {
        return fail(passed, "token list differs from the batch".into());
    }
    if !check(report.status == ReportStatus::Certified) {
        return fail(passed, format!("report status is {}; only certified reports verify", report.status));
    }
    let Some(prices) = &report.prices else {
        return fail(passed, "certified report carries no prices".into());
    };
    let price = match PriceVector::new(prices.normalized.clone()) {
        Ok(p) if p.len() == parsed.problem.tokens() => p,
        _ => return fail(passed, "reported prices are not a positive vector over the batch tokens".into()),
    };
    let config = ClearingConfig {
        residual_tol: report.residual_tol,
        surplus_tol: report.surplus_tol,
        ..parsed.clearing.clone()
    };
    let outcome = match settle_at(&parsed.problem, &price, &config) {
        Ok(o) => o,
        Err(e) => return fail(passed, format!("settlement failed: {e}")),
    };
    if !check(outcome.residual <= config.residual_tol) {
        return fail(passed, format!("residual check failed: {:e} exceeds {:e}", outcome.residual, config.residual_tol));
    }
    if !check(outcome.status == ClearingStatus::Certified) {
        return fail(passed, format!("certificate failed: {}", outcome.diagnostics.first().cloned().unwrap_or_default()));
    }
    let mut fresh = report.clone();
    outcome_report(parsed, &mut fresh, &outcome);
    let stale = |what: &str| format!("stale report: {what} differs from a fresh settlement");
    if !check(close(report.residual.unwrap_or(f64::NAN), outcome.residual) || outcome.residual < 1e-15) {
        return fail(passed, stale("residual"));
    }
    if !check(all_close(&prices.normalized, price.normalized().as_slice()) && all_close(&prices.rates_vs_first, &price.rates_vs_first())) {
        return fail(passed, stale("price normalization"));
    }
    if !check(report.surplus.as_deref().is_some_and(|s| all_close(s, &outcome.surplus))) {
        return fail(passed, stale("surplus"));
    }
    let theorem_ok = match (&report.surplus_theorem, &outcome.surplus_theorem) {
        (Some(a), Some(b)) => all_close(a, b),
        (None, None) => true,
        _ => false,
    };
    if !check(theorem_ok) {
        return fail(passed, stale("per-AMM surplus"));
    }
    if !check(report.total_value.is_some_and(|v| close(v, outcome.total_value))) {
        return fail(passed, stale("surplus value"));
    }
    let fills_ok = report.fills.len() == fresh.fills.len()
        && report.fills.iter().zip(&fresh.fills).all(|(a, b)| {
            a.order == b.order && a.kind == b.kind && a.sell_token == b.sell_token && a.buy_token == b.buy_token && close(a.sold, b.sold) && close(a.bought, b.bought)
        });
    if !check(fills_ok) {
        return fail(passed, stale("order fills"));
    }
    let legs_ok = report.legs.len() == fresh.legs.len()
        && report.legs.iter().zip(&fresh.legs).all(|(a, b)| {
            a.pool == b.pool && a.direction == b.direction && a.in_token == b.in_token && a.out_token == b.out_token && close(a.in_amount, b.in_amount) && close(a.out_amount, b.out_amount)
        });
    if !check(legs_ok) {
        return fail(passed, stale("AMM legs"));
    }
    VerifyOutcome {
        checks_passed: passed,
        failure: None,
    }
}

/// Re-verifies the report at `report_path` against the batch at `batch_path`.
pub fn verify_report(batch_path: &Path, report_path: &Path) -> Result<VerifyOutcome, BatchError> {
    let parsed = parse_batch(batch_path)?;
    let text = fs::read_to_string(report_path).map_err(|source| BatchError::Io {
        path: report_path.to_path_buf(),
        source,
    })?;
    let report: Report = serde_json::from_str(&text)?;
    Ok(verify_parsed(&parsed, &report))
}
