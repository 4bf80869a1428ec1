//! Equilibrium search for the aggregate supply of a batch.
//!
//! Prices are searched on the simplex through the map
//! `ρ(q) = q - ψ(q / M)`, whose fixed points are exactly the roots of the
//! aggregate supply when it is strict. `M` holds per-token upper bounds of the
//! aggregate, so `ρ` maps the simplex to itself.

mod bisection;
mod decompose;
mod rho;
mod simplicial;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::{system_supply, AmmSystem};
use crate::error::ModelError;
use crate::market::{boundary_samples, check_strictness, normalize, PriceVector, StrictnessReport, Supply, SumSupply, SupplyFunction, TokenId};
use crate::orders::{tokens_without_sell_order, Order};

pub use bisection::solve_bisection2;
pub use decompose::{decompose, Decomposition, SubProblem};
pub use rho::solve_rho_iteration;
pub use simplicial::{completely_labeled_cell, solve_simplicial};

/// Samples per boundary facet for the strictness report.
const STRICTNESS_SAMPLES: usize = 64;

/// Normalized price below which a token failing strictness counts as priced at zero.
const BOUNDARY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Auto,
    Bisection2,
    RhoIteration,
    Simplicial,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Auto => "auto",
            Strategy::Bisection2 => "bisection2",
            Strategy::RhoIteration => "rho_iteration",
            Strategy::Simplicial => "simplicial",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Strategy::Auto),
            "bisection2" => Ok(Strategy::Bisection2),
            "rho_iteration" | "rho" => Ok(Strategy::RhoIteration),
            "simplicial" => Ok(Strategy::Simplicial),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub strategy: Strategy,
    /// Bound on `max_i |ψ_i(p)|` with `Σ p = 1`.
    pub residual_tol: f64,
    pub max_iterations: usize,
    /// Upper limit on the ρ-iteration step size, in `(0, 1]`.
    pub damping: f64,
    pub warm_start: Option<PriceVector>,
    /// The simplicial search stops once its mesh falls below `2^-mesh_depth`.
    pub mesh_depth: u32,
    /// Split the token graph at `hub` and solve the clusters in parallel.
    pub decompose: bool,
    pub hub: TokenId,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Auto,
            residual_tol: 1e-8,
            max_iterations: 200_000,
            damping: 1.0,
            warm_start: None,
            mesh_depth: 50,
            decompose: true,
            hub: TokenId(0),
        }
    }
}

/// One cluster solved during decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubproblemRecord {
    pub tokens: Vec<usize>,
    pub strategy: Strategy,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    /// Normalized to sum 1.
    pub price: PriceVector,
    pub residual: f64,
    pub iterations: usize,
    /// `Auto` when decomposed clusters used different strategies.
    pub strategy_used: Strategy,
    pub subproblem_trace: Vec<SubproblemRecord>,
}

#[derive(Debug, Clone, Error)]
pub enum SolveError {
    #[error("batch has no orders and no AMMs")]
    EmptyProblem,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("strategy {strategy} cannot solve a {tokens}-token problem")]
    StrategyUnavailable { strategy: Strategy, tokens: usize },
    #[error("no sign change bracketing an equilibrium: {detail}")]
    NoEquilibriumBracket { detail: String, strictness: StrictnessReport },
    #[error("fixed point on the boundary of the price simplex: token {token} is priced at {:e}", price[*token])]
    BoundaryFixedPoint { token: usize, price: Vec<f64>, strictness: StrictnessReport },
    #[error("iteration limit reached with residual {}", best.residual)]
    IterationLimit { best: Box<EquilibriumResult>, strictness: StrictnessReport },
    #[error("mesh limit reached with residual {}", best.residual)]
    MeshLimit { best: Box<EquilibriumResult>, strictness: StrictnessReport },
    #[error("residual {residual} exceeds tolerance {tol}")]
    ResidualAboveTolerance { residual: f64, tol: f64, best: Box<EquilibriumResult> },
    #[error("cluster {tokens:?} failed: {source}")]
    Subproblem { tokens: Vec<usize>, source: Box<SolveError> },
}

impl SolveError {
    /// The strictness report attached to the failure, if any.
    pub fn strictness(&self) -> Option<&StrictnessReport> {
        match self {
            SolveError::NoEquilibriumBracket { strictness, .. }
            | SolveError::BoundaryFixedPoint { strictness, .. }
            | SolveError::IterationLimit { strictness, .. }
            | SolveError::MeshLimit { strictness, .. } => Some(strictness),
            SolveError::Subproblem { source, .. } => source.strictness(),
            _ => None,
        }
    }

    /// Best approximation reached before giving up.
    pub fn best(&self) -> Option<&EquilibriumResult> {
        match self {
            SolveError::IterationLimit { best, .. } | SolveError::MeshLimit { best, .. } | SolveError::ResidualAboveTolerance { best, .. } => Some(best),
            SolveError::Subproblem { source, .. } => source.best(),
            _ => None,
        }
    }
}

/// Orders plus AMM virtual agents on `n` tokens, with their aggregate supply.
#[derive(Debug, Clone)]
pub struct EquilibriumProblem {
    n: usize,
    orders: Vec<Order>,
    amms: AmmSystem,
    order_supplies: Vec<Supply>,
    aggregate: Supply,
    bounds: Vec<f64>,
    strictness: StrictnessReport,
}

impl EquilibriumProblem {
    pub fn new(n: usize, orders: Vec<Order>, amms: AmmSystem) -> Result<Self, SolveError> {
        if n < 2 {
            return Err(ModelError::TooFewTokens(n).into());
        }
        let order_supplies = orders.iter().map(|o| o.supply(n)).collect::<Result<Vec<_>, _>>()?;
        let mut parts = order_supplies.clone();
        if !amms.is_empty() {
            parts.push(system_supply(&amms, n)?);
        }
        let aggregate: Supply = Arc::new(SumSupply::new(n, parts)?);
        let bounds = aggregate
            .upper_bounds()
            .into_iter()
            .map(|m| if m > 0.0 && m.is_finite() { m } else { 1.0 })
            .collect();
        let mut strictness = check_strictness(aggregate.as_ref(), &boundary_samples(n, STRICTNESS_SAMPLES), 0.0);
        strictness.tokens_without_sell_order = tokens_without_sell_order(&orders, n);
        Ok(Self {
            n,
            orders,
            amms,
            order_supplies,
            aggregate,
            bounds,
            strictness,
        })
    }

    /// A problem given directly by an aggregate supply function.
    pub fn from_supply(supply: Supply) -> Result<Self, SolveError> {
        let n = supply.tokens();
        Self::new(n, vec![Order::Custom(supply)], AmmSystem::new())
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    pub fn orders(&self) -> &[Order] {
        &self.orders
    }

    pub fn amms(&self) -> &AmmSystem {
        &self.amms
    }

    /// Supply functions of the orders alone, indexed like `orders()`.
    pub fn order_supplies(&self) -> &[Supply] {
        &self.order_supplies
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty() && self.amms.is_empty()
    }

    pub fn aggregate(&self) -> &dyn SupplyFunction {
        self.aggregate.as_ref()
    }

    pub fn strictness(&self) -> &StrictnessReport {
        &self.strictness
    }

    /// Positive per-token upper bounds `M` of the aggregate supply.
    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }
}

/// Per-token upper bounds of the aggregate, padded to 1 where no part can
/// supply the token.
pub fn upper_bounds(problem: &EquilibriumProblem) -> Vec<f64> {
    problem.bounds.clone()
}

/// `ρ(q) = q - ψ(q / M)` on the closed simplex.
pub fn rho_map(problem: &EquilibriumProblem, q: &[f64]) -> Vec<f64> {
    let psi = psi_scaled(problem, q);
    q.iter().zip(&psi).map(|(x, v)| x - v).collect()
}

/// `ψ(q / M)`.
pub(crate) fn psi_scaled(problem: &EquilibriumProblem, q: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = q.iter().zip(&problem.bounds).map(|(x, m)| x / m).collect();
    problem.aggregate.value_form(&p)
}

/// `max_i |ψ_i(p)|` with `p` scaled to sum 1.
pub fn residual(supply: &dyn SupplyFunction, p: &[f64]) -> f64 {
    let p = normalize(p);
    supply.value_form(&p).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Simplex point corresponding to price `p`: `q ∝ p ⊙ M`.
pub(crate) fn price_to_q(problem: &EquilibriumProblem, p: &[f64]) -> Vec<f64> {
    normalize(&p.iter().zip(&problem.bounds).map(|(x, m)| x * m).collect::<Vec<_>>())
}

pub(crate) fn q_to_price(problem: &EquilibriumProblem, q: &[f64]) -> Vec<f64> {
    normalize(&q.iter().zip(&problem.bounds).map(|(x, m)| x / m).collect::<Vec<_>>())
}

pub(crate) fn warm_price(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<Vec<f64>, SolveError> {
    match &config.warm_start {
        Some(w) if w.len() != problem.n => Err(ModelError::DimensionMismatch {
            expected: problem.n,
            found: w.len(),
        }
        .into()),
        Some(w) => Ok(normalize(w.as_slice())),
        None => Ok(vec![1.0 / problem.n as f64; problem.n]),
    }
}

/// Wraps a strictly positive normalized price into a result.
pub(crate) fn finish(problem: &EquilibriumProblem, price: Vec<f64>, iterations: usize, strategy: Strategy) -> Result<EquilibriumResult, SolveError> {
    // Without strictness a vanishing residual can come from prices sliding
    // onto a facet where ψ is zero; such points are not equilibria.
    let collapsed = |token: usize| !problem.strictness.strict_ok && problem.strictness.failing_tokens().contains(&token) && price[token] < BOUNDARY_FLOOR;
    if let Some(token) = (0..price.len()).find(|&i| !(price[i] > 0.0) || collapsed(i)) {
        return Err(SolveError::BoundaryFixedPoint {
            token,
            price,
            strictness: problem.strictness.clone(),
        });
    }
    let residual = residual(problem.aggregate(), &price);
    Ok(EquilibriumResult {
        price: PriceVector::new(price)?,
        residual,
        iterations,
        strategy_used: strategy,
        subproblem_trace: Vec::new(),
    })
}

/// Solves one problem without decomposition.
pub(crate) fn solve_direct(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    match (config.strategy, problem.n) {
        (Strategy::Auto, 2) | (Strategy::Bisection2, 2) => solve_bisection2(problem, config),
        (Strategy::Bisection2, n) => Err(SolveError::StrategyUnavailable {
            strategy: Strategy::Bisection2,
            tokens: n,
        }),
        (Strategy::RhoIteration, _) => solve_rho_iteration(problem, config),
        (Strategy::Simplicial, _) => solve_simplicial(problem, config),
        (Strategy::Auto, _) => match solve_rho_iteration(problem, config) {
            Ok(result) => Ok(result),
            Err(rho_err) => {
                let spent = rho_err.best().map_or(0, |b| b.iterations);
                match solve_simplicial(problem, config) {
                    Ok(mut result) => {
                        result.iterations += spent;
                        Ok(result)
                    }
                    // keep whichever approximation is better
                    Err(simplicial_err) => match (rho_err.best(), simplicial_err.best()) {
                        (Some(a), Some(b)) if a.residual < b.residual => Err(rho_err),
                        _ => Err(simplicial_err),
                    },
                }
            }
        },
    }
}

/// Finds a price vector at which the aggregate supply vanishes.
pub fn solve(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    if problem.is_empty() {
        return Err(SolveError::EmptyProblem);
    }
    if !(config.residual_tol > 0.0) {
        return Err(ModelError::Domain(format!("residual tolerance must be positive, got {}", config.residual_tol)).into());
    }
    if !(config.damping > 0.0 && config.damping <= 1.0) {
        return Err(ModelError::Domain(format!("damping must lie in (0, 1], got {}", config.damping)).into());
    }
    if config.hub.0 >= problem.n {
        return Err(ModelError::TokenOutOfRange {
            index: config.hub.0,
            n: problem.n,
        }
        .into());
    }
    let result = if config.decompose {
        decompose::solve_decomposed(problem, config)?
    } else {
        solve_direct(problem, config)?
    };
    if result.residual > config.residual_tol {
        return Err(SolveError::ResidualAboveTolerance {
            residual: result.residual,
            tol: config.residual_tol,
            best: Box::new(result),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amm::ConstantProduct;
    use crate::market::{FnSupply, ZeroSupply};
    use crate::orders::LimitSellOrder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> TokenId {
        TokenId(i)
    }

    fn sell(from: usize, to: usize, amount: f64, r1: f64, r2: f64) -> Order {
        Order::Sell(LimitSellOrder::new(t(from), t(to), amount, r1, r2).unwrap())
    }

    fn reference_problem() -> EquilibriumProblem {
        let mut amms = AmmSystem::new();
        amms.push(t(0), t(1), Arc::new(ConstantProduct::new(1000.0, 1000.0, 1.0).unwrap())).unwrap();
        EquilibriumProblem::new(2, vec![sell(0, 1, 10.0, 0.95, 1.05)], amms).unwrap()
    }

    #[test]
    fn bounds_sum_parts_and_pad() {
        let mut amms = AmmSystem::new();
        amms.push(t(1), t(0), Arc::new(ConstantProduct::new(50.0, 100.0, 1.0).unwrap())).unwrap();
        let problem = EquilibriumProblem::new(3, vec![sell(0, 1, 10.0, 1.0, 1.1)], amms).unwrap();
        assert_eq!(upper_bounds(&problem), vec![110.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_problem_rejected() {
        let problem = EquilibriumProblem::new(3, vec![], AmmSystem::new()).unwrap();
        assert!(matches!(solve(&problem, &SolverConfig::default()), Err(SolveError::EmptyProblem)));
    }

    #[test]
    fn rho_map_stays_on_simplex() {
        let problem = EquilibriumProblem::new(
            3,
            vec![
                sell(0, 1, 10.0, 0.9, 1.1),
                sell(1, 2, 3.0, 0.5, 2.0),
                sell(2, 0, 7.0, 1.0, 1.5),
                Order::Buy(crate::orders::LimitBuyOrder::new(t(0), t(2), 5.0, 1.0, 3.0).unwrap()),
            ],
            AmmSystem::new(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..10_000 {
            let mut q: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            if k % 4 == 0 {
                q[k % 3] = 0.0;
            }
            let q = normalize(&q);
            let r = rho_map(&problem, &q);
            assert!(r.iter().all(|&x| x >= -1e-12), "{q:?} -> {r:?}");
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_of_zero_supply_is_identity() {
        let problem = EquilibriumProblem::from_supply(Arc::new(ZeroSupply::new(3))).unwrap();
        let q = vec![0.2, 0.5, 0.3];
        assert_eq!(rho_map(&problem, &q), q);
    }

    #[test]
    fn rho_increases_exactly_where_supply_is_nonpositive() {
        let problem = reference_problem();
        for r in [0.5, 0.9, 0.99, 1.0, 1.2] {
            let p = normalize(&[r, 1.0]);
            let q = price_to_q(&problem, &p);
            let rho = rho_map(&problem, &q);
            let phi = problem.aggregate().eval(&p);
            for i in 0..2 {
                assert_eq!(rho[i] >= q[i], phi[i] <= 0.0, "r={r} i={i}");
            }
        }
    }

    #[test]
    fn strategies_parse_and_print() {
        for s in [Strategy::Auto, Strategy::Bisection2, Strategy::RhoIteration, Strategy::Simplicial] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("newton".parse::<Strategy>().is_err());
    }

    #[test]
    fn all_strategies_agree_on_reference_pair() {
        let problem = reference_problem();
        let mut ratios = Vec::new();
        for strategy in [Strategy::Bisection2, Strategy::RhoIteration, Strategy::Simplicial] {
            let config = SolverConfig {
                strategy,
                ..Default::default()
            };
            let result = solve(&problem, &config).unwrap();
            assert!(result.residual <= 1e-8);
            let p = result.price.as_slice();
            ratios.push(p[0] / p[1]);
        }
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 1e-5, "{ratios:?}");
        }
    }

    #[test]
    fn symmetric_cycle_has_uniform_price() {
        let orders = vec![sell(0, 1, 1.0, 0.9, 1.1), sell(1, 2, 1.0, 0.9, 1.1), sell(2, 0, 1.0, 0.9, 1.1)];
        let problem = EquilibriumProblem::new(3, orders, AmmSystem::new()).unwrap();
        for strategy in [Strategy::Simplicial, Strategy::RhoIteration, Strategy::Auto] {
            let config = SolverConfig {
                strategy,
                warm_start: Some(PriceVector::new(vec![0.5, 0.2, 0.3]).unwrap()),
                ..Default::default()
            };
            let result = solve(&problem, &config).unwrap();
            assert!(result.residual <= 1e-8);
        }
    }

    #[test]
    fn warm_start_at_equilibrium_returns_immediately() {
        let problem = reference_problem();
        let first = solve(&problem, &SolverConfig::default()).unwrap();
        for strategy in [Strategy::Bisection2, Strategy::RhoIteration, Strategy::Simplicial] {
            let config = SolverConfig {
                strategy,
                warm_start: Some(first.price.clone()),
                ..Default::default()
            };
            let again = solve(&problem, &config).unwrap();
            assert!(again.iterations <= 2, "{strategy}: {}", again.iterations);
        }
    }

    #[test]
    fn warm_start_scale_does_not_matter() {
        let problem = reference_problem();
        let base = SolverConfig {
            warm_start: Some(PriceVector::new(vec![0.3, 0.7]).unwrap()),
            ..Default::default()
        };
        let scaled = SolverConfig {
            warm_start: Some(PriceVector::new(vec![3.0, 7.0]).unwrap()),
            ..Default::default()
        };
        let a = solve(&problem, &base).unwrap();
        let b = solve(&problem, &scaled).unwrap();
        assert_eq!(a.price, b.price);
    }

    #[test]
    fn lone_sell_order_has_no_bracket() {
        let problem = EquilibriumProblem::new(2, vec![sell(1, 0, 5.0, 0.9, 1.1)], AmmSystem::new()).unwrap();
        assert!(!problem.strictness().strict_ok);
        let err = solve(&problem, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::NoEquilibriumBracket { .. }), "{err:?}");
        let report = err.strictness().unwrap();
        assert_eq!(report.failing_tokens(), vec![1]);
    }

    #[test]
    fn rootless_function_is_not_solved() {
        let f: Supply = Arc::new(FnSupply::new(
            "rootless",
            2,
            |p| vec![-p[1] / p[0], 1.0],
            |p| vec![-p[1], p[1]],
            vec![1.0, 1.0],
        ));
        let problem = EquilibriumProblem::from_supply(f).unwrap();
        for strategy in [Strategy::Bisection2, Strategy::RhoIteration, Strategy::Simplicial] {
            let config = SolverConfig {
                strategy,
                max_iterations: 20_000,
                ..Default::default()
            };
            assert!(solve(&problem, &config).is_err(), "{strategy}");
        }
    }
}
