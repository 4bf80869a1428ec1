//! Settlement of a batch at a price vector.
//!
//! At price `p` every order executes `θ(p) = φ(p)` and every AMM `c` receives
//! `x_c = h_c(p_in / p_out)`. What is left over is the auctioneer's surplus
//!
//! ```text
//! s_i = Σ_orders φ_i(p) - Σ_{in(c)=i} x_c + Σ_{out(c)=i} f_c(x_c)
//! ```
//!
//! At an equilibrium the same vector equals a sum of nonnegative per-AMM
//! terms `f_c(h_c(r)) - r h_c(r)`, credited to each AMM's out-token. The two
//! formulas differ by exactly `Φ(p)`, so comparing them checks the solver.

use serde::Serialize;
use thiserror::Error;

use crate::amm::{in_amounts_at, AmmCurve, InAmountVector};
use crate::error::ModelError;
use crate::market::{normalize, PriceVector, TokenId};
use crate::solver::{residual, EquilibriumProblem, EquilibriumResult};

#[derive(Debug, Clone)]
pub struct ClearingConfig {
    /// Largest `max_i |ψ_i(p)|` (with `Σ p = 1`) accepted as an equilibrium.
    pub residual_tol: f64,
    /// Lower bound on the value `p_i s_i` of each token's surplus, `Σ p = 1`.
    pub surplus_tol: f64,
    /// Perturbation applied to each in-amount by the optimality check.
    pub delta: f64,
    /// Grid intervals per AMM in the optimality check.
    pub grid_intervals: usize,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-8,
            surplus_tol: 1e-8,
            delta: 1e-6,
            grid_intervals: 1000,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClearingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("price is not an equilibrium: residual {residual} exceeds {tol}")]
    NotEquilibrium { residual: f64, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClearingStatus {
    Certified,
    Failed,
}

/// What one AMM receives and pays out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmmLeg {
    pub in_token: TokenId,
    pub out_token: TokenId,
    pub in_amount: f64,
    pub out_amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimalityProbe {
    Perturbation,
    Grid,
}

/// An in-amount that beats the prescribed one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityViolation {
    pub amm: usize,
    pub probe: OptimalityProbe,
    pub in_amount: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub points_checked: usize,
    pub violations: Vec<OptimalityViolation>,
}

impl OptimalityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingOutcome {
    pub status: ClearingStatus,
    /// Normalized to sum 1.
    pub price: PriceVector,
    pub residual: f64,
    /// Executed amounts per order, one entry per token; positive means the
    /// order hands the token to the auctioneer.
    pub order_fills: Vec<Vec<f64>>,
    pub amm_legs: Vec<AmmLeg>,
    /// Leftover amount of each token, from the definition.
    pub surplus: Vec<f64>,
    /// The same surplus from the per-AMM formula; absent off equilibrium.
    pub surplus_theorem: Option<Vec<f64>>,
    /// `p · s`.
    pub total_value: f64,
    pub optimality: OptimalityReport,
    /// Human-readable reasons for a failed certification.
    pub diagnostics: Vec<String>,
}

fn check_price(problem: &EquilibriumProblem, p: &PriceVector) -> Result<Vec<f64>, ModelError> {
    if p.len() != problem.tokens() {
        return Err(ModelError::DimensionMismatch {
            expected: problem.tokens(),
            found: p.len(),
        });
    }
    Ok(normalize(p.as_slice()))
}

fn check_amounts(problem: &EquilibriumProblem, x: &InAmountVector) -> Result<(), ModelError> {
    if x.0.len() != problem.amms().len() {
        return Err(ModelError::DimensionMismatch {
            expected: problem.amms().len(),
            found: x.0.len(),
        });
    }
    if let Some(k) = x.0.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(ModelError::Domain(format!("in-amount of AMM {k} must be finite and nonnegative, got {}", x.0[k])));
    }
    Ok(())
}

/// Sum of the orders' supplies at `p`; the AMM virtual agents are left out.
fn order_supply(problem: &EquilibriumProblem, p: &[f64]) -> Vec<f64> {
    let mut total = vec![0.0; problem.tokens()];
    for supply in problem.order_supplies() {
        supply.add_eval(p, &mut total);
    }
    total
}

/// Surplus left with the auctioneer when the orders fill at `p` and AMM `c`
/// receives `x[c]`.
pub fn compute_surplus(problem: &EquilibriumProblem, p: &PriceVector, x: &InAmountVector) -> Result<Vec<f64>, ModelError> {
    let p = check_price(problem, p)?;
    check_amounts(problem, x)?;
    let mut s = order_supply(problem, &p);
    for (entry, &amount) in problem.amms().amms.iter().zip(&x.0) {
        s[entry.in_token.0] -= amount;
        s[entry.out_token.0] += entry.curve.f(amount);
    }
    Ok(s)
}

/// Each AMM's contribution `f(h(r)) - r h(r)` to its out-token, with
/// `r = p_in / p_out`.
fn amm_surplus_terms(problem: &EquilibriumProblem, p: &[f64]) -> Vec<f64> {
    problem
        .amms()
        .amms
        .iter()
        .map(|c| {
            let r = p[c.in_token.0] / p[c.out_token.0];
            let x = c.curve.h(r);
            c.curve.f(x) - r * x
        })
        .collect()
}

/// Surplus at an equilibrium from the per-AMM formula. Fails when `p` does
/// not clear within `tol`, since the formula relies on `Φ(p) = 0`.
pub fn surplus_via_theorem(problem: &EquilibriumProblem, p: &PriceVector, tol: f64) -> Result<Vec<f64>, ClearingError> {
    let p = check_price(problem, p)?;
    let res = residual(problem.aggregate(), &p);
    if !(res <= tol) {
        return Err(ClearingError::NotEquilibrium { residual: res, tol });
    }
    let mut s = vec![0.0; problem.tokens()];
    for (entry, term) in problem.amms().amms.iter().zip(amm_surplus_terms(problem, &p)) {
        s[entry.out_token.0] += term;
    }
    Ok(s)
}

pub fn total_value(p: &PriceVector, s: &[f64]) -> f64 {
    p.as_slice().iter().zip(s).map(|(a, b)| a * b).sum()
}

/// The part of `p · s` that depends on AMM `c`'s in-amount.
fn amm_value(curve: &dyn AmmCurve, p_in: f64, p_out: f64, x: f64) -> f64 {
    p_out * curve.f(x) - p_in * x
}

/// Checks that no in-amount beats `x` for the value `p · s`.
///
/// The value separates over AMMs, so each coordinate is probed alone: at
/// `x_c ± delta` and on a uniform grid over `[0, X_c]`, where `X_c` reaches
/// well past the point where `f_c` flattens below the price ratio.
pub fn verify_optimality(
    problem: &EquilibriumProblem,
    p: &PriceVector,
    x: &InAmountVector,
    delta: f64,
    grid_intervals: usize,
) -> Result<OptimalityReport, ModelError> {
    if !(delta > 0.0) {
        return Err(ModelError::Domain(format!("perturbation must be positive, got {delta}")));
    }
    let p = check_price(problem, p)?;
    check_amounts(problem, x)?;
    let mut report = OptimalityReport {
        points_checked: 0,
        violations: Vec::new(),
    };
    for (k, (entry, &x0)) in problem.amms().amms.iter().zip(&x.0).enumerate() {
        let curve = entry.curve.as_ref();
        let (p_in, p_out) = (p[entry.in_token.0], p[entry.out_token.0]);
        let base = amm_value(curve, p_in, p_out, x0);
        let mut probe = |kind: OptimalityProbe, candidate: f64, slack: f64| {
            report.points_checked += 1;
            let gain = amm_value(curve, p_in, p_out, candidate) - base;
            if gain > slack * base.abs().max(p_in * candidate).max(1.0) {
                report.violations.push(OptimalityViolation {
                    amm: k,
                    probe: kind,
                    in_amount: candidate,
                    gain,
                });
            }
        };
        probe(OptimalityProbe::Perturbation, x0 + delta, 1e-12);
        if x0 >= delta {
            probe(OptimalityProbe::Perturbation, x0 - delta, 1e-12);
        }
        let reach = curve.h(1e-3 * p_in / p_out);
        let x_max = (2.0 * x0).max(reach).max(delta);
        for j in 0..=grid_intervals {
            probe(OptimalityProbe::Grid, x_max * j as f64 / grid_intervals.max(1) as f64, 1e-9);
        }
    }
    Ok(report)
}

/// Settles a solver result.
pub fn settle(problem: &EquilibriumProblem, result: &EquilibriumResult, config: &ClearingConfig) -> Result<ClearingOutcome, ClearingError> {
    settle_at(problem, &result.price, config)
}

/// Executes the batch at `p` and certifies the outcome. Certification needs
/// a residual within tolerance, no token short beyond `surplus_tol` in value,
/// agreement of the two surplus formulas and optimal AMM in-amounts. A
/// shortfall is reported, never clipped.
pub fn settle_at(problem: &EquilibriumProblem, p: &PriceVector, config: &ClearingConfig) -> Result<ClearingOutcome, ClearingError> {
    let price = PriceVector::new(check_price(problem, p)?)?;
    let p = price.as_slice();
    let n = problem.tokens();
    let res = residual(problem.aggregate(), p);
    let x = in_amounts_at(problem.amms(), p);

    let order_fills: Vec<Vec<f64>> = problem.order_supplies().iter().map(|s| s.eval(p)).collect();
    let amm_legs: Vec<AmmLeg> = problem
        .amms()
        .amms
        .iter()
        .zip(&x.0)
        .map(|(c, &amount)| AmmLeg {
            in_token: c.in_token,
            out_token: c.out_token,
            in_amount: amount,
            out_amount: c.curve.f(amount),
        })
        .collect();
    let surplus = compute_surplus(problem, &price, &x)?;
    let value = total_value(&price, &surplus);
    let optimality = verify_optimality(problem, &price, &x, config.delta, config.grid_intervals)?;

    let mut diagnostics = Vec::new();
    if !(res <= config.residual_tol) {
        diagnostics.push(format!("residual {res:e} exceeds tolerance {:e}", config.residual_tol));
    }
    for i in 0..n {
        if p[i] * surplus[i] < -config.surplus_tol {
            diagnostics.push(format!("token {i} is short: surplus {:e} (value {:e})", surplus[i], p[i] * surplus[i]));
        }
    }
    let surplus_theorem = match surplus_via_theorem(problem, &price, config.residual_tol) {
        Ok(s) => {
            // The definition exceeds the per-AMM formula by Φ_i(p) = ψ_i(p) / p_i.
            let mut magnitude = order_supply(problem, p).iter().map(|v| v.abs()).collect::<Vec<_>>();
            for leg in &amm_legs {
                magnitude[leg.in_token.0] += leg.in_amount;
                magnitude[leg.out_token.0] += leg.out_amount;
            }
            for i in 0..n {
                let bound = 10.0 * res / p[i] + 1e-10 * (1.0 + magnitude[i]);
                let gap = (surplus[i] - s[i]).abs();
                if !(gap <= bound) {
                    diagnostics.push(format!("token {i}: surplus formulas disagree by {gap:e} (bound {bound:e})"));
                }
            }
            Some(s)
        }
        Err(_) => None,
    };
    for v in &optimality.violations {
        diagnostics.push(format!(
            "AMM {}: in-amount {} improves the value by {:e} ({:?} probe)",
            v.amm, v.in_amount, v.gain, v.probe
        ));
    }
    let status = if diagnostics.is_empty() { ClearingStatus::Certified } else { ClearingStatus::Failed };
    Ok(ClearingOutcome {
        status,
        price,
        residual: res,
        order_fills,
        amm_legs,
        surplus,
        surplus_theorem,
        total_value: value,
        optimality,
        diagnostics,
    })
}
