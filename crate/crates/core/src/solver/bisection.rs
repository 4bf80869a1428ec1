//! Two-token equilibrium by bracketing the first coordinate of ψ in the
//! exchange rate `r = p_0 / p_1`.

use super::{finish, warm_price, EquilibriumProblem, EquilibriumResult, SolveError, SolverConfig, Strategy};

const MAX_EXPANSIONS: usize = 64;

/// `ψ_0` at the normalized price `(r, 1) / (1 + r)`; increasing in `r` for
/// well-behaved batches.
fn first_psi(problem: &EquilibriumProblem, r: f64) -> f64 {
    let p = [r / (1.0 + r), 1.0 / (1.0 + r)];
    problem.aggregate().value_form(&p)[0]
}

pub fn solve_bisection2(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    if problem.tokens() != 2 {
        return Err(SolveError::StrategyUnavailable {
            strategy: Strategy::Bisection2,
            tokens: problem.tokens(),
        });
    }
    let tol = config.residual_tol;
    let warm = warm_price(problem, config)?;
    let mut evaluations = 1;
    let r0 = warm[0] / warm[1];
    let f0 = first_psi(problem, r0);
    let done = |r: f64, evaluations| finish(problem, vec![r / (1.0 + r), 1.0 / (1.0 + r)], evaluations, Strategy::Bisection2);
    if f0.abs() <= tol {
        return done(r0, evaluations);
    }

    // Expand away from the warm start until ψ_0 changes sign strictly. Zeros
    // met on the way are not accepted: a flat zero stretch reached only at the
    // far end is the signature of a missing counterparty.
    let (mut lo, mut hi) = (r0, r0);
    let (mut f_lo, mut f_hi) = (f0, f0);
    let mut found = false;
    for _ in 0..MAX_EXPANSIONS {
        if f0 > 0.0 {
            hi = lo;
            f_hi = f_lo;
            lo /= 2.0;
            f_lo = first_psi(problem, lo);
            evaluations += 1;
            if f_lo < 0.0 {
                found = true;
                break;
            }
        } else {
            lo = hi;
            f_lo = f_hi;
            hi *= 2.0;
            f_hi = first_psi(problem, hi);
            evaluations += 1;
            if f_hi > 0.0 {
                found = true;
                break;
            }
        }
    }
    if !found {
        let (side, last) = if f0 > 0.0 { ("below it down", lo) } else { ("above it up", hi) };
        return Err(SolveError::NoEquilibriumBracket {
            detail: format!(
                "ψ_0 = {f0:e} at r = {r0} and no strict sign change {side} to r = {last} after {MAX_EXPANSIONS} steps"
            ),
            strictness: problem.strictness().clone(),
        });
    }

    // Geometric bisection keeps relative precision across scales.
    let mut best = if f_lo.abs() < f_hi.abs() { lo } else { hi };
    let mut best_abs = f_lo.abs().min(f_hi.abs());
    loop {
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) {
            break;
        }
        let f = first_psi(problem, mid);
        evaluations += 1;
        if f.abs() < best_abs {
            best = mid;
            best_abs = f.abs();
        }
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if best_abs <= tol && hi - lo <= 1e-12 * hi {
            break;
        }
    }
    let result = done(best, evaluations)?;
    if result.residual > tol {
        return Err(SolveError::ResidualAboveTolerance {
            residual: result.residual,
            tol,
            best: Box::new(result),
        });
    }
    Ok(result)
}
