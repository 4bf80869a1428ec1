//! Damped iteration of the fixed-point map `ρ`.
//!
//! `q ← q - α ψ(q / M)` equals `(1 - α) q + α ρ(q)`, so it stays on the
//! simplex for `α ≤ 1`. Nothing guarantees convergence; the step is halved
//! whenever the residual stops improving.

use super::{finish, price_to_q, psi_scaled, q_to_price, warm_price, EquilibriumProblem, EquilibriumResult, SolveError, SolverConfig, Strategy};
use crate::market::normalize;

const STALL_WINDOW: usize = 32;
const GROWTH_WINDOW: usize = 64;

/// Residual of the normalized price behind `q`, from `ψ(q / M)`.
fn residual_of(problem: &EquilibriumProblem, q: &[f64], psi: &[f64]) -> f64 {
    let scale: f64 = q.iter().zip(problem.bounds()).map(|(x, m)| x / m).sum();
    psi.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) / scale
}

pub fn solve_rho_iteration(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    let tol = config.residual_tol;
    let warm = warm_price(problem, config)?;
    let mut q = price_to_q(problem, &warm);
    let mut psi = psi_scaled(problem, &q);
    let mut res = residual_of(problem, &q, &psi);
    if res <= tol {
        return finish(problem, warm, 0, Strategy::RhoIteration);
    }

    // Initial step keeps the largest relative move φ_i / M_i at one.
    let relative_move = q
        .iter()
        .zip(&psi)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, v)| (v / x).abs())
        .fold(0.0f64, f64::max);
    let mut alpha = if relative_move > 0.0 { config.damping.min(1.0 / relative_move) } else { config.damping };
    let alpha_floor = alpha * 1e-18;

    let (mut best_q, mut best_res) = (q.clone(), res);
    let (mut since_best, mut streak) = (0, 0);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        // no coordinate may lose more than half its mass in one step
        let step = q
            .iter()
            .zip(&psi)
            .filter(|(_, v)| **v > 0.0)
            .map(|(x, v)| 0.5 * x / v)
            .fold(alpha, f64::min);
        let next: Vec<f64> = q.iter().zip(&psi).map(|(x, v)| (x - step * v).max(0.0)).collect();
        q = normalize(&next);
        psi = psi_scaled(problem, &q);
        res = residual_of(problem, &q, &psi);
        if res < best_res {
            best_res = res;
            best_q.clone_from(&q);
            since_best = 0;
            streak += 1;
            if res <= tol {
                break;
            }
            if streak >= GROWTH_WINDOW {
                alpha = (alpha * 1.5).min(config.damping);
                streak = 0;
            }
        } else {
            since_best += 1;
            streak = 0;
            if since_best >= STALL_WINDOW {
                alpha *= 0.5;
                if alpha < alpha_floor {
                    break;
                }
                q.clone_from(&best_q);
                psi = psi_scaled(problem, &q);
                since_best = 0;
            }
        }
    }
    let result = finish(problem, q_to_price(problem, &best_q), iterations, Strategy::RhoIteration)?;
    if result.residual > tol {
        return Err(SolveError::IterationLimit {
            best: Box::new(result),
            strictness: problem.strictness().clone(),
        });
    }
    Ok(result)
}
