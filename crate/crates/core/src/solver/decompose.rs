//! Splitting the token graph at a hub token.
//!
//! Two tokens are adjacent when some order or AMM involves both. Removing the
//! hub splits the graph into clusters; each cluster together with the hub is
//! an independent problem, and the cluster solutions glue together at the
//! hub's price.

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;

use super::{finish, solve_direct, warm_price, EquilibriumProblem, EquilibriumResult, SolveError, SolverConfig, Strategy, SubproblemRecord};
use crate::amm::AmmSystem;
use crate::market::{PriceVector, TokenId};

#[derive(Debug, Clone)]
pub struct SubProblem {
    /// Global token indices, sorted; local index `k` is `tokens[k]`.
    pub tokens: Vec<usize>,
    pub problem: EquilibriumProblem,
    /// Position of the hub in `tokens`, when some part of the cluster trades it.
    pub hub_local: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub hub: TokenId,
    pub subproblems: Vec<SubProblem>,
    /// Non-hub tokens no order or AMM touches; their price is free.
    pub free_tokens: Vec<usize>,
}

pub fn decompose(problem: &EquilibriumProblem, hub: TokenId) -> Result<Decomposition, SolveError> {
    let n = problem.tokens();
    let hub = hub.0;
    let amm_supports = problem.amms().amms.iter().map(|c| {
        let mut s = vec![c.in_token.0, c.out_token.0];
        s.sort_unstable();
        s
    });
    let supports: Vec<Vec<usize>> = problem.orders().iter().map(|o| o.support()).chain(amm_supports).collect();

    let mut clusters = UnionFind::<usize>::new(n);
    let mut touched = vec![false; n];
    for support in &supports {
        let others: Vec<usize> = support.iter().copied().filter(|&t| t != hub).collect();
        for pair in others.windows(2) {
            clusters.union(pair[0], pair[1]);
        }
        for &t in support {
            touched[t] = true;
        }
    }

    // Clusters in order of their smallest token, so the layout is deterministic.
    let mut roots: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut free_tokens = Vec::new();
    for t in (0..n).filter(|&t| t != hub) {
        if !touched[t] {
            free_tokens.push(t);
            continue;
        }
        let root = clusters.find(t);
        match roots.iter().position(|&r| r == root) {
            Some(k) => members[k].push(t),
            None => {
                roots.push(root);
                members.push(vec![t]);
            }
        }
    }

    let cluster_of = |support: &[usize]| support.iter().find(|&&t| t != hub).map(|&t| clusters.find(t));
    let mut subproblems = Vec::with_capacity(members.len());
    for (root, cluster) in roots.iter().zip(&members) {
        let parts: Vec<usize> = (0..supports.len()).filter(|&k| cluster_of(&supports[k]) == Some(*root)).collect();
        let with_hub = parts.iter().any(|&k| supports[k].contains(&hub));
        let mut tokens = cluster.clone();
        if with_hub {
            tokens.push(hub);
            tokens.sort_unstable();
        }
        let mut local = vec![None; n];
        for (k, &t) in tokens.iter().enumerate() {
            local[t] = Some(k);
        }
        let n_orders = problem.orders().len();
        let mut orders = Vec::new();
        let mut amms = AmmSystem::new();
        for &k in &parts {
            if k < n_orders {
                orders.push(problem.orders()[k].reindex(&local, &tokens)?);
            } else {
                let c = &problem.amms().amms[k - n_orders];
                let to = |t: TokenId| TokenId(local[t.0].expect("AMM token inside its cluster"));
                amms.push(to(c.in_token), to(c.out_token), c.curve.clone())?;
            }
        }
        let sub = EquilibriumProblem::new(tokens.len(), orders, amms)?;
        subproblems.push(SubProblem {
            hub_local: local[hub].filter(|_| with_hub),
            tokens,
            problem: sub,
        });
    }
    Ok(Decomposition {
        hub: TokenId(hub),
        subproblems,
        free_tokens,
    })
}

/// Solves every cluster in parallel and glues the results at the hub.
pub(crate) fn solve_decomposed(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    let dec = decompose(problem, config.hub)?;
    if dec.subproblems.len() <= 1 && dec.free_tokens.is_empty() {
        return solve_direct(problem, config);
    }
    let warm = warm_price(problem, config)?;
    let hub = dec.hub.0;
    // Each cluster adds at most its own residual to the hub coordinate.
    let sub_tol = config.residual_tol / dec.subproblems.len().max(1) as f64;
    let outcomes: Vec<Result<EquilibriumResult, SolveError>> = dec
        .subproblems
        .par_iter()
        .map(|sp| {
            let local_warm: Vec<f64> = sp.tokens.iter().map(|&t| warm[t]).collect();
            let sub_config = SolverConfig {
                residual_tol: sub_tol,
                warm_start: Some(PriceVector::new(local_warm)?),
                decompose: false,
                ..config.clone()
            };
            let result = solve_direct(&sp.problem, &sub_config)?;
            if result.residual > sub_tol {
                return Err(SolveError::ResidualAboveTolerance {
                    residual: result.residual,
                    tol: sub_tol,
                    best: Box::new(result),
                });
            }
            Ok(result)
        })
        .collect();
    // A cluster cut at the hub can lose strictness even when the whole batch has it,
    // so a failed sub-solve retries the batch undecomposed.
    if let Some(pos) = outcomes.iter().position(Result::is_err) {
        if let Ok(direct) = solve_direct(problem, config) {
            if direct.residual <= config.residual_tol {
                return Ok(direct);
            }
        }
        let err = outcomes.into_iter().nth(pos).and_then(Result::err).expect("failed outcome");
        return Err(SolveError::Subproblem {
            tokens: dec.subproblems[pos].tokens.clone(),
            source: Box::new(err),
        });
    }

    let mut price = vec![0.0; problem.tokens()];
    price[hub] = 1.0;
    for &t in &dec.free_tokens {
        price[t] = warm[t] / warm[hub];
    }
    let mut trace = Vec::with_capacity(outcomes.len());
    let mut iterations = 0;
    for (sp, outcome) in dec.subproblems.iter().zip(outcomes) {
        let result = outcome.map_err(|e| SolveError::Subproblem {
            tokens: sp.tokens.clone(),
            source: Box::new(e),
        })?;
        let local = result.price.as_slice();
        let scale = match sp.hub_local {
            Some(h) => 1.0 / local[h],
            // A cluster that never trades the hub keeps its warm-start level.
            None => sp.tokens.iter().map(|&t| warm[t] / warm[hub]).sum::<f64>() / local.iter().sum::<f64>(),
        };
        for (k, &t) in sp.tokens.iter().enumerate() {
            if t != hub {
                price[t] = local[k] * scale;
            }
        }
        iterations += result.iterations;
        trace.push(SubproblemRecord {
            tokens: sp.tokens.clone(),
            strategy: result.strategy_used,
            iterations: result.iterations,
            residual: result.residual,
        });
    }
    let strategy = match trace.first() {
        Some(first) if trace.iter().all(|r| r.strategy == first.strategy) => first.strategy,
        _ => Strategy::Auto,
    };
    let mut result = finish(problem, crate::market::normalize(&price), iterations, strategy)?;
    result.subproblem_trace = trace;
    Ok(result)
}
