//! Simplicial fixed-point search.
//!
//! Grid points of the price simplex are labeled with a token `i` such that
//! `p_i > 0` and `ψ_i(p) ≥ 0`, which is the condition `ρ_i(q) ≤ q_i` for the
//! corresponding point `q` of the scaled simplex. A cell of the Kuhn
//! triangulation carrying every label is found by the classical door-to-door
//! walk through the nested faces `{x_j = 0 for j ≥ k}`, `k = 1, ..., n`.
//! Precision comes from repeating the walk on a shrinking sub-simplex centered
//! on the zero of the affine interpolation of `ψ` over the last cell found.

use std::collections::HashMap;

use super::{finish, residual, warm_price, EquilibriumProblem, EquilibriumResult, SolveError, SolverConfig, Strategy};

/// Grid size per refinement level.
const LEVEL_GRID: u64 = 32;
const MAX_GRID: u64 = 1024;

/// A Kuhn simplex in `{D ≥ s_0 ≥ s_1 ≥ ... ≥ s_{m-1} ≥ 0}`: vertex `j` is
/// `base + e_{perm[0]} + ... + e_{perm[j-1]}`.
#[derive(Debug, Clone)]
struct Cell {
    base: Vec<i64>,
    perm: Vec<usize>,
}

impl Cell {
    fn dim(&self) -> usize {
        self.base.len()
    }

    fn vertex(&self, j: usize) -> Vec<i64> {
        let mut v = self.base.clone();
        for &axis in &self.perm[..j] {
            v[axis] += 1;
        }
        v
    }

    /// Replaces vertex `i` by the one across the opposite facet and returns
    /// the new vertex's index.
    fn pivot(&mut self, i: usize) -> usize {
        let m = self.dim();
        if i == 0 {
            self.base[self.perm[0]] += 1;
            self.perm.rotate_left(1);
            m
        } else if i == m {
            self.base[self.perm[m - 1]] -= 1;
            self.perm.rotate_right(1);
            0
        } else {
            self.perm.swap(i - 1, i);
            i
        }
    }
}

fn in_region(s: &[i64], d: i64) -> bool {
    match (s.first(), s.last()) {
        (Some(&first), Some(&last)) => first <= d && last >= 0 && s.windows(2).all(|w| w[0] >= w[1]),
        _ => true,
    }
}

/// Barycentric grid coordinates `y` (summing to `d`) of tail sums `s`.
fn to_y(s: &[i64], n: usize, d: i64) -> Vec<u64> {
    let m = s.len();
    let mut y = vec![0u64; n];
    y[0] = (d - s.first().copied().unwrap_or(0)) as u64;
    for j in 1..=m {
        let next = if j < m { s[j] } else { 0 };
        y[j] = (s[j - 1] - next) as u64;
    }
    y
}

/// Walks from the vertex `(d, 0, ..., 0)` to a cell of the Kuhn triangulation
/// of `{y ∈ ℕ^n : Σ y = d}` whose vertices carry all labels `0..n`. Labels
/// must satisfy `y[label(y)] > 0`. Returns the cell's vertices and the number
/// of pivots, or `None` when `max_steps` is exhausted or a label is invalid.
pub fn completely_labeled_cell(
    n: usize,
    d: u64,
    mut label: impl FnMut(&[u64]) -> usize,
    max_steps: usize,
) -> Option<(Vec<Vec<u64>>, usize)> {
    let d = d as i64;
    let mut cache: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut get = |s: &[i64]| -> Option<usize> {
        let y = to_y(s, n, d);
        let l = *cache.entry(y.clone()).or_insert_with(|| label(&y));
        (l < n && y[l] > 0).then_some(l)
    };
    let mut cell = Cell {
        base: Vec::new(),
        perm: Vec::new(),
    };
    let mut labels = vec![get(&[])?];
    let mut fresh = 0;
    let mut steps = 0;
    loop {
        let m = cell.dim();
        let l = labels[fresh];
        if l == m {
            if m + 1 == n {
                let vertices = (0..=m).map(|j| to_y(&cell.vertex(j), n, d)).collect();
                return Some((vertices, steps));
            }
            // Fully labeled on this face: enter the cell above it.
            cell.base.push(0);
            cell.perm.push(m);
            labels.push(get(&cell.vertex(m + 1))?);
            fresh = m + 1;
            continue;
        }
        let mut drop = (0..=m).find(|&j| j != fresh && labels[j] == l)?;
        loop {
            steps += 1;
            if steps > max_steps {
                return None;
            }
            let m = cell.dim();
            let on_floor = (0..=m).filter(|&j| j != drop).all(|j| cell.vertex(j)[m - 1] == 0);
            if !on_floor {
                break;
            }
            // The door lies on the face below; it is fully labeled there.
            if drop != m || cell.perm[m - 1] != m - 1 || m == 1 {
                return None;
            }
            cell.base.pop();
            cell.perm.pop();
            labels.pop();
            drop = labels.iter().position(|&x| x == m - 1)?;
        }
        fresh = cell.pivot(drop);
        let v = cell.vertex(fresh);
        if !in_region(&v, d) {
            return None;
        }
        let l = get(&v)?;
        if fresh == 0 {
            labels.insert(0, l);
            labels.pop();
        } else if fresh == cell.dim() && drop == 0 {
            labels.remove(0);
            labels.push(l);
        } else {
            labels[fresh] = l;
        }
    }
}

/// Sub-simplex `{c + ε(λ - u) : λ ∈ Δ}` with `u` the barycenter of `Δ`.
struct Frame {
    center: Vec<f64>,
    eps: f64,
}

impl Frame {
    fn point(&self, lambda: &[f64]) -> Vec<f64> {
        let u = 1.0 / lambda.len() as f64;
        self.center.iter().zip(lambda).map(|(c, l)| (c + self.eps * (l - u)).max(0.0)).collect()
    }

    /// Moves the center inward until the frame fits in the simplex.
    fn fit(&mut self) {
        let n = self.center.len() as f64;
        let need = self.eps / n;
        let kappa = self
            .center
            .iter()
            .filter(|&&c| c < need)
            .map(|&c| (need - c) / (1.0 / n - c))
            .fold(0.0f64, f64::max)
            .min(1.0);
        if kappa > 0.0 {
            for c in &mut self.center {
                *c = (1.0 - kappa) * *c + kappa / n;
            }
        }
    }
}

/// Label of grid point `y` in `frame`: the first token `i` with `x_i > 0`
/// in the frame whose coordinate `ρ` does not increase, i.e. `ψ_i ≥ 0`.
/// Off the simplex boundary such a token may not exist; the token with the
/// largest `ψ_i` is used instead and `fallback` is set.
fn frame_label(problem: &EquilibriumProblem, frame: &Frame, y: &[u64], d: u64, fallback: &mut bool) -> usize {
    let n = y.len();
    let lambda: Vec<f64> = y.iter().map(|&k| k as f64 / d as f64).collect();
    let x = frame.point(&lambda);
    let psi = problem.aggregate().value_form(&x);
    *fallback = false;
    (0..n).find(|&i| y[i] > 0 && psi[i] >= 0.0).unwrap_or_else(|| {
        *fallback = true;
        (0..n)
            .filter(|&i| y[i] > 0)
            .max_by(|&a, &b| psi[a].total_cmp(&psi[b]))
            .unwrap_or(0)
    })
}

/// Zero of the affine interpolation of `ψ` over a cell, as barycentric
/// weights of its vertices: the least-squares solution, lightly pulled
/// toward the barycenter so that components vanishing on the whole cell do
/// not make it singular. `None` when the system is degenerate anyway.
fn interpolated_zero(psi: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = psi.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .filter_map(|i| {
            let scale = psi.iter().map(|v| v[i].abs()).fold(0.0f64, f64::max);
            (scale > 0.0).then(|| psi.iter().map(|v| v[i] / scale).collect())
        })
        .collect();
    // KKT system of min |Ψw|² + μ|w - u|² subject to Σw = 1
    let mu = 1e-12;
    let u = 1.0 / n as f64;
    let mut a = vec![vec![0.0; n + 2]; n + 1];
    for j in 0..n {
        for k in 0..n {
            a[j][k] = rows.iter().map(|r| r[j] * r[k]).sum::<f64>();
        }
        a[j][j] += mu;
        a[j][n] = 1.0;
        a[j][n + 1] = mu * u;
        a[n][j] = 1.0;
    }
    a[n][n + 1] = 1.0;
    let m = n + 1;
    for col in 0..m {
        let pivot = (col..m).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            let factor = row[col] / pivot_row[col];
            if r != col && factor != 0.0 {
                for (x, y) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= factor * y;
                }
            }
        }
    }
    let w: Vec<f64> = (0..n).map(|i| a[i][m] / a[i][i]).collect();
    w.iter().all(|x| x.is_finite()).then_some(w)
}

pub fn solve_simplicial(problem: &EquilibriumProblem, config: &SolverConfig) -> Result<EquilibriumResult, SolveError> {
    let n = problem.tokens();
    let tol = config.residual_tol;
    let warm = warm_price(problem, config)?;
    if residual(problem.aggregate(), &warm) <= tol {
        return finish(problem, warm, 0, Strategy::Simplicial);
    }
    let mut d = LEVEL_GRID;
    let mesh_floor = 0.5f64.powi(config.mesh_depth.min(1000) as i32);
    let mut frame = Frame {
        center: vec![1.0 / n as f64; n],
        eps: 1.0,
    };
    let mut steps = 0usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let give_up = |best: Option<(f64, Vec<f64>)>, steps, mesh: bool| -> SolveError {
        let price = best.map(|b| b.1).unwrap_or_else(|| warm.clone());
        match finish(problem, price, steps, Strategy::Simplicial) {
            Ok(result) if mesh => SolveError::MeshLimit {
                best: Box::new(result),
                strictness: problem.strictness().clone(),
            },
            Ok(result) => SolveError::IterationLimit {
                best: Box::new(result),
                strictness: problem.strictness().clone(),
            },
            Err(e) => e,
        }
    };
    loop {
        let mut fallback_at: HashMap<Vec<u64>, bool> = HashMap::new();
        let budget = config.max_iterations.saturating_sub(steps);
        let walk = completely_labeled_cell(
            n,
            d,
            |y| {
                let mut r = false;
                let l = frame_label(problem, &frame, y, d, &mut r);
                fallback_at.insert(y.to_vec(), r);
                l
            },
            budget,
        );
        let Some((vertices, used)) = walk else {
            return Err(give_up(best, steps + budget, false));
        };
        steps += used;
        let points: Vec<Vec<f64>> = vertices
            .iter()
            .map(|y| frame.point(&y.iter().map(|&k| k as f64 / d as f64).collect::<Vec<_>>()))
            .collect();
        let mut barycenter = vec![0.0; n];
        for p in &points {
            for (b, x) in barycenter.iter_mut().zip(p) {
                *b += x / points.len() as f64;
            }
        }
        let psi: Vec<Vec<f64>> = points.iter().map(|q| problem.aggregate().value_form(q)).collect();
        let interpolated = interpolated_zero(&psi).map(|w| {
            let mut q = vec![0.0; n];
            for (p, wj) in points.iter().zip(&w) {
                for (qi, x) in q.iter_mut().zip(p) {
                    *qi += wj * x;
                }
            }
            q
        });
        // boundary points are never equilibria, whatever their residual
        let mut level_best: Option<(f64, Vec<f64>)> = None;
        for q in points.iter().chain([&barycenter]).chain(interpolated.iter()).filter(|q| q.iter().all(|&x| x > 0.0)) {
            let price = q.clone();
            let res = residual(problem.aggregate(), &price);
            if level_best.as_ref().is_none_or(|b| res < b.0) {
                level_best = Some((res, q.clone()));
            }
            if best.as_ref().is_none_or(|b| res < b.0) {
                best = Some((res, price));
            }
        }
        if best.as_ref().is_some_and(|b| b.0 <= tol) {
            let price = best.map(|b| b.1).unwrap_or_default();
            return finish(problem, price, steps, Strategy::Simplicial);
        }
        // A fallback label means the cell may owe its labels to the frame
        // boundary rather than to a fixed point inside.
        let spurious = vertices.iter().any(|y| fallback_at.get(y).copied().unwrap_or(false));
        let next = match (&interpolated, spurious) {
            (Some(q), false) if level_best.as_ref().is_some_and(|b| &b.1 == q) => q.clone(),
            _ => barycenter.clone(),
        };
        // how far the linear model moved the center, in simplex units
        let jump = next.iter().zip(&barycenter).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        frame.center = next;
        if spurious {
            // the last shrink overshot: go back and use a finer grid
            frame.eps = (frame.eps * 4.0).min(1.0);
            d = (d * 2).min(MAX_GRID);
        } else {
            let cell = frame.eps / d as f64;
            frame.eps = (2.0 * n as f64 * (cell + jump)).clamp(frame.eps * (2.0 * n as f64 / d as f64), frame.eps * 0.5);
        }
        frame.fit();
        if frame.eps / (d as f64) < mesh_floor {
            return Err(give_up(best, steps, true));
        }
    }
}
