#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use amm_clearing::amm::{AmmCurve, AmmSystem, ConstantProduct, PiecewiseAmm, Segment};
use amm_clearing::orders::{LimitBuyOrder, LimitSellOrder, Order};
use amm_clearing::solver::EquilibriumProblem;
use amm_clearing::TokenId;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples").join(name)
}

pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Constant product `f(x) = b γ x / (a + γ x)`, evaluated directly.
pub fn cp_f(a: f64, b: f64, gamma: f64, x: f64) -> f64 {
    b * gamma * x / (a + gamma * x)
}

/// Closed-form optimal in-amount of a constant product at relative price `r`.
pub fn cp_h(a: f64, b: f64, gamma: f64, r: f64) -> f64 {
    ((a * b / (gamma * r)).sqrt() - a).max(0.0) / gamma
}

/// A random piecewise curve of two or three constant-product arcs with
/// decreasing slopes; the last arc is unbounded or ends in a plateau.
pub fn random_piecewise<R: Rng>(rng: &mut R) -> PiecewiseAmm {
    let arcs = rng.gen_range(2..=3);
    let mut segments = Vec::new();
    let mut end_slope = f64::INFINITY;
    for k in 0..arcs {
        let a = log_uniform(rng, 20.0, 2000.0);
        let spot = if k == 0 { log_uniform(rng, 0.3, 3.0) } else { end_slope * rng.gen_range(0.3..1.0) };
        let b = a * spot;
        let last = k + 1 == arcs;
        let length = if last && rng.gen_bool(0.5) { None } else { Some(a * rng.gen_range(0.2..2.0)) };
        if let Some(len) = length {
            end_slope = a * b / ((a + len) * (a + len));
        }
        segments.push(Segment::ConstantProduct { a, b, length });
    }
    let gamma = [1.0, 0.997, 0.99][rng.gen_range(0..3)];
    PiecewiseAmm::new(segments, gamma).expect("valid random piecewise curve")
}

/// Fixed piecewise curves: two arcs, three arcs ending in a plateau, and a
/// steep first arc with a fee.
pub fn reference_piecewise() -> Vec<PiecewiseAmm> {
    let cp = |a: f64, b: f64, length: Option<f64>| Segment::ConstantProduct { a, b, length };
    vec![
        PiecewiseAmm::new(vec![cp(100.0, 100.0, Some(50.0)), cp(200.0, 80.0, None)], 1.0).unwrap(),
        PiecewiseAmm::new(vec![cp(50.0, 60.0, Some(20.0)), cp(80.0, 40.0, Some(60.0)), cp(400.0, 60.0, Some(300.0))], 1.0).unwrap(),
        PiecewiseAmm::new(vec![cp(10.0, 40.0, Some(5.0)), cp(100.0, 150.0, None)], 0.997).unwrap(),
    ]
}

/// A random batch on 2 to 4 tokens with at most 10 orders and 4 AMMs, made
/// strict by a limit sell order buying every token.
pub struct RandomBatch {
    pub n: usize,
    pub orders: Vec<Order>,
    pub amms: AmmSystem,
}

impl RandomBatch {
    pub fn problem(&self) -> EquilibriumProblem {
        EquilibriumProblem::new(self.n, self.orders.clone(), self.amms.clone()).expect("valid batch")
    }

    pub fn amm_out_tokens(&self) -> Vec<usize> {
        self.amms.amms.iter().map(|c| c.out_token.0).collect()
    }
}

fn other_token<R: Rng>(rng: &mut R, n: usize, t: usize) -> usize {
    (t + rng.gen_range(1..n)) % n
}

pub fn random_strict_batch<R: Rng>(rng: &mut R, n: usize) -> RandomBatch {
    // hidden reference values keep the equilibrium away from the boundary
    let value: Vec<f64> = (0..n).map(|_| log_uniform(rng, 0.5, 2.0)).collect();
    let mut orders = Vec::new();
    for t in 0..n {
        let s = other_token(rng, n, t);
        let limit = value[s] / value[t] * rng.gen_range(0.6..1.2);
        let band = rng.gen_range(0.02..0.4);
        let amount = log_uniform(rng, 1.0, 50.0);
        orders.push(Order::Sell(LimitSellOrder::new(TokenId(s), TokenId(t), amount, limit, limit * (1.0 + band)).unwrap()));
    }
    for _ in 0..rng.gen_range(0..=10 - n) {
        let s = rng.gen_range(0..n);
        let b = other_token(rng, n, s);
        let amount = log_uniform(rng, 1.0, 50.0);
        let band = rng.gen_range(0.02..0.4);
        let order = if rng.gen_bool(0.5) {
            let limit = value[s] / value[b] * rng.gen_range(0.7..1.3);
            Order::Sell(LimitSellOrder::new(TokenId(s), TokenId(b), amount, limit, limit * (1.0 + band)).unwrap())
        } else {
            let limit = value[b] / value[s] * rng.gen_range(0.7..1.3);
            Order::Buy(LimitBuyOrder::new(TokenId(b), TokenId(s), amount, limit * (1.0 - band), limit).unwrap())
        };
        orders.push(order);
    }
    let mut amms = AmmSystem::new();
    for _ in 0..rng.gen_range(0..=4) {
        let i = rng.gen_range(0..n);
        let o = other_token(rng, n, i);
        let curve: Arc<dyn AmmCurve> = if rng.gen_bool(0.7) {
            let a = log_uniform(rng, 50.0, 5000.0);
            let b = a * value[i] / value[o] * rng.gen_range(0.8..1.25);
            let gamma = [1.0, 0.997, 0.99][rng.gen_range(0..3)];
            Arc::new(ConstantProduct::new(a, b, gamma).unwrap())
        } else {
            Arc::new(random_piecewise(rng))
        };
        amms.push(TokenId(i), TokenId(o), curve).unwrap();
    }
    RandomBatch { n, orders, amms }
}

/// Sell 10 of token 0 for token 1 over the band [0.95, 1.05] against a
/// constant product taking token 0 and paying token 1, a = b = 1000, no fee.
pub fn reference_pair() -> EquilibriumProblem {
    let mut amms = AmmSystem::new();
    amms.push(TokenId(0), TokenId(1), Arc::new(ConstantProduct::new(1000.0, 1000.0, 1.0).unwrap())).unwrap();
    let order = Order::Sell(LimitSellOrder::new(TokenId(0), TokenId(1), 10.0, 0.95, 1.05).unwrap());
    EquilibriumProblem::new(2, vec![order], amms).unwrap()
}

/// Root of the reference pair's clearing condition by plain bisection:
/// the order sells `10 (r - 0.95) / 0.1` of token 0 and the pool absorbs
/// `h(r) = 1000 (1/√r - 1)` of it.
pub fn reference_pair_rate() -> f64 {
    let excess = |r: f64| {
        let sold = (10.0 * (r - 0.95) / 0.1).clamp(0.0, 10.0);
        sold - cp_h(1000.0, 1000.0, 1.0, r)
    };
    let (mut lo, mut hi) = (0.5, 1.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
