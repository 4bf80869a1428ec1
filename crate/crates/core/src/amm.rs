//! One-directional AMM return curves and their virtual agents.
//!
//! An AMM takes `x` units of its in-token and returns `f(x)` units of its
//! out-token. At a relative price `r = p_in / p_out` the AMM's virtual agent
//! trades the amount `h(r)`, the smallest `x` at which the marginal return
//! `f'(x)` has dropped to `r`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{ModelError, ModelResult};
use crate::market::{PriceVector, Supply, SumSupply, TokenId};
use crate::orders::{order_to_supply, OrderCurve};

/// A concave, increasing, bounded return curve with `f(0) = 0`.
pub trait AmmCurve: Send + Sync + fmt::Debug {
    /// Out-amount for an in-amount `x ≥ 0`.
    fn f(&self, x: f64) -> f64;

    /// Right derivative of `f` at `x ≥ 0`.
    fn right_derivative(&self, x: f64) -> f64;

    /// `sup f`, the most the AMM can ever pay out.
    fn sup_out(&self) -> f64;

    /// Marginal rate at zero input.
    fn spot(&self) -> f64 {
        self.right_derivative(0.0)
    }

    /// `min { x ≥ 0 : f'(x) ≤ r }` for `r > 0`.
    fn h(&self, r: f64) -> f64 {
        h_by_bisection(self, r)
    }

    /// In-amounts where the derivative may jump.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub type Amm = Arc<dyn AmmCurve>;

/// `h` from the right derivative alone, for curves without a closed form.
pub fn h_by_bisection<A: AmmCurve + ?Sized>(amm: &A, r: f64) -> f64 {
    if r >= amm.spot() {
        return 0.0;
    }
    let spot = amm.spot();
    let mut hi = amm.sup_out() / spot;
    if !(hi.is_finite() && hi > 0.0) {
        hi = 1.0;
    }
    // f' → 0 at infinity, so doubling terminates
    let mut doublings = 0;
    while amm.right_derivative(hi) > r {
        hi *= 2.0;
        doublings += 1;
        if doublings > 2100 {
            return hi;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if amm.right_derivative(mid) <= r {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_reserves(a: f64, b: f64, gamma: f64) -> ModelResult<()> {
    if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
        return Err(ModelError::InvalidAmm(format!("reserves must be positive, got a={a}, b={b}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ModelError::InvalidAmm(format!("fee factor must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// `f(x) = bγx / (a + γx)` with reserves `a` (in) and `b` (out) and `γ` the
/// fraction of input kept after the fee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantProduct {
    pub reserve_in: f64,
    pub reserve_out: f64,
    pub fee_keep: f64,
}

impl ConstantProduct {
    pub fn new(reserve_in: f64, reserve_out: f64, fee_keep: f64) -> ModelResult<Self> {
        check_reserves(reserve_in, reserve_out, fee_keep)?;
        Ok(Self {
            reserve_in,
            reserve_out,
            fee_keep,
        })
    }
}

impl AmmCurve for ConstantProduct {
    fn f(&self, x: f64) -> f64 {
        let gx = self.fee_keep * x;
        self.reserve_out * gx / (self.reserve_in + gx)
    }

    fn right_derivative(&self, x: f64) -> f64 {
        let d = self.reserve_in + self.fee_keep * x;
        self.fee_keep * self.reserve_in * self.reserve_out / (d * d)
    }

    fn sup_out(&self) -> f64 {
        self.reserve_out
    }

    fn spot(&self) -> f64 {
        self.fee_keep * self.reserve_out / self.reserve_in
    }

    fn h(&self, r: f64) -> f64 {
        let s = self.spot() / r;
        if s <= 1.0 {
            return 0.0;
        }
        // a(√s - 1)/γ without cancellation near s = 1
        self.reserve_in * (s - 1.0) / ((s.sqrt() + 1.0) * self.fee_keep)
    }
}

/// One arc of a piecewise curve, in fee-adjusted input units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Segment {
    /// `u ↦ b u / (a + u)` over `length` units of input; `None` runs forever.
    ConstantProduct { a: f64, b: f64, length: Option<f64> },
    /// `u ↦ slope · u`.
    Linear { slope: f64, length: Option<f64> },
}

impl Segment {
    fn length(&self) -> Option<f64> {
        match *self {
            Segment::ConstantProduct { length, .. } | Segment::Linear { length, .. } => length,
        }
    }

    fn value(&self, u: f64) -> f64 {
        match *self {
            Segment::ConstantProduct { a, b, .. } => b * u / (a + u),
            Segment::Linear { slope, .. } => slope * u,
        }
    }

    fn derivative(&self, u: f64) -> f64 {
        match *self {
            Segment::ConstantProduct { a, b, .. } => a * b / ((a + u) * (a + u)),
            Segment::Linear { slope, .. } => slope,
        }
    }

    /// Smallest `u` in the arc with derivative `≤ r`, if any.
    fn solve(&self, r: f64) -> Option<f64> {
        let u = match *self {
            Segment::ConstantProduct { a, b, .. } => {
                let s = b / (a * r);
                if s <= 1.0 {
                    0.0
                } else {
                    a * (s - 1.0) / (s.sqrt() + 1.0)
                }
            }
            Segment::Linear { slope, .. } => {
                if slope <= r {
                    0.0
                } else {
                    return None;
                }
            }
        };
        match self.length() {
            Some(len) if u > len => None,
            _ => Some(u),
        }
    }
}

/// Concatenated constant-product and linear arcs with input fee `γ`:
/// `f(x) = F(γx)` where `F` runs through the arcs in order. After the last
/// finite arc the curve is flat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseAmm {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    offsets: Vec<f64>,
    fee_keep: f64,
    sup: f64,
}

impl PiecewiseAmm {
    pub fn new(segments: Vec<Segment>, fee_keep: f64) -> ModelResult<Self> {
        if segments.is_empty() {
            return Err(ModelError::InvalidAmm("piecewise curve needs at least one segment".into()));
        }
        if !(fee_keep > 0.0 && fee_keep <= 1.0) {
            return Err(ModelError::InvalidAmm(format!("fee factor must lie in (0, 1], got {fee_keep}")));
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut offsets = Vec::with_capacity(segments.len());
        let (mut x, mut y) = (0.0, 0.0);
        let last = segments.len() - 1;
        for (k, seg) in segments.iter().enumerate() {
            match *seg {
                Segment::ConstantProduct { a, b, .. } => check_reserves(a, b, 1.0)?,
                Segment::Linear { slope, length } => {
                    if !(slope >= 0.0 && slope.is_finite()) {
                        return Err(ModelError::InvalidAmm(format!("segment {k}: slope must be nonnegative, got {slope}")));
                    }
                    if length.is_none() && slope > 0.0 {
                        return Err(ModelError::InvalidAmm(format!("segment {k}: unbounded linear arc")));
                    }
                }
            }
            match seg.length() {
                Some(len) if !(len > 0.0 && len.is_finite()) => {
                    return Err(ModelError::InvalidAmm(format!("segment {k}: length must be positive, got {len}")));
                }
                None if k != last => {
                    return Err(ModelError::InvalidAmm(format!("segment {k}: only the last segment may be unbounded")));
                }
                _ => {}
            }
            starts.push(x);
            offsets.push(y);
            if let Some(len) = seg.length() {
                x += len;
                y += seg.value(len);
            }
        }
        let sup = match segments[last] {
            Segment::ConstantProduct { b, length: None, .. } => offsets[last] + b,
            _ => y,
        };
        if segments[0].derivative(0.0) <= 0.0 {
            return Err(ModelError::InvalidAmm("spot rate must be positive".into()));
        }
        Ok(Self {
            segments,
            starts,
            offsets,
            fee_keep,
            sup,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Arc containing effective input `u`, right-continuous at breakpoints;
    /// `None` past the end of a bounded curve.
    fn locate(&self, u: f64) -> Option<usize> {
        let k = self.starts.partition_point(|&s| s <= u).saturating_sub(1);
        match self.segments[k].length() {
            Some(len) if u >= self.starts[k] + len => None,
            _ => Some(k),
        }
    }

    fn total_length(&self) -> f64 {
        let k = self.segments.len() - 1;
        self.starts[k] + self.segments[k].length().unwrap_or(f64::INFINITY)
    }
}

impl AmmCurve for PiecewiseAmm {
    fn f(&self, x: f64) -> f64 {
        let u = self.fee_keep * x;
        match self.locate(u) {
            Some(k) => self.offsets[k] + self.segments[k].value(u - self.starts[k]),
            None => self.sup,
        }
    }

    fn right_derivative(&self, x: f64) -> f64 {
        let u = self.fee_keep * x;
        match self.locate(u) {
            Some(k) => self.fee_keep * self.segments[k].derivative(u - self.starts[k]),
            None => 0.0,
        }
    }

    fn sup_out(&self) -> f64 {
        self.sup
    }

    fn h(&self, r: f64) -> f64 {
        let target = r / self.fee_keep;
        for (k, seg) in self.segments.iter().enumerate() {
            if let Some(u) = seg.solve(target) {
                return (self.starts[k] + u) / self.fee_keep;
            }
        }
        self.total_length() / self.fee_keep
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut points: Vec<f64> = self.starts[1..].iter().map(|s| s / self.fee_keep).collect();
        let end = self.total_length();
        if end.is_finite() {
            points.push(end / self.fee_keep);
        }
        points
    }
}

fn check_in_amount(x: f64) -> ModelResult<()> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(ModelError::Domain(format!("in-amount must be finite and nonnegative, got {x}")));
    }
    Ok(())
}

fn check_rate(r: f64, allow_zero: bool) -> ModelResult<()> {
    let ok = if allow_zero { r >= 0.0 } else { r > 0.0 };
    if !(ok && r.is_finite()) {
        return Err(ModelError::Domain(format!("relative price out of range: {r}")));
    }
    Ok(())
}

pub fn eval_f(amm: &dyn AmmCurve, x: f64) -> ModelResult<f64> {
    check_in_amount(x)?;
    Ok(amm.f(x))
}

pub fn right_derivative(amm: &dyn AmmCurve, x: f64) -> ModelResult<f64> {
    check_in_amount(x)?;
    Ok(amm.right_derivative(x))
}

pub fn h_of(amm: &dyn AmmCurve, r: f64) -> ModelResult<f64> {
    check_rate(r, false)?;
    Ok(amm.h(r))
}

pub fn g_of(amm: &dyn AmmCurve, r: f64) -> ModelResult<f64> {
    check_rate(r, true)?;
    Ok(agent_g(amm, r))
}

/// The virtual agent's supply of the out-token against `p_out / p_in`.
#[derive(Debug, Clone)]
pub struct AmmAgentCurve(pub Amm);

fn agent_g(amm: &dyn AmmCurve, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        amm.h(1.0 / r) / r
    }
}

fn agent_r_g(amm: &dyn AmmCurve, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        amm.h(1.0 / r)
    }
}

impl OrderCurve for AmmAgentCurve {
    fn g(&self, r: f64) -> f64 {
        agent_g(self.0.as_ref(), r)
    }
    fn r_g(&self, r: f64) -> f64 {
        agent_r_g(self.0.as_ref(), r)
    }
    fn limit_at_infinity(&self) -> f64 {
        0.0
    }
    fn sup(&self) -> f64 {
        self.0.sup_out()
    }
}

#[derive(Debug, Clone)]
pub struct AmmEntry {
    pub in_token: TokenId,
    pub out_token: TokenId,
    pub curve: Amm,
}

/// A finite family of AMMs, each with its own in- and out-token.
#[derive(Debug, Clone, Default)]
pub struct AmmSystem {
    pub amms: Vec<AmmEntry>,
}

impl AmmSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, in_token: TokenId, out_token: TokenId, curve: Amm) -> ModelResult<()> {
        if in_token == out_token {
            return Err(ModelError::InvalidAmm(format!("in and out token coincide ({in_token})")));
        }
        self.amms.push(AmmEntry {
            in_token,
            out_token,
            curve,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.amms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amms.is_empty()
    }
}

/// Per-AMM in-amounts, indexed like `AmmSystem::amms`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InAmountVector(pub Vec<f64>);

pub fn virtual_agent_supply(entry: &AmmEntry, n: usize) -> ModelResult<Supply> {
    if entry.in_token == entry.out_token {
        return Err(ModelError::InvalidAmm(format!("in and out token coincide ({})", entry.in_token)));
    }
    order_to_supply(AmmAgentCurve(entry.curve.clone()), entry.out_token, entry.in_token, n)
}

pub fn system_supply(system: &AmmSystem, n: usize) -> ModelResult<Supply> {
    let parts = system
        .amms
        .iter()
        .map(|entry| virtual_agent_supply(entry, n))
        .collect::<ModelResult<Vec<_>>>()?;
    Ok(Arc::new(SumSupply::new(n, parts)?))
}

pub fn in_amounts(system: &AmmSystem, p: &PriceVector) -> InAmountVector {
    in_amounts_at(system, p.as_slice())
}

pub(crate) fn in_amounts_at(system: &AmmSystem, p: &[f64]) -> InAmountVector {
    InAmountVector(
        system
            .amms
            .iter()
            .map(|c| c.curve.h(p[c.in_token.0] / p[c.out_token.0]))
            .collect(),
    )
}

/// Models a two-sided constant-product pool holding `reserve_a` of token A and
/// `reserve_b` of token B as a forward AMM (A in, B out) and a backward one.
pub fn split_bidirectional_pool(reserve_a: f64, reserve_b: f64, fee_keep: f64) -> ModelResult<(ConstantProduct, ConstantProduct)> {
    let forward = ConstantProduct::new(reserve_a, reserve_b, fee_keep)?;
    let backward = ConstantProduct::new(reserve_b, reserve_a, fee_keep)?;
    let product = forward.spot() * backward.spot();
    if product > 1.0 + 1e-12 {
        return Err(ModelError::InvalidAmm(format!("spot rates admit a round-trip arbitrage: product {product}")));
    }
    Ok((forward, backward))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AmmCheck {
    ZeroAtOrigin,
    Monotone,
    Bounded,
    Spot,
    Concavity,
    StrictConcavity,
    DerivativeNonincreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmmCheckFailure {
    pub check: AmmCheck,
    /// In-amounts exhibiting the failure; a triple for chord tests.
    pub witness: Vec<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmmValidationReport {
    pub points_checked: usize,
    pub failures: Vec<AmmCheckFailure>,
}

impl AmmValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Log-spaced in-amounts around the curve's natural scale `M / spot`, plus
/// points on both sides of every breakpoint.
pub fn default_amm_grid(amm: &dyn AmmCurve) -> Vec<f64> {
    let mut scale = amm.sup_out() / amm.spot();
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    let mut grid: Vec<f64> = (0..=240).map(|k| scale * 10f64.powf(-6.0 + 12.0 * k as f64 / 240.0)).collect();
    for b in amm.breakpoints() {
        grid.extend([b * (1.0 - 1e-6), b, b * (1.0 + 1e-6)]);
    }
    grid.push(0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Checks `f(0) = 0`, monotonicity, the bound `f ≤ M`, a finite positive spot
/// rate, midpoint concavity on consecutive grid triples (strict below the
/// plateau) and a nonincreasing right derivative.
pub fn validate_amm(amm: &dyn AmmCurve, grid: &[f64]) -> AmmValidationReport {
    let mut xs: Vec<f64> = grid.iter().copied().filter(|x| *x >= 0.0 && x.is_finite()).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut failures = Vec::new();
    let mut fail = |check, witness: Vec<f64>, detail: String| {
        if !failures.iter().any(|f: &AmmCheckFailure| f.check == check) {
            failures.push(AmmCheckFailure { check, witness, detail });
        }
    };
    let m = amm.sup_out();
    let f0 = amm.f(0.0);
    if f0 != 0.0 {
        fail(AmmCheck::ZeroAtOrigin, vec![0.0], format!("f(0) = {f0}"));
    }
    let spot = amm.spot();
    if !(spot > 0.0 && spot.is_finite()) {
        fail(AmmCheck::Spot, vec![0.0], format!("spot rate {spot}"));
    }
    let ys: Vec<f64> = xs.iter().map(|&x| amm.f(x)).collect();
    let ds: Vec<f64> = xs.iter().map(|&x| amm.right_derivative(x)).collect();
    let slack = 1e-12 * (1.0 + m.abs());
    for i in 0..xs.len() {
        if !(ys[i] <= m + slack) {
            fail(AmmCheck::Bounded, vec![xs[i]], format!("f = {} exceeds sup {m}", ys[i]));
        }
        if i == 0 {
            continue;
        }
        if ys[i] < ys[i - 1] - slack {
            fail(AmmCheck::Monotone, vec![xs[i - 1], xs[i]], format!("f drops from {} to {}", ys[i - 1], ys[i]));
        }
        if ds[i] > ds[i - 1] * (1.0 + 1e-12) + 1e-300 {
            fail(
                AmmCheck::DerivativeNonincreasing,
                vec![xs[i - 1], xs[i]],
                format!("derivative rises from {} to {}", ds[i - 1], ds[i]),
            );
        }
        // constant derivative below the plateau means a flat stretch of h
        if ys[i] < m * (1.0 - 1e-12) && ds[i] >= ds[i - 1] && ds[i] > 0.0 {
            fail(
                AmmCheck::StrictConcavity,
                vec![xs[i - 1], xs[i]],
                format!("derivative constant at {} on a non-plateau interval", ds[i]),
            );
        }
        if i >= 2 {
            let (a, c) = (xs[i - 2], xs[i]);
            let mid = 0.5 * (a + c);
            let chord = 0.5 * (ys[i - 2] + ys[i]);
            let fm = amm.f(mid);
            if fm < chord - slack {
                fail(AmmCheck::Concavity, vec![a, mid, c], format!("f(mid) = {fm} below chord {chord}"));
            }
        }
    }
    AmmValidationReport {
        points_checked: xs.len(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{check_admissibility, default_grid};

    fn cp(a: f64, b: f64) -> ConstantProduct {
        ConstantProduct::new(a, b, 1.0).unwrap()
    }

    #[test]
    fn constant_product_values() {
        let amm = cp(100.0, 100.0);
        assert_eq!(amm.f(100.0), 50.0);
        assert_eq!(amm.f(0.0), 0.0);
        assert_eq!(amm.right_derivative(0.0), 1.0);
        assert_eq!(amm.right_derivative(100.0), 0.25);
        assert!((amm.h(0.25) - 100.0).abs() < 1e-12);
        assert_eq!(amm.h(2.0), 0.0);
        assert!(0.25 * amm.h(0.25) <= amm.f(amm.h(0.25)));
        assert!((g_of(&amm, 4.0).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(g_of(&amm, 0.0).unwrap(), 0.0);
        assert_eq!(g_of(&amm, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn checked_operations_reject_bad_input() {
        let amm = cp(100.0, 100.0);
        assert!(eval_f(&amm, -1.0).is_err());
        assert!(right_derivative(&amm, f64::NAN).is_err());
        assert!(h_of(&amm, 0.0).is_err());
        assert!(g_of(&amm, -1.0).is_err());
        assert!(ConstantProduct::new(0.0, 1.0, 1.0).is_err());
        assert!(ConstantProduct::new(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn g_supremum_below_bound() {
        let amm = cp(100.0, 100.0);
        let top = (1..100_000)
            .map(|k| g_of(&amm, 10f64.powf(-3.0 + 6.0 * k as f64 / 100_000.0)).unwrap())
            .fold(0.0f64, f64::max);
        assert!((top - 25.0).abs() < 1e-6, "{top}");
    }

    #[test]
    fn closed_form_matches_bisection() {
        for amm in [cp(100.0, 100.0), cp(3.0, 7e5), ConstantProduct::new(1e4, 2.0, 0.997).unwrap()] {
            for k in 0..2000 {
                let r = amm.spot() * 10f64.powf(-8.0 + 8.5 * k as f64 / 2000.0);
                let closed = amm.h(r);
                let generic = h_by_bisection(&amm, r);
                assert!((closed - generic).abs() <= 1e-9 * closed.max(1e-300), "{amm:?} r={r}: {closed} vs {generic}");
            }
        }
    }

    #[test]
    fn agent_supply_example() {
        let mut sys = AmmSystem::new();
        sys.push(TokenId(0), TokenId(1), Arc::new(cp(1000.0, 1000.0))).unwrap();
        let s = virtual_agent_supply(&sys.amms[0], 2).unwrap();
        let phi = s.eval(&[0.25, 1.0]);
        assert!((phi[0] + 1000.0).abs() < 1e-9);
        assert!((phi[1] - 250.0).abs() < 1e-9);
        assert!((0.25 * phi[0] + phi[1]).abs() < 1e-9);
        assert_eq!(s.eval(&[2.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(s.upper_bounds(), vec![0.0, 1000.0]);

        let x = in_amounts(&sys, &PriceVector::new(vec![0.25, 1.0]).unwrap());
        assert!((x.0[0] - 1000.0).abs() < 1e-9);
        let scaled = in_amounts(&sys, &PriceVector::new(vec![2.5, 10.0]).unwrap());
        assert_eq!(x, scaled);
        assert_eq!(in_amounts(&sys, &PriceVector::new(vec![1.0, 1.0]).unwrap()).0, vec![0.0]);
    }

    #[test]
    fn agent_supply_admissible_and_vanishes_on_boundary() {
        let mut sys = AmmSystem::new();
        let (fwd, bwd) = split_bidirectional_pool(500.0, 80.0, 0.997).unwrap();
        sys.push(TokenId(0), TokenId(2), Arc::new(fwd)).unwrap();
        sys.push(TokenId(2), TokenId(0), Arc::new(bwd)).unwrap();
        let pw = PiecewiseAmm::new(
            vec![
                Segment::ConstantProduct {
                    a: 10.0,
                    b: 30.0,
                    length: Some(5.0),
                },
                Segment::ConstantProduct {
                    a: 40.0,
                    b: 40.0,
                    length: None,
                },
            ],
            0.99,
        )
        .unwrap();
        sys.push(TokenId(1), TokenId(2), Arc::new(pw)).unwrap();
        let s = system_supply(&sys, 3).unwrap();
        let report = check_admissibility(s.as_ref(), &default_grid(3, 3000, 64, 5), Default::default());
        assert!(report.passed(), "{report:?}");
        assert_eq!(s.value_form(&[0.0, 0.0, 1.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_system_is_zero() {
        let s = system_supply(&AmmSystem::new(), 3).unwrap();
        assert_eq!(s.eval(&[1.0, 2.0, 3.0]), vec![0.0; 3]);
    }

    #[test]
    fn bidirectional_pool_never_both_active() {
        let (fwd, bwd) = split_bidirectional_pool(100.0, 100.0, 0.997).unwrap();
        assert!((fwd.spot() * bwd.spot() - 0.994009).abs() < 1e-12);
        let (fwd, bwd) = split_bidirectional_pool(100.0, 250.0, 1.0).unwrap();
        for k in 0..1000 {
            let ratio = 10f64.powf(-3.0 + 6.0 * k as f64 / 1000.0);
            assert!(fwd.h(ratio) == 0.0 || bwd.h(1.0 / ratio) == 0.0);
        }
        assert!(split_bidirectional_pool(0.0, 100.0, 1.0).is_err());
        assert!(split_bidirectional_pool(100.0, 100.0, 1.01).is_err());
    }

    #[test]
    fn piecewise_matches_single_arc_and_round_trips() {
        // one arc continued by its own tail equals a plain constant product
        let pw = PiecewiseAmm::new(
            vec![
                Segment::ConstantProduct {
                    a: 100.0,
                    b: 100.0,
                    length: Some(50.0),
                },
                Segment::ConstantProduct {
                    a: 150.0,
                    b: 100.0 - 100.0 * 50.0 / 150.0,
                    length: None,
                },
            ],
            0.997,
        )
        .unwrap();
        let plain = ConstantProduct::new(100.0, 100.0, 0.997).unwrap();
        for x in [0.0, 1.0, 30.0, 50.0 / 0.997, 70.0, 1e4] {
            assert!((pw.f(x) - plain.f(x)).abs() < 1e-9, "x = {x}");
            assert!((pw.right_derivative(x) - plain.right_derivative(x)).abs() < 1e-12);
        }
        assert!((pw.sup_out() - 100.0).abs() < 1e-12);
        for x in [1e-3, 0.5, 10.0, 49.0, 51.0, 400.0] {
            let back = pw.h(pw.right_derivative(x));
            assert!((back - x).abs() <= 1e-9 * x, "x = {x}: {back}");
        }
        assert!(validate_amm(&pw, &default_amm_grid(&pw)).passed());
    }

    #[test]
    fn piecewise_breakpoint_takes_right_derivative() {
        let pw = PiecewiseAmm::new(
            vec![
                Segment::ConstantProduct {
                    a: 10.0,
                    b: 10.0,
                    length: Some(10.0),
                },
                Segment::ConstantProduct {
                    a: 40.0,
                    b: 5.0,
                    length: Some(20.0),
                },
            ],
            1.0,
        )
        .unwrap();
        assert!((pw.right_derivative(10.0) - 40.0 * 5.0 / 1600.0).abs() < 1e-15);
        assert!((pw.f(10.0) - 5.0).abs() < 1e-12);
        assert_eq!(pw.right_derivative(30.0), 0.0);
        assert!((pw.sup_out() - (5.0 + 5.0 * 20.0 / 60.0)).abs() < 1e-12);
        // derivative drops from 0.25 to 0.125 at the breakpoint
        assert_eq!(pw.h(0.2), 10.0);
        assert_eq!(pw.h(0.01), 30.0);
        assert!(validate_amm(&pw, &default_amm_grid(&pw)).passed());
        for k in 0..500 {
            let r = 10f64.powf(-4.0 + 4.0 * k as f64 / 500.0);
            let gap = (pw.h(r) - h_by_bisection(&pw, r)).abs();
            assert!(gap <= 1e-9 * pw.h(r).max(1e-12), "r = {r}");
        }
    }

    #[test]
    fn piecewise_rejects_malformed() {
        let cp_seg = |length| Segment::ConstantProduct { a: 1.0, b: 1.0, length };
        assert!(PiecewiseAmm::new(vec![], 1.0).is_err());
        assert!(PiecewiseAmm::new(vec![cp_seg(None), cp_seg(None)], 1.0).is_err());
        assert!(PiecewiseAmm::new(vec![cp_seg(Some(0.0))], 1.0).is_err());
        assert!(PiecewiseAmm::new(vec![Segment::Linear { slope: 1.0, length: None }], 1.0).is_err());
        assert!(PiecewiseAmm::new(vec![Segment::Linear { slope: -1.0, length: Some(1.0) }], 1.0).is_err());
        assert!(PiecewiseAmm::new(vec![Segment::Linear { slope: 0.0, length: Some(1.0) }], 1.0).is_err());
    }

    #[test]
    fn upward_derivative_jump_fails_validation() {
        let pw = PiecewiseAmm::new(
            vec![
                Segment::ConstantProduct {
                    a: 10.0,
                    b: 1.0,
                    length: Some(5.0),
                },
                Segment::ConstantProduct {
                    a: 10.0,
                    b: 10.0,
                    length: None,
                },
            ],
            1.0,
        )
        .unwrap();
        let report = validate_amm(&pw, &default_amm_grid(&pw));
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.check == AmmCheck::DerivativeNonincreasing));
    }

    #[test]
    fn linear_arc_fails_strict_concavity() {
        let pw = PiecewiseAmm::new(
            vec![
                Segment::Linear {
                    slope: 0.5,
                    length: Some(10.0),
                },
                Segment::ConstantProduct {
                    a: 10.0,
                    b: 5.0,
                    length: None,
                },
            ],
            1.0,
        )
        .unwrap();
        let report = validate_amm(&pw, &default_amm_grid(&pw));
        assert_eq!(report.failures.len(), 1, "{report:?}");
        assert_eq!(report.failures[0].check, AmmCheck::StrictConcavity);
    }

    #[derive(Debug)]
    struct CappedConvex;

    impl AmmCurve for CappedConvex {
        fn f(&self, x: f64) -> f64 {
            (x + x * x).min(2.0)
        }
        fn right_derivative(&self, x: f64) -> f64 {
            if x < 1.0 {
                1.0 + 2.0 * x
            } else {
                0.0
            }
        }
        fn sup_out(&self) -> f64 {
            2.0
        }
    }

    #[test]
    fn capped_convex_fails_concavity_with_triple() {
        let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.05).collect();
        let report = validate_amm(&CappedConvex, &grid);
        let chord = report.failures.iter().find(|f| f.check == AmmCheck::Concavity).unwrap();
        assert_eq!(chord.witness.len(), 3);
        assert!(report.failures.iter().any(|f| f.check == AmmCheck::DerivativeNonincreasing));
    }

    #[test]
    fn constant_product_passes_validation() {
        let amm = ConstantProduct::new(1e6, 3.0, 0.95).unwrap();
        let report = validate_amm(&amm, &default_amm_grid(&amm));
        assert!(report.passed(), "{report:?}");
    }
}
