//! Admissible supply functions over a finite token universe.
//!
//! A supply function maps a strictly positive price vector to the net amount
//! of each token an agent supplies (positive) or demands (negative). It is
//! scale free, satisfies Walras's law `p · φ(p) = 0`, has coordinates bounded
//! above, and its value form `ψ_i(p) = p_i φ_i(p)` extends continuously to the
//! boundary of the positive orthant. Each concrete kind provides its boundary
//! value form analytically.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ModelError, ModelResult};

/// Zero-based index of a token in the universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TokenId(pub usize);

impl TokenId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Tokens are numbered from 1 in user-facing text.
        write!(f, "token {}", self.0 + 1)
    }
}

/// A strictly positive price per token. Only relative prices carry meaning.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceVector(Vec<f64>);

impl PriceVector {
    pub fn new(prices: Vec<f64>) -> ModelResult<Self> {
        if prices.len() < 2 {
            return Err(ModelError::TooFewTokens(prices.len()));
        }
        for (index, &value) in prices.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::NonPositivePrice { index, value });
            }
        }
        Ok(Self(prices))
    }

    /// The uniform price vector `(1/n, ..., 1/n)`.
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Rescaled so the coordinates sum to one.
    pub fn normalized(&self) -> Self {
        Self(normalize(&self.0))
    }

    /// Prices expressed as rates against the first token.
    pub fn rates_vs_first(&self) -> Vec<f64> {
        let base = self.0[0];
        self.0.iter().map(|p| p / base).collect()
    }
}

/// Rescales a nonnegative nonzero vector onto the simplex.
pub(crate) fn normalize(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter().map(|x| x / total).collect()
}

/// An admissible supply function on `tokens()` tokens.
///
/// Implementations must be pure: evaluation may run concurrently from several
/// solver workers and must not depend on call order.
pub trait SupplyFunction: Send + Sync + fmt::Debug {
    fn tokens(&self) -> usize;

    /// Adds `φ(p)` into `out`. `p` is strictly positive.
    fn add_eval(&self, p: &[f64], out: &mut [f64]);

    /// Adds `ψ(p)` into `out`. `p` is nonnegative and nonzero.
    fn add_value_form(&self, p: &[f64], out: &mut [f64]);

    /// Per-token constants `M_i` with `φ_i ≤ M_i`.
    fn upper_bounds(&self) -> Vec<f64>;

    /// Sorted token indices the function depends on.
    fn support(&self) -> Vec<usize>;

    fn eval(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens()];
        self.add_eval(p, &mut out);
        out
    }

    fn value_form(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens()];
        self.add_value_form(p, &mut out);
        out
    }
}

pub type Supply = Arc<dyn SupplyFunction>;

fn check_len(expected: usize, found: usize) -> ModelResult<()> {
    if expected != found {
        return Err(ModelError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> ModelResult<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(token) => Err(ModelError::NonFinite { token }),
        None => Ok(()),
    }
}

/// Evaluates `φ(p)`, rejecting malformed output.
pub fn evaluate(supply: &dyn SupplyFunction, p: &PriceVector) -> ModelResult<Vec<f64>> {
    check_len(supply.tokens(), p.len())?;
    let out = supply.eval(p.as_slice());
    check_finite(&out)?;
    Ok(out)
}

/// Evaluates the value form `ψ(p)` on the closed orthant minus the origin.
pub fn value_form(supply: &dyn SupplyFunction, p: &[f64]) -> ModelResult<Vec<f64>> {
    check_len(supply.tokens(), p.len())?;
    for (index, &value) in p.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(ModelError::InvalidBoundaryPrice { index, value });
        }
    }
    if p.iter().all(|&x| x == 0.0) {
        return Err(ModelError::Origin);
    }
    let out = supply.value_form(p);
    check_finite(&out)?;
    Ok(out)
}

/// The identically zero supply function.
#[derive(Debug, Clone)]
pub struct ZeroSupply {
    n: usize,
}

impl ZeroSupply {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl SupplyFunction for ZeroSupply {
    fn tokens(&self) -> usize {
        self.n
    }
    fn add_eval(&self, _p: &[f64], _out: &mut [f64]) {}
    fn add_value_form(&self, _p: &[f64], _out: &mut [f64]) {}
    fn upper_bounds(&self) -> Vec<f64> {
        vec![0.0; self.n]
    }
    fn support(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// Pointwise sum of supply functions on the same universe.
#[derive(Debug, Clone)]
pub struct SumSupply {
    n: usize,
    parts: Vec<Supply>,
}

impl SumSupply {
    pub fn new(n: usize, parts: Vec<Supply>) -> ModelResult<Self> {
        for part in &parts {
            check_len(n, part.tokens())?;
        }
        Ok(Self { n, parts })
    }

    pub fn parts(&self) -> &[Supply] {
        &self.parts
    }
}

impl SupplyFunction for SumSupply {
    fn tokens(&self) -> usize {
        self.n
    }

    fn add_eval(&self, p: &[f64], out: &mut [f64]) {
        for part in &self.parts {
            part.add_eval(p, out);
        }
    }

    fn add_value_form(&self, p: &[f64], out: &mut [f64]) {
        for part in &self.parts {
            part.add_value_form(p, out);
        }
    }

    fn upper_bounds(&self) -> Vec<f64> {
        let mut bounds = vec![0.0; self.n];
        for part in &self.parts {
            for (b, m) in bounds.iter_mut().zip(part.upper_bounds()) {
                *b += m;
            }
        }
        bounds
    }

    fn support(&self) -> Vec<usize> {
        let mut tokens: Vec<usize> = self.parts.iter().flat_map(|p| p.support()).collect();
        tokens.sort_unstable();
        tokens.dedup();
        tokens
    }
}

/// Sum of two supply functions.
pub fn sum(a: Supply, b: Supply) -> ModelResult<Supply> {
    check_len(a.tokens(), b.tokens())?;
    Ok(Arc::new(SumSupply::new(a.tokens(), vec![a, b])?))
}

/// A function on `m` tokens embedded into `n` tokens through an injection.
#[derive(Debug, Clone)]
pub struct ExtendedSupply {
    n: usize,
    inner: Supply,
    sigma: Vec<usize>,
}

impl ExtendedSupply {
    pub fn inner(&self) -> &Supply {
        &self.inner
    }

    pub fn embedding(&self) -> &[usize] {
        &self.sigma
    }

    fn gather(&self, p: &[f64]) -> Vec<f64> {
        self.sigma.iter().map(|&i| p[i]).collect()
    }
}

impl SupplyFunction for ExtendedSupply {
    fn tokens(&self) -> usize {
        self.n
    }

    fn add_eval(&self, p: &[f64], out: &mut [f64]) {
        let local = self.inner.eval(&self.gather(p));
        for (&i, v) in self.sigma.iter().zip(local) {
            out[i] += v;
        }
    }

    fn add_value_form(&self, p: &[f64], out: &mut [f64]) {
        let sub = self.gather(p);
        // ψ is homogeneous of degree one and bounded on the unit sphere, so it
        // vanishes where every embedded price is zero.
        if sub.iter().all(|&x| x == 0.0) {
            return;
        }
        let local = self.inner.value_form(&sub);
        for (&i, v) in self.sigma.iter().zip(local) {
            out[i] += v;
        }
    }

    fn upper_bounds(&self) -> Vec<f64> {
        let mut bounds = vec![0.0; self.n];
        for (&i, m) in self.sigma.iter().zip(self.inner.upper_bounds()) {
            bounds[i] = m;
        }
        bounds
    }

    fn support(&self) -> Vec<usize> {
        let mut tokens: Vec<usize> = self.inner.support().into_iter().map(|j| self.sigma[j]).collect();
        tokens.sort_unstable();
        tokens
    }
}

/// Embeds `inner` (over `sigma.len()` tokens) into `n` tokens, sending local
/// token `j` to global token `sigma[j]`.
pub fn extend_support(inner: Supply, sigma: &[usize], n: usize) -> ModelResult<Supply> {
    check_len(inner.tokens(), sigma.len())?;
    let mut seen = vec![false; n];
    for &i in sigma {
        if i >= n {
            return Err(ModelError::TokenOutOfRange { index: i, n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(ModelError::NotInjective(i));
        }
    }
    Ok(Arc::new(ExtendedSupply {
        n,
        inner,
        sigma: sigma.to_vec(),
    }))
}

/// The restriction of a function supported at a token subset.
#[derive(Debug, Clone)]
pub struct RestrictedSupply {
    inner: Supply,
    index: Vec<usize>,
}

impl RestrictedSupply {
    fn lift(&self, p: &[f64], fill: f64) -> Vec<f64> {
        let mut full = vec![fill; self.inner.tokens()];
        for (&i, &x) in self.index.iter().zip(p) {
            full[i] = x;
        }
        full
    }
}

impl SupplyFunction for RestrictedSupply {
    fn tokens(&self) -> usize {
        self.index.len()
    }

    fn add_eval(&self, p: &[f64], out: &mut [f64]) {
        let full = self.inner.eval(&self.lift(p, 1.0));
        for (o, &i) in out.iter_mut().zip(&self.index) {
            *o += full[i];
        }
    }

    fn add_value_form(&self, p: &[f64], out: &mut [f64]) {
        let full = self.inner.value_form(&self.lift(p, 1.0));
        for (o, &i) in out.iter_mut().zip(&self.index) {
            *o += full[i];
        }
    }

    fn upper_bounds(&self) -> Vec<f64> {
        let bounds = self.inner.upper_bounds();
        self.index.iter().map(|&i| bounds[i]).collect()
    }

    fn support(&self) -> Vec<usize> {
        let inner = self.inner.support();
        self.index
            .iter()
            .enumerate()
            .filter(|(_, i)| inner.contains(i))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Restricts `supply` to the tokens in `index` (sorted, distinct).
///
/// The function must not depend on, nor supply, any token outside `index`;
/// this is checked on a deterministic sample of prices.
pub fn restrict_support(supply: Supply, index: &[usize]) -> ModelResult<Supply> {
    let n = supply.tokens();
    let mut seen = vec![false; n];
    for &i in index {
        if i >= n {
            return Err(ModelError::TokenOutOfRange { index: i, n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(ModelError::NotInjective(i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..64 {
        let p: Vec<f64> = (0..n).map(|_| log_uniform(&mut rng, 1e-3, 1e3)).collect();
        let base = supply.eval(&p);
        let mut moved = p.clone();
        for (i, x) in moved.iter_mut().enumerate() {
            if !seen[i] {
                *x *= log_uniform(&mut rng, 1e-2, 1e2);
            }
        }
        let shifted = supply.eval(&moved);
        for i in 0..n {
            let scale = 1.0 + base[i].abs();
            if !seen[i] && base[i].abs() > 1e-12 * scale {
                return Err(ModelError::NotSupported { token: i, value: base[i] });
            }
            if (shifted[i] - base[i]).abs() > 1e-9 * scale {
                return Err(ModelError::NotSupported { token: i, value: shifted[i] - base[i] });
            }
        }
    }
    Ok(Arc::new(RestrictedSupply {
        inner: supply,
        index: index.to_vec(),
    }))
}

type PointFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A supply function given by closures, for functions with no dedicated kind.
///
/// The caller is responsible for admissibility; `check_admissibility` can
/// confirm it on samples.
#[derive(Clone)]
pub struct FnSupply {
    name: String,
    n: usize,
    eval: Arc<PointFn>,
    value: Arc<PointFn>,
    bounds: Vec<f64>,
    support: Vec<usize>,
}

impl FnSupply {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        eval: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        value: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        bounds: Vec<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            eval: Arc::new(eval),
            value: Arc::new(value),
            bounds,
            support: (0..n).collect(),
        }
    }
}

impl fmt::Debug for FnSupply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSupply").field("name", &self.name).field("n", &self.n).finish()
    }
}

impl SupplyFunction for FnSupply {
    fn tokens(&self) -> usize {
        self.n
    }
    fn add_eval(&self, p: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip((self.eval)(p)) {
            *o += v;
        }
    }
    fn add_value_form(&self, p: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip((self.value)(p)) {
            *o += v;
        }
    }
    fn upper_bounds(&self) -> Vec<f64> {
        self.bounds.clone()
    }
    fn support(&self) -> Vec<usize> {
        self.support.clone()
    }
}

pub(crate) fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`: the van der Corput sequence.
fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base as u64) as f64 * inv;
        index /= base as u64;
        inv /= b;
    }
    value
}

/// Points on each boundary facet `p_i = 0`, other coordinates drawn from a
/// Halton sequence in `(0, 1]`. Entry `i` of the result holds the samples for
/// token `i`.
pub fn boundary_samples(n: usize, per_face: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|face| {
            (1..=per_face as u64)
                .map(|k| {
                    let mut dim = 0;
                    (0..n)
                        .map(|i| {
                            if i == face {
                                0.0
                            } else {
                                let base = PRIMES[dim % PRIMES.len()];
                                dim += 1;
                                // map [0,1) to (0,1] with a floor away from zero
                                0.02 + 0.98 * (1.0 - radical_inverse(k, base))
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Interior sample prices, log-uniform over six orders of magnitude.
pub fn interior_samples(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..n).map(|_| log_uniform(&mut rng, 1e-3, 1e3)).collect())
        .collect()
}

/// One failed admissibility condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityViolation {
    pub condition: AdmissibilityCondition,
    pub point: Vec<f64>,
    pub token: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdmissibilityCondition {
    Finite,
    Homogeneity,
    WalrasLaw,
    UpperBound,
    BoundaryContinuity,
    BoundarySign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub points_checked: usize,
    pub violation: Option<AdmissibilityViolation>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Relative tolerances used by the admissibility checks.
#[derive(Debug, Clone, Copy)]
pub struct AdmissibilityTolerance {
    pub homogeneity: f64,
    pub walras: f64,
    pub boundary_sign: f64,
    pub continuity: f64,
}

impl Default for AdmissibilityTolerance {
    fn default() -> Self {
        Self {
            homogeneity: 1e-9,
            walras: 1e-9,
            boundary_sign: 1e-12,
            continuity: 1e-6,
        }
    }
}

/// Checks homogeneity, Walras's law and upper bounds at every strictly
/// positive grid point, and the boundary behaviour of ψ (sum zero, sign, and
/// continuity from the interior) at every grid point with a zero coordinate.
/// Reports the first violation found.
pub fn check_admissibility(
    supply: &dyn SupplyFunction,
    grid: &[Vec<f64>],
    tol: AdmissibilityTolerance,
) -> AdmissibilityReport {
    let bounds = supply.upper_bounds();
    let bound_scale: f64 = 1.0 + bounds.iter().map(|b| b.abs()).sum::<f64>();
    let violation = |condition, point: &[f64], token, magnitude| {
        Some(AdmissibilityViolation {
            condition,
            point: point.to_vec(),
            token,
            magnitude,
        })
    };
    for (checked, p) in grid.iter().enumerate() {
        let report = |v| AdmissibilityReport {
            points_checked: checked + 1,
            violation: v,
        };
        if p.iter().all(|&x| x > 0.0) {
            let phi = supply.eval(p);
            if let Some(token) = phi.iter().position(|v| !v.is_finite()) {
                return report(violation(AdmissibilityCondition::Finite, p, token, f64::NAN));
            }
            let norm = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for lambda in [1e-6, 7.0, 1e6] {
                let scaled: Vec<f64> = p.iter().map(|x| x * lambda).collect();
                let other = supply.eval(&scaled);
                for (i, (a, b)) in phi.iter().zip(&other).enumerate() {
                    let diff = (a - b).abs();
                    if !(diff <= tol.homogeneity * (1.0 + norm)) {
                        return report(violation(AdmissibilityCondition::Homogeneity, p, i, diff));
                    }
                }
            }
            let values: Vec<f64> = p.iter().zip(&phi).map(|(x, v)| x * v).collect();
            let dot: f64 = values.iter().sum();
            let scale: f64 = values.iter().map(|v| v.abs()).sum();
            if dot.abs() > tol.walras * scale + 1e-300 {
                let token = argmax_abs(&values);
                return report(violation(AdmissibilityCondition::WalrasLaw, p, token, dot));
            }
            for (i, (v, m)) in phi.iter().zip(&bounds).enumerate() {
                if *v > m + tol.walras * (1.0 + m.abs()) {
                    return report(violation(AdmissibilityCondition::UpperBound, p, i, v - m));
                }
            }
        } else {
            let psi = supply.value_form(p);
            if let Some(token) = psi.iter().position(|v| !v.is_finite()) {
                return report(violation(AdmissibilityCondition::Finite, p, token, f64::NAN));
            }
            let total: f64 = psi.iter().sum();
            let scale = 1.0 + psi.iter().map(|v| v.abs()).sum::<f64>();
            if total.abs() > tol.walras * scale {
                let token = argmax_abs(&psi);
                return report(violation(AdmissibilityCondition::WalrasLaw, p, token, total));
            }
            for (i, (&x, &v)) in p.iter().zip(&psi).enumerate() {
                if x == 0.0 && v > tol.boundary_sign {
                    return report(violation(AdmissibilityCondition::BoundarySign, p, i, v));
                }
            }
            // Approach the boundary point from the interior.
            let top = p.iter().fold(0.0f64, |m, &x| m.max(x));
            let nudged: Vec<f64> = p.iter().map(|&x| x + 1e-14 * top).collect();
            let near = supply.value_form(&nudged);
            for (i, (a, b)) in psi.iter().zip(&near).enumerate() {
                let diff = (a - b).abs();
                if !(diff <= tol.continuity * top * bound_scale) {
                    return report(violation(AdmissibilityCondition::BoundaryContinuity, p, i, diff));
                }
            }
        }
    }
    AdmissibilityReport {
        points_checked: grid.len(),
        violation: None,
    }
}

fn argmax_abs(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0
}

/// Default admissibility grid: interior samples plus the boundary facets.
pub fn default_grid(n: usize, interior: usize, per_face: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut grid = interior_samples(n, interior, seed);
    for face in boundary_samples(n, per_face) {
        grid.extend(face);
    }
    grid
}

/// A boundary point where ψ_i failed to be strictly negative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrictnessWitness {
    pub point: Vec<f64>,
    pub token: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrictnessReport {
    pub strict_ok: bool,
    /// At most one witness per failing token: the sample with the largest ψ_i.
    pub witnesses: Vec<StrictnessWitness>,
    /// Tokens not bought by any limit sell order, when the structural check ran.
    pub tokens_without_sell_order: Vec<usize>,
}

impl StrictnessReport {
    pub fn failing_tokens(&self) -> Vec<usize> {
        self.witnesses.iter().map(|w| w.token).collect()
    }
}

/// Samples ψ_i on each facet `p_i = 0`; strict iff every sample has
/// `ψ_i < -tolerance`.
pub fn check_strictness(
    supply: &dyn SupplyFunction,
    samples: &[Vec<Vec<f64>>],
    tolerance: f64,
) -> StrictnessReport {
    let mut witnesses = Vec::new();
    for (token, face) in samples.iter().enumerate() {
        let mut worst: Option<StrictnessWitness> = None;
        for p in face {
            debug_assert_eq!(p[token], 0.0);
            let value = supply.value_form(p)[token];
            if !(value < -tolerance) && worst.as_ref().is_none_or(|w| value > w.value) {
                worst = Some(StrictnessWitness {
                    point: p.clone(),
                    token,
                    value,
                });
            }
        }
        witnesses.extend(worst);
    }
    StrictnessReport {
        strict_ok: witnesses.is_empty(),
        witnesses,
        tokens_without_sell_order: Vec::new(),
    }
}
