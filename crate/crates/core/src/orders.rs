//! Continuous limit orders on a token pair.
//!
//! A two-token supply function is determined by a curve `g`, the supply of
//! the first token as a function of the exchange rate `r = p_first /
//! p_second`: `φ_first = g(r)` and `φ_second = -r g(r)`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{ModelError, ModelResult};
use crate::market::{extend_support, restrict_support, Supply, SupplyFunction, TokenId};

/// The supply of the first token of a pair against the exchange rate.
pub trait OrderCurve: Send + Sync + fmt::Debug {
    /// `g(r)` for `r ≥ 0`.
    fn g(&self, r: f64) -> f64;

    /// `r g(r)`, which some curves compute more accurately than the product.
    fn r_g(&self, r: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            r * self.g(r)
        }
    }

    /// `lim_{r→∞} g(r)`.
    fn limit_at_infinity(&self) -> f64;

    /// `sup g`.
    fn sup(&self) -> f64;
}

/// Exchange-rate band `0 < r1 < r2`.
fn check_band(r1: f64, r2: f64) -> ModelResult<()> {
    if !(r1 > 0.0 && r1.is_finite() && r2.is_finite() && r1 < r2) {
        return Err(ModelError::InvalidOrder(format!("limit band must satisfy 0 < r1 < r2, got r1={r1}, r2={r2}")));
    }
    Ok(())
}

fn check_amount(amount: f64) -> ModelResult<()> {
    if !(amount > 0.0 && amount.is_finite()) {
        return Err(ModelError::InvalidOrder(format!("amount must be positive, got {amount}")));
    }
    Ok(())
}

/// Sells up to `amount` of `sell_token` for `buy_token`. Nothing is sold
/// while the price of `sell_token` in `buy_token` units is at most `r1`, the
/// full amount from `r2` on, linearly in between.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSellOrder {
    pub sell_token: TokenId,
    pub buy_token: TokenId,
    pub amount: f64,
    pub r1: f64,
    pub r2: f64,
}

impl LimitSellOrder {
    pub fn new(sell_token: TokenId, buy_token: TokenId, amount: f64, r1: f64, r2: f64) -> ModelResult<Self> {
        if sell_token == buy_token {
            return Err(ModelError::InvalidOrder("sell and buy token coincide".into()));
        }
        check_amount(amount)?;
        check_band(r1, r2)?;
        Ok(Self {
            sell_token,
            buy_token,
            amount,
            r1,
            r2,
        })
    }
}

/// Buys up to `amount` of `buy_token` paying with `pay_token`. The full
/// amount is bought while the price of `buy_token` in `pay_token` units is at
/// most `r1`, nothing from `r2` on, linearly in between.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitBuyOrder {
    pub buy_token: TokenId,
    pub pay_token: TokenId,
    pub amount: f64,
    pub r1: f64,
    pub r2: f64,
}

impl LimitBuyOrder {
    pub fn new(buy_token: TokenId, pay_token: TokenId, amount: f64, r1: f64, r2: f64) -> ModelResult<Self> {
        if buy_token == pay_token {
            return Err(ModelError::InvalidOrder("buy and pay token coincide".into()));
        }
        check_amount(amount)?;
        check_band(r1, r2)?;
        Ok(Self {
            buy_token,
            pay_token,
            amount,
            r1,
            r2,
        })
    }
}

/// Linear ramp from 0 at `r1` to `amount` at `r2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SellCurve {
    amount: f64,
    r1: f64,
    r2: f64,
}

impl OrderCurve for SellCurve {
    fn g(&self, r: f64) -> f64 {
        if r <= self.r1 {
            0.0
        } else if r >= self.r2 {
            self.amount
        } else {
            self.amount * (r - self.r1) / (self.r2 - self.r1)
        }
    }

    fn limit_at_infinity(&self) -> f64 {
        self.amount
    }

    fn sup(&self) -> f64 {
        self.amount
    }
}

pub fn sell_curve(order: &LimitSellOrder) -> ModelResult<SellCurve> {
    check_amount(order.amount)?;
    check_band(order.r1, order.r2)?;
    Ok(SellCurve {
        amount: order.amount,
        r1: order.r1,
        r2: order.r2,
    })
}

/// The curve of a buy order, obtained from the buy-side function `h̄` through
/// the involution `g(r) = -(1/r) h̄(1/r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuyCurve {
    amount: f64,
    r1: f64,
    r2: f64,
}

impl BuyCurve {
    /// `h̄(s)`: signed amount of the buy token as a function of its price `s`
    /// in the pay token. Nonpositive, nondecreasing.
    pub fn h_bar(&self, s: f64) -> f64 {
        if s <= self.r1 {
            -self.amount
        } else if s >= self.r2 {
            0.0
        } else {
            -self.amount * (self.r2 - s) / (self.r2 - self.r1)
        }
    }
}

impl OrderCurve for BuyCurve {
    fn g(&self, r: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            -self.h_bar(1.0 / r) / r
        }
    }

    fn r_g(&self, r: f64) -> f64 {
        if r == 0.0 {
            0.0
        } else {
            -self.h_bar(1.0 / r)
        }
    }

    fn limit_at_infinity(&self) -> f64 {
        0.0
    }

    fn sup(&self) -> f64 {
        // sup over s of s·|h̄(s)|: flat part peaks at s = r1, the ramp
        // s·(r2 - s)/(r2 - r1) at s = r2/2 when that lies in the ramp
        let ramp_peak = if self.r2 / 2.0 >= self.r1 {
            self.r2 * self.r2 / (4.0 * (self.r2 - self.r1))
        } else {
            self.r1
        };
        self.amount * self.r1.max(ramp_peak)
    }
}

pub fn buy_curve(order: &LimitBuyOrder) -> ModelResult<BuyCurve> {
    check_amount(order.amount)?;
    check_band(order.r1, order.r2)?;
    Ok(BuyCurve {
        amount: order.amount,
        r1: order.r1,
        r2: order.r2,
    })
}

/// The two-token supply function of a curve.
#[derive(Debug, Clone)]
pub struct PairSupply<C> {
    curve: C,
}

impl<C: OrderCurve> PairSupply<C> {
    pub fn new(curve: C) -> Self {
        Self { curve }
    }

    pub fn curve(&self) -> &C {
        &self.curve
    }
}

impl<C: OrderCurve> SupplyFunction for PairSupply<C> {
    fn tokens(&self) -> usize {
        2
    }

    fn add_eval(&self, p: &[f64], out: &mut [f64]) {
        let r = p[0] / p[1];
        out[0] += self.curve.g(r);
        out[1] -= self.curve.r_g(r);
    }

    fn add_value_form(&self, p: &[f64], out: &mut [f64]) {
        let value = if p[1] > 0.0 {
            p[1] * self.curve.r_g(p[0] / p[1])
        } else {
            p[0] * self.curve.limit_at_infinity()
        };
        out[0] += value;
        out[1] -= value;
    }

    fn upper_bounds(&self) -> Vec<f64> {
        // g ≥ 0, so the second coordinate never exceeds zero
        vec![self.curve.sup(), 0.0]
    }

    fn support(&self) -> Vec<usize> {
        vec![0, 1]
    }
}

/// Builds the supply function of `curve` on `n` tokens, with the curve's first
/// token at `first` and its second at `second`.
pub fn order_to_supply<C: OrderCurve + 'static>(curve: C, first: TokenId, second: TokenId, n: usize) -> ModelResult<Supply> {
    if first == second {
        return Err(ModelError::InvalidCurve("first and second token coincide".into()));
    }
    let limit = curve.limit_at_infinity();
    if !(limit >= 0.0 && limit.is_finite()) {
        return Err(ModelError::InvalidCurve(format!("limit at infinity must be finite and nonnegative, got {limit}")));
    }
    let sup = curve.sup();
    if !sup.is_finite() {
        return Err(ModelError::InvalidCurve("curve is unbounded".into()));
    }
    extend_support(Arc::new(PairSupply::new(curve)), &[first.0, second.0], n)
}

/// A trade order in a batch.
#[derive(Debug, Clone)]
pub enum Order {
    Sell(LimitSellOrder),
    Buy(LimitBuyOrder),
    /// Any admissible supply function, possibly over more than two tokens.
    Custom(Supply),
}

impl Order {
    pub fn supply(&self, n: usize) -> ModelResult<Supply> {
        match self {
            Order::Sell(o) => order_to_supply(sell_curve(o)?, o.sell_token, o.buy_token, n),
            Order::Buy(o) => order_to_supply(buy_curve(o)?, o.pay_token, o.buy_token, n),
            Order::Custom(s) => {
                if s.tokens() != n {
                    return Err(ModelError::DimensionMismatch {
                        expected: n,
                        found: s.tokens(),
                    });
                }
                Ok(s.clone())
            }
        }
    }

    pub fn support(&self) -> Vec<usize> {
        let mut tokens = match self {
            Order::Sell(o) => vec![o.sell_token.0, o.buy_token.0],
            Order::Buy(o) => vec![o.buy_token.0, o.pay_token.0],
            Order::Custom(s) => s.support(),
        };
        tokens.sort_unstable();
        tokens
    }

    /// The same order on a sub-universe: `local[g]` is the new index of
    /// global token `g`, and `index` lists the global tokens kept, sorted.
    pub fn reindex(&self, local: &[Option<usize>], index: &[usize]) -> ModelResult<Order> {
        let map = |t: TokenId| {
            local
                .get(t.0)
                .copied()
                .flatten()
                .map(TokenId)
                .ok_or(ModelError::TokenOutOfRange { index: t.0, n: index.len() })
        };
        Ok(match self {
            Order::Sell(o) => Order::Sell(LimitSellOrder {
                sell_token: map(o.sell_token)?,
                buy_token: map(o.buy_token)?,
                ..o.clone()
            }),
            Order::Buy(o) => Order::Buy(LimitBuyOrder {
                buy_token: map(o.buy_token)?,
                pay_token: map(o.pay_token)?,
                ..o.clone()
            }),
            Order::Custom(s) => Order::Custom(restrict_support(s.clone(), index)?),
        })
    }

    /// The token a limit sell order buys.
    pub fn sell_order_buys(&self) -> Option<TokenId> {
        match self {
            Order::Sell(o) => Some(o.buy_token),
            _ => None,
        }
    }
}

/// Tokens not bought by any limit sell order. When empty, the sum of the
/// orders is strict.
pub fn tokens_without_sell_order(orders: &[Order], n: usize) -> Vec<usize> {
    let mut covered = vec![false; n];
    for token in orders.iter().filter_map(Order::sell_order_buys) {
        covered[token.0] = true;
    }
    (0..n).filter(|&i| !covered[i]).collect()
}
