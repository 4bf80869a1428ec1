mod common;

use std::sync::Arc;

use amm_clearing::amm::{in_amounts, AmmCurve, AmmSystem, ConstantProduct};
use amm_clearing::cli::{normalize_batch, BatchConfig, BatchFile, Decimal, OrderKind, OrderSpec, PoolDirection, PoolSpec, BATCH_SCHEMA};
use amm_clearing::clearing::{compute_surplus, settle, ClearingConfig, ClearingStatus};
use amm_clearing::market::{check_admissibility, default_grid, AdmissibilityTolerance, PriceVector};
use amm_clearing::orders::{LimitBuyOrder, LimitSellOrder, Order};
use amm_clearing::solver::{rho_map, solve, EquilibriumProblem, SolverConfig, Strategy as SolveStrategy};
use amm_clearing::TokenId;
use common::{cp_h, random_strict_batch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn band() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..20.0, 0.001f64..1.0).prop_map(|(r1, w)| (r1, r1 * (1.0 + w)))
}

fn simplex_point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
        let total: f64 = v.iter().sum();
        (total > 1e-9).then(|| v.iter().map(|x| x / total).collect())
    })
}

fn positive_price(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..100.0, n)
}

fn pair_problem(amount: f64, (r1, r2): (f64, f64), a: f64, b: f64, gamma: f64) -> EquilibriumProblem {
    let mut amms = AmmSystem::new();
    amms.push(TokenId(0), TokenId(1), Arc::new(ConstantProduct::new(a, b, gamma).unwrap())).unwrap();
    let order = Order::Sell(LimitSellOrder::new(TokenId(0), TokenId(1), amount, r1, r2).unwrap());
    EquilibriumProblem::new(2, vec![order], amms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn limit_orders_are_admissible(amount in 0.01f64..1e4, band in band(), buy in any::<bool>(), seed in any::<u64>()) {
        let order = if buy {
            Order::Buy(LimitBuyOrder::new(TokenId(1), TokenId(0), amount, band.0, band.1).unwrap())
        } else {
            Order::Sell(LimitSellOrder::new(TokenId(0), TokenId(1), amount, band.0, band.1).unwrap())
        };
        let supply = order.supply(3).unwrap();
        let report = check_admissibility(supply.as_ref(), &default_grid(3, 200, 20, seed), AdmissibilityTolerance::default());
        prop_assert!(report.passed(), "{:?}", report.violation);
    }

    #[test]
    fn buy_order_never_demands_more_than_its_amount(amount in 0.01f64..1e4, band in band(), p in positive_price(2)) {
        let order = Order::Buy(LimitBuyOrder::new(TokenId(1), TokenId(0), amount, band.0, band.1).unwrap());
        let phi = order.supply(2).unwrap().eval(&p);
        prop_assert!(phi[1] <= 0.0 && phi[1] >= -amount * (1.0 + 1e-12));
        prop_assert!(phi[0] >= 0.0);
        // what it pays never exceeds the top of its band
        prop_assert!(p[0] * phi[0] <= band.1 * p[0] * -phi[1] * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn constant_product_value_bound(a in 1.0f64..1e5, b in 1.0f64..1e5, gamma in 0.9f64..=1.0, r in 1e-4f64..1e4) {
        let cp = ConstantProduct::new(a, b, gamma).unwrap();
        let x = cp.h(r);
        prop_assert!((x - cp_h(a, b, gamma, r)).abs() <= 1e-9 * (1.0 + x));
        prop_assert!(r * x <= cp.f(x) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn optimal_in_amount_beats_perturbations(a in 1.0f64..1e5, b in 1.0f64..1e5, gamma in 0.9f64..=1.0, r in 1e-3f64..1e3, delta in -1.0f64..1.0) {
        let cp = ConstantProduct::new(a, b, gamma).unwrap();
        let x = cp.h(r);
        let value = |y: f64| cp.f(y) - r * y;
        let y = (x + delta * (x + 1.0)).max(0.0);
        prop_assert!(value(y) <= value(x) + 1e-12 * (1.0 + value(x).abs() + r * x));
    }

    #[test]
    fn rho_map_stays_on_simplex(seed in any::<u64>(), n in 2usize..5, q in simplex_point(4)) {
        let problem = random_strict_batch(&mut ChaCha8Rng::seed_from_u64(seed), n).problem();
        let total: f64 = q[..n].iter().sum();
        prop_assume!(total > 1e-9);
        let q: Vec<f64> = q[..n].iter().map(|x| x / total).collect();
        let image = rho_map(&problem, &q);
        prop_assert!(image.iter().all(|&x| x >= -1e-12), "{image:?}");
        prop_assert!((image.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn surplus_value_is_amm_value(seed in any::<u64>(), n in 2usize..5, p in positive_price(4)) {
        let batch = random_strict_batch(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let problem = batch.problem();
        let price = PriceVector::new(p[..n].to_vec()).unwrap();
        let x = in_amounts(&batch.amms, &price);
        let s = compute_surplus(&problem, &price, &x).unwrap();
        let lhs: f64 = s.iter().zip(price.as_slice()).map(|(s, p)| s * p).sum();
        let mut rhs = 0.0;
        let mut scale = 1.0;
        for (entry, xc) in batch.amms.amms.iter().zip(&x.0) {
            let out = price.as_slice()[entry.out_token.0] * entry.curve.f(*xc);
            let paid = price.as_slice()[entry.in_token.0] * xc;
            rhs += out - paid;
            scale += out + paid;
        }
        prop_assert!((lhs - rhs).abs() <= 1e-9 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn equilibrium_price_is_scale_free(amount in 1.0f64..100.0, band in band(), reserve in 100.0f64..1e4, ratio in 0.2f64..5.0, lambda in 1e-3f64..1e3) {
        // ψ scales with the amounts, and so does the residual
        let config = |tol: f64| SolverConfig { strategy: SolveStrategy::Bisection2, residual_tol: tol, ..SolverConfig::default() };
        let base = solve(&pair_problem(amount, band, reserve, reserve * ratio, 0.997), &config(1e-11));
        let scaled = solve(&pair_problem(amount * lambda, band, reserve * lambda, reserve * ratio * lambda, 0.997), &config(1e-11 * lambda));
        match (base, scaled) {
            (Ok(a), Ok(b)) => {
                let ra = a.price.as_slice()[0] / a.price.as_slice()[1];
                let rb = b.price.as_slice()[0] / b.price.as_slice()[1];
                prop_assert!((ra - rb).abs() <= 1e-7 * ra, "{ra} vs {rb}");
            }
            (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn batch_files_round_trip(amount in 0.001f64..1e6, limit in 0.01f64..100.0, reserve in 1.0f64..1e6, fee in 0.0f64..100.0, buy in any::<bool>()) {
        let batch = BatchFile {
            schema: BATCH_SCHEMA.into(),
            tokens: vec!["X".into(), "Y".into()],
            orders: vec![OrderSpec {
                kind: if buy { OrderKind::Buy } else { OrderKind::Sell },
                sell_token: "X".into(),
                buy_token: "Y".into(),
                amount: Decimal(amount),
                limit_price: Some(Decimal(limit)),
                band_fraction: None,
                r1: None,
                r2: None,
                all_or_nothing: false,
            }],
            pools: vec![PoolSpec::ConstantProduct {
                token_a: "X".into(),
                token_b: "Y".into(),
                reserve_a: Decimal(reserve),
                reserve_b: Decimal(reserve * limit),
                fee_bps: Decimal(fee),
                direction: PoolDirection::Both,
            }],
            warm_start: None,
            config: BatchConfig::default(),
        };
        let normalized = normalize_batch(batch).unwrap();
        let text = serde_json::to_string(&normalized).unwrap();
        let again: BatchFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&again, &normalized);
        prop_assert_eq!(normalize_batch(again).unwrap(), normalized);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn only_amm_outputs_carry_surplus(seed in any::<u64>(), n in 2usize..5) {
        let batch = random_strict_batch(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let problem = batch.problem();
        let result = solve(&problem, &SolverConfig::default()).unwrap();
        let outcome = settle(&problem, &result, &ClearingConfig::default()).unwrap();
        prop_assert_eq!(outcome.status, ClearingStatus::Certified, "{:?}", outcome.diagnostics);
        let outs = batch.amm_out_tokens();
        for (i, s) in outcome.surplus.iter().enumerate() {
            prop_assert!(*s >= -1e-8 / result.price.as_slice()[i]);
            if !outs.contains(&i) {
                prop_assert!(s.abs() <= 1e-6 / result.price.as_slice()[i], "token {} surplus {}", i, s);
            }
        }
    }
}

#[test]
fn hub_cluster_without_hub_buyer_still_solves() {
    // this batch splits into a cluster in which no order buys the hub token
    let batch = random_strict_batch(&mut ChaCha8Rng::seed_from_u64(2804706195358439748), 3);
    let problem = batch.problem();
    let result = solve(&problem, &SolverConfig::default()).unwrap();
    let outcome = settle(&problem, &result, &ClearingConfig::default()).unwrap();
    assert_eq!(outcome.status, ClearingStatus::Certified, "{:?}", outcome.diagnostics);
}
