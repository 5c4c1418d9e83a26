use std::collections::BTreeMap;

use ndarray::Array2;
use polymodel::backtest::{rebalance_sa, rebalance_wa, step_month, PortfolioState, WaMode};
use polymodel::hermite_ridge::{build_design, fit_ridge};
use polymodel::itf::{forward, ModelConfig, ModelParams, SampleTensor, TrendClass};
use polymodel::panel::{standardize, MonthIndex, ReturnPanel, SeriesId};
use polymodel::risk_features::{factor_quantiles, lta_weights, DEFAULT_TAIL_FRACTION};
use polymodel::significance::{p_value_from_null, rank_factors};
use proptest::prelude::*;

fn month(offset: i64) -> MonthIndex {
    MonthIndex::new(2000, 1).unwrap().add_months(offset)
}

fn returns(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.2f64..0.2, len)
}

fn spread(xs: &[f64]) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_keeps_every_observation(
        rows in prop::collection::vec((0i64..24, prop::collection::vec(prop::option::of(-0.1f64..0.1), 1..30)), 1..5)
    ) {
        let raw: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (start, vals))| {
                let obs: Vec<_> = vals
                    .iter()
                    .enumerate()
                    .filter_map(|(t, v)| v.map(|v| (month(start + t as i64), v)))
                    .collect();
                (SeriesId::fund(format!("F{i}")), obs)
            })
            .collect();
        let panel = ReturnPanel::align(raw.clone()).unwrap();
        for (id, obs) in &raw {
            for &(m, v) in obs {
                prop_assert_eq!(panel.value(id, m), Some(v));
            }
            let present = panel.row(id).unwrap().iter().flatten().count();
            prop_assert_eq!(present, obs.len());
        }
        let cal = panel.calendar();
        prop_assert!(cal.windows(2).all(|w| w[0].succ() == w[1]));
    }

    #[test]
    fn window_is_a_suffix_of_history(values in returns(40), len in 6usize..40, end_off in 0usize..40) {
        prop_assume!(len <= end_off + 1);
        let id = SeriesId::fund("A");
        let obs: Vec<_> = values.iter().enumerate().map(|(t, &v)| (month(t as i64), v)).collect();
        let panel = ReturnPanel::align(vec![(id.clone(), obs)]).unwrap();
        let end = month(end_off as i64);
        let window = panel.series_window(&id, end, len).unwrap().unwrap();
        let history = panel.history_through(&id, end).unwrap();
        prop_assert_eq!(&window[..], &history[history.len() - len..]);
    }

    #[test]
    fn standardize_round_trips(values in returns(30)) {
        prop_assume!(spread(&values) > 1e-6);
        let (z, affine) = standardize(&values).unwrap();
        let mean: f64 = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(mean.abs() < 1e-12);
        for (x, zi) in values.iter().zip(&z) {
            prop_assert!((affine.invert(*zi) - x).abs() < 1e-14);
        }
    }

    #[test]
    fn ridge_norm_shrinks_with_lambda(z in returns(36), y in returns(36), l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        prop_assume!(spread(&z) > 1e-3);
        let (z, _) = standardize(&z).unwrap();
        let design = build_design(&z);
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let norm = |l: f64| fit_ridge(&design, &y, l).unwrap().beta.iter().map(|b| b * b).sum::<f64>();
        prop_assert!(norm(hi) <= norm(lo) * (1.0 + 1e-10) + 1e-300);
    }

    #[test]
    fn r2_is_invariant_to_affine_target_maps(z in returns(36), y in returns(36), a in 0.1f64..10.0, b in -1.0f64..1.0) {
        prop_assume!(spread(&z) > 1e-3 && spread(&y) > 1e-3);
        let (z, _) = standardize(&z).unwrap();
        let design = build_design(&z);
        let f1 = fit_ridge(&design, &y, 0.0).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let f2 = fit_ridge(&design, &y2, 0.0).unwrap();
        prop_assert!((f1.r2 - f2.r2).abs() < 1e-8);
        prop_assert!(f1.adj_r2 <= f1.r2);
        prop_assert!((0.0..=1.0).contains(&f1.r2));
    }

    #[test]
    fn p_values_are_bounded(observed in 0.0f64..1.0, null in prop::collection::vec(0.0f64..1.0, 1..300)) {
        let p = p_value_from_null(observed, &null);
        let n = null.len() as f64;
        prop_assert!(p >= 1.0 / (n + 1.0) && p <= 1.0);
        prop_assert!(-p.ln() >= 0.0);
    }

    #[test]
    fn ranking_orders_by_score_then_id(scores in prop::collection::vec(0u8..5, 1..12)) {
        let pairs: Vec<(SeriesId, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (SeriesId::factor(format!("F{:02}", (i * 7) % 13)), f64::from(s)))
            .collect();
        let lookup: BTreeMap<_, _> = pairs.iter().cloned().collect();
        let ranked = rank_factors(&pairs);
        for w in ranked.windows(2) {
            let (a, b) = (lookup[&w[0]], lookup[&w[1]]);
            prop_assert!(a > b || (a == b && w[0].id < w[1].id));
        }
    }

    #[test]
    fn lta_weights_satisfy_constraints(values in prop::collection::vec(-0.3f64..0.3, 20..200)) {
        prop_assume!(spread(&values) > 1e-4);
        let grid = factor_quantiles(&values, DEFAULT_TAIL_FRACTION).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let w = lta_weights(&grid, mean).unwrap().w;
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let wt: f64 = w.iter().zip(&grid.theta).map(|(a, b)| a * b).sum();
        prop_assert!((wt - mean).abs() < 1e-12);
        prop_assert!(grid.percentiles.windows(2).all(|p| p[0] <= p[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_a_distribution_and_permutation_invariant(seed in 0u64..1000, values in prop::collection::vec(-3.0f64..3.0, 5 * 6), shift in 1usize..5) {
        let cfg = ModelConfig { lookback: 6, n_vars: 5, d_model: 8, n_heads: 2, d_head: 4, n_layers: 2, ff_mult: 2 };
        let params = ModelParams::init(cfg, seed).unwrap();
        let x = Array2::from_shape_vec((5, 6), values).unwrap();
        let rolled = Array2::from_shape_fn((5, 6), |(r, c)| x[[(r + shift) % 5, c]]);
        let p = forward(&SampleTensor { values: x, label: TrendClass::Up }, &params).unwrap();
        let q = forward(&SampleTensor { values: rolled, label: TrendClass::Up }, &params).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn rebalancing_conserves_value(
        held in prop::collection::btree_map(0usize..8, 0.01f64..2.0, 0..6),
        cash in 0.0f64..2.0,
        picks in prop::collection::btree_set(0usize..8, 1..6),
        aums in prop::collection::vec(0.5f64..500.0, 8),
        rets in prop::collection::vec(prop::option::of(-0.3f64..0.3), 8),
        full in any::<bool>(),
    ) {
        let id = |i: usize| SeriesId::fund(format!("S{i}"));
        let mut state = PortfolioState::all_cash(month(0), cash);
        state.holdings = held.iter().map(|(&i, &v)| (id(i), v)).collect();
        state.recompute_total();
        prop_assume!(state.total > 0.0);
        let selected: Vec<SeriesId> = picks.iter().map(|&i| id(i)).collect();
        let before = state.total;

        let (sa, _) = rebalance_sa(&state, &selected, month(1));
        prop_assert!((sa.total - before).abs() <= 1e-12 * before);
        prop_assert!(sa.cash >= -1e-15);

        let mode = if full { WaMode::FullBook } else { WaMode::ProceedsOnly };
        let aum_of = |f: &SeriesId| Some(aums[f.id[1..].parse::<usize>().unwrap()]);
        let wa = rebalance_wa(&state, &selected, aum_of, month(1), mode);
        prop_assert!((wa.state.total - before).abs() <= 1e-12 * before);
        prop_assert!(wa.state.holdings.keys().all(|k| selected.contains(k)));

        let ret_of = |f: &SeriesId| rets[f.id[1..].parse::<usize>().unwrap()];
        let (next, _) = step_month(&sa, month(2), ret_of);
        let expected: f64 = sa.cash
            + sa.holdings.iter().map(|(f, v)| v * (1.0 + ret_of(f).unwrap_or(0.0))).sum::<f64>();
        prop_assert!((next.total - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert!(next.accounting_error() <= 1e-12);
    }
}
