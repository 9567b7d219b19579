use marketsift::market_data::{
    label_decisions, label_return, log_returns, quantile_thresholds, CandleSeries, DecisionLabel,
    ReturnSeries,
};
use proptest::prelude::*;

fn series(returns: Vec<f64>) -> ReturnSeries {
    ReturnSeries {
        returns,
        aligned_index: 0,
    }
}

fn closes_from(start: f64, steps: &[f64]) -> Vec<f64> {
    let mut c = vec![start];
    for s in steps {
        let last = *c.last().unwrap();
        c.push(last * s.exp());
    }
    c
}

proptest! {
    #[test]
    fn label_counts_match_brute_force(
        returns in prop::collection::vec(-0.05f64..0.05, 2..400),
        q in 0.01f64..0.3,
    ) {
        let (lo, hi) = quantile_thresholds(&returns, q).unwrap();
        let labeled = label_decisions(series(returns.clone()), lo, hi).unwrap();
        let [sell, _, buy] = labeled.class_counts();
        prop_assert_eq!(sell, returns.iter().filter(|&&w| w < lo).count());
        prop_assert_eq!(buy, returns.iter().filter(|&&w| w > hi).count());
    }

    #[test]
    fn tail_shares_stay_near_the_quantile(
        steps in prop::collection::vec(-0.05f64..0.05, 50..600),
    ) {
        // Sampled uniformly from a continuum, so ties have probability zero.
        let q = 0.035;
        let n = steps.len() as f64;
        let (lo, hi) = quantile_thresholds(&steps, q).unwrap();
        let labeled = label_decisions(series(steps), lo, hi).unwrap();
        let [sell, _, buy] = labeled.class_counts();
        for share in [sell as f64 / n, buy as f64 / n] {
            prop_assert!(share >= q - 2.0 / n && share <= q + 2.0 / n, "share {share}");
        }
    }

    #[test]
    fn cumulative_returns_recover_closes(
        start in 0.01f64..1e4,
        steps in prop::collection::vec(-0.1f64..0.1, 1..300),
    ) {
        let closes = closes_from(start, &steps);
        let s = CandleSeries::from_closes("m", &closes).unwrap();
        let r = log_returns(&s);
        let mut acc = 0.0;
        for (t, w) in r.returns.iter().enumerate() {
            acc += w;
            let rebuilt = closes[0] * acc.exp();
            prop_assert!(((rebuilt - closes[t + 1]) / closes[t + 1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn labels_invariant_under_increasing_transforms(
        returns in prop::collection::vec(-0.05f64..0.05, 2..200),
        q in 0.01f64..0.3,
        a in 0.1f64..10.0,
    ) {
        let (lo, hi) = quantile_thresholds(&returns, q).unwrap();
        let f = |x: f64| (a * x).exp() + x;
        for &w in &returns {
            prop_assert_eq!(label_return(w, lo, hi), label_return(f(w), f(lo), f(hi)));
        }
    }
}

#[test]
fn threshold_equality_is_hold() {
    let returns = vec![-0.02, -0.01, 0.0, 0.01, 0.02];
    let (lo, hi) = quantile_thresholds(&returns, 0.25).unwrap();
    assert_eq!((lo, hi), (-0.01, 0.01));
    let labeled = label_decisions(series(returns), lo, hi).unwrap();
    use DecisionLabel::*;
    assert_eq!(labeled.labels, vec![Sell, Hold, Hold, Hold, Buy]);
}
