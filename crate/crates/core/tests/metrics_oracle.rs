use faultsam::metrics::{default_grid, evaluate, f1_at_threshold, ods, ois, Prediction};
use proptest::prelude::*;

/// Pixel-loop sweep with no sorting or shared helpers.
fn brute_force(set: &[Prediction], grid: &[f64]) -> (f64, f64, f64, Vec<f64>) {
    let f1 = |p: &Prediction, t: f64| {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for k in 0..p.prob.len() {
            let hit = p.prob[k] as f64 >= t;
            let truth = p.gt[k] == 1;
            if hit && truth {
                tp += 1;
            } else if hit {
                fp += 1;
            } else if truth {
                fn_ += 1;
            }
        }
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    let mut best_ts = Vec::new();
    let mut sum_best = 0.0;
    for p in set {
        let mut best = (-1.0, 0.0);
        for &t in grid {
            let v = f1(p, t);
            if v > best.0 {
                best = (v, t);
            }
        }
        sum_best += best.0;
        best_ts.push(best.1);
    }
    let mut global = (-1.0, 0.0);
    for &t in grid {
        let mut s = 0.0;
        for p in set {
            s += f1(p, t);
        }
        let mean = s / set.len() as f64;
        if mean > global.0 {
            global = (mean, t);
        }
    }
    (sum_best / set.len() as f64, global.0, global.1, best_ts)
}

fn prediction_strategy() -> impl Strategy<Value = Prediction> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(0u8..=100, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(p, g)| {
                let prob = p.into_iter().map(|v| v as f32 / 100.0).collect();
                let gt = g.into_iter().map(u8::from).collect();
                Prediction::new("img", h, w, prob, gt).unwrap()
            })
    })
}

fn set_strategy() -> impl Strategy<Value = Vec<Prediction>> {
    prop::collection::vec(prediction_strategy(), 1..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_brute_force_exactly(set in set_strategy()) {
        let grid = default_grid();
        let r = evaluate(&set, &grid).unwrap();
        let (o, d, t, ts) = brute_force(&set, &grid);
        prop_assert_eq!(r.ois, o);
        prop_assert_eq!(r.ods, d);
        prop_assert_eq!(r.global_t, t);
        prop_assert_eq!(r.images.iter().map(|s| s.best_t).collect::<Vec<_>>(), ts);
    }

    #[test]
    fn ois_dominates_ods(set in set_strategy()) {
        let r = evaluate(&set, &default_grid()).unwrap();
        prop_assert!(r.ois >= r.ods);
        let mean_best = r.images.iter().map(|s| s.best_f1).sum::<f64>() / set.len() as f64;
        prop_assert_eq!(r.ois, mean_best);
        let max_mean = r.mean_curve.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(r.ods, max_mean);
    }

    #[test]
    fn image_order_is_irrelevant(set in set_strategy(), rot in 0usize..8) {
        let grid = default_grid();
        let mut shuffled = set.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (a, b) = (evaluate(&set, &grid).unwrap(), evaluate(&shuffled, &grid).unwrap());
        prop_assert!((a.ois - b.ois).abs() < 1e-12);
        prop_assert!((a.ods - b.ods).abs() < 1e-12);
    }

    #[test]
    fn finer_grid_never_lowers_scores(set in set_strategy()) {
        let coarse: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        let fine = default_grid();
        let (a, b) = (evaluate(&set, &coarse).unwrap(), evaluate(&set, &fine).unwrap());
        prop_assert!(b.ois >= a.ois - 1e-12);
        prop_assert!(b.ods >= a.ods - 1e-12);
    }

    #[test]
    fn duplicating_the_set_keeps_ods(set in set_strategy(), k in 2usize..4) {
        let grid = default_grid();
        let dup: Vec<Prediction> = (0..k).flat_map(|_| set.clone()).collect();
        let (a, b) = (evaluate(&set, &grid).unwrap(), evaluate(&dup, &grid).unwrap());
        prop_assert!((a.ods - b.ods).abs() < 1e-12);
        prop_assert_eq!(a.global_t, b.global_t);
    }

    #[test]
    fn single_f1_matches_counts(p in prediction_strategy(), t in 1u32..100) {
        let t = t as f64 / 100.0;
        let (o, _, _, _) = brute_force(std::slice::from_ref(&p), &[t]);
        prop_assert_eq!(f1_at_threshold(&p.prob, &p.gt, t).unwrap(), o);
    }
}

#[test]
fn two_images_peaking_at_different_thresholds() {
    // A is perfect for t in (0.125, 0.25], B for t in (0.625, 0.875].
    let a = Prediction::new("a", 1, 4, vec![0.25, 0.25, 0.125, 0.125], vec![1, 1, 0, 0]).unwrap();
    let b = Prediction::new("b", 1, 4, vec![0.875, 0.875, 0.625, 0.625], vec![1, 1, 0, 0]).unwrap();
    let set = [a, b];
    let grid = default_grid();
    let (o, ts) = ois(&set, &grid).unwrap();
    let (d, _) = ods(&set, &grid).unwrap();
    let (bo, bd, _, bts) = brute_force(&set, &grid);
    assert_eq!((o, d, ts.clone()), (bo, bd, bts));
    assert_eq!(o, 1.0);
    assert_eq!(ts, vec![0.13, 0.63]);
    assert!(d < o);

    let single = &set[..1];
    assert_eq!(ois(single, &grid).unwrap().0, ods(single, &grid).unwrap().0);
}
