mod common;

use farebench::autodiff::{Tape, Tensor2};
use farebench::dataset::{read_trips, split_80_20, ColumnTable};
use farebench::eval::{binwise_mae, calibration_curve, ece_from_curve, regression_metrics};
use farebench::gbdt::{fit, leaf_weight, FeatureMatrix, GbdtConfig};
use farebench::perturb::{inject_gaussian, ks_p_value, ks_statistic, ks_two_sample, NoiseSpec};
use farebench::preprocess::{
    apply_normalizer, denormalize, fit_normalizer, haversine_km, iqr_filter, IqrFilterConfig,
};
use farebench::synth;
use farebench::tslite::block_period;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn coord() -> impl Strategy<Value = (f64, f64)> {
    (-89.9f64..89.9, -179.9f64..179.9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_is_a_partition(n in 5usize..400, seed in any::<u64>()) {
        let s = split_80_20(n, seed).unwrap();
        let mut all: Vec<usize> = s.train_rows.iter().chain(&s.test_rows).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.train_rows.len(), n * 8 / 10);
    }

    #[test]
    fn haversine_is_symmetric((a, b) in coord(), (c, d) in coord()) {
        prop_assert_eq!(haversine_km(a, b, c, d).unwrap(), haversine_km(c, d, a, b).unwrap());
    }

    #[test]
    fn haversine_triangle_inequality(p in coord(), q in coord(), r in coord()) {
        let d = |x: (f64, f64), y: (f64, f64)| haversine_km(x.0, x.1, y.0, y.1).unwrap();
        prop_assert!(d(p, r) <= d(p, q) + d(q, r) + 1e-6);
    }

    #[test]
    fn lambda_shrinks_leaf_weights(g in -100.0f64..100.0, h in 1.0f64..50.0, l1 in 0.0f64..10.0, dl in 0.0f64..10.0) {
        prop_assert!(leaf_weight(g, h, l1 + dl).abs() <= leaf_weight(g, h, l1).abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ks_invariant_under_increasing_maps(
        a in prop::collection::vec(-3.0f64..3.0, 1..60),
        b in prop::collection::vec(-3.0f64..3.0, 1..60),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let d = ks_statistic(&a, &b);
        let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        let affine = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        prop_assert_eq!(ks_statistic(&exp(&a), &exp(&b)), d);
        prop_assert_eq!(ks_statistic(&affine(&a), &affine(&b)), d);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn normalization_inverts(rows in prop::collection::vec((-1e3f64..1e3, -1.0f64..1.0), 5..80)) {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let t = ColumnTable::from_columns(vec!["x".into(), "y".into()], vec![x, y]).unwrap();
        let train: Vec<usize> = (0..t.n_rows()).collect();
        let stats = fit_normalizer(&t, &train).unwrap();
        let back = denormalize(&apply_normalizer(&t, &stats).unwrap(), &stats).unwrap();
        for c in ["x", "y"] {
            let s = stats.get(c).unwrap();
            prop_assume!(!s.constant);
            for (a, b) in t.column(c).unwrap().iter().zip(back.column(c).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(s.std));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(vals in prop::collection::vec(-20.0f64..20.0, 12), shift in -50.0f64..50.0) {
        let x = Tensor2::new(3, 4, vals.clone()).unwrap();
        let shifted = Tensor2::new(3, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let (va, vb) = (tape.value(sa).clone(), tape.value(sb).clone());
        for r in 0..3 {
            prop_assert!((va.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (p, q) in va.data().iter().zip(vb.data()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn metrics_are_permutation_invariant(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 10..60), seed in any::<u64>()) {
        let (pred, actual): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut common::rng_for(seed));
        let pp: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| actual[i]).collect();
        let (m1, m2) = (regression_metrics(&pred, &actual).unwrap(), regression_metrics(&pp, &pa).unwrap());
        prop_assert!((m1.mae - m2.mae).abs() <= 1e-9 && (m1.rmse - m2.rmse).abs() <= 1e-9 && (m1.r2.unwrap_or(0.0) - m2.r2.unwrap_or(0.0)).abs() <= 1e-9);
        let (c1, c2) = (calibration_curve(&pred, &actual, 10).unwrap(), calibration_curve(&pp, &pa, 10).unwrap());
        prop_assert!((c1.ece - c2.ece).abs() <= 1e-9);
        let (b1, b2) = (binwise_mae(&pred, &actual, 10).unwrap(), binwise_mae(&pp, &pa, 10).unwrap());
        prop_assert_eq!(b1.len(), b2.len());
        for (x, y) in b1.iter().zip(&b2) {
            prop_assert!(x.count == y.count && (x.mae - y.mae).abs() <= 1e-9);
        }
    }

    #[test]
    fn report_metrics_are_internally_consistent(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 10..200), n_bins in 1usize..11) {
        let (pred, actual): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let m = regression_metrics(&pred, &actual).unwrap();
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-9 * m.mse.max(1.0));
        let bins = binwise_mae(&pred, &actual, n_bins).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), pred.len());
        let pooled = bins.iter().map(|b| b.mae * b.count as f64).sum::<f64>() / pred.len() as f64;
        prop_assert!((pooled - m.mae).abs() <= 1e-9);
        let curve = calibration_curve(&pred, &actual, n_bins).unwrap();
        prop_assert!(curve.ece >= 0.0);
        prop_assert!((ece_from_curve(&curve.bins) - curve.ece).abs() <= 1e-12);
    }

    #[test]
    fn period_is_scale_invariant(vals in prop::collection::vec(-5.0f64..5.0, 40), c in 1e-3f64..1e3) {
        let w = Tensor2::new(10, 4, vals.clone()).unwrap();
        let scaled = Tensor2::new(10, 4, vals.iter().map(|v| v * c).collect()).unwrap();
        prop_assert_eq!(block_period(&w), block_period(&scaled));
    }

    #[test]
    fn zero_eta_predicts_base_score(y in prop::collection::vec(-10.0f64..10.0, 5..50)) {
        let x = FeatureMatrix::from_columns(vec![(0..y.len()).map(|i| i as f64).collect()]).unwrap();
        let cfg = GbdtConfig { eta: 0.0, n_rounds: 3, ..GbdtConfig::default() };
        let res = fit(&x, &y, &x, &y, &cfg).unwrap();
        for p in res.booster.predict(&x).unwrap() {
            prop_assert_eq!(p, res.booster.base_score);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_ingest_matches_whole_file(n in 20usize..300, seed in any::<u64>(), chunk in 1usize..50) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trips.csv");
        synth::write_raw_trip_csv(&path, n, seed).unwrap();
        let (whole, s1) = read_trips(&path, 1_000_000).unwrap();
        let (chunked, s2) = read_trips(&path, chunk).unwrap();
        prop_assert_eq!(whole, chunked);
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn a_malformed_row_adds_one_rejection(n in 20usize..200, seed in any::<u64>(), kind in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trips.csv");
        let (mut text, _) = synth::raw_trip_csv(n, seed);
        std::fs::write(&path, &text).unwrap();
        let (before, s1) = read_trips(&path, 64).unwrap();
        text.push_str(match kind {
            0 => "2015-01-05 10:00:00,-73.98,91.0,-73.95,40.75,1,9.5\n",
            1 => "not a timestamp,-73.98,40.76,-73.95,40.75,1,9.5\n",
            _ => "2015-01-05 10:00:00,-73.98\n",
        });
        std::fs::write(&path, &text).unwrap();
        let (after, s2) = read_trips(&path, 64).unwrap();
        prop_assert_eq!(before, after);
        prop_assert_eq!(s2.rows_rejected, s1.rows_rejected + 1);
    }

    #[test]
    fn disjoint_noise_commutes(n in 10usize..200, seed in any::<u64>()) {
        let t = synth::rank2_table(n, seed).unwrap();
        let spec = |c: &str, s: u64| NoiseSpec { column: c.into(), level: 0.3, seed: s };
        let a = [spec("f0", 1), spec("f2", 2)];
        let b = [spec("f1", 3), spec("f4", 4)];
        let ab = inject_gaussian(&inject_gaussian(&t, &a).unwrap(), &b).unwrap();
        let ba = inject_gaussian(&inject_gaussian(&t, &b).unwrap(), &a).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn fare_and_bounds_filter_is_idempotent(n in 50usize..400, seed in any::<u64>()) {
        let mut t = synth::deterministic_fare_table(n, seed).unwrap();
        let fares: Vec<f64> = t.column("fare_amount").unwrap().iter().enumerate()
            .map(|(i, f)| if i % 17 == 0 { 0.0 } else { *f }).collect();
        t.set_column("fare_amount", fares).unwrap();
        let cfg = IqrFilterConfig::default();
        let (once, _) = iqr_filter(&t, &[], &cfg).unwrap();
        let (twice, report) = iqr_filter(&once, &[], &cfg).unwrap();
        prop_assert_eq!(report.bounds_removed + report.fare_removed, 0);
        prop_assert_eq!(once.n_rows(), twice.n_rows());
    }
}

#[test]
fn p_value_decreases_in_statistic() {
    for &(n1, n2) in &[(8, 8), (50, 80), (5000, 5000)] {
        let ps: Vec<f64> = (0..=200).map(|i| ks_p_value(i as f64 / 200.0, n1, n2)).collect();
        assert!(ps.windows(2).all(|w| w[1] <= w[0]), "{n1}x{n2}");
    }
}

#[test]
fn same_distribution_false_positive_rate() {
    let mut hits = 0;
    for trial in 0..50 {
        let mut r = common::rng_for(1000 + trial);
        let mut draw = || -> Vec<f64> { (0..5000).map(|_| StandardNormal.sample(&mut r)).collect() };
        let (a, b) = (draw(), draw());
        if ks_two_sample(&a, &b).unwrap().significant {
            hits += 1;
        }
    }
    let rate = hits as f64 / 50.0;
    assert!((0.0..=0.14).contains(&rate), "false-positive rate {rate}");
}

#[test]
fn dropout_is_identity_in_eval_and_unbiased_in_train() {
    let x = Tensor2::filled(1, 1000, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let e = tape.dropout(v, 0.3, 5, false).unwrap();
    assert_eq!(tape.value(e), &x);
    let mut total = 0.0;
    for seed in 0..10 {
        let d = tape.dropout(v, 0.3, seed, true).unwrap();
        total += tape.value(d).data().iter().sum::<f64>();
    }
    let mean = total / 10_000.0;
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
}

#[test]
fn backward_is_linear_in_outputs() {
    let mut r = common::rng_for(31);
    let x = common::rand_tensor(&mut r, 4, 3);
    let w = common::rand_tensor(&mut r, 3, 2);
    let grad_of = |pick: Option<usize>| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let out = tape.tanh(h).unwrap();
        let loss = match pick {
            None => tape.sum(out).unwrap(),
            Some(k) => {
                let idx = vec![Some(k)];
                let one = tape.gather(out, idx, 1, 1).unwrap();
                tape.sum(one).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(wv).unwrap().clone()
    };
    let total = grad_of(None);
    let mut acc = Tensor2::zeros(3, 2);
    for k in 0..8 {
        for (a, g) in acc.data_mut().iter_mut().zip(grad_of(Some(k)).data()) {
            *a += g;
        }
    }
    for (a, b) in acc.data().iter().zip(total.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut r = common::rng_for(41);
        let x = common::rand_tensor(&mut r, 5, 4);
        let mut tape = Tape::new();
        let v = tape.param(x);
        let d = tape.dropout(v, 0.5, 9, true).unwrap();
        let s = tape.softmax_rows(d).unwrap();
        let l = tape.sum(s).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let l2 = tape.mean(sq).unwrap();
        let loss = tape.add(l, l2).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).clone(), tape.grad(v).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_history_contracts() {
    use farebench::denoiser::{default_train_config, denoise, fit_denoiser, AutoencoderSpec};
    let clean = synth::rank2_table(400, 3).unwrap();
    let specs: Vec<NoiseSpec> = clean
        .names()
        .iter()
        .map(|c| NoiseSpec { column: c.clone(), level: 0.1, seed: 1 })
        .collect();
    let noisy = inject_gaussian(&clean, &specs).unwrap();
    let mut cfg = default_train_config();
    cfg.max_epochs = 30;
    cfg.patience = 3;
    cfg.batch_size = 64;
    let run = || fit_denoiser(&noisy, &clean, &AutoencoderSpec::default(), &cfg).unwrap();
    let (model, h1) = run();
    let (_, h2) = run();
    assert_eq!(h1, h2);
    let min = h1.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!((h1.best_val_loss - min).abs() <= 1e-12);
    assert!(h1.epochs.len() <= cfg.max_epochs);
    if h1.stopped_early {
        assert!(h1.epochs.len() > cfg.patience);
    }
    let out = denoise(&model, &noisy).unwrap();
    assert_eq!(out.names(), noisy.names());
    assert_eq!(out.n_rows(), noisy.n_rows());
}

#[test]
fn selected_round_has_minimum_validation_rmse() {
    let t = synth::deterministic_fare_table(500, 4).unwrap();
    let cols: Vec<Vec<f64>> = ["pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude"]
        .iter()
        .map(|c| t.column(c).unwrap().to_vec())
        .collect();
    let y = t.column("fare_amount").unwrap().to_vec();
    let (train, valid): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|i| i % 5 != 0);
    let pick = |rows: &[usize]| {
        let x = FeatureMatrix::from_columns(cols.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect()).unwrap();
        (x, rows.iter().map(|&i| y[i]).collect::<Vec<_>>())
    };
    let ((tx, ty), (vx, vy)) = (pick(&train), pick(&valid));
    let cfg = GbdtConfig { n_rounds: 80, early_stop_rounds: 5, ..GbdtConfig::default() };
    let res = fit(&tx, &ty, &vx, &vy, &cfg).unwrap();
    let min = res.val_rmse.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((res.val_rmse[res.best_round] - min).abs() <= 1e-12);
    assert_eq!(res.booster.trees.len(), res.best_round + 1);
    assert!(res.booster.trees.iter().all(|t| t.depth() <= cfg.max_depth));
}
