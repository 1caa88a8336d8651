use fbe_core::bank::{
    format_csv, l2_normalize_rows, mean_vector, parse_csv, read_bank, write_bank, FeatureBank,
    LinearHead,
};
use fbe_core::fbe::{clamp_bank, clamp_bank_with_stats, enhance, fit_boundaries};
use fbe_core::kernel::squared_distance;
use fbe_core::metrics::{auroc, fpr_at_tpr, EvalSet};
use fbe_core::scores::{
    clip_above, energy_score, knn_score, maxlogit_from_logits, maxlogit_score, msp_from_logits,
    react_threshold, score, ScoreKind, ScoreSpec,
};
use fbe_core::synth::{generate, SynthConfig};
use proptest::prelude::*;

fn bank_strategy(max_n: usize, max_m: usize) -> impl Strategy<Value = FeatureBank> {
    (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
        prop::collection::vec(-100.0f32..100.0, n * m)
            .prop_map(move |data| FeatureBank::new(n, m, data, None).unwrap())
    })
}

fn map_bank(b: &FeatureBank, f: impl Fn(usize, f32) -> f32) -> FeatureBank {
    let m = b.m();
    let data = b
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i % m, v))
        .collect();
    FeatureBank::new(b.n(), m, data, None).unwrap()
}

fn knn_brute(bank: &FeatureBank, queries: &FeatureBank, k: usize) -> Vec<f64> {
    let rows = l2_normalize_rows(bank);
    l2_normalize_rows(queries)
        .rows()
        .map(|q| {
            let mut d: Vec<f32> = rows.rows().map(|r| squared_distance(q, r)).collect();
            d.sort_by(f32::total_cmp);
            -(d[k - 1] as f64).sqrt()
        })
        .collect()
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn close(a: f32, b: f32, tol: f64) -> bool {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_bank_round_trip(bank in bank_strategy(40, 12), labelled in any::<bool>()) {
        let bank = if labelled {
            let labels = (0..bank.n() as i32).map(|i| i % 3).collect();
            bank.with_labels(labels).unwrap()
        } else {
            bank
        };
        let mut buf = Vec::new();
        write_bank(&bank, &mut buf).unwrap();
        let back = read_bank(&mut buf.as_slice()).unwrap();
        prop_assert_eq!((back.n(), back.m()), (bank.n(), bank.m()));
        prop_assert!(back.data().iter().zip(bank.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.labels(), bank.labels());
    }

    #[test]
    fn csv_text_round_trip(bank in bank_strategy(20, 6)) {
        let text = format_csv(&bank, false);
        let back = parse_csv(&text, false).unwrap();
        prop_assert_eq!(back.data(), bank.data());
    }

    #[test]
    fn mean_translation(bank in bank_strategy(50, 8), c in -10.0f32..10.0) {
        let shifted = map_bank(&bank, |_, v| v + c);
        let a = mean_vector(&bank);
        let b = mean_vector(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x + c as f64 - y).abs() <= 1e-4 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn normalize_idempotent(bank in bank_strategy(30, 8)) {
        let once = l2_normalize_rows(&bank);
        let twice = l2_normalize_rows(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn clamp_contains_and_is_idempotent(bank in bank_strategy(200, 16), lambda in 0.0f64..=100.0) {
        let b = fit_boundaries(&bank, lambda).unwrap();
        let once = clamp_bank(&bank, &b).unwrap();
        for row in once.rows() {
            for (j, &v) in row.iter().enumerate() {
                prop_assert!(b.lower(j) <= v && v <= b.upper(j));
            }
        }
        let again = clamp_bank_with_stats(&once, &b).unwrap();
        prop_assert_eq!(again.total_clamped(), 0);
        prop_assert_eq!(again.bank.data(), once.data());
    }

    #[test]
    fn identity_at_full_retention(bank in bank_strategy(200, 16)) {
        let (out, _) = enhance(&bank, 100.0).unwrap();
        prop_assert!(out.data().iter().zip(bank.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn retention_monotone(bank in bank_strategy(150, 8), l1 in 0.0f64..=100.0, l2 in 0.0f64..=100.0) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (a, ba) = enhance(&bank, lo).unwrap();
        let (b, bb) = enhance(&bank, hi).unwrap();
        for j in 0..bank.m() {
            prop_assert!(ba.d_star()[j] <= bb.d_star()[j]);
        }
        for ((&z, &x), &y) in bank.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((y - z).abs() <= (x - z).abs());
        }
    }

    #[test]
    fn retention_rate(bank in bank_strategy(300, 8), lambda in 0.0f64..=100.0) {
        let b = fit_boundaries(&bank, lambda).unwrap();
        let n = bank.n() as f64;
        for j in 0..bank.m() {
            let kept = bank
                .rows()
                .filter(|r| (r[j] as f64 - b.mu()[j] as f64).abs() <= b.d_star()[j] as f64)
                .count() as f64;
            prop_assert!((kept / n - lambda / 100.0).abs() <= 1.0 / n + 1e-12,
                "dim {j}: kept {kept} of {n} at lambda {lambda}");
        }
    }

    #[test]
    fn translation_and_scaling_equivariance(
        bank in bank_strategy(100, 6),
        lambda in 0.0f64..=100.0,
        c in -5.0f32..5.0,
        s in 0.25f32..4.0,
    ) {
        let shifted = map_bank(&bank, |_, v| v + c);
        let (base, bb) = enhance(&bank, lambda).unwrap();
        let (moved, _) = enhance(&shifted, lambda).unwrap();
        for (&x, &y) in base.data().iter().zip(moved.data()) {
            prop_assert!(close(x + c, y, 1e-5), "{x} + {c} vs {y}");
        }
        let scaled = map_bank(&bank, |j, v| v * s * (j + 1) as f32);
        let bs = fit_boundaries(&scaled, lambda).unwrap();
        for j in 0..bank.m() {
            let expect = bb.d_star()[j] * s * (j + 1) as f32;
            prop_assert!(close(expect, bs.d_star()[j], 1e-5), "{expect} vs {}", bs.d_star()[j]);
        }
    }

    #[test]
    fn knn_matches_brute_force(bank in bank_strategy(200, 8), q in bank_strategy(10, 8), k in 1usize..20) {
        let m = bank.m().min(q.m());
        let cut = |b: &FeatureBank| {
            let rows: Vec<Vec<f32>> = b.rows().map(|r| r[..m].to_vec()).collect();
            FeatureBank::from_rows(&rows).unwrap()
        };
        let (bank, q) = (cut(&bank), cut(&q));
        let k = k.min(bank.n());
        prop_assert_eq!(knn_score(&bank, &q, k).unwrap().scores, knn_brute(&bank, &q, k));
    }

    #[test]
    fn knn_scale_invariant_and_monotone_in_k(bank in bank_strategy(60, 6), s in 0.5f32..8.0) {
        let q = FeatureBank::from_rows(&[bank.row(0).to_vec()]).unwrap();
        let k = bank.n();
        let scaled = map_bank(&bank, |_, v| v * s);
        let a = knn_score(&bank, &q, k).unwrap().scores[0];
        let b = knn_score(&scaled, &q, k).unwrap().scores[0];
        prop_assert!((a - b).abs() <= 1e-6);
        let mut prev = f64::INFINITY;
        for kk in 1..=k {
            let v = knn_score(&bank, &q, kk).unwrap().scores[0];
            prop_assert!(v <= prev && v <= 0.0);
            prev = v;
        }
    }

    #[test]
    fn energy_dominates_maxlogit(
        w in prop::collection::vec(-2.0f32..2.0, 12),
        bias in prop::collection::vec(-2.0f32..2.0, 3),
        q in bank_strategy(10, 4),
    ) {
        let head = LinearHead::new(3, 4, w, bias).unwrap();
        let q = FeatureBank::from_rows(&q.rows().map(|r| [r[0]; 4]).collect::<Vec<_>>()).unwrap();
        let e = energy_score(&head, &q, 1.0).unwrap().scores;
        let x = maxlogit_score(&head, &q).unwrap().scores;
        for ((a, b), row) in e.iter().zip(&x).zip(q.rows()) {
            prop_assert!(a >= b);
            // The margin is ln(1 + sum exp(l_i - max)); it only vanishes in f64
            // once every other logit trails the max by more than ~36.
            let mut l = head.logits(row);
            l.sort_by(f64::total_cmp);
            if l[2] - l[1] < 30.0 {
                prop_assert!(a > b, "{a} vs {b} with logits {l:?}");
            }
        }
    }

    #[test]
    fn msp_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        prop_assert!((msp_from_logits(&logits) - msp_from_logits(&shifted)).abs() <= 1e-12);
        prop_assert!((maxlogit_from_logits(&shifted) - maxlogit_from_logits(&logits) - c).abs() <= 1e-9);
    }

    #[test]
    fn react_clip_bounded_and_idempotent(bank in bank_strategy(80, 6), p in 0.01f64..=100.0) {
        let tau = react_threshold(&bank, p).unwrap();
        let once = clip_above(&bank, tau);
        prop_assert!(once.data().iter().all(|&v| v <= tau));
        let twice = clip_above(&once, tau);
        prop_assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn full_retention_composes_with_every_score(bank in bank_strategy(40, 4), q in bank_strategy(8, 4)) {
        let m = bank.m().min(q.m());
        let trim = |b: &FeatureBank| {
            let rows: Vec<Vec<f32>> = b.rows().map(|r| r[..m].to_vec()).collect();
            FeatureBank::from_rows(&rows).unwrap()
        };
        let labels: Vec<i32> = (0..bank.n() as i32).map(|i| i % 2).collect();
        let bank = trim(&bank).with_labels(labels).unwrap();
        let q = trim(&q);
        let head = LinearHead::new(2, m, (0..2 * m).map(|i| i as f32 * 0.01).collect(), vec![0.0, 0.1]).unwrap();
        let (enhanced, _) = enhance(&bank, 100.0).unwrap();
        for kind in ScoreKind::ALL {
            let spec = if kind.needs_k() { ScoreSpec::new(kind).with_k(1) } else { ScoreSpec::new(kind) };
            let a = score(&spec, &bank, Some(&head), &q);
            let b = score(&spec, &enhanced, Some(&head), &q);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.scores, b.scores),
                (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
                (a, b) => prop_assert!(false, "{kind}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn auroc_matches_pairwise(
        id in prop::collection::vec(-5i32..5, 1..300),
        ood in prop::collection::vec(-5i32..5, 1..300),
    ) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let e = EvalSet::new(id.clone(), ood.clone()).unwrap();
        let a = auroc(&e);
        prop_assert!((a - pairwise_auroc(&id, &ood)).abs() <= 1e-12);
        prop_assert!((a + auroc(&e.swapped()) - 1.0).abs() <= 1e-12);
        let cubed = EvalSet::new(
            id.iter().map(|v| v.powi(3) + 1.0).collect(),
            ood.iter().map(|v| v.powi(3) + 1.0).collect(),
        ).unwrap();
        prop_assert_eq!(auroc(&cubed), a);
    }

    #[test]
    fn fpr_nondecreasing_in_tpr(
        id in prop::collection::vec(-50.0f64..50.0, 1..100),
        ood in prop::collection::vec(-50.0f64..50.0, 1..100),
        t1 in 0.01f64..=1.0,
        t2 in 0.01f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let e = EvalSet::new(id, ood).unwrap();
        prop_assert!(fpr_at_tpr(&e, lo).unwrap() <= fpr_at_tpr(&e, hi).unwrap());
    }
}

#[test]
fn synthetic_rescoring_matches_brute_force() {
    for seed in 0..3 {
        let data = generate(&SynthConfig::new(seed)).unwrap();
        assert!(data.train.n() <= 2000);
        let (enhanced, _) = enhance(&data.train, 95.0).unwrap();
        for bank in [&data.train, &enhanced] {
            for q in [&data.id_test, &data.near_ood] {
                assert_eq!(
                    knn_score(bank, q, 10).unwrap().scores,
                    knn_brute(bank, q, 10)
                );
            }
        }
    }
}

#[test]
fn synthetic_without_tails_is_fixed_by_full_retention() {
    let cfg = SynthConfig {
        heavy_tail_frac: 0.0,
        ..SynthConfig::new(7)
    };
    let data = generate(&cfg).unwrap();
    let (out, _) = enhance(&data.train, 100.0).unwrap();
    assert_eq!(out.data(), data.train.data());
    assert_eq!(out.labels(), data.train.labels());
}
