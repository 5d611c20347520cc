use proptest::prelude::*;
use xmal::datagen::{MASK, PAD};
use xmal::evaluation::{
    edit_distance, project_2d, retrieval_report, spearman, wer, zero_shot_classify, RetrievalReport,
};
use xmal::numerics::LrSchedule;
use xmal::training::mask_tokens;
use xmal::Tape;

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn raw_rows(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_filter("rows need a usable norm", |rows| {
        rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 0.05)
    })
}

fn paired(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    n.prop_flat_map(move |k| (raw_rows(k..k + 1, d), raw_rows(k..k + 1, d)))
}

fn accs(r: &RetrievalReport) -> (f64, f64) {
    (r.acc_t2s, r.acc_s2t)
}

fn tokens() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..6, 0..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_ignores_a_common_row_permutation(
        (s, t) in paired(2..30, 6),
        perm_seed in any::<u64>(),
    ) {
        let s: Vec<_> = s.iter().map(|r| normalized(r)).collect();
        let t: Vec<_> = t.iter().map(|r| normalized(r)).collect();
        let mut order: Vec<usize> = (0..s.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut xmal::numerics::rng::stream(&[perm_seed]));
        let ps: Vec<_> = order.iter().map(|&i| s[i].clone()).collect();
        let pt: Vec<_> = order.iter().map(|&i| t[i].clone()).collect();
        prop_assert_eq!(accs(&retrieval_report("x", &s, &t).unwrap()), accs(&retrieval_report("x", &ps, &pt).unwrap()));
    }

    #[test]
    fn retrieval_is_invariant_to_positive_rescaling_before_normalization(
        (s, t) in paired(2..30, 6),
        scales in prop::collection::vec(0.01f64..100.0, 30),
    ) {
        let base = retrieval_report("x", &s.iter().map(|r| normalized(r)).collect::<Vec<_>>(), &t.iter().map(|r| normalized(r)).collect::<Vec<_>>()).unwrap();
        let scaled_s: Vec<_> = s.iter().zip(&scales).map(|(r, c)| normalized(&r.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
        let scaled_t: Vec<_> = t.iter().zip(scales.iter().rev()).map(|(r, c)| normalized(&r.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
        prop_assert_eq!(accs(&base), accs(&retrieval_report("x", &scaled_s, &scaled_t).unwrap()));
    }

    #[test]
    fn zero_shot_is_invariant_to_positive_rescaling_before_normalization(
        speech in raw_rows(1..20, 5),
        labels in raw_rows(2..6, 5),
        c in 0.01f64..100.0,
        truth_seed in any::<u64>(),
    ) {
        let k = labels.len();
        let truth: Vec<usize> = (0..speech.len()).map(|i| (xmal::numerics::rng::mix(&[truth_seed, i as u64]) % k as u64) as usize).collect();
        let l: Vec<_> = labels.iter().map(|r| normalized(r)).collect();
        let a = zero_shot_classify("x", &speech.iter().map(|r| normalized(r)).collect::<Vec<_>>(), &truth, &l).unwrap();
        let scaled: Vec<_> = speech.iter().map(|r| normalized(&r.iter().map(|x| x * c).collect::<Vec<_>>())).collect();
        let b = zero_shot_classify("x", &scaled, &truth, &l).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn single_pair_retrieval_is_perfect((s, t) in paired(1..2, 4)) {
        let r = retrieval_report("x", &[normalized(&s[0])], &[normalized(&t[0])]).unwrap();
        prop_assert_eq!(accs(&r), (1.0, 1.0));
    }

    #[test]
    fn self_retrieval_is_perfect(s in raw_rows(1..25, 8)) {
        let s: Vec<_> = s.iter().map(|r| normalized(r)).collect();
        prop_assert_eq!(accs(&retrieval_report("x", &s, &s).unwrap()), (1.0, 1.0));
    }

    #[test]
    fn wer_of_identical_sequences_is_zero(x in prop::collection::vec(0usize..6, 1..12)) {
        prop_assert_eq!(wer(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn wer_is_symmetric_for_equal_lengths(
        (a, b) in (1usize..10).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n)))
    ) {
        prop_assert_eq!(wer(&a, &b).unwrap(), wer(&b, &a).unwrap());
    }

    #[test]
    fn wer_scales_edit_distance_by_reference_length(a in prop::collection::vec(0usize..6, 1..10), b in tokens()) {
        prop_assert_eq!(wer(&a, &b).unwrap(), edit_distance(&a, &b) as f64 / a.len() as f64);
        prop_assert!(wer(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
    }

    #[test]
    fn projection_is_translation_invariant_and_scale_equivariant(
        pts in raw_rows(4..20, 5),
        shift in prop::collection::vec(-3.0f64..3.0, 5),
        c in 0.1f64..10.0,
    ) {
        let p = project_2d(&pts).unwrap();
        prop_assume!(!p.rank_deficient && p.variances[0] > 1.001 * p.variances[1] && p.variances[1] > 1e-6);
        let moved: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let q = project_2d(&moved).unwrap();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let w = project_2d(&scaled).unwrap();
        for i in 0..pts.len() {
            for k in 0..2 {
                prop_assert!((p.coords[i][k] - q.coords[i][k]).abs() < 1e-6);
                prop_assert!((c * p.coords[i][k] - w.coords[i][k]).abs() < 1e-6 * c);
            }
        }
        prop_assert!(p.explained > 0.0 && p.explained <= 1.0 + 1e-12);
        prop_assert!((p.explained - w.explained).abs() < 1e-9);
    }

    #[test]
    fn projection_coordinates_are_centered(pts in raw_rows(3..20, 4)) {
        let p = project_2d(&pts).unwrap();
        for k in 0..2 {
            let m: f64 = p.coords.iter().map(|c| c[k]).sum::<f64>() / pts.len() as f64;
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_yields_unit_norm_for_any_scale(v in prop::collection::vec(-5.0f64..5.0, 1..16), c in 1e-3f64..1e3) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let mut tape = Tape::eval();
        let x = tape.constant(xmal::Tensor::vector(v.iter().map(|x| x * c).collect()));
        let y = tape.l2_normalize(x).unwrap();
        let n = tape.value(y).norm();
        prop_assert!((n - 1.0).abs() < 1e-12);
        let expected = normalized(&v);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rises_through_warmup_then_decays(peak in 1e-5f64..1e-1, warmup in 1u64..500) {
        let s = LrSchedule::new(peak, warmup).unwrap();
        for step in 1..warmup {
            prop_assert!(s.lr_at_step(step + 1) > s.lr_at_step(step));
        }
        prop_assert!((s.lr_at_step(warmup) - peak).abs() <= 1e-15 * peak);
        for step in warmup..warmup + 50 {
            prop_assert!(s.lr_at_step(step + 1) < s.lr_at_step(step));
        }
    }

    #[test]
    fn masking_hides_at_least_one_token(x in prop::collection::vec(4usize..64, 1..20), p in 0.0f64..1.0, key in any::<u64>()) {
        let (input, targets) = mask_tokens(&x, p, key);
        prop_assert!(input.contains(&MASK));
        for i in 0..x.len() {
            if input[i] == MASK {
                prop_assert_eq!(targets[i], x[i]);
            } else {
                prop_assert_eq!(input[i], x[i]);
                prop_assert_eq!(targets[i], PAD);
            }
        }
    }

    #[test]
    fn spearman_is_bounded_and_rank_based(x in prop::collection::vec(-10.0f64..10.0, 3..15), y_seed in any::<u64>()) {
        let y: Vec<f64> = (0..x.len()).map(|i| xmal::numerics::rng::unit_hash(&[y_seed, i as u64])).collect();
        if let Ok(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
            prop_assert!((spearman(&cubed, &y).unwrap() - r).abs() < 1e-12);
        }
    }
}
