use macop::analysis::{continual_metrics, wilcoxon_rank_sum, AlphaMatrix, Verdict};
use proptest::prelude::*;

// two-sided asymptotic Mann-Whitney (tie-corrected, no continuity
// correction) from scipy.stats.mannwhitneyu; W = U + n1 (n1 + 1) / 2
const SCIPY: [(&[f64], &[f64], f64, f64); 4] = [
    (&[0.61, 0.72, 0.55, 0.80, 0.66], &[0.41, 0.52, 0.49, 0.38, 0.60], 39.0, 0.016293603621028527),
    (&[1.0, 2.0, 2.0, 3.0, 3.0, 3.0], &[2.0, 3.0, 4.0, 4.0, 5.0, 5.0, 6.0], 26.5, 0.02353620403872391),
    (&[0.5, 0.5, 0.5], &[0.5, 0.5, 0.5, 0.6], 10.5, 0.3864762307712327),
    (
        &[3.1, 2.7, 4.0, 3.3, 2.9, 3.8, 3.0, 3.5],
        &[3.2, 3.6, 4.1, 3.9, 4.4, 3.7],
        45.0,
        0.05280751141611363,
    ),
];

#[test]
fn rank_sum_matches_reference_values() {
    for (a, b, w, p) in SCIPY {
        let r = wilcoxon_rank_sum(a, b).unwrap();
        assert_eq!(r.rank_sum_a, w);
        assert!((r.p_value - p).abs() < 1e-9 * p, "{} vs {p}", r.p_value);
    }
    assert_eq!(wilcoxon_rank_sum(SCIPY[0].0, SCIPY[0].1).unwrap().verdict, Verdict::Inferior);
    assert_eq!(wilcoxon_rank_sum(SCIPY[1].0, SCIPY[1].1).unwrap().verdict, Verdict::Superior);
    assert_eq!(wilcoxon_rank_sum(SCIPY[3].0, SCIPY[3].1).unwrap().verdict, Verdict::Equivalent);
}

#[test]
fn identical_constant_samples_are_equivalent() {
    let r = wilcoxon_rank_sum(&[0.2; 4], &[0.2; 5]).unwrap();
    assert_eq!((r.p_value, r.verdict), (1.0, Verdict::Equivalent));
    assert!(wilcoxon_rank_sum(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
}

/// Rank sum of `a` from pairwise comparisons: `U + n1 (n1 + 1) / 2`.
fn pairwise_rank_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            u += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    let n1 = a.len() as f64;
    u + n1 * (n1 + 1.0) / 2.0
}

/// Small integer-valued samples so ties are common.
fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..6).prop_map(f64::from), 3..9)
}

proptest! {
    #[test]
    fn rank_sum_equals_pairwise_count(a in sample(), b in sample()) {
        let r = wilcoxon_rank_sum(&a, &b).unwrap();
        prop_assert_eq!(r.rank_sum_a, pairwise_rank_sum(&a, &b));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn swapping_samples_mirrors_the_verdict(a in sample(), b in sample()) {
        let ab = wilcoxon_rank_sum(&a, &b).unwrap();
        let ba = wilcoxon_rank_sum(&b, &a).unwrap();
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((ab.statistic + ba.statistic).abs() < 1e-12);
        let mirrored = match ab.verdict {
            Verdict::Inferior => Verdict::Superior,
            Verdict::Superior => Verdict::Inferior,
            Verdict::Equivalent => Verdict::Equivalent,
        };
        prop_assert_eq!(ba.verdict, mirrored);
    }

    #[test]
    fn rank_sum_is_invariant_to_increasing_affine_maps(
        a in prop::collection::vec(-10.0f64..10.0, 3..10),
        b in prop::collection::vec(-10.0f64..10.0, 3..10),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let f = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        let r = wilcoxon_rank_sum(&a, &b).unwrap();
        let s = wilcoxon_rank_sum(&f(&a), &f(&b)).unwrap();
        // rounding in the map can merge or split near-ties
        prop_assume!(r.rank_sum_a == s.rank_sum_a);
        prop_assert_eq!(r.p_value, s.p_value);
        prop_assert_eq!(r.verdict, s.verdict);
    }

    #[test]
    fn bwt_scales_with_returns_and_ignores_shifts(
        k in 2usize..7,
        vals in prop::collection::vec(0.0f64..1.0, 36),
        tilde in prop::collection::vec(0.0f64..1.0, 6),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let alpha: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if j <= i { vals[i * 6 + j] } else { 0.0 }).collect())
            .collect();
        let m = AlphaMatrix { group_ids: (0..k as u64).collect(), alpha: alpha.clone(), alpha_tilde: Some(tilde[..k].to_vec()) };
        let t = AlphaMatrix {
            group_ids: m.group_ids.clone(),
            alpha: alpha.iter().map(|r| r.iter().map(|v| scale * v + shift).collect()).collect(),
            alpha_tilde: Some(tilde[..k].iter().map(|v| scale * v + shift).collect()),
        };
        let (b0, f0) = continual_metrics(&m).unwrap();
        let (b1, f1) = continual_metrics(&t).unwrap();
        prop_assert!((b1 - scale * b0).abs() < 1e-9);
        prop_assert!((f1.unwrap() - scale * f0.unwrap()).abs() < 1e-9);
    }
}
