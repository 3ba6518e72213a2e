use krasovskii::certify::{
    check_pointwise_dissipation, check_right_growth, check_sandwich, expiss_to_two_inequality, left_contraction_residual,
    margin_left, margin_lkf_wise, margin_right, right_margin_composite, robustness_margin_example2, rfc_bound,
    two_inequality_to_expiss, Example2Margins, StratifiedSampler, Verdict, EVIDENCE_NOTE,
};
use krasovskii::functionals::{Functional, Gain, GrowthMatrix, HypothesisConstants};
use krasovskii::systems::make_example1;
use krasovskii::Error;
use proptest::prelude::*;

fn constants(a_upper: f64, a: f64, sigma: f64, pm: f64, pmax: f64) -> HypothesisConstants {
    HypothesisConstants::new(a_upper, a, sigma, GrowthMatrix::with_extremes(pm, pmax).unwrap(), Gain::square()).unwrap()
}

fn eigen_pair() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..5.0, 1.0f64..4.0).prop_map(|(pm, k)| (pm, pm * k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn right_margin_matches_composite(a in 0.01f64..5.0, sigma in 0.01f64..10.0, (pm, pmax) in eigen_pair(), delay in 0.0f64..5.0) {
        let r = margin_right(&constants(10.0, a, sigma, pm, pmax), delay).unwrap();
        let composite = right_margin_composite(a, sigma, pm, pmax, delay);
        prop_assert!((r.c_bar - composite).abs() <= 4.0 * f64::EPSILON * composite);
        prop_assert!(r.c_bar > 0.0);
    }

    #[test]
    fn left_margin_contraction_root(al in 0.2f64..2.0, k in 1.0f64..3.0, sigma in 0.5f64..5.0, delay in 0.0f64..3.0) {
        let h = constants(al * k, 0.5, sigma, 1.0, 1.0).with_a_lower(al).unwrap();
        let r = margin_left(&h, delay).unwrap();
        let (lmin, lstar) = (r.lambda_min.unwrap(), r.lambda_star.unwrap());
        let q = r.q.unwrap() as f64;
        let eps = r.epsilon.unwrap();
        let res = |l: f64| left_contraction_residual(al, al * k, sigma, 1.0, 1.0, q, eps, l);
        let scale = 2.0 * k;
        prop_assert!(res(lstar) > 0.0);
        prop_assert!(res(lmin) <= 1e-9 * scale);
        prop_assert!(lmin < lstar && lstar < 1.0);
        // The constants cancel: λ_min² = 3/4, lowered slightly when q is rounded up.
        prop_assert!(lmin * lmin <= 0.75 * (1.0 + 1e-12));
        prop_assert!(r.q.unwrap() >= 1 && r.c_bar > 0.0);
        prop_assert!(r.decay.unwrap() > 0.0);
    }

    #[test]
    fn margins_shrink_with_delay(a in 0.1f64..2.0, sigma in 0.5f64..4.0, d1 in 0.0f64..4.0, dd in 0.0f64..2.0) {
        let d2 = d1 + dd;
        prop_assert!(margin_lkf_wise(1.0, a, d2).unwrap() <= margin_lkf_wise(1.0, a, d1).unwrap());
        let h = constants(3.0, a, sigma, 1.0, 1.0);
        prop_assert!(margin_right(&h, d2).unwrap().c_bar <= margin_right(&h, d1).unwrap().c_bar);
        let hl = h.clone().with_a_lower(1.0).unwrap();
        prop_assert!(margin_left(&hl, d2).unwrap().c_bar <= margin_left(&hl, d1).unwrap().c_bar);
    }

    #[test]
    fn left_margin_shrinks_with_upper_constant(au in 1.0f64..3.0, extra in 0.0f64..2.0, delay in 0.0f64..2.0) {
        let small = constants(au, 0.5, 3.0, 1.0, 1.0).with_a_lower(1.0).unwrap();
        let large = constants(au + extra, 0.5, 3.0, 1.0, 1.0).with_a_lower(1.0).unwrap();
        prop_assert!(margin_left(&large, delay).unwrap().c_bar <= margin_left(&small, delay).unwrap().c_bar);
    }

    #[test]
    fn converse_envelope_dominates(k in 1.0f64..20.0, eta in 0.01f64..3.0, delay in 0.0f64..5.0, lambda in 0.01f64..0.99) {
        let two = expiss_to_two_inequality(k, eta, delay, lambda).unwrap();
        let back = two_inequality_to_expiss(two.ell, two.horizon, lambda).unwrap();
        for i in 0..=200 {
            let t = two.horizon * i as f64 / 200.0;
            prop_assert!(back.k * (-back.eta * t).exp() >= k * (-eta * t).exp() * (1.0 - 1e-12));
        }
        prop_assert!(back.eta <= eta * (1.0 + 1e-12));
        prop_assert!(back.gain_factor > 1.0);
    }

    #[test]
    fn reach_bound_grows_with_radius(r1 in 0.0f64..5.0, dr in 0.0f64..5.0, a in 0.05f64..2.0) {
        let g = Gain::square();
        let ab = Gain::power(3.0, 2.0).unwrap();
        let lo = rfc_bound(&g, &ab, 0.0, a, &g, 0.0, r1, 2.0).unwrap();
        let hi = rfc_bound(&g, &ab, 0.0, a, &g, 0.0, r1 + dr, 2.0).unwrap();
        prop_assert!(lo <= hi && lo >= r1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checks_are_deterministic(seed in any::<u64>()) {
        let sys = make_example1(1.0).unwrap();
        let v = Functional::benchmark_lkf();
        let s = StratifiedSampler::for_system(seed, &sys);
        let g = Gain::square();
        let a = check_pointwise_dissipation(&sys, &v, 1.0, 0.0, &g, &s, 300).unwrap();
        let b = check_pointwise_dissipation(&sys, &v, 1.0, 0.0, &g, &s, 300).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.violated(), a.worst_margin > a.tolerance);
        prop_assert_eq!(a.violated(), a.verdict == Verdict::Violated);
    }
}

#[test]
fn witness_is_the_worst_sample() {
    let sys = make_example1(1.0).unwrap();
    let s = StratifiedSampler::for_system(5, &sys);
    let r = check_right_growth(&sys, &GrowthMatrix::identity(2), 0.1, &Gain::square(), &s, 2000).unwrap();
    let w = r.witness.as_ref().expect("tight constant is violated");
    assert_eq!(Some(w.index), r.worst_index);
    assert_eq!(w.residual, r.worst_residual);
    assert!(r.text().contains("violated"));
}

#[test]
fn clean_reports_carry_the_evidence_note() {
    let sys = make_example1(1.0).unwrap();
    let s = StratifiedSampler::for_system(5, &sys);
    let r = check_sandwich(&Functional::benchmark_lkf(), Some(1.0), 3.0, 2.0, &s, 500).unwrap();
    assert!(!r.violated());
    assert!(r.text().contains(EVIDENCE_NOTE));
}

#[test]
fn margin_table_rows() {
    let m = robustness_margin_example2(1.0).unwrap();
    assert_eq!(m.csv_record().len(), Example2Margins::CSV_HEADER.len());
    assert!((m.discrepancy_ratio() - 3.0).abs() < 1e-2);
    assert_eq!(m.combined, m.eps1.max(m.eps2_left_margin));
}

#[test]
fn reach_bound_rejects_unsupported_gains() {
    let g = Gain::custom(|s: f64| s.powi(2) + s).unwrap();
    let r = rfc_bound(&g, &Gain::square(), 0.0, 1.0, &Gain::square(), 0.0, 1.0, 1.0);
    assert!(matches!(r, Err(Error::Unsupported(_))));
}
