use krasovskii::histories::random_history;
use krasovskii::systems::{make_example1, make_example2, make_example3, make_linear_baseline};
use krasovskii::{History, HistoryFunction, InputSignal, UncertaintyPair};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn benchmark_growth_bounds(seed in any::<u64>(), norm in 0.01f64..20.0, m in 0usize..9, v in -20.0f64..20.0) {
        let sys = make_example1(1.0).unwrap();
        let phi = random_history(seed, 2, 1.0, norm, m);
        let f = sys.eval(&phi, &[v]);
        let form = dot(&phi.current(), &f);
        let scale = phi.sup_norm().powi(2) + v * v;
        let tol = 1e-9 * (1.0 + form.abs() + scale);
        prop_assert!(form <= scale + tol);
        prop_assert!(form >= -3.0 * scale - tol);
    }

    #[test]
    fn damped_benchmark_breaks_every_left_bound(m in 1.0f64..1e4) {
        let sys = make_example3(1.0).unwrap();
        // φ = (0, s) gives φ(0)ᵀf = −2s² − s⁴.
        let s = (m.sqrt() * 2.0).max(2.0);
        let phi = HistoryFunction::constant(1.0, &[0.0, s]);
        let form = dot(&phi.current(), &sys.eval(&phi, &[0.0]));
        prop_assert!(form < -m * s * s);
    }

    #[test]
    fn window_sup_is_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..2.0, d in 0.0f64..2.0, seed in any::<u64>()) {
        let (t1, t2) = (a.min(b), a.max(b));
        let inputs = [
            InputSignal::Sinusoid { amplitude: vec![1.0, 0.5], omega: 1.7, phase: 0.3 },
            InputSignal::Step { at: 2.0, before: vec![0.2, 0.0], after: vec![1.0, 1.0] },
            InputSignal::Noise { seed, dim: 2, amplitude: 1.5, hold: 0.25 },
        ];
        for u in &inputs {
            prop_assert!(u.window_sup(t1 - c.min(t1), t2 + d) >= u.window_sup(t1, t2) - 1e-12);
        }
    }

    #[test]
    fn shifted_input_reads_ahead(t in 0.0f64..10.0, offset in 0.0f64..5.0) {
        let u = InputSignal::Sinusoid { amplitude: vec![2.0], omega: 0.9, phase: 0.1 };
        prop_assert_eq!(u.clone().shifted(offset).eval(t), u.eval(t + offset));
    }
}

#[test]
fn fields_vanish_at_the_origin() {
    let zero = HistoryFunction::zero(2, 1.0);
    for sys in [
        make_example1(1.0).unwrap(),
        make_example2(1.0, 0.1, UncertaintyPair::zero()).unwrap(),
        make_example3(1.0).unwrap(),
    ] {
        assert_eq!(sys.eval(&zero, &[0.0]), vec![0.0, 0.0]);
    }
    let lin = make_linear_baseline(1.0, 0.5, 1.0).unwrap();
    assert_eq!(lin.eval(&HistoryFunction::zero(1, 1.0), &[0.0]), vec![0.0]);
}

#[test]
fn uncertainty_bound_is_probed() {
    let bounded = UncertaintyPair::new(|p: &dyn History| 0.5 * p.current()[0], |p: &dyn History| p.delayed()[1]);
    assert!(bounded.check_bound(1.0).is_ok());
    let unbounded = UncertaintyPair::new(|p: &dyn History| 2.0 * p.current()[0], |_: &dyn History| 0.0);
    assert!(unbounded.check_bound(1.0).is_err());
    assert!(make_example2(1.0, 0.1, unbounded).is_err());
}

#[test]
fn uncertain_benchmark_reads_delayed_first_state() {
    let phi = HistoryFunction::new(1.0, vec![-1.0, 0.0], vec![vec![2.0, 3.0], vec![0.5, -1.0]]).unwrap();
    let f = make_example2(1.0, 0.0, UncertaintyPair::zero()).unwrap().eval(&phi, &[0.0]);
    let r = 0.25 + 9.0;
    assert_eq!(f[0], -0.25 + 2.0 - r);
    assert_eq!(f[1], 2.0 - 0.5 * r);
}
