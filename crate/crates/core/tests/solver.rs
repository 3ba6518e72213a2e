use krasovskii::histories::random_history;
use krasovskii::systems::{make_example1, make_example3, make_linear_baseline};
use krasovskii::{integrate, HistoryFunction, InputSignal, Status};
use proptest::prelude::*;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn restart_matches_straight_run(seed in any::<u64>(), amp in 0.0f64..1.0, omega in 0.1f64..3.0, split in 1usize..4) {
        let sys = make_example1(1.0).unwrap();
        let phi = random_history(seed, 2, 1.0, 1.0, 2);
        let u = InputSignal::Sinusoid { amplitude: vec![amp], omega, phase: 0.0 };
        let dt = 1.0 / 32.0;
        let t = split as f64;
        let straight = integrate(&sys, &phi, &u, 2.0 * t, dt).unwrap();
        let finer = integrate(&sys, &phi, &u, 2.0 * t, dt / 2.0).unwrap();
        let first = integrate(&sys, &phi, &u, t, dt).unwrap();
        let rest = integrate(&sys, &first.history_at(t).unwrap(), &u.clone().shifted(t), t, dt).unwrap();
        let end = straight.eval(2.0 * t).unwrap();
        let step_tol = dist(&end, &finer.eval(2.0 * t).unwrap());
        prop_assert!(dist(&end, &rest.eval(t).unwrap()) <= 10.0 * step_tol + 1e-14);
    }

    #[test]
    fn linear_solutions_scale(seed in any::<u64>(), s in -10.0f64..10.0) {
        let sys = make_linear_baseline(1.0, 0.5, 1.0).unwrap();
        let phi = random_history(seed, 1, 1.0, 1.0, 8);
        let zero = InputSignal::zero(1);
        let x = integrate(&sys, &phi, &zero, 5.0, 0.05).unwrap();
        let y = integrate(&sys, &phi.scaled(s), &zero, 5.0, 0.05).unwrap();
        for k in 0..x.len() {
            prop_assert!((y.state(k)[0] - s * x.state(k)[0]).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
}

#[test]
fn zero_history_and_input_give_zero() {
    let sys = make_example3(0.5).unwrap();
    let x = integrate(&sys, &HistoryFunction::zero(2, 0.5), &InputSignal::zero(1), 3.0, 0.125).unwrap();
    assert!(x.state_norms().iter().all(|n| *n == 0.0));
}

#[test]
fn pure_decay_converges_at_fourth_order() {
    let sys = make_linear_baseline(1.0, 0.0, 1.0).unwrap();
    let one = HistoryFunction::constant(1.0, &[1.0]);
    let err = |dt: f64| {
        let x = integrate(&sys, &one, &InputSignal::zero(1), 3.0, dt).unwrap();
        (x.eval(3.0).unwrap()[0] - (-3.0f64).exp()).abs()
    };
    let ratio = (err(1.0 / 8.0) / err(1.0 / 16.0)).log2();
    assert!((ratio - 4.0).abs() < 0.2, "observed order {ratio}");
}

#[test]
fn undelayed_system_is_supported() {
    let sys = make_linear_baseline(2.0, 0.0, 0.0).unwrap();
    let x = integrate(&sys, &HistoryFunction::constant(0.0, &[1.0]), &InputSignal::zero(1), 1.0, 0.01).unwrap();
    assert!((x.eval(1.0).unwrap()[0] - (-2.0f64).exp()).abs() < 1e-9);
}

#[test]
fn blow_up_is_reported() {
    let sys = make_linear_baseline(-50.0, 0.0, 1.0).unwrap();
    let x = integrate(&sys, &HistoryFunction::constant(1.0, &[1.0]), &InputSignal::zero(1), 100.0, 0.25).unwrap();
    assert!(!x.completed());
    assert!(matches!(x.status(), Status::BlewUp { .. }));
}

#[test]
fn csv_export_has_norm_columns() {
    let sys = make_example1(1.0).unwrap();
    let x = integrate(&sys, &random_history(1, 2, 1.0, 1.0, 0), &InputSignal::zero(1), 1.0, 0.25).unwrap();
    let mut buf = Vec::new();
    x.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x_1,x_2,abs_x,history_norm"));
    assert_eq!(lines.count(), x.len());
}
