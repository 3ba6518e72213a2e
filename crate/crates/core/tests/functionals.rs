use krasovskii::functionals::{combine_w, eigen_extremes, v0_max, Functional, Gain, Weight};
use krasovskii::histories::random_history;
use krasovskii::History;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd() -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, 4).prop_map(|a| {
        let a = DMatrix::from_vec(2, 2, a);
        &a * a.transpose() + DMatrix::identity(2, 2) * 0.5
    })
}

fn modes() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![0usize, 2, 8])
}

fn quad(p: &DMatrix<f64>, x: &[f64], w: &[f64]) -> f64 {
    (0..2).map(|i| (0..2).map(|j| x[i] * p[(i, j)] * w[j]).sum::<f64>()).sum()
}

proptest! {
    #[test]
    fn max_exp_sandwich(p in spd(), seed in any::<u64>(), m in modes(), norm in 0.01f64..10.0, delay in 0.1f64..3.0) {
        let phi = random_history(seed, 2, delay, norm, m);
        let (pm, pmax) = eigen_extremes(&p).unwrap();
        let v = v0_max(&p, &phi).unwrap();
        let s = phi.sup_norm().powi(2);
        let tol = 1e-9 * (1.0 + pmax * s);
        prop_assert!((-2.0 * delay).exp() * pm * s <= v + tol);
        prop_assert!(v <= pmax * s + tol);
        prop_assert!(quad(&p, &phi.current(), &phi.current()) <= v + tol);
    }

    #[test]
    fn combined_functional_sandwich(p in spd(), eps in 1e-3f64..1.0, seed in any::<u64>(), m in modes(), norm in 0.01f64..10.0) {
        let delay = 1.0;
        let a_upper = 1.0 + 2.0 * delay;
        let w = combine_w(Functional::benchmark_lkf(), eps, p.clone()).unwrap();
        let (pm, pmax) = eigen_extremes(&p).unwrap();
        let phi = random_history(seed, 2, delay, norm, m);
        let val = w.eval(&phi).unwrap();
        let s = phi.sup_norm().powi(2);
        let tol = 1e-9 * (1.0 + val.abs());
        prop_assert!(eps * (-2.0 * delay).exp() * pm * s <= val + tol);
        prop_assert!(val <= (a_upper + eps * pmax) * s + tol);
    }

    #[test]
    fn max_exp_derivative_branches(p in spd(), seed in any::<u64>(), m in modes(), w in prop::collection::vec(-1.0f64..1.0, 2)) {
        let phi = random_history(seed, 2, 1.0, 1.0, m);
        let w: Vec<f64> = w.iter().map(|x| x * phi.sup_norm()).collect();
        let v = Functional::max_exp(p.clone()).unwrap();
        let v0 = v0_max(&p, &phi).unwrap();
        let x0 = phi.current();
        let d = v.driver_derivative_numeric(&phi, &w, &[1e-5, 1e-6, 1e-7]).unwrap();
        let tol = 1e-3 * (1.0 + v0.abs());
        if v0 > quad(&p, &x0, &x0) * (1.0 + 1e-6) {
            prop_assert!(d <= -2.0 * v0 + tol);
        } else {
            prop_assert!(d <= (-2.0 * v0).max(2.0 * quad(&p, &x0, &w)) + tol);
        }
    }

    #[test]
    fn difference_quotient_is_first_order(seed in any::<u64>(), m in modes(), w in prop::collection::vec(-2.0f64..2.0, 2)) {
        let phi = random_history(seed, 2, 1.0, 1.0, m);
        let v = Functional::benchmark_lkf();
        let exact = v.driver_derivative_closed(&phi, &w).unwrap();
        let err = |h: f64| (v.driver_derivative_numeric(&phi, &w, &[h]).unwrap() - exact).abs();
        let (coarse, fine) = (err(1e-3), err(5e-4));
        prop_assert!(fine <= 0.6 * coarse + 1e-9, "errors {coarse} and {fine}");
    }

    #[test]
    fn power_gain_inverse(coef in 0.1f64..10.0, exponent in 0.5f64..4.0, s in 0.0f64..100.0) {
        let g = Gain::power(coef, exponent).unwrap();
        let back = g.inverse(g.eval(s)).unwrap();
        prop_assert!((back - s).abs() <= 1e-10 * (1.0 + s));
    }
}

#[test]
fn benchmark_value_by_hand() {
    // φ = (1, τ) on [−1, 0]: V = 1 + 0 + 2∫τ² = 1 + 2/3.
    let phi = krasovskii::HistoryFunction::new(1.0, vec![-1.0, 0.0], vec![vec![1.0, -1.0], vec![1.0, 0.0]]).unwrap();
    let v = Functional::benchmark_lkf().eval(&phi).unwrap();
    assert!((v - 5.0 / 3.0).abs() < 1e-14);
}

#[test]
fn weighted_integral_derivative_by_hand() {
    // V = ∫ e^{τ}|φ|², φ ≡ 1: D⁺V = |φ(0)|² − e^{−Δ}|φ(−Δ)|² − ∫ e^{τ}|φ|².
    let q = DMatrix::identity(1, 1);
    let v = Functional::integral_quadratic(q, Weight::Exponential { scale: 1.0, rate: 1.0 }).unwrap();
    let phi = krasovskii::HistoryFunction::constant(1.0, &[1.0]);
    let d = v.driver_derivative_closed(&phi, &[5.0]).unwrap();
    let e = (-1.0f64).exp();
    // Exponential weights go through refined Simpson quadrature (error < 1e−10).
    assert!((d - (1.0 - e - (1.0 - e))).abs() < 1e-10, "{d}");
}

#[test]
fn max_exp_uses_numeric_derivative() {
    let f = Functional::sum(Functional::benchmark_lkf(), Functional::max_exp(DMatrix::identity(2, 2)).unwrap());
    assert!(f.contains_max_exp());
    let phi = random_history(4, 2, 1.0, 1.0, 2);
    assert!(f.driver_derivative(&phi, &[0.3, -0.2]).unwrap().is_finite());
}
