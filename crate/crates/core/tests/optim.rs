use emfuse::optim::{adam_minimize, check_gradient, lbfgs_minimize, AdamConfig, FnObjective, LbfgsConfig, Objective};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shifted_quadratic(a: Vec<f64>) -> impl Objective {
    let a2 = a.clone();
    FnObjective {
        dim: a.len(),
        value: move |x: &[f64]| x.iter().zip(&a).map(|(x, a)| (x - a).powi(2)).sum(),
        value_grad: move |x: &[f64], g: &mut [f64]| {
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - a2[i]);
            }
            x.iter().zip(&a2).map(|(x, a)| (x - a).powi(2)).sum()
        },
    }
}

fn rosenbrock() -> impl Objective {
    let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
    FnObjective {
        dim: 2,
        value: f,
        value_grad: move |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
            f(x)
        },
    }
}

/// ½ xᵀAx − bᵀx.
struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Objective for Quadratic {
    fn dimension(&self) -> usize {
        self.b.len()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.a * &x)) - self.b.dot(&x)
    }
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let g = &self.a * &xv - &self.b;
        grad.copy_from_slice(g.as_slice());
        self.evaluate(x)
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Quadratic {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let eig = DVector::from_fn(n, |_, _| rng.random_range(1.0..20.0));
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    Quadratic { a, b }
}

#[test]
fn lbfgs_solves_shifted_quadratic_in_five_steps() {
    let a = vec![1.5, -2.0, 0.25, 7.0];
    let obj = shifted_quadratic(a.clone());
    for x0 in [vec![0.0; 4], vec![100.0, -3.0, 8.0, 0.5]] {
        let res = lbfgs_minimize(&obj, &x0, &LbfgsConfig::default()).unwrap();
        for (x, a) in res.x.iter().zip(&a) {
            assert!((x - a).abs() < 1e-8);
        }
    }
}

#[test]
fn lbfgs_rosenbrock() {
    let cfg = LbfgsConfig {
        steps: 100,
        ..LbfgsConfig::default()
    };
    let res = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &cfg).unwrap();
    assert!(res.f < 1e-6, "f* = {}", res.f);
    let best = res.trace.best_so_far();
    let values: Vec<f64> = res.trace.values().collect();
    assert_eq!(best, values, "accepted values must be non-increasing");
}

#[test]
fn lbfgs_constant_objective_exits_immediately() {
    let obj = FnObjective {
        dim: 3,
        value: |_: &[f64]| 4.0,
        value_grad: |_: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            4.0
        },
    };
    let x0 = [0.3, -1.0, 2.0];
    let res = lbfgs_minimize(&obj, &x0, &LbfgsConfig::default()).unwrap();
    assert_eq!(res.x, x0);
    assert_eq!(res.f, 4.0);
    assert_eq!(res.evaluations, 1);
}

#[test]
fn lbfgs_rejects_nan_and_bad_config() {
    let obj = FnObjective {
        dim: 1,
        value: |_: &[f64]| f64::NAN,
        value_grad: |_: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            f64::NAN
        },
    };
    assert!(lbfgs_minimize(&obj, &[0.0], &LbfgsConfig::default()).is_err());
    let bad = LbfgsConfig {
        c1: 0.95,
        ..LbfgsConfig::default()
    };
    assert!(lbfgs_minimize(&shifted_quadratic(vec![0.0]), &[1.0], &bad).is_err());
}

#[test]
fn adam_reduces_quadratic_gradient() {
    let obj = shifted_quadratic(vec![0.3, -0.2, 0.5]);
    let x0 = [0.0; 3];
    let g0: f64 = obj.gradient(&x0).iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = adam_minimize(&obj, &x0, &AdamConfig::default()).unwrap();
    let g1: f64 = obj.gradient(&res.x).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(g1 < g0 * 1e-2, "{g1} vs {g0}");
    assert_eq!(res.trace.entries.len(), 101);
}

#[test]
fn adam_zero_gradient_start_is_fixed_point() {
    let obj = shifted_quadratic(vec![1.0, 2.0]);
    let res = adam_minimize(&obj, &[1.0, 2.0], &AdamConfig::default()).unwrap();
    assert_eq!(res.x, vec![1.0, 2.0]);
}

#[test]
fn adam_is_deterministic_and_reports_nan() {
    let obj = rosenbrock();
    let a = adam_minimize(&obj, &[-1.2, 1.0], &AdamConfig::default()).unwrap();
    let b = adam_minimize(&obj, &[-1.2, 1.0], &AdamConfig::default()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.x, b.x);
    let bad = FnObjective {
        dim: 1,
        value: |x: &[f64]| if x[0] < 0.95 { f64::NAN } else { x[0] },
        value_grad: |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            if x[0] < 0.95 {
                f64::NAN
            } else {
                x[0]
            }
        },
    };
    let err = adam_minimize(&bad, &[1.0], &AdamConfig::default()).unwrap_err();
    assert!(err.to_string().contains("iteration"));
}

#[test]
fn check_gradient_flags_wrong_gradients() {
    let good = shifted_quadratic(vec![0.5, -1.0]);
    assert!(check_gradient(&good, &[2.0, 3.0], 1e-6) < 1e-8);
    let wrong = FnObjective {
        dim: 2,
        value: |x: &[f64]| x[0] * x[0] + x[1] * x[1],
        value_grad: |x: &[f64], g: &mut [f64]| {
            g[0] = 4.0 * x[0];
            g[1] = 4.0 * x[1];
            x[0] * x[0] + x[1] * x[1]
        },
    };
    let err = check_gradient(&wrong, &[2.0, 3.0], 1e-6);
    // |g − 2g| / |2g|
    assert!((err - 0.5).abs() < 1e-6, "error {err}");
}

#[test]
fn best_so_far_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obj = random_spd(&mut rng, 12);
    let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
    let l = lbfgs_minimize(&obj, &x0, &LbfgsConfig::default()).unwrap();
    let a = adam_minimize(&obj, &x0, &AdamConfig::default()).unwrap();
    for trace in [&l.trace, &a.trace] {
        let best = trace.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(a.f <= *a.trace.best_so_far().last().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lbfgs_converges_on_spd_quadratics(seed in 0u64..10_000, n in 1usize..=50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = random_spd(&mut rng, n);
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = LbfgsConfig { steps: n + 5, ..LbfgsConfig::default() };
        let res = lbfgs_minimize(&obj, &x0, &cfg).unwrap();
        let g = obj.gradient(&res.x);
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(gn < 1e-8, "gradient norm {gn}");
    }
}

