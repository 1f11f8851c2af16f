//! Worked examples for the numerical primitives, checked against
//! independent oracles.

use ftune::numerics::gradcheck::{check_coordinates, CheckConfig};
use ftune::numerics::{dropout, gelu, layernorm, matmul, softmax_rows, Graph, RngStream, Tensor};

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut rng = RngStream::named(1, "mm");
    let b = random(&[3, 4], &mut rng);
    assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let c = matmul(&a, &Tensor::from_rows(&[&[0.0], &[1.0]])).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[2.0, 4.0]);
    assert!(matmul(&a, &b).is_err());
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = RngStream::named(2, "mm");
    let a = random(&[5, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let mut g = Graph::new();
    let an = g.leaf(a.clone(), true).unwrap();
    let bn = g.constant(b.clone()).unwrap();
    let y = g.matmul(an, bn).unwrap();
    let s = g.sum(y).unwrap();
    let grad = g.backward(s).unwrap().get(an);
    // ones(5×3)·bᵀ: every row equals the row sums of b.
    for i in 0..5 {
        for k in 0..7 {
            let expect: f64 = b.row(k).iter().sum();
            assert!((grad.data()[i * 7 + k] - expect).abs() < 1e-12);
        }
    }
    let mut f = |x: &[f64]| {
        let at = Tensor::new(vec![5, 7], x.to_vec()).unwrap();
        matmul(&at, &b).unwrap().sum()
    };
    let cfg = CheckConfig { rel_tol: 1e-6, ..CheckConfig::default() };
    let r = check_coordinates(&mut f, a.data(), grad.data(), 35, &mut rng, cfg);
    assert_eq!(r.checks.len(), 35);
    assert!(r.passed(1e-6), "max rel err {}", r.max_rel_error);
}

/// erf by its Maclaurin series, independent of the library's implementation.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_examples() {
    let y = gelu(&Tensor::vector(&[0.0, 10.0, 1.0, -1.5, 2.5])).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-8);
    assert!((y.data()[2] - 0.841345).abs() < 1e-6);
    for (i, &x) in [0.0, 10.0, 1.0, -1.5, 2.5].iter().enumerate().skip(2) {
        let oracle = x * 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert!((y.data()[i] - oracle).abs() < 1e-12, "x={x}");
    }
}

#[test]
fn layernorm_examples() {
    let ones = Tensor::ones(&[4]);
    let zeros = Tensor::zeros(&[4]);
    let c = layernorm(&Tensor::from_rows(&[&[2.5; 4]]), &ones, &zeros, 1e-12).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
    let pm = layernorm(&Tensor::from_rows(&[&[1.0, -1.0]]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
    assert_eq!(pm.data(), &[1.0, -1.0]);
    let mut rng = RngStream::named(3, "ln");
    let x = random(&[3, 64], &mut rng);
    let y = layernorm(&x, &Tensor::ones(&[64]), &Tensor::zeros(&[64]), 1e-12).unwrap();
    for r in 0..3 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_examples() {
    let u = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0, 0.0]])).unwrap();
    assert!(u.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let big = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]])).unwrap();
    assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1].abs() < 1e-12);
    let s = softmax_rows(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]])).unwrap();
    for (v, e) in s.data().iter().zip([0.090031, 0.244728, 0.665241]) {
        assert!((v - e).abs() < 1e-6);
    }
}

#[test]
fn dropout_examples() {
    let mut rng = RngStream::named(4, "do");
    let x = random(&[4, 8], &mut rng);
    assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
    let ones = Tensor::ones(&[1_000_000]);
    let y = dropout(&ones, 0.5, &mut rng, true).unwrap();
    let mean = y.sum() / 1e6;
    let zero_frac = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
    assert!((mean - 1.0).abs() < 0.01);
    assert!((zero_frac - 0.5).abs() < 0.01);
}
