use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Random weighted sum so that no op gets a structurally-zero gradient.
fn weighted<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &y.shape());
    y.mul(g.constant(w)).map(|v| v.sum())
}

#[test]
fn matmul_shape_contract() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 4]));
    assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
    let c = g.constant(Tensor::zeros(&[4, 3]));
    let err = a.matmul(c).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
}

#[test]
fn batched_matmul_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 2, 4]);
    let b = random_tensor(&mut rng, &[3, 4, 5]);
    let g = Graph::new();
    let c = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
    for bi in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[bi * 8 + i * 4 + k] * b.data()[bi * 20 + k * 5 + j]).sum();
                assert!((c.data()[bi * 10 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_uniform_and_normalized() {
    let g = Graph::new();
    let s = g.constant(Tensor::zeros(&[3])).softmax().value();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[5, 7]).map(|v| v * 40.0);
    let p = g.constant(x).softmax().value();
    for r in 0..5 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new();
    let y = g.constant(random_tensor(&mut rng, &[4, 9])).layer_norm(0.0).value();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn l2_rows_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let y = g.constant(random_tensor(&mut rng, &[6, 5])).l2_normalize().value();
    for r in 0..6 {
        let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_sum_gives_ones() {
    let g = Graph::new();
    let x = g.param(Tensor::full(&[2, 3, 2], 0.7));
    g.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 3, 2]));
}

#[test]
fn backward_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random_tensor(&mut rng, &[3, 4]);
    let g = Graph::new();
    let x = g.param(xt.clone());
    g.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(x.grad().unwrap(), xt.map(|v| 2.0 * v));
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(g.backward(x).is_err(), "non-scalar root");
    let d = x.detach().sum();
    assert!(g.backward(d).is_err(), "detached root");
    let s = x.sum();
    g.backward(s).unwrap();
    assert!(g.backward(s).is_err(), "second backward without reset");
    g.reset_grads();
    g.backward(s).unwrap();
}

#[test]
fn detach_stops_gradient() {
    let g = Graph::new();
    let xt = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
    let x = g.param(xt.clone());
    let d = x.detach();
    assert_eq!(d.value().data(), xt.data());
    // loss depends on x only through the detached copy plus an unrelated param
    let w = g.param(Tensor::ones(&[3]));
    let loss = d.mul(w).unwrap().sum();
    g.backward(loss).unwrap();
    assert!(x.grad().is_none());
    assert_eq!(w.grad().unwrap().data(), xt.data());
}

#[test]
fn fd_sum_sin_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[4, 3]);
    let r = finite_difference_check(|_, x| Ok(x.sin().sum()), &x, 1e-5, 1e-4).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn fd_negative_control_reports_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[5]);
    fn f<'g>(_: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        Ok(x.sin().sum())
    }
    let mut analytic = analytic_gradient(&f, &x).unwrap();
    analytic.data_mut()[3] += 1.0;
    let r = compare_gradients(&f, &x, &analytic, 1e-5, 1e-4).unwrap();
    assert!(!r.pass);
    assert_eq!(r.worst_index, 3);
}

#[test]
fn fd_rejects_nonfinite() {
    let x = Tensor::new(vec![1], vec![0.0]).unwrap();
    fn f<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.div(g.constant(Tensor::scalar(0.0))).map(|v| v.sum())
    }
    assert!(finite_difference_check(f, &x, 1e-5, 1e-4).is_err());
}

fn random_shape(rng: &mut ChaCha8Rng, ndim: usize) -> Vec<usize> {
    (0..ndim).map(|_| rng.random_range(1..=8)).collect()
}

fn check<F>(name: &str, f: F, x: &Tensor)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let r = finite_difference_check(f, x, 1e-5, 1e-4).unwrap();
    assert!(r.pass, "{name}: {r:?} at shape {:?}", x.shape());
}

#[test]
fn fd_every_op_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..4u64 {
        let shape = random_shape(&mut rng, 3);
        let x = random_tensor(&mut rng, &shape);
        let last = shape[2];
        let other = random_tensor(&mut rng, &shape);
        let bias = random_tensor(&mut rng, &[last]);
        let positive = random_tensor(&mut rng, &shape).map(|v| v.abs() + 0.5);
        let s = trial;

        check("add", |g, x| weighted(g, x.add(g.constant(bias.clone()))?, s), &x);
        check("add-rhs", |g, b| weighted(g, g.constant(x.clone()).add(b)?, s), &bias);
        check("sub", |g, x| weighted(g, g.constant(other.clone()).sub(x)?, s), &x);
        check("mul", |g, x| weighted(g, x.mul(g.constant(other.clone()))?, s), &x);
        check("mul-rhs", |g, b| weighted(g, g.constant(x.clone()).mul(b)?, s), &bias);
        check("div-num", |g, x| weighted(g, x.div(g.constant(positive.clone()))?, s), &x);
        check("div-den", |g, p| weighted(g, g.constant(x.clone()).div(p)?, s), &positive);
        check("scale", |g, x| weighted(g, x.scale(-1.7).add_scalar(0.3), s), &x);
        check("transpose", |g, x| weighted(g, x.transpose()?, s), &x);
        check("reshape", |g, x| weighted(g, x.reshape(&[shape[0] * shape[1], last])?, s), &x);
        check("narrow", |g, x| weighted(g, x.narrow(2, 0, last.div_ceil(2))?, s), &x);
        check("concat", |g, x| weighted(g, concat(&[x, g.constant(other.clone()), x], 1)?, s), &x);
        check("mean", |_, x| Ok(x.mul(x)?.mean()), &x);
        check("sum_axis", |g, x| weighted(g, x.sum_axis(1)?, s), &x);
        check("mean_axis", |g, x| weighted(g, x.mean_axis(0)?, s), &x);
        check("softmax", |g, x| weighted(g, x.softmax(), s), &x);
        check("log_softmax", |g, x| weighted(g, x.log_softmax(), s), &x);
        check("logsumexp", |g, x| weighted(g, x.logsumexp(), s), &x);
        if last > 2 {
            check("layer_norm", |g, x| weighted(g, x.layer_norm(1e-5), s), &x);
        }
        check("l2_normalize", |g, x| weighted(g, x.l2_normalize(), s), &x);
        check("gelu", |g, x| weighted(g, x.gelu(), s), &x);
        check("exp", |g, x| weighted(g, x.exp(), s), &x);
        check("log", |g, p| weighted(g, p.log(), s), &positive);
        check("sin", |g, x| weighted(g, x.sin(), s), &x);
        check("softplus", |g, x| weighted(g, x.softplus(), s), &x);
        // keep relu away from its kink
        let away = x.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
        check("relu", |g, x| weighted(g, x.relu(), s), &away);
        let mask: Vec<bool> = (0..x.numel()).map(|i| i % 3 == 0).collect();
        check("masked_fill", |g, x| weighted(g, x.masked_fill(mask.clone(), -2.0)?, s), &x);

        let k = rng.random_range(1..=8);
        let w = random_tensor(&mut rng, &[last, k]);
        let wb = random_tensor(&mut rng, &[shape[0], last, k]);
        check("matmul-lhs", |g, x| weighted(g, x.matmul(g.constant(w.clone()))?, s), &x);
        check("matmul-shared-rhs", |g, w| weighted(g, g.constant(x.clone()).matmul(w)?, s), &w);
        check("matmul-batched-rhs", |g, w| weighted(g, g.constant(x.clone()).matmul(w)?, s), &wb);
    }
}

#[test]
fn deterministic_evaluation() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[6, 6]);
        let g = Graph::new();
        let v = g.constant(x);
        v.matmul(v.transpose().unwrap()).unwrap().softmax().layer_norm(1e-5).value().data().to_vec()
    };
    assert_eq!(run(), run());
}
