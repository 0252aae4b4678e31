use std::collections::HashMap;

use gradleak::autodiff::{bicubic_map, bicubic_upsample, finite_difference_oracle, max_relative_error, Graph, Op, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

type Build = fn(&mut Graph, Var) -> Var;

/// `f(x) = sum(r * tanh(op(x)))`, so the second derivative of every op is
/// exercised through the outer nonlinearity.
fn scalar_of(g: &mut Graph, x: Var, build: Build, weights: &Tensor) -> Var {
    let y = build(g, x);
    let t = g.tanh(y).unwrap();
    let r = g.constant(weights.clone().reshaped(g.value(t).shape().to_vec()));
    g.dot(t, r).unwrap()
}

fn output_len(build: Build, shape: &[usize]) -> usize {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(shape));
    let y = build(&mut g, x);
    g.value(y).len()
}

fn check_op(name: &str, shape: &[usize], build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for _ in 0..3 {
        let x0 = random(&mut rng, shape);
        let weights = random(&mut rng, &[output_len(build, shape)]);

        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input("x", x.clone());
            let s = scalar_of(&mut g, xv, build, &weights);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let xv = g.input("x", x0.clone());
        let s = scalar_of(&mut g, xv, build, &weights);
        let dx = g.gradient(s, &[xv]).unwrap()[0];
        let fd = finite_difference_oracle(f, &x0, 1e-5).unwrap();
        let err = max_relative_error(g.value(dx).data(), fd.data(), 1e-8);
        assert!(err <= 1e-5, "{name}: first-order rel err {err}");

        // L(x) = |df/dx|^2, differentiated by a second reverse pass.
        let l = g.sum_squares(dx).unwrap();
        let dl = g.second_order_gradient(l, &[xv]).unwrap()[0];
        let grad_norm_sq = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input("x", x.clone());
            let s = scalar_of(&mut g, xv, build, &weights);
            let dx = g.gradient(s, &[xv]).unwrap()[0];
            g.value(dx).data().iter().map(|v| v * v).sum::<f64>()
        };
        let fd2 = finite_difference_oracle(grad_norm_sq, &x0, 1e-5).unwrap();
        let err2 = max_relative_error(g.value(dl).data(), fd2.data(), 1e-7);
        assert!(err2 <= 1e-4, "{name}: second-order rel err {err2}");
    }
}

#[test]
fn unary_primitives_match_finite_differences() {
    check_op("affine", &[5], |g, x| g.affine(x, -1.7, 0.3).unwrap());
    check_op("tanh", &[6], |g, x| g.tanh(x).unwrap());
    check_op("exp", &[6], |g, x| g.exp(x).unwrap());
    check_op("square", &[4], |g, x| g.mul(x, x).unwrap());
    check_op("transpose", &[2, 3], |g, x| g.transpose(x).unwrap());
    check_op("sum_rows", &[3, 4], |g, x| g.sum_rows(x).unwrap());
    check_op("broadcast_rows", &[4], |g, x| g.broadcast_rows(x, 3).unwrap());
    check_op("sum", &[2, 3], |g, x| g.sum(x).unwrap());
    check_op("expand", &[], |g, x| g.expand(x, &[2, 2]).unwrap());
    check_op("reshape", &[6], |g, x| g.reshape(x, &[2, 3]).unwrap());
    check_op("slice", &[7], |g, x| g.slice(x, 2, 3).unwrap());
    check_op("pad", &[3], |g, x| g.pad(x, 1, 6).unwrap());
    check_op("log_softmax", &[2, 4], |g, x| g.log_softmax(x).unwrap());
    check_op("row_sum_broadcast", &[3, 2], |g, x| g.row_sum_broadcast(x).unwrap());
    check_op("select_rows", &[3, 2], |g, x| g.select_rows(x, &[2, 0, 2]).unwrap());
    check_op("scatter_rows", &[2, 3], |g, x| {
        g.push(
            Op::ScatterRows {
                rows: std::sync::Arc::new(vec![3, 1]),
                total: 4,
            },
            &[x],
        )
        .unwrap()
    });
    check_op("bicubic", &[2, 2 * 3 * 3], |g, x| g.bicubic_upsample(x, 2, 3, 3, 2).unwrap());
    check_op("bicubic_adjoint", &[1, 36], |g, x| {
        let map = bicubic_map(1, 3, 3, 2).unwrap();
        g.push(Op::Sparse { map, transposed: true }, &[x]).unwrap()
    });
}

#[test]
fn binary_primitives_match_finite_differences() {
    // Each binary op sees x in both argument slots against a fixed partner.
    check_op("add", &[2, 3], |g, x| {
        let c = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        g.add(c, x).unwrap()
    });
    check_op("sub", &[2, 3], |g, x| {
        let c = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let a = g.sub(x, c).unwrap();
        g.sub(c, a).unwrap()
    });
    check_op("mul", &[2, 3], |g, x| {
        let c = g.constant(Tensor::matrix(2, 3, vec![0.9, -0.2, 0.3, 1.4, -0.5, 0.6]));
        let a = g.mul(x, c).unwrap();
        g.mul(a, x).unwrap()
    });
    check_op("matmul_left", &[2, 3], |g, x| {
        let c = g.constant(Tensor::matrix(3, 2, vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2]));
        g.matmul(x, c).unwrap()
    });
    check_op("matmul_right", &[3, 2], |g, x| {
        let c = g.constant(Tensor::matrix(2, 3, vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2]));
        g.matmul(c, x).unwrap()
    });
    check_op("matmul_both", &[3, 3], |g, x| g.matmul(x, x).unwrap());
    check_op("add_row_matrix", &[2, 3], |g, x| {
        let b = g.constant(Tensor::vector(vec![0.2, -0.1, 0.4]));
        g.add_row(x, b).unwrap()
    });
    check_op("add_row_vector", &[3], |g, x| {
        let a = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        g.add_row(a, x).unwrap()
    });
}

#[test]
fn reverse_pass_is_linear_in_graph_size() {
    for n in [10usize, 100, 1000] {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.1, 0.2]));
        let mut y = x;
        for _ in 0..n {
            y = g.tanh(y).unwrap();
        }
        let s = g.sum(y).unwrap();
        let before = g.len();
        g.gradient(s, &[x]).unwrap();
        // one VJP per non-leaf node on the path: n tanh nodes plus the sum
        assert_eq!(g.last_backward_visits(), n + 1);
        assert!(g.len() - before <= 4 * (n + 1) + 2);
    }
}

#[test]
fn evaluate_after_rebinding_matches_fresh_build() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![0.3, -0.4]));
    let t = g.tanh(x).unwrap();
    let s = g.sum_squares(t).unwrap();
    let dx = g.gradient(s, &[x]).unwrap()[0];
    let mut bind = HashMap::new();
    bind.insert("x".to_string(), Tensor::vector(vec![0.9, 0.1]));
    let re = g.evaluate(dx, &bind).unwrap();

    let mut h = Graph::new();
    let x2 = h.input("x", Tensor::vector(vec![0.9, 0.1]));
    let t2 = h.tanh(x2).unwrap();
    let s2 = h.sum_squares(t2).unwrap();
    let dx2 = h.gradient(s2, &[x2]).unwrap()[0];
    assert_eq!(&re, h.value(dx2));
}

proptest! {
    #[test]
    fn bicubic_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 4, 3]);
        let y = random(&mut rng, &[2, 4, 3]);
        let combo = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = bicubic_upsample(&combo, 3).unwrap();
        let ux = bicubic_upsample(&x, 3).unwrap();
        let uy = bicubic_upsample(&y, 3).unwrap();
        let rhs = ux.zip_map(&uy, |p, q| a * p + b * q);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn bicubic_reproduces_constants(c in 0.0f64..1.0, factor in 1usize..5) {
        let up = bicubic_upsample(&Tensor::full(&[1, 3, 2], c), factor).unwrap();
        prop_assert!(up.data().iter().all(|v| (v - c).abs() <= 1e-14));
    }
}
