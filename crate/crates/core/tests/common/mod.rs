#![allow(dead_code)]

use gradleak::data::{synth_dataset, SynthSpec};
use gradleak::models::{Example, ModelSpec};

pub fn synth(spec: &ModelSpec, count: usize, seed: u64) -> Vec<Example> {
    let s = SynthSpec {
        blobs: 3,
        shape: spec.input,
        classes: spec.classes,
    };
    synth_dataset(&s, count, seed).unwrap()
}

pub fn shards(data: &[Example], sizes: &[usize]) -> Vec<Vec<Example>> {
    gradleak::fl::partition(data, sizes).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use gradleak::autodiff::{finite_difference_oracle, max_relative_error, Graph, Tensor};
use gradleak::models::{Model, ParamVector};

/// Relative error of the loss gradient in `W` against central differences.
pub fn first_order_error(model: &Model, w: &ParamVector, batch: &[Example]) -> f64 {
    let (x, labels) = model.pack(batch).unwrap();
    let (_, grad) = model.gradient_sum(w.values(), &x, &labels).unwrap();
    let f = |wt: &Tensor| model.gradient_sum(wt.data(), &x, &labels).unwrap().0;
    let fd = finite_difference_oracle(f, &Tensor::vector(w.values().to_vec()), 1e-5).unwrap();
    max_relative_error(&grad, fd.data(), 1e-8)
}

/// Relative error of `d/dx |grad_W loss(W; x) - target|^2` (double
/// backward) against central differences in the pixels.
pub fn second_order_error(model: &Model, w: &ParamVector, batch: &[Example], target: &[f64]) -> f64 {
    let (x0, labels) = model.pack(batch).unwrap();
    let mut g = Graph::new();
    let wv = g.input("w", Tensor::vector(w.values().to_vec()));
    let xv = g.input("x", x0.clone());
    let loss = model.loss_sum(&mut g, wv, xv, &labels).unwrap();
    let grad = g.gradient(loss, &[wv]).unwrap()[0];
    let t = g.constant(Tensor::vector(target.to_vec()));
    let diff = g.sub(grad, t).unwrap();
    let l = g.sum_squares(diff).unwrap();
    let dx = g.second_order_gradient(l, &[xv]).unwrap()[0];
    let f = |x: &Tensor| {
        let (_, gr) = model.gradient_sum(w.values(), x, &labels).unwrap();
        gr.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let fd = finite_difference_oracle(f, &x0, 1e-5).unwrap();
    max_relative_error(g.value(dx).data(), fd.data(), 1e-7)
}

/// Relative error of Hessian columns `J e_i` against central differences
/// of the gradient, over the listed coordinates.
pub fn hessian_column_error(model: &Model, w: &ParamVector, z: &Example, coords: &[usize]) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in coords {
        let mut e = vec![0.0; w.len()];
        e[i] = 1.0;
        let col = model.hessian_vector_product(w, z, &e).unwrap();
        let mut plus = w.values().to_vec();
        let mut minus = w.values().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let gp = model.per_example_gradient(&w.with_values(plus), z).unwrap();
        let gm = model.per_example_gradient(&w.with_values(minus), z).unwrap();
        let fd: Vec<f64> = gp.values().iter().zip(gm.values()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst = worst.max(max_relative_error(&col, &fd, 1e-7));
    }
    worst
}
