mod common;

use common::{max_abs_diff, shards, synth};
use gradleak::analysis::{delta_tau, score_reconstructions};
use gradleak::attack::{
    attack_loss, extract_update, guess_image_count, guess_learning_rate, oracle_multiclient_attack, run_attack, stack_images,
    superclient_update, AttackConfig, AttackProblem, Knowledge, Simulation,
};
use gradleak::autodiff::{finite_difference_oracle, max_relative_error, Graph, Tensor};
use gradleak::fl::{run_round, FlConfig, RoundLog};
use gradleak::models::{Example, Model, ModelSpec};

fn model() -> Model {
    Model::new(ModelSpec::mlp([1, 4, 4], &[6], 3)).unwrap()
}

fn round(m: &Model, k: usize, nk: usize, tau: usize, eta: f64, seed: u64) -> (Vec<Example>, RoundLog) {
    let data = synth(m.spec(), k * nk, seed);
    let cfg = FlConfig::uniform(m.spec().clone(), k, nk, tau, eta);
    let log = run_round(m, &m.init(seed), &cfg, &shards(&data, &cfg.batch_sizes), 0).unwrap();
    (data, log)
}

fn superclient_value(m: &Model, w: &[f64], data: &[Example], tau: usize, eta: f64) -> Vec<f64> {
    let (x, labels) = m.pack(data).unwrap();
    let n = labels.len();
    let mut g = Graph::new();
    let wv = g.input("w", Tensor::vector(w.to_vec()));
    let xv = g.constant(x.reshaped(vec![n, m.spec().image_len()]));
    let u = superclient_update(&mut g, m, wv, xv, &labels, tau, eta).unwrap();
    g.value(u).data().to_vec()
}

#[test]
fn extraction_recovers_the_mean_gradient() {
    let m = model();
    let (data, log) = round(&m, 3, 2, 1, 0.4, 1);
    let z = extract_update(&log.w_before, &log.w_after, 0.4, 0).unwrap();
    let (x, y) = m.pack(&data).unwrap();
    let (_, g) = m.gradient_sum(log.w_before.values(), &x, &y).unwrap();
    let mean: Vec<f64> = g.iter().map(|v| v / 6.0).collect();
    assert!(max_abs_diff(z.gradient.values(), &mean) <= 1e-12);

    let same = extract_update(&log.w_before, &log.w_before, 0.4, 0).unwrap();
    assert!(same.gradient.values().iter().all(|v| *v == 0.0));

    for c in [2.0, 4.0] {
        let scaled = extract_update(&log.w_before, &log.w_after, c * 0.4, 0).unwrap();
        let expect: Vec<f64> = z.gradient.values().iter().map(|v| v / c).collect();
        assert_eq!(scaled.gradient.values(), expect.as_slice());
    }
    let third = extract_update(&log.w_before, &log.w_after, 3.0 * 0.4, 0).unwrap();
    let expect: Vec<f64> = z.gradient.values().iter().map(|v| v / 3.0).collect();
    assert!(max_relative_error(third.gradient.values(), &expect, 1e-12) <= 1e-14);
}

#[test]
fn superclient_is_exact_for_one_client() {
    let m = model();
    for tau in 1..=3 {
        let (data, log) = round(&m, 1, 4, tau, 0.5, 10 + tau as u64);
        let z = extract_update(&log.w_before, &log.w_after, 0.5, 0).unwrap();
        let sim = superclient_value(&m, log.w_before.values(), &data, tau, 0.5);
        assert!(max_abs_diff(&sim, z.gradient.values()) <= 1e-10, "tau {tau}");
    }
}

#[test]
fn one_step_superclient_is_the_mean_gradient() {
    let m = model();
    let data = synth(m.spec(), 5, 3);
    let w = m.init(3);
    let sim = superclient_value(&m, w.values(), &data, 1, 0.9);
    let mut mean = vec![0.0; w.len()];
    for z in &data {
        for (a, v) in mean.iter_mut().zip(m.per_example_gradient(&w, z).unwrap().values()) {
            *a += v / 5.0;
        }
    }
    assert!(max_abs_diff(&sim, &mean) <= 1e-12);
}

#[test]
fn dummy_gradient_matches_finite_differences_through_two_steps() {
    let m = model();
    let (data, log) = round(&m, 2, 2, 2, 0.5, 4);
    let mut cfg = AttackConfig::new(4, 0.5, 2);
    cfg.upsample = 1;
    let z = extract_update(&log.w_before, &log.w_after, 0.5, 0).unwrap();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let problem = AttackProblem::new(&m, &cfg, &log.w_before, &z, &labels, Simulation::SuperClient).unwrap();
    let dummy = synth(m.spec(), 4, 99)
        .iter()
        .flat_map(|e| e.image.data().to_vec())
        .collect::<Vec<_>>();
    let dummy = Tensor::new(vec![4, 1, 4, 4], dummy);
    let (_, grad) = problem.loss_and_grad(&dummy).unwrap();
    let fd = finite_difference_oracle(|d| problem.loss(d).unwrap(), &dummy, 1e-5).unwrap();
    let err = max_relative_error(grad.data(), fd.data(), 1e-9);
    assert!(err <= 1e-4, "{err}");

    // With the default bicubic factor the gradient flows through the upsampler.
    let mut cfg2 = cfg.clone();
    cfg2.upsample = 2;
    let p2 = AttackProblem::new(&m, &cfg2, &log.w_before, &z, &labels, Simulation::SuperClient).unwrap();
    let small = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|i| (i as f64 * 0.37) % 1.0).collect());
    let (_, g2) = p2.loss_and_grad(&small).unwrap();
    let fd2 = finite_difference_oracle(|d| p2.loss(d).unwrap(), &small, 1e-5).unwrap();
    assert!(max_relative_error(g2.data(), fd2.data(), 1e-9) <= 1e-4);
}

#[test]
fn loss_at_truth() {
    let m = model();
    let (data, log) = round(&m, 3, 2, 1, 0.5, 5);
    let z = extract_update(&log.w_before, &log.w_after, 0.5, 0).unwrap();
    let cfg = AttackConfig::new(6, 0.5, 1);
    assert!(attack_loss(&m, &cfg, &log.w_before, &z, &data).unwrap() <= 1e-16);

    // Two clients, two steps: the residual at the truth is the drift.
    let fl = FlConfig::uniform(m.spec().clone(), 2, 3, 2, 0.5);
    let sets = shards(&data, &fl.batch_sizes);
    let log2 = run_round(&m, &log.w_before, &fl, &sets, 0).unwrap();
    let z2 = extract_update(&log2.w_before, &log2.w_after, 0.5, 0).unwrap();
    let loss = attack_loss(&m, &AttackConfig::new(6, 0.5, 2), &log2.w_before, &z2, &data).unwrap();
    let delta = delta_tau(&m, &fl, &log2.w_before, &sets, 0).unwrap().norm();
    let expect = delta * delta / 0.25;
    assert!((loss - expect).abs() <= 1e-9 * expect, "{loss} vs {expect}");
}

#[test]
fn loss_ignores_order_within_a_label() {
    let m = model();
    let (mut data, log) = round(&m, 2, 3, 2, 0.5, 6);
    for (i, z) in data.iter_mut().enumerate() {
        z.label = [0, 1, 0, 2, 0, 1][i];
    }
    let fl = FlConfig::uniform(m.spec().clone(), 2, 3, 2, 0.5);
    let log = run_round(&m, &log.w_before, &fl, &shards(&data, &fl.batch_sizes), 0).unwrap();
    let z = extract_update(&log.w_before, &log.w_after, 0.5, 0).unwrap();
    let cfg = AttackConfig::new(6, 0.5, 2);
    let base = attack_loss(&m, &cfg, &log.w_before, &z, &data).unwrap();
    let mut swapped = data.clone();
    swapped.swap(0, 4);
    swapped.swap(1, 5);
    let other = attack_loss(&m, &cfg, &log.w_before, &z, &swapped).unwrap();
    assert!((base - other).abs() <= 1e-12 * base.max(1e-300), "{base} vs {other}");
}

#[test]
fn oracle_is_exact_and_reduces_to_superclient() {
    let m = model();
    let (data, log) = round(&m, 4, 2, 3, 0.5, 7);
    let z = extract_update(&log.w_before, &log.w_after, 0.5, 0).unwrap();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let cfg = AttackConfig::new(8, 0.5, 3);
    let groups: Vec<Vec<usize>> = (0..4).map(|k| vec![2 * k, 2 * k + 1]).collect();
    let p = AttackProblem::new(&m, &cfg, &log.w_before, &z, &labels, Simulation::Clients(groups)).unwrap();
    assert!(p.loss_at_images(&stack_images(&data)).unwrap() <= 1e-16);

    let (data1, log1) = round(&m, 1, 3, 2, 0.5, 8);
    let labels1: Vec<usize> = data1.iter().map(|e| e.label).collect();
    let mut c1 = AttackConfig::new(3, 0.5, 2);
    c1.budget = 30;
    let a = run_attack(&m, &c1, &log1.w_before, &log1.w_after, &labels1).unwrap();
    let b = oracle_multiclient_attack(&m, &c1, &log1.w_before, &log1.w_after, &labels1, &[0, 0, 0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_image_inversion_recovers_the_image() {
    let m = Model::new(ModelSpec::mlp([1, 8, 8], &[32], 4)).unwrap();
    let (data, log) = round(&m, 1, 1, 1, 0.003, 21);
    let mut cfg = AttackConfig::new(1, 0.003, 1);
    cfg.upsample = 1;
    cfg.seed = 21;
    let labels = vec![data[0].label];
    let st = run_attack(&m, &cfg, &log.w_before, &log.w_after, &labels).unwrap();
    let r = score_reconstructions(&st.reconstruction, &stack_images(&data), &st.labels, &labels).unwrap();
    assert!(r.mean_mse <= 1e-3, "{}", r.mean_mse);
    assert!(st.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(st.reconstruction.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn degenerate_searches() {
    let m = model();
    let (data, log) = round(&m, 2, 2, 1, 1.0, 9);
    let mut cfg = AttackConfig::new(4, 1.0, 1);
    cfg.budget = 20;
    let know = Knowledge::from_data(&data, &[0]).unwrap();
    let lr = guess_learning_rate(&m, &cfg, &log.w_before, &log.w_after, &know, &[0.7]).unwrap();
    assert_eq!(lr.best_eta, 0.7);
    assert_eq!(lr.table.len(), 1);
    let n = guess_image_count(&m, &cfg, &log.w_before, &log.w_after, &know, &[3]).unwrap();
    assert_eq!(n.best_image_count, 3);
    let n = guess_image_count(&m, &cfg, &log.w_before, &log.w_after, &know, &[2, 4, 6]).unwrap();
    assert_eq!(n.table.len(), 3);
    assert!(guess_learning_rate(&m, &cfg, &log.w_before, &log.w_after, &know, &[]).is_err());
}
