//! Deterministic synchronous FedAvg.
//!
//! Each client runs `tau` full-minibatch gradient steps on its fixed minibatch
//! with step `eta / N_k`, and the server averages final weights in proportion
//! to client data counts. Local iterates are kept in the cumulative form
//! `W_u = W - (eta / N_k) * acc_u`, so the final weights satisfy the
//! accumulated-update identity exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Example, Model, ModelError, ModelSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlError {
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("client {client} has {got} examples, config expects {expected}")]
    DatasetMismatch { client: usize, expected: usize, got: usize },
    #[error("non-finite weights on client {client} after local iteration {iteration}")]
    NonFinite { client: usize, iteration: usize },
    #[error("cannot aggregate an empty set of clients")]
    EmptyAggregate,
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, FlError>;

/// One federated round's configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub model: ModelSpec,
    /// Per-client minibatch sizes `N_k`; the client count `K` is their number.
    pub batch_sizes: Vec<usize>,
    pub local_iters: usize,
    pub eta: f64,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl FlConfig {
    /// `K` clients with `per_client` images each.
    pub fn uniform(model: ModelSpec, clients: usize, per_client: usize, local_iters: usize, eta: f64) -> Self {
        FlConfig {
            model,
            batch_sizes: vec![per_client; clients],
            local_iters,
            eta,
            data_seed: 0,
            init_seed: 0,
        }
    }

    pub fn clients(&self) -> usize {
        self.batch_sizes.len()
    }

    /// `N = sum_k N_k`.
    pub fn total_images(&self) -> usize {
        self.batch_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() {
            return Err(FlError::InvalidConfig("need at least one client".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(FlError::InvalidConfig("every client needs at least one example".into()));
        }
        if self.local_iters == 0 {
            return Err(FlError::InvalidConfig("local_iters must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FlError::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Output of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub weights: ParamVector,
    /// `sum_u sum_i g(W_u; Z_i)`.
    pub accumulated: ParamVector,
}

/// Snapshot of one synchronous round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub w_before: ParamVector,
    pub w_after: ParamVector,
    pub client_weights: Vec<ParamVector>,
    pub client_accumulated: Vec<ParamVector>,
    pub client_sizes: Vec<usize>,
    pub eta: f64,
}

impl RoundLog {
    /// `max |W_after - (1/N) sum_k N_k W_k|`.
    pub fn aggregate_residual(&self) -> f64 {
        let avg = fedavg_aggregate(&self.client_weights, &self.client_sizes).expect("round has clients");
        self.w_after.max_abs_diff(&avg)
    }

    /// `max |W_after - (W_before - (eta/N) sum_k Delta_k)|`.
    pub fn update_residual(&self) -> f64 {
        let n: usize = self.client_sizes.iter().sum();
        let c = self.eta / n as f64;
        let m = self.w_before.len();
        let mut total = vec![0.0; m];
        for acc in &self.client_accumulated {
            for (t, a) in total.iter_mut().zip(acc.values()) {
                *t += a;
            }
        }
        self.w_before
            .values()
            .iter()
            .zip(&total)
            .zip(self.w_after.values())
            .map(|((w, t), after)| (w - c * t - after).abs())
            .fold(0.0, f64::max)
    }
}

/// Local training with `tau` steps of size `eta / N_k` on a fixed minibatch.
pub fn client_local_update(model: &Model, w: &ParamVector, data: &[Example], tau: usize, eta: f64) -> Result<LocalUpdate> {
    client_update_indexed(model, w, data, tau, eta, 0)
}

fn client_update_indexed(model: &Model, w: &ParamVector, data: &[Example], tau: usize, eta: f64, client: usize) -> Result<LocalUpdate> {
    model.check_params(w)?;
    if tau == 0 {
        return Err(FlError::InvalidConfig("local_iters must be at least 1".into()));
    }
    let (x, labels) = model.pack(data)?;
    let step = eta / data.len() as f64;
    let mut acc: Option<Vec<f64>> = None;
    let mut current = w.values().to_vec();
    for u in 0..tau {
        let (_, grad) = model.gradient_sum(&current, &x, &labels)?;
        let next_acc = match acc {
            None => grad,
            Some(prev) => prev.iter().zip(&grad).map(|(a, g)| a + g).collect(),
        };
        current = w.values().iter().zip(&next_acc).map(|(wv, a)| wv - step * a).collect();
        if current.iter().any(|v| !v.is_finite()) {
            return Err(FlError::NonFinite { client, iteration: u });
        }
        acc = Some(next_acc);
    }
    Ok(LocalUpdate {
        weights: w.with_values(current),
        accumulated: w.with_values(acc.expect("tau >= 1")),
    })
}

/// `(1/N) sum_k N_k W_k`, folded in client order as `W_1 + sum_k (N_k/N)(W_k - W_1)`.
pub fn fedavg_aggregate(client_weights: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    if client_weights.is_empty() {
        return Err(FlError::EmptyAggregate);
    }
    if client_weights.len() != sizes.len() {
        return Err(FlError::InvalidConfig(format!(
            "{} client weight vectors but {} sizes",
            client_weights.len(),
            sizes.len()
        )));
    }
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return Err(FlError::InvalidConfig("total example count is zero".into()));
    }
    let m = client_weights[0].len();
    if let Some(bad) = client_weights.iter().find(|w| w.len() != m) {
        return Err(FlError::Model(ModelError::ParamLength {
            expected: m,
            got: bad.len(),
        }));
    }
    // Offsets from the first client: identical clients (or K = 1) give back
    // that client's weights bitwise.
    let base = client_weights[0].values();
    let mut out = vec![0.0; m];
    for (w, &nk) in client_weights.iter().zip(sizes).skip(1) {
        let share = nk as f64 / n as f64;
        for ((o, v), b) in out.iter_mut().zip(w.values()).zip(base) {
            *o += share * (v - b);
        }
    }
    for (o, b) in out.iter_mut().zip(base) {
        *o += b;
    }
    Ok(client_weights[0].with_values(out))
}

fn check_datasets(cfg: &FlConfig, datasets: &[Vec<Example>]) -> Result<()> {
    cfg.validate()?;
    if datasets.len() != cfg.clients() {
        return Err(FlError::InvalidConfig(format!(
            "{} client datasets for {} clients",
            datasets.len(),
            cfg.clients()
        )));
    }
    for (k, (d, &nk)) in datasets.iter().zip(&cfg.batch_sizes).enumerate() {
        if d.len() != nk {
            return Err(FlError::DatasetMismatch {
                client: k,
                expected: nk,
                got: d.len(),
            });
        }
    }
    Ok(())
}

/// One synchronous round from `w` over all clients.
pub fn run_round(model: &Model, w: &ParamVector, cfg: &FlConfig, datasets: &[Vec<Example>], round: usize) -> Result<RoundLog> {
    check_datasets(cfg, datasets)?;
    let mut client_weights = Vec::with_capacity(datasets.len());
    let mut client_accumulated = Vec::with_capacity(datasets.len());
    for (k, data) in datasets.iter().enumerate() {
        let up = client_update_indexed(model, w, data, cfg.local_iters, cfg.eta, k)?;
        client_weights.push(up.weights);
        client_accumulated.push(up.accumulated);
    }
    let w_after = fedavg_aggregate(&client_weights, &cfg.batch_sizes)?;
    Ok(RoundLog {
        round,
        w_before: w.clone(),
        w_after,
        client_weights,
        client_accumulated,
        client_sizes: cfg.batch_sizes.clone(),
        eta: cfg.eta,
    })
}

/// `rounds` sequential rounds on the same fixed client minibatches.
pub fn run_training(model: &Model, w0: &ParamVector, cfg: &FlConfig, datasets: &[Vec<Example>], rounds: usize) -> Result<Vec<RoundLog>> {
    if rounds == 0 {
        return Err(FlError::InvalidConfig("rounds must be at least 1".into()));
    }
    let mut logs: Vec<RoundLog> = Vec::with_capacity(rounds);
    let mut w = w0.clone();
    for r in 0..rounds {
        let log = run_round(model, &w, cfg, datasets, r)?;
        w = log.w_after.clone();
        logs.push(log);
    }
    Ok(logs)
}

/// Splits `examples` into consecutive client shards of the given sizes.
pub fn partition(examples: &[Example], sizes: &[usize]) -> Result<Vec<Vec<Example>>> {
    let need: usize = sizes.iter().sum();
    if need != examples.len() {
        return Err(FlError::InvalidConfig(format!(
            "partition sizes sum to {need} but there are {} examples",
            examples.len()
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(examples[start..start + s].to_vec());
        start += s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::ModelSpec;

    fn tiny_model() -> Model {
        Model::new(ModelSpec::mlp([1, 2, 2], &[2], 2)).unwrap()
    }

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                image: Tensor::new(vec![1, 2, 2], (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0).collect()),
                label: i % 2,
            })
            .collect()
    }

    #[test]
    fn single_step_is_one_gradient_step() {
        let model = tiny_model();
        let w = model.init(1);
        let data = examples(3);
        let up = client_local_update(&model, &w, &data, 1, 0.5).unwrap();
        let (x, y) = model.pack(&data).unwrap();
        let (_, g) = model.gradient_sum(w.values(), &x, &y).unwrap();
        for ((a, w0), gi) in up.weights.values().iter().zip(w.values()).zip(&g) {
            assert_eq!(*a, w0 - (0.5 / 3.0) * gi);
        }
    }

    #[test]
    fn final_weights_satisfy_accumulated_identity() {
        let model = tiny_model();
        let w = model.init(2);
        let data = examples(4);
        let up = client_local_update(&model, &w, &data, 5, 0.3).unwrap();
        let c = 0.3 / 4.0;
        for ((f, w0), a) in up.weights.values().iter().zip(w.values()).zip(up.accumulated.values()) {
            assert_eq!(*f, w0 - c * a);
        }
    }

    #[test]
    fn aggregate_degenerate_cases() {
        let model = tiny_model();
        let a = model.init(1);
        let b = model.init(2);
        assert_eq!(fedavg_aggregate(std::slice::from_ref(&a), &[7]).unwrap(), a);
        let mean = fedavg_aggregate(&[a.clone(), b.clone()], &[3, 3]).unwrap();
        for ((m, x), y) in mean.values().iter().zip(a.values()).zip(b.values()) {
            assert!((m - 0.5 * (x + y)).abs() <= 1e-15);
        }
        assert_eq!(fedavg_aggregate(&[], &[]), Err(FlError::EmptyAggregate));
    }

    #[test]
    fn config_validation() {
        let spec = ModelSpec::mlp([1, 2, 2], &[2], 2);
        assert!(FlConfig::uniform(spec.clone(), 0, 4, 1, 0.1).validate().is_err());
        assert!(FlConfig::uniform(spec.clone(), 2, 0, 1, 0.1).validate().is_err());
        assert!(FlConfig::uniform(spec.clone(), 2, 4, 0, 0.1).validate().is_err());
        assert!(FlConfig::uniform(spec.clone(), 2, 4, 1, 0.0).validate().is_err());
        assert!(FlConfig::uniform(spec, 2, 4, 1, 0.1).validate().is_ok());
    }

    #[test]
    fn divergent_learning_rate_reports_iteration() {
        let model = Model::new(ModelSpec::mlp([1, 2, 2], &[], 2)).unwrap();
        let w = model.init(2);
        let data: Vec<Example> = examples(2)
            .into_iter()
            .map(|z| Example {
                image: z.image.map(|v| 1e10 * (v + 1.0)),
                label: z.label,
            })
            .collect();
        let err = client_local_update(&model, &w, &data, 3, 1e300).unwrap_err();
        assert_eq!(err, FlError::NonFinite { client: 0, iteration: 0 });
    }

    #[test]
    fn dataset_size_checked() {
        let model = tiny_model();
        let w = model.init(2);
        let cfg = FlConfig::uniform(model.spec().clone(), 2, 2, 1, 0.1);
        let data = vec![examples(2), examples(3)];
        assert_eq!(
            run_round(&model, &w, &cfg, &data, 0).unwrap_err(),
            FlError::DatasetMismatch {
                client: 1,
                expected: 2,
                got: 3
            }
        );
    }
}
