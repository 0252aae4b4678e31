//! Weight-space divergence between FedAvg and its super-client approximation.

use rayon::prelude::*;
use serde::Serialize;

use super::AnalysisError;
use crate::attack::unroll_client;
use crate::autodiff::Graph;
use crate::fl::{run_round, FlConfig};
use crate::models::{Example, Model, ParamVector};

type Result<T> = std::result::Result<T, AnalysisError>;

/// One exact draw of `delta(tau) = W_fed - W_single`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSample {
    pub delta: ParamVector,
    pub tau: usize,
    pub clients: usize,
    pub total_images: usize,
    pub eta: f64,
    pub seed: u64,
}

impl DivergenceSample {
    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }
}

/// Weights after one super-client round over `data`:
/// `W - (eta/N) Delta(X, Y)`.
pub fn superclient_round(model: &Model, w0: &ParamVector, data: &[Example], tau: usize, eta: f64) -> Result<ParamVector> {
    let (x, labels) = model.pack(data)?;
    let mut g = Graph::new();
    let w = g.input("w", w0.to_tensor());
    let xv = g.constant(x);
    let acc = unroll_client(&mut g, model, w, xv, &labels, tau, eta)?;
    let step = eta / labels.len() as f64;
    let values = w0.values().iter().zip(g.value(acc).data()).map(|(wv, a)| wv - step * a).collect();
    Ok(w0.with_values(values))
}

/// Runs the true FedAvg round and the super-client round from the same
/// `w0` and data and returns their exact difference.
pub fn delta_tau(model: &Model, cfg: &FlConfig, w0: &ParamVector, datasets: &[Vec<Example>], seed: u64) -> Result<DivergenceSample> {
    let fed = run_round(model, w0, cfg, datasets, 0)?;
    let all: Vec<Example> = datasets.iter().flatten().cloned().collect();
    let single = superclient_round(model, w0, &all, cfg.local_iters, cfg.eta)?;
    let delta = fed.w_after.values().iter().zip(single.values()).map(|(a, b)| a - b).collect();
    Ok(DivergenceSample {
        delta: w0.with_values(delta),
        tau: cfg.local_iters,
        clients: cfg.clients(),
        total_images: cfg.total_images(),
        eta: cfg.eta,
        seed,
    })
}

/// Monte Carlo estimate of `E[delta(tau)]` at a fixed `w0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: Vec<f64>,
    /// Per-coordinate standard error of the mean.
    pub std_err: Vec<f64>,
    pub trials: usize,
    /// `||delta||` of every trial, in trial order.
    pub trial_norms: Vec<f64>,
}

impl MonteCarloEstimate {
    pub fn norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Norm of the standard-error vector.
    pub fn std_err_norm(&self) -> f64 {
        self.std_err.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Averages `delta_tau` over `trials` data draws. `draw(i)` returns the
/// per-client datasets of trial `i` and its seed.
///
/// Trials run on the current rayon pool; results are reduced in trial order,
/// so the estimate does not depend on the worker count.
pub fn monte_carlo_expected_delta<F>(model: &Model, cfg: &FlConfig, w0: &ParamVector, trials: usize, draw: F) -> Result<MonteCarloEstimate>
where
    F: Fn(usize) -> (Vec<Vec<Example>>, u64) + Sync,
{
    if trials < 2 {
        return Err(AnalysisError::InvalidInput(format!("need at least 2 trials, got {trials}")));
    }
    let k = cfg.clients();
    if cfg.batch_sizes.iter().any(|&n| n != cfg.batch_sizes[0]) {
        return Err(AnalysisError::InvalidInput(format!(
            "Monte Carlo draws need equal client sizes, got {:?}",
            cfg.batch_sizes
        )));
    }
    let samples: Vec<Result<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let (data, seed) = draw(i);
            if data.len() != k {
                return Err(AnalysisError::InvalidInput(format!(
                    "trial {i} drew {} clients, expected {k}",
                    data.len()
                )));
            }
            Ok(delta_tau(model, cfg, w0, &data, seed)?.delta.into_values())
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    let m = w0.len();
    let r = trials as f64;
    let mut mean = vec![0.0; m];
    for s in &samples {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= r;
    }
    let mut var = vec![0.0; m];
    for s in &samples {
        for ((a, v), mu) in var.iter_mut().zip(s).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let std_err = var.iter().map(|v| (v / (r - 1.0) / r).sqrt()).collect();
    let trial_norms = samples.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(MonteCarloEstimate {
        mean,
        std_err,
        trials,
        trial_norms,
    })
}

/// Least-squares fit `response = slope * predictor` with zero intercept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    /// `1 - SS_res / SS_tot` with `SS_tot` about the response mean; `1` when
    /// every response and residual is zero.
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

/// Fits `||E[delta]||` against a predicted factor, e.g. `tau(tau-1)/2`,
/// `K - 1` or `1/N`.
pub fn lemma1_scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(AnalysisError::InvalidInput(format!(
            "need at least 3 settings, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite fit input".into()));
    }
    let first = points[0].0;
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    if points.iter().all(|(x, _)| *x == first) || sxx == 0.0 {
        return Err(AnalysisError::DegeneratePredictor);
    }
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - slope * x).powi(2)).sum();
    let ybar = points.iter().map(|(_, y)| y).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - ybar).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(ScalingFit {
        slope,
        r_squared,
        points: points.to_vec(),
    })
}

/// Sample estimate of `Cov(J, g)` and the leading-order `E[delta(2)]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovEstimate {
    /// `(1/(S-1)) sum_s J_s (g_s - mean g)`.
    pub cov_bar: Vec<f64>,
    /// `eta^2 (K-1)/N * cov_bar`.
    pub prediction: Vec<f64>,
    pub mu_g: Vec<f64>,
    /// Row-major `M x M` mean Hessian, when requested.
    pub mu_j: Option<Vec<f64>>,
    pub samples: usize,
}

impl CovEstimate {
    /// Mean entry of `mu_g`.
    pub fn mu_g_mean(&self) -> f64 {
        self.mu_g.iter().sum::<f64>() / self.mu_g.len().max(1) as f64
    }
}

/// Estimates the covariance term from `samples` i.i.d. examples at `w0` and
/// scales it to predict `E[delta(2)]` for `clients` clients holding
/// `total_images` images in all.
///
/// Each `J_s v` is a Hessian-vector product, so the `M x M` Jacobians are
/// only materialized for `mu_j` when `report_mu_j` is set.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cov_bar_jg(
    model: &Model,
    w0: &ParamVector,
    samples: &[Example],
    clients: usize,
    total_images: usize,
    eta: f64,
    cap: usize,
    report_mu_j: bool,
) -> Result<CovEstimate> {
    let m = w0.len();
    if m > cap {
        return Err(crate::models::ModelError::JacobianCap { m, cap }.into());
    }
    let s = samples.len();
    if s < 10 {
        return Err(AnalysisError::InvalidInput(format!("need at least 10 samples, got {s}")));
    }
    if clients == 0 || total_images == 0 {
        return Err(AnalysisError::InvalidInput("clients and total_images must be positive".into()));
    }
    let grads: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .map(|z| Ok(model.per_example_gradient(w0, z)?.into_values()))
        .collect();
    let grads = grads.into_iter().collect::<Result<Vec<_>>>()?;
    let mut mu_g = vec![0.0; m];
    for g in &grads {
        for (a, v) in mu_g.iter_mut().zip(g) {
            *a += v;
        }
    }
    for a in &mut mu_g {
        *a /= s as f64;
    }
    let products: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .zip(grads.par_iter())
        .map(|(z, g)| {
            let centered: Vec<f64> = g.iter().zip(&mu_g).map(|(a, b)| a - b).collect();
            Ok(model.hessian_vector_product(w0, z, &centered)?)
        })
        .collect();
    let products = products.into_iter().collect::<Result<Vec<_>>>()?;
    let mut cov_bar = vec![0.0; m];
    for p in &products {
        for (a, v) in cov_bar.iter_mut().zip(p) {
            *a += v;
        }
    }
    for a in &mut cov_bar {
        *a /= (s - 1) as f64;
    }
    let scale = eta * eta * (clients as f64 - 1.0) / total_images as f64;
    let prediction = cov_bar.iter().map(|v| scale * v).collect();
    let mu_j = if report_mu_j {
        let (x, labels) = model.pack(samples)?;
        let rows = model.jacobian_packed(w0.values(), &x, &labels, cap)?;
        Some(rows.into_iter().flatten().map(|v| v / s as f64).collect())
    } else {
        None
    };
    Ok(CovEstimate {
        cov_bar,
        prediction,
        mu_g,
        mu_j,
        samples: s,
    })
}

/// Cosine similarity of two vectors (0 if either is zero).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
