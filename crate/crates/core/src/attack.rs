//! The honest-but-curious client.
//!
//! The attacker sees two consecutive global models, extracts the aggregate
//! per-image gradient, and optimizes low-resolution dummy images so that a
//! simulated local training run on them reproduces it. The default simulation
//! treats all images as one super-client; the oracle variant simulates every
//! client separately using the true grouping.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bicubic_map, AutodiffError, Graph, SparseMap, Tensor, Var};
use crate::models::{Example, Model, ModelError, ModelSpec, ParamVector};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("weight snapshots differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("extraction learning rate must be non-zero and finite")]
    ZeroEta,
    #[error("attack expects {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("invalid client grouping: {0}")]
    Grouping(String),
    #[error("non-finite attack loss at step {step}")]
    NonFiniteLoss { step: usize, trace: Vec<f64> },
    #[error("search grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Inversion learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by 0.1 at 3/8, 5/8 and 7/8 of the budget.
    StepDecay,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, budget: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay => {
                let passed = [3, 5, 7].iter().filter(|&&m| step * 8 >= m * budget).count();
                base * 0.1f64.powi(passed as i32)
            }
        }
    }
}

/// What the attacker assumes and how it optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Guessed total image count `N`.
    pub image_count: usize,
    /// Guessed global learning rate.
    pub eta: f64,
    /// Guessed local iteration count.
    pub local_iters: usize,
    pub lr: f64,
    pub budget: usize,
    pub upsample: usize,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Indices of the attacker's own examples within the round's data.
    pub canaries: Vec<usize>,
}

impl AttackConfig {
    pub fn new(image_count: usize, eta: f64, local_iters: usize) -> Self {
        AttackConfig {
            image_count,
            eta,
            local_iters,
            lr: 0.1,
            budget: 2000,
            upsample: 2,
            optimizer: Optimizer::Adam,
            schedule: LrSchedule::Constant,
            seed: 0,
            canaries: Vec::new(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if self.image_count == 0 {
            return bad("image_count must be at least 1".into());
        }
        if !(self.eta.is_finite() && self.eta != 0.0) {
            return Err(AttackError::ZeroEta);
        }
        if self.local_iters == 0 {
            return bad("local_iters must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        let [_, h, w] = spec.input;
        if self.upsample == 0 || h % self.upsample != 0 || w % self.upsample != 0 {
            return bad(format!("upsample factor {} must divide the image extents {h}x{w}", self.upsample));
        }
        Ok(())
    }

    /// Shape `[C, H/f, W/f]` of one dummy image.
    pub fn dummy_shape(&self, spec: &ModelSpec) -> [usize; 3] {
        let [c, h, w] = spec.input;
        [c, h / self.upsample, w / self.upsample]
    }
}

/// The aggregate per-image gradient recovered from two global models.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedUpdate {
    pub gradient: ParamVector,
    pub round: usize,
    pub eta: f64,
}

/// `(W_t - W_t1) / eta`.
///
/// A descent step moves against the gradient, so this orientation returns
/// `+ (1/N) sum_k Delta_k` rather than its negation.
pub fn extract_update(w_t: &ParamVector, w_t1: &ParamVector, eta: f64, round: usize) -> Result<ExtractedUpdate> {
    if w_t.len() != w_t1.len() {
        return Err(AttackError::LengthMismatch {
            left: w_t.len(),
            right: w_t1.len(),
        });
    }
    if !(eta.is_finite() && eta != 0.0) {
        return Err(AttackError::ZeroEta);
    }
    let values = w_t.values().iter().zip(w_t1.values()).map(|(a, b)| (a - b) / eta).collect();
    Ok(ExtractedUpdate {
        gradient: w_t.with_values(values),
        round,
        eta,
    })
}

/// Unrolls `tau` local steps of size `eta / n` from `w` on images `x`
/// (`[n, D]`) and returns the accumulated gradient sum as a graph node.
pub fn unroll_client(g: &mut Graph, model: &Model, w: Var, x: Var, labels: &[usize], tau: usize, eta: f64) -> Result<Var> {
    if labels.is_empty() {
        return Err(AttackError::Grouping("a simulated client has no images".into()));
    }
    let step = eta / labels.len() as f64;
    let mut acc: Option<Var> = None;
    for _ in 0..tau {
        let wu = match acc {
            None => w,
            Some(a) => {
                let s = g.scale(a, step)?;
                g.sub(w, s)?
            }
        };
        let loss = model.loss_sum(g, wu, x, labels)?;
        let grad = g.gradient(loss, &[wu])?[0];
        acc = Some(match acc {
            None => grad,
            Some(a) => g.add(a, grad)?,
        });
    }
    acc.ok_or_else(|| AttackError::InvalidConfig("local_iters must be at least 1".into()))
}

/// One client holding every image: `Delta(X, Y) / N` as a graph node.
pub fn superclient_update(g: &mut Graph, model: &Model, w: Var, x: Var, labels: &[usize], tau: usize, eta: f64) -> Result<Var> {
    let acc = unroll_client(g, model, w, x, labels, tau, eta)?;
    Ok(g.scale(acc, 1.0 / labels.len() as f64)?)
}

/// `K` separately simulated clients, `sum_k Delta_k / N` as a graph node.
#[allow(clippy::too_many_arguments)]
pub fn multiclient_update(
    g: &mut Graph,
    model: &Model,
    w: Var,
    x: Var,
    labels: &[usize],
    groups: &[Vec<usize>],
    tau: usize,
    eta: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for group in groups {
        let xk = g.select_rows(x, group)?;
        let yk: Vec<usize> = group.iter().map(|&i| labels[i]).collect();
        let acc = unroll_client(g, model, w, xk, &yk, tau, eta)?;
        total = Some(match total {
            None => acc,
            Some(t) => g.add(t, acc)?,
        });
    }
    let total = total.ok_or_else(|| AttackError::Grouping("no client groups".into()))?;
    Ok(g.scale(total, 1.0 / labels.len() as f64)?)
}

/// Client grouping derived from an assignment of images to clients.
pub fn groups_from_assignment(assignment: &[usize]) -> Vec<Vec<usize>> {
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

fn check_groups(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (k, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(AttackError::Grouping(format!("client {k} has no images")));
        }
        for &i in group {
            if i >= n {
                return Err(AttackError::Grouping(format!("image index {i} out of range for {n} images")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(AttackError::Grouping(format!("image {i} assigned twice")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(AttackError::Grouping(format!("image {i} is not assigned to any client")));
    }
    Ok(())
}

/// How the attacker simulates the round.
#[derive(Debug, Clone, PartialEq)]
pub enum Simulation {
    SuperClient,
    /// Per-client image indices.
    Clients(Vec<Vec<usize>>),
}

/// The gradient-matching objective for fixed snapshots, labels and guesses.
#[derive(Debug, Clone)]
pub struct AttackProblem<'a> {
    model: &'a Model,
    w_t: Tensor,
    target: Tensor,
    labels: Vec<usize>,
    local_iters: usize,
    eta: f64,
    dummy_shape: [usize; 3],
    upsample: Arc<SparseMap>,
    simulation: Simulation,
}

impl<'a> AttackProblem<'a> {
    pub fn new(
        model: &'a Model,
        cfg: &AttackConfig,
        w_t: &ParamVector,
        target: &ExtractedUpdate,
        labels: &[usize],
        simulation: Simulation,
    ) -> Result<Self> {
        cfg.validate(model.spec())?;
        model.check_params(w_t)?;
        model.check_params(&target.gradient)?;
        if labels.len() != cfg.image_count {
            return Err(AttackError::LabelCount {
                expected: cfg.image_count,
                got: labels.len(),
            });
        }
        let classes = model.spec().classes;
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(ModelError::LabelOutOfRange { index, label, classes }.into());
        }
        // A single group holding every image in order is the super-client.
        let simulation = match simulation {
            Simulation::Clients(groups) => {
                check_groups(&groups, labels.len())?;
                if groups.len() == 1 && groups[0].iter().enumerate().all(|(i, &j)| i == j) {
                    Simulation::SuperClient
                } else {
                    Simulation::Clients(groups)
                }
            }
            s => s,
        };
        let dummy_shape = cfg.dummy_shape(model.spec());
        let [c, h, w] = dummy_shape;
        Ok(AttackProblem {
            model,
            w_t: w_t.to_tensor(),
            target: target.gradient.to_tensor(),
            labels: labels.to_vec(),
            local_iters: cfg.local_iters,
            eta: cfg.eta,
            dummy_shape,
            upsample: bicubic_map(c, h, w, cfg.upsample)?,
            simulation,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dummy_shape(&self) -> [usize; 3] {
        self.dummy_shape
    }

    fn dummy_len(&self) -> usize {
        self.dummy_shape.iter().product()
    }

    /// Builds the loss over full-resolution images `x` (`[N, D]`).
    fn loss_on_images(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.input("w", self.w_t.clone());
        let sim = match &self.simulation {
            Simulation::SuperClient => superclient_update(g, self.model, w, x, &self.labels, self.local_iters, self.eta)?,
            Simulation::Clients(groups) => multiclient_update(g, self.model, w, x, &self.labels, groups, self.local_iters, self.eta)?,
        };
        let target = g.constant(self.target.clone());
        let diff = g.sub(sim, target)?;
        Ok(g.sum_squares(diff)?)
    }

    /// Builds the loss as a function of a low-resolution dummy batch.
    pub fn build(&self, g: &mut Graph, dummy: &Tensor) -> Result<(Var, Var)> {
        let n = self.labels.len();
        if dummy.len() != n * self.dummy_len() {
            return Err(AttackError::InvalidConfig(format!(
                "dummy has {} values, expected {}",
                dummy.len(),
                n * self.dummy_len()
            )));
        }
        let d = g.input("dummy", dummy.clone().reshaped(vec![n, self.dummy_len()]));
        let x = g.sparse(d, &self.upsample)?;
        let loss = self.loss_on_images(g, x)?;
        Ok((d, loss))
    }

    pub fn loss(&self, dummy: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (_, loss) = self.build(&mut g, dummy)?;
        Ok(g.value(loss).item())
    }

    /// Loss and its gradient with respect to the dummy pixels.
    pub fn loss_and_grad(&self, dummy: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let (d, loss) = self.build(&mut g, dummy)?;
        let grad = g.second_order_gradient(loss, &[d])?[0];
        Ok((g.value(loss).item(), g.value(grad).clone().reshaped(dummy.shape().to_vec())))
    }

    /// Loss at full-resolution images `[N, C, H, W]`, bypassing the upsampler.
    pub fn loss_at_images(&self, images: &Tensor) -> Result<f64> {
        let n = self.labels.len();
        let d = self.model.spec().image_len();
        if images.len() != n * d {
            return Err(AttackError::InvalidConfig(format!(
                "expected {} image values, got {}",
                n * d,
                images.len()
            )));
        }
        let mut g = Graph::new();
        let x = g.input("x", images.clone().reshaped(vec![n, d]));
        let loss = self.loss_on_images(&mut g, x)?;
        Ok(g.value(loss).item())
    }

    /// Full-resolution images for a dummy batch, `[N, C, H, W]`.
    pub fn reconstruct(&self, dummy: &Tensor) -> Tensor {
        let n = self.labels.len();
        let [c, h, w] = self.model.spec().input;
        Tensor::new(vec![n, c, h, w], self.upsample.apply(dummy.data(), n, false))
    }
}

/// Packs examples into `[N, C, H, W]`.
pub fn stack_images(examples: &[Example]) -> Tensor {
    let mut shape = vec![examples.len()];
    if let Some(z) = examples.first() {
        shape.extend_from_slice(z.image.shape());
    }
    let data = examples.iter().flat_map(|z| z.image.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// `||sim(X) - target||^2` at full-resolution images with the super-client.
pub fn attack_loss(model: &Model, cfg: &AttackConfig, w_t: &ParamVector, target: &ExtractedUpdate, images: &[Example]) -> Result<f64> {
    let labels: Vec<usize> = images.iter().map(|z| z.label).collect();
    let problem = AttackProblem::new(model, cfg, w_t, target, &labels, Simulation::SuperClient)?;
    problem.loss_at_images(&stack_images(images))
}

/// Result of one inversion run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    /// Best dummy found, `[N, C, H/f, W/f]`.
    pub dummy: Tensor,
    pub labels: Vec<usize>,
    /// Best-so-far loss after each step (non-increasing).
    pub loss_trace: Vec<f64>,
    /// Loss of the iterate evaluated at each step.
    pub raw_loss_trace: Vec<f64>,
    /// `bicubic_upsample(dummy)`, `[N, C, H, W]`.
    pub reconstruction: Tensor,
    pub best_step: usize,
}

impl AttackState {
    pub fn best_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Runs the optimizer loop for a prepared problem.
pub fn optimize(problem: &AttackProblem<'_>, cfg: &AttackConfig) -> Result<AttackState> {
    let n = problem.labels().len();
    let [c, lh, lw] = problem.dummy_shape();
    let shape = vec![n, c, lh, lw];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = n * c * lh * lw;
    let mut dummy = Tensor::new(shape.clone(), (0..len).map(|_| rng.gen_range(0.0..1.0)).collect());
    let mut adam = Adam::new(len);
    let mut best = (f64::INFINITY, dummy.clone(), 0);
    let mut loss_trace = Vec::with_capacity(cfg.budget);
    let mut raw_loss_trace = Vec::with_capacity(cfg.budget);
    for step in 0..cfg.budget {
        let (loss, grad) = match problem.loss_and_grad(&dummy) {
            Ok(v) => v,
            Err(AttackError::Autodiff(AutodiffError::NonFinite { .. })) => {
                return Err(AttackError::NonFiniteLoss {
                    step,
                    trace: raw_loss_trace,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grad.all_finite() {
            return Err(AttackError::NonFiniteLoss {
                step,
                trace: raw_loss_trace,
            });
        }
        raw_loss_trace.push(loss);
        if loss < best.0 {
            best = (loss, dummy.clone(), step);
        }
        loss_trace.push(best.0);
        let lr = cfg.schedule.rate(cfg.lr, step, cfg.budget);
        match cfg.optimizer {
            Optimizer::Adam => adam.step(dummy.data_mut(), grad.data(), lr),
            Optimizer::Sgd => {
                for (x, g) in dummy.data_mut().iter_mut().zip(grad.data()) {
                    *x -= lr * g;
                }
            }
        }
        for x in dummy.data_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
    let (_, dummy, best_step) = best;
    Ok(AttackState {
        reconstruction: problem.reconstruct(&dummy),
        dummy,
        labels: problem.labels().to_vec(),
        loss_trace,
        raw_loss_trace,
        best_step,
    })
}

/// Super-client inversion of the update between `w_t` and `w_t1`.
pub fn run_attack(model: &Model, cfg: &AttackConfig, w_t: &ParamVector, w_t1: &ParamVector, labels: &[usize]) -> Result<AttackState> {
    let target = extract_update(w_t, w_t1, cfg.eta, 0)?;
    let problem = AttackProblem::new(model, cfg, w_t, &target, labels, Simulation::SuperClient)?;
    optimize(&problem, cfg)
}

/// Inversion that simulates each client separately using the true grouping
/// (`assignment[i]` is the client of image `i`).
pub fn oracle_multiclient_attack(
    model: &Model,
    cfg: &AttackConfig,
    w_t: &ParamVector,
    w_t1: &ParamVector,
    labels: &[usize],
    assignment: &[usize],
) -> Result<AttackState> {
    if assignment.len() != labels.len() {
        return Err(AttackError::Grouping(format!(
            "assignment covers {} images, labels cover {}",
            assignment.len(),
            labels.len()
        )));
    }
    let target = extract_update(w_t, w_t1, cfg.eta, 0)?;
    let groups = groups_from_assignment(assignment);
    let problem = AttackProblem::new(model, cfg, w_t, &target, labels, Simulation::Clients(groups))?;
    optimize(&problem, cfg)
}

/// What the attacker knows for hyperparameter searches: the label list of
/// the round's images and its own canary examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Knowledge {
    pub labels: Vec<usize>,
    pub canaries: Vec<Example>,
}

impl Knowledge {
    /// Labels of `data` plus the examples at `canaries`.
    pub fn from_data(data: &[Example], canaries: &[usize]) -> Result<Self> {
        let mut picked = Vec::with_capacity(canaries.len());
        for &i in canaries {
            let z = data
                .get(i)
                .ok_or_else(|| AttackError::InvalidConfig(format!("canary index {i} out of range for {} examples", data.len())))?;
            picked.push(z.clone());
        }
        Ok(Knowledge {
            labels: data.iter().map(|z| z.label).collect(),
            canaries: picked,
        })
    }

    /// Labels for a guessed count: canary labels first, then the remaining
    /// labels in order, truncated or repeated cyclically to `count`.
    pub fn labels_for_count(&self, count: usize) -> Vec<usize> {
        let mut rest = self.labels.clone();
        let mut ordered = Vec::with_capacity(rest.len());
        for z in &self.canaries {
            if let Some(p) = rest.iter().position(|&l| l == z.label) {
                rest.remove(p);
            }
            ordered.push(z.label);
        }
        ordered.extend(rest);
        if ordered.is_empty() {
            return vec![0; count];
        }
        ordered.iter().copied().cycle().take(count).collect()
    }
}

/// Mean over canaries of the lowest MSE against any reconstruction sharing
/// its label (any reconstruction if none does).
pub fn canary_score(state: &AttackState, canaries: &[Example]) -> f64 {
    if canaries.is_empty() {
        return f64::NAN;
    }
    let n = state.labels.len();
    let d = state.reconstruction.len() / n.max(1);
    let recon = state.reconstruction.data();
    let mse = |j: usize, z: &Example| {
        recon[j * d..(j + 1) * d]
            .iter()
            .zip(z.image.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d as f64
    };
    let mut total = 0.0;
    for z in canaries {
        let same: Vec<usize> = (0..n).filter(|&j| state.labels[j] == z.label).collect();
        let pool: Vec<usize> = if same.is_empty() { (0..n).collect() } else { same };
        total += pool.iter().map(|&j| mse(j, z)).fold(f64::INFINITY, f64::min);
    }
    total / canaries.len() as f64
}

/// One row of a hyperparameter search table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub eta: f64,
    pub image_count: usize,
    pub score: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_eta: f64,
    pub best_image_count: usize,
    pub table: Vec<ScoreRow>,
}

/// Canary-scored attack over every `(eta, image_count)` pair.
///
/// Grid points run in parallel, each with seed `derive(cfg.seed, index)`;
/// the table keeps grid order and ties go to the earliest point.
pub fn hyper_search(
    model: &Model,
    cfg: &AttackConfig,
    w_t: &ParamVector,
    w_t1: &ParamVector,
    knowledge: &Knowledge,
    points: &[(f64, usize)],
) -> Result<SearchResult> {
    if points.is_empty() {
        return Err(AttackError::EmptyGrid);
    }
    if knowledge.canaries.is_empty() {
        return Err(AttackError::InvalidConfig("a search needs at least one canary".into()));
    }
    let rows: Vec<Result<ScoreRow>> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(eta, count))| {
            let mut c = cfg.clone();
            c.eta = eta;
            c.image_count = count;
            c.seed = seed::derive(cfg.seed, i as u64);
            let labels = knowledge.labels_for_count(count);
            let state = run_attack(model, &c, w_t, w_t1, &labels)?;
            Ok(ScoreRow {
                eta,
                image_count: count,
                score: canary_score(&state, &knowledge.canaries),
                final_loss: state.best_loss(),
            })
        })
        .collect();
    let table = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.score < table[best].score {
            best = i;
        }
    }
    Ok(SearchResult {
        best_eta: table[best].eta,
        best_image_count: table[best].image_count,
        table,
    })
}

pub fn guess_learning_rate(
    model: &Model,
    cfg: &AttackConfig,
    w_t: &ParamVector,
    w_t1: &ParamVector,
    knowledge: &Knowledge,
    grid: &[f64],
) -> Result<SearchResult> {
    let points: Vec<(f64, usize)> = grid.iter().map(|&e| (e, cfg.image_count)).collect();
    hyper_search(model, cfg, w_t, w_t1, knowledge, &points)
}

pub fn guess_image_count(
    model: &Model,
    cfg: &AttackConfig,
    w_t: &ParamVector,
    w_t1: &ParamVector,
    knowledge: &Knowledge,
    candidates: &[usize],
) -> Result<SearchResult> {
    let points: Vec<(f64, usize)> = candidates.iter().map(|&n| (cfg.eta, n)).collect();
    hyper_search(model, cfg, w_t, w_t1, knowledge, &points)
}

/// Cartesian `(eta, image_count)` search.
pub fn guess_joint(
    model: &Model,
    cfg: &AttackConfig,
    w_t: &ParamVector,
    w_t1: &ParamVector,
    knowledge: &Knowledge,
    etas: &[f64],
    counts: &[usize],
) -> Result<SearchResult> {
    let points: Vec<(f64, usize)> = etas.iter().flat_map(|&e| counts.iter().map(move |&n| (e, n))).collect();
    hyper_search(model, cfg, w_t, w_t1, knowledge, &points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelSpec::mlp([1, 4, 4], &[6], 3)).unwrap()
    }

    #[test]
    fn extraction_basics() {
        let m = model();
        let w = m.init(1);
        let z = extract_update(&w, &w, 0.5, 0).unwrap();
        assert!(z.gradient.values().iter().all(|v| *v == 0.0));
        let short = Model::new(ModelSpec::mlp([1, 2, 2], &[], 2)).unwrap().init(1);
        assert!(matches!(
            extract_update(&w, &short, 1.0, 0),
            Err(AttackError::LengthMismatch { .. })
        ));
        assert_eq!(extract_update(&w, &w, 0.0, 0), Err(AttackError::ZeroEta));
    }

    #[test]
    fn config_validation() {
        let spec = ModelSpec::mlp([1, 4, 4], &[6], 3);
        assert!(AttackConfig::new(2, 0.1, 1).validate(&spec).is_ok());
        let mut c = AttackConfig::new(2, 0.1, 1);
        c.upsample = 3;
        assert!(c.validate(&spec).is_err());
        assert!(AttackConfig::new(0, 0.1, 1).validate(&spec).is_err());
        assert_eq!(AttackConfig::new(1, 0.0, 1).validate(&spec), Err(AttackError::ZeroEta));
    }

    #[test]
    fn grouping_checks() {
        assert_eq!(groups_from_assignment(&[1, 0, 1]), vec![vec![1], vec![0, 2]]);
        assert!(check_groups(&[vec![0], vec![2]], 3).is_err());
        assert!(check_groups(&[vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(check_groups(&[vec![0, 2], vec![1]], 3).is_ok());
    }

    #[test]
    fn labels_for_count_puts_canaries_first() {
        let ex = |label| Example {
            image: Tensor::zeros(&[1, 1, 1]),
            label,
        };
        let k = Knowledge {
            labels: vec![0, 1, 2, 1],
            canaries: vec![ex(1)],
        };
        assert_eq!(k.labels_for_count(4), vec![1, 0, 2, 1]);
        assert_eq!(k.labels_for_count(2), vec![1, 0]);
        assert_eq!(k.labels_for_count(6), vec![1, 0, 2, 1, 1, 0]);
    }

    #[test]
    fn step_decay_milestones() {
        let s = LrSchedule::StepDecay;
        assert_eq!(s.rate(0.1, 0, 800), 0.1);
        assert_eq!(s.rate(0.1, 299, 800), 0.1);
        assert!((s.rate(0.1, 300, 800) - 0.01).abs() < 1e-15);
        assert!((s.rate(0.1, 799, 800) - 1e-4).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 799, 800), 0.1);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut a = Adam::new(2);
        let mut x = vec![0.5, 0.5];
        a.step(&mut x, &[3.0, -0.01], 0.1);
        assert!((x[0] - 0.4).abs() < 1e-9);
        assert!((x[1] - 0.6).abs() < 1e-6);
    }
}
