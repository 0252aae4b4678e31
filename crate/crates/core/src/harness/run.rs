//! Mode execution. All numeric work happens first, trials in parallel with
//! results kept in trial order; files are then written by one thread.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentSpec, Mode, SweepTarget};
use super::output::{line_plot, num, ppm_bytes, write_atomic, FileEntry, Series, Table, Writer};
use super::HarnessError;
use crate::analysis::{cosine, delta_tau, estimate_cov_bar_jg, lemma1_scaling_fit, norm, score_reconstructions, MetricReport};
use crate::attack::{guess_joint, oracle_multiclient_attack, run_attack, stack_images, AttackConfig, AttackState, Knowledge, SearchResult};
use crate::autodiff::Tensor;
use crate::data::{load_idx, synth_dataset, SynthSpec};
use crate::fl::{partition, run_round, run_training, RoundLog};
use crate::models::{Example, Model, ParamVector, DEFAULT_JACOBIAN_CAP};
use crate::seed;

pub const TOOL_NAME: &str = "gradleak";

/// Record of one run, written as `manifest.json` next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub mode: String,
    /// SHA-256 of the effective config, serialized.
    pub spec_hash: String,
    pub master_seed: u64,
    pub trial_seeds: Vec<u64>,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub status: String,
    pub error: Option<String>,
    pub exit_code: i32,
    pub files: Vec<FileEntry>,
    pub summary: BTreeMap<String, Value>,
}

/// Seeds of one trial. Trial `t` depends only on the master seed and `t`.
#[derive(Debug, Clone, Copy)]
struct Trial {
    index: usize,
    seed: u64,
    data: u64,
    init: u64,
    attack: u64,
}

impl Trial {
    fn new(master: u64, index: usize) -> Self {
        let s = seed::derive(master, index as u64);
        Trial {
            index,
            seed: s,
            data: seed::stream(s, "data"),
            init: seed::stream(s, "init"),
            attack: seed::stream(s, "attack"),
        }
    }
}

/// Where a trial's examples come from.
#[derive(Debug, Clone)]
enum Source {
    Synthetic(SynthSpec),
    /// IDX examples whose label fits the model, sampled without replacement.
    Pool(Arc<Vec<Example>>),
}

impl Source {
    fn new(spec: &ExperimentSpec, idx: Option<&Arc<Vec<Example>>>) -> Result<Self, HarnessError> {
        match (&spec.data, idx) {
            (DataSource::Synthetic(_), _) => Ok(Source::Synthetic(spec.synth_spec().expect("synthetic source"))),
            (DataSource::Idx(_), Some(raw)) => {
                let classes = spec.model.classes;
                let pool: Vec<Example> = raw.iter().filter(|z| z.label < classes).cloned().collect();
                Ok(Source::Pool(Arc::new(pool)))
            }
            (DataSource::Idx(_), None) => Err(HarnessError::Runtime("IDX data was not loaded".into())),
        }
    }

    fn draw(&self, count: usize, seed: u64) -> Result<Vec<Example>, HarnessError> {
        match self {
            Source::Synthetic(s) => Ok(synth_dataset(s, count, seed)?),
            Source::Pool(pool) => {
                if count > pool.len() {
                    return Err(HarnessError::Runtime(format!(
                        "need {count} examples but the IDX data holds {} with usable labels",
                        pool.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(rand::seq::index::sample(&mut rng, pool.len(), count)
                    .into_iter()
                    .map(|i| pool[i].clone())
                    .collect())
            }
        }
    }
}

fn load_source_data(spec: &ExperimentSpec) -> Result<Option<Arc<Vec<Example>>>, HarnessError> {
    match &spec.data {
        DataSource::Idx(src) => Ok(Some(Arc::new(load_idx(&src.images, &src.labels, Some(spec.model.input))?))),
        DataSource::Synthetic(_) => Ok(None),
    }
}

fn diff_norm(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn image(batch: &Tensor, i: usize) -> Tensor {
    let shape = batch.shape()[1..].to_vec();
    let d: usize = shape.iter().product();
    Tensor::new(shape, batch.data()[i * d..(i + 1) * d].to_vec())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

struct TrainOutcome {
    logs: Vec<RoundLog>,
    losses: Vec<(f64, f64)>,
}

fn train_trial(spec: &ExperimentSpec, model: &Model, source: &Source, trial: &Trial) -> Result<TrainOutcome, HarnessError> {
    let cfg = spec.fl_config();
    let data = source.draw(cfg.total_images(), trial.data)?;
    let datasets = partition(&data, &cfg.batch_sizes)?;
    let w0 = model.init(trial.init);
    let logs = run_training(model, &w0, &cfg, &datasets, spec.rounds)?;
    let losses = logs
        .iter()
        .map(|l| Ok((model.loss(&l.w_before, &data)?, model.loss(&l.w_after, &data)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(TrainOutcome { logs, losses })
}

struct AttackOutcome {
    cfg: AttackConfig,
    truth: Vec<Example>,
    state: AttackState,
    report: Option<MetricReport>,
    search: Option<SearchResult>,
    delta_norm: f64,
}

/// One round of training from a fresh `W^0`, then inversion of its update.
fn attack_trial(spec: &ExperimentSpec, model: &Model, source: &Source, trial: &Trial, oracle: bool) -> Result<AttackOutcome, HarnessError> {
    let fl = spec.fl_config();
    let n = fl.total_images();
    let data = source.draw(n, trial.data)?;
    let datasets = partition(&data, &fl.batch_sizes)?;
    let w0 = model.init(trial.init);
    let log = run_round(model, &w0, &fl, &datasets, 0)?;
    let delta_norm = delta_tau(model, &fl, &w0, &datasets, trial.seed)?.norm();
    let mut cfg = spec.attack.config(&spec.fl, trial.attack);
    let knowledge = Knowledge::from_data(&data, &spec.attack.canaries)?;
    let search = if spec.attack.eta_grid.is_empty() && spec.attack.count_grid.is_empty() {
        None
    } else {
        let etas = if spec.attack.eta_grid.is_empty() {
            vec![cfg.eta]
        } else {
            spec.attack.eta_grid.clone()
        };
        let counts = if spec.attack.count_grid.is_empty() {
            vec![cfg.image_count]
        } else {
            spec.attack.count_grid.clone()
        };
        let mut search_cfg = cfg.clone();
        search_cfg.seed = seed::stream(trial.attack, "search");
        let result = guess_joint(model, &search_cfg, &log.w_before, &log.w_after, &knowledge, &etas, &counts)?;
        cfg.eta = result.best_eta;
        cfg.image_count = result.best_image_count;
        Some(result)
    };
    let truth_labels: Vec<usize> = data.iter().map(|z| z.label).collect();
    let labels = if cfg.image_count == n {
        truth_labels.clone()
    } else {
        knowledge.labels_for_count(cfg.image_count)
    };
    let state = if oracle {
        let assignment: Vec<usize> = fl
            .batch_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect();
        oracle_multiclient_attack(model, &cfg, &log.w_before, &log.w_after, &labels, &assignment)?
    } else {
        run_attack(model, &cfg, &log.w_before, &log.w_after, &labels)?
    };
    let report = if cfg.image_count == n {
        Some(score_reconstructions(
            &state.reconstruction,
            &stack_images(&data),
            &state.labels,
            &truth_labels,
        )?)
    } else {
        None
    };
    Ok(AttackOutcome {
        cfg,
        truth: data,
        state,
        report,
        search,
        delta_norm,
    })
}

fn collect<T: Send>(trials: &[Trial], f: impl Fn(&Trial) -> Result<T, HarnessError> + Sync + Send) -> Result<Vec<T>, HarnessError> {
    let results: Vec<Result<T, HarnessError>> = trials.par_iter().map(f).collect();
    results.into_iter().collect()
}

type Summary = BTreeMap<String, Value>;

fn emit_train(spec: &ExperimentSpec, model: &Model, source: &Source, trials: &[Trial], w: &mut Writer) -> Result<Summary, HarnessError> {
    let outcomes = collect(trials, |t| train_trial(spec, model, source, t))?;
    let mut table = Table::new(&["trial", "round", "loss_before", "loss_after", "update_norm", "aggregate_residual"]);
    for (t, o) in trials.iter().zip(&outcomes) {
        for (log, (before, after)) in o.logs.iter().zip(&o.losses) {
            table.push(vec![
                t.index.to_string(),
                log.round.to_string(),
                num(*before),
                num(*after),
                num(diff_norm(&log.w_after, &log.w_before)),
                num(log.aggregate_residual()),
            ]);
        }
    }
    w.table("rounds.csv", &table)?;
    let series: Vec<Series> = trials
        .iter()
        .zip(&outcomes)
        .map(|(t, o)| Series {
            name: format!("trial {}", t.index),
            points: o.losses.iter().enumerate().map(|(r, l)| (r as f64 + 1.0, l.1)).collect(),
        })
        .collect();
    w.write(
        "loss.svg",
        line_plot("Training loss", "round", "loss after round", &series).as_bytes(),
    )?;
    let mut s = Summary::new();
    s.insert("rounds".into(), json!(spec.rounds));
    s.insert(
        "mean_final_loss".into(),
        json!(mean(outcomes.iter().map(|o| o.losses.last().map_or(f64::NAN, |l| l.1)))),
    );
    Ok(s)
}

fn emit_attack(
    spec: &ExperimentSpec,
    model: &Model,
    source: &Source,
    trials: &[Trial],
    oracle: bool,
    w: &mut Writer,
) -> Result<Summary, HarnessError> {
    let outcomes = collect(trials, |t| attack_trial(spec, model, source, t, oracle))?;
    let mut metrics = Table::new(&[
        "trial",
        "image_count",
        "eta",
        "mean_mse",
        "mean_psnr",
        "mean_ssim",
        "final_loss",
        "best_step",
        "delta_norm",
    ]);
    let mut images = Table::new(&["trial", "recon", "truth", "label", "mse", "psnr", "ssim"]);
    let mut loss = Table::new(&["trial", "step", "best_loss", "loss"]);
    let mut search = Table::new(&["trial", "eta", "image_count", "canary_score", "final_loss", "chosen"]);
    for (t, o) in trials.iter().zip(&outcomes) {
        let (mse, psnr, ssim) = o
            .report
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |r| (r.mean_mse, r.mean_psnr, r.mean_ssim));
        metrics.push(vec![
            t.index.to_string(),
            o.cfg.image_count.to_string(),
            num(o.cfg.eta),
            num(mse),
            num(psnr),
            num(ssim),
            num(o.state.best_loss()),
            o.state.best_step.to_string(),
            num(o.delta_norm),
        ]);
        if let Some(r) = &o.report {
            for s in &r.images {
                images.push(vec![
                    t.index.to_string(),
                    s.recon.to_string(),
                    s.truth.to_string(),
                    s.label.to_string(),
                    num(s.mse),
                    num(s.psnr),
                    num(s.ssim),
                ]);
            }
        }
        for (step, (best, raw)) in o.state.loss_trace.iter().zip(&o.state.raw_loss_trace).enumerate() {
            loss.push(vec![t.index.to_string(), step.to_string(), num(*best), num(*raw)]);
        }
        if let Some(sr) = &o.search {
            for row in &sr.table {
                let chosen = row.eta == sr.best_eta && row.image_count == sr.best_image_count;
                search.push(vec![
                    t.index.to_string(),
                    num(row.eta),
                    row.image_count.to_string(),
                    num(row.score),
                    num(row.final_loss),
                    chosen.to_string(),
                ]);
            }
        }
    }
    w.table("metrics.csv", &metrics)?;
    w.table("images.csv", &images)?;
    w.table("loss.csv", &loss)?;
    if !search.rows.is_empty() {
        w.table("search.csv", &search)?;
    }
    for (t, o) in trials.iter().zip(&outcomes) {
        for i in 0..o.state.labels.len() {
            w.write(
                &format!("images/trial{}_recon{i}.ppm", t.index),
                &ppm_bytes(&image(&o.state.reconstruction, i))?,
            )?;
        }
        for (i, z) in o.truth.iter().enumerate() {
            w.write(&format!("images/trial{}_truth{i}.ppm", t.index), &ppm_bytes(&z.image)?)?;
        }
    }
    let series: Vec<Series> = trials
        .iter()
        .zip(&outcomes)
        .map(|(t, o)| Series {
            name: format!("trial {}", t.index),
            points: o
                .state
                .loss_trace
                .iter()
                .enumerate()
                .map(|(i, l)| (i as f64, l.max(f64::MIN_POSITIVE).log10()))
                .collect(),
        })
        .collect();
    let title = if oracle { "Oracle inversion loss" } else { "Inversion loss" };
    w.write("loss.svg", line_plot(title, "step", "log10 best loss", &series).as_bytes())?;
    let mut s = Summary::new();
    s.insert(
        "mean_mse".into(),
        json!(mean(outcomes.iter().filter_map(|o| o.report.as_ref().map(|r| r.mean_mse)))),
    );
    s.insert(
        "mean_ssim".into(),
        json!(mean(outcomes.iter().filter_map(|o| o.report.as_ref().map(|r| r.mean_ssim)))),
    );
    s.insert("mean_final_loss".into(), json!(mean(outcomes.iter().map(|o| o.state.best_loss()))));
    s.insert("oracle".into(), json!(oracle));
    Ok(s)
}

fn emit_divergence(
    spec: &ExperimentSpec,
    model: &Model,
    source: &Source,
    trials: &[Trial],
    w: &mut Writer,
) -> Result<Summary, HarnessError> {
    let w0 = model.init(seed::stream(spec.seed, "init"));
    let base = spec.fl_config();
    let n = base.total_images();
    let draws = collect(trials, |t| {
        let data = source.draw(n, t.data)?;
        Ok(partition(&data, &base.batch_sizes)?)
    })?;
    let mut per_tau: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for &tau in &spec.divergence.taus {
        let mut cfg = base.clone();
        cfg.local_iters = tau;
        let deltas: Vec<Result<Vec<f64>, HarnessError>> = trials
            .par_iter()
            .zip(&draws)
            .map(|(t, d)| Ok(delta_tau(model, &cfg, &w0, d, t.seed)?.delta.into_values()))
            .collect();
        per_tau.push((tau, deltas.into_iter().collect::<Result<_, _>>()?));
    }
    let mut delta = Table::new(&["tau", "trial", "delta_norm"]);
    let mut summary_table = Table::new(&["tau", "predictor", "mean_delta_norm", "std_err_norm", "mean_trial_norm"]);
    let mut points = Vec::new();
    let mut means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (tau, deltas) in &per_tau {
        for (t, d) in trials.iter().zip(deltas) {
            delta.push(vec![tau.to_string(), t.index.to_string(), num(norm(d))]);
        }
        let r = deltas.len() as f64;
        let m = w0.len();
        let mut mu = vec![0.0; m];
        for d in deltas {
            for (a, v) in mu.iter_mut().zip(d) {
                *a += v / r;
            }
        }
        let std_err = if deltas.len() < 2 {
            f64::NAN
        } else {
            let mut var = 0.0;
            for d in deltas {
                var += d.iter().zip(&mu).map(|(v, u)| (v - u) * (v - u)).sum::<f64>();
            }
            (var / (r - 1.0) / r).sqrt()
        };
        let predictor = (tau * (tau - 1)) as f64 / 2.0;
        let mean_norm = norm(&mu);
        summary_table.push(vec![
            tau.to_string(),
            num(predictor),
            num(mean_norm),
            num(std_err),
            num(mean(deltas.iter().map(|d| norm(d)))),
        ]);
        points.push((predictor, mean_norm));
        means.insert(*tau, mu);
    }
    w.table("delta.csv", &delta)?;
    w.table("delta_summary.csv", &summary_table)?;
    let mut s = Summary::new();
    let distinct = {
        let mut taus = spec.divergence.taus.clone();
        taus.sort_unstable();
        taus.dedup();
        taus.len()
    };
    if distinct >= 3 {
        let fit = lemma1_scaling_fit(&points)?;
        s.insert("fit_slope".into(), json!(fit.slope));
        s.insert("fit_r_squared".into(), json!(fit.r_squared));
    }
    if spec.divergence.cov_samples > 0 {
        let samples = source.draw(spec.divergence.cov_samples, seed::stream(spec.seed, "cov"))?;
        let est = estimate_cov_bar_jg(model, &w0, &samples, base.clients(), n, base.eta, DEFAULT_JACOBIAN_CAP, false)?;
        let mc = means.get(&2);
        let mut cov = Table::new(&["index", "cov_bar", "prediction", "monte_carlo_mean"]);
        for i in 0..est.cov_bar.len() {
            cov.push(vec![
                i.to_string(),
                num(est.cov_bar[i]),
                num(est.prediction[i]),
                num(mc.map_or(f64::NAN, |m| m[i])),
            ]);
        }
        w.table("cov.csv", &cov)?;
        if let Some(m) = mc {
            s.insert("cov_cosine".into(), json!(cosine(&est.prediction, m)));
            s.insert("cov_norm_ratio".into(), json!(norm(&est.prediction) / norm(m)));
        }
        s.insert("mu_g_mean".into(), json!(est.mu_g_mean()));
    }
    let series = vec![Series {
        name: "mean delta".into(),
        points: per_tau.iter().zip(&points).map(|((tau, _), p)| (*tau as f64, p.1)).collect(),
    }];
    w.write(
        "delta.svg",
        line_plot("Client drift vs local iterations", "tau", "norm of mean delta", &series).as_bytes(),
    )?;
    Ok(s)
}

/// Cartesian product of the sweep axes, last axis varying fastest.
pub fn sweep_points(axes: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (name, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((name.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

struct SweepRow {
    mse: f64,
    ssim: f64,
    loss: f64,
    delta_norm: f64,
}

fn sweep_job(spec: &ExperimentSpec, idx: Option<&Arc<Vec<Example>>>, target: SweepTarget, trial: &Trial) -> Result<SweepRow, HarnessError> {
    spec.validate()?;
    let model = Model::new(spec.model_spec())?;
    let source = Source::new(spec, idx)?;
    match target {
        SweepTarget::Attack | SweepTarget::Oracle => {
            let o = attack_trial(spec, &model, &source, trial, target == SweepTarget::Oracle)?;
            let (mse, ssim) = o.report.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.mean_mse, r.mean_ssim));
            Ok(SweepRow {
                mse,
                ssim,
                loss: o.state.best_loss(),
                delta_norm: o.delta_norm,
            })
        }
        SweepTarget::Divergence => {
            let fl = spec.fl_config();
            let data = source.draw(fl.total_images(), trial.data)?;
            let datasets = partition(&data, &fl.batch_sizes)?;
            let w0 = model.init(trial.init);
            Ok(SweepRow {
                mse: f64::NAN,
                ssim: f64::NAN,
                loss: f64::NAN,
                delta_norm: delta_tau(&model, &fl, &w0, &datasets, trial.seed)?.norm(),
            })
        }
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn emit_sweep(spec: &ExperimentSpec, trials: &[Trial], idx: Option<&Arc<Vec<Example>>>, w: &mut Writer) -> Result<Summary, HarnessError> {
    let sweep = spec
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::Validation("sweep: missing [sweep] section".into()))?;
    let points = sweep_points(&sweep.axes);
    let jobs: Vec<(usize, &Trial)> = (0..points.len()).flat_map(|p| trials.iter().map(move |t| (p, t))).collect();
    let results: Vec<Result<SweepRow, HarnessError>> = jobs
        .par_iter()
        .map(|&(p, trial)| {
            let mut sub = spec.clone();
            sub.sweep = None;
            sub.mode = Some(match sweep.run {
                SweepTarget::Attack => Mode::Attack,
                SweepTarget::Oracle => Mode::Oracle,
                SweepTarget::Divergence => Mode::Divergence,
            });
            sub.trials = 1;
            for (name, value) in &points[p] {
                sub.apply_axis(name, value)?;
            }
            sweep_job(&sub, idx, sweep.run, trial)
        })
        .collect();
    let axis_names: Vec<&str> = sweep.axes.keys().map(String::as_str).collect();
    let mut header = vec!["point", "trial"];
    header.extend(&axis_names);
    header.extend(["status", "error", "matched_mse", "ssim", "loss", "delta_norm"]);
    let mut table = Table::new(&header);
    let mut failed = 0;
    let mut cells: Vec<(usize, f64)> = Vec::new();
    for (&(p, trial), r) in jobs.iter().zip(&results) {
        let mut row = vec![p.to_string(), trial.index.to_string()];
        row.extend(points[p].iter().map(|(_, v)| value_text(v)));
        match r {
            Ok(s) => {
                row.extend([
                    "ok".to_string(),
                    String::new(),
                    num(s.mse),
                    num(s.ssim),
                    num(s.loss),
                    num(s.delta_norm),
                ]);
                cells.push((
                    p,
                    if sweep.run == SweepTarget::Divergence {
                        s.delta_norm
                    } else {
                        s.mse
                    },
                ));
            }
            Err(e) => {
                failed += 1;
                row.extend(["failed".to_string(), e.to_string()]);
                row.extend(std::iter::repeat_n(num(f64::NAN), 4));
            }
        }
        table.push(row);
    }
    w.table("sweep.csv", &table)?;

    // Quality against the first axis; one line per combination of the rest.
    let mut lines: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (p, v) in &cells {
        let rest: Vec<String> = points[*p][1..].iter().map(|(n, v)| format!("{n}={}", value_text(v))).collect();
        lines.entry(rest.join(" ")).or_default().entry(*p).or_default().push(*v);
    }
    let x_of = |p: usize| {
        let v = &points[p][0].1;
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).unwrap_or(p as f64)
    };
    let series: Vec<Series> = lines
        .into_iter()
        .map(|(name, by_point)| Series {
            name: if name.is_empty() { "mean over trials".into() } else { name },
            points: by_point.into_iter().map(|(p, vs)| (x_of(p), mean(vs.into_iter()))).collect(),
        })
        .collect();
    let y_label = if sweep.run == SweepTarget::Divergence {
        "mean delta norm"
    } else {
        "mean matched MSE"
    };
    w.write("sweep.svg", line_plot("Sweep", axis_names[0], y_label, &series).as_bytes())?;
    let mut s = Summary::new();
    s.insert("points".into(), json!(points.len()));
    s.insert("sub_runs".into(), json!(jobs.len()));
    s.insert("failed".into(), json!(failed));
    Ok(s)
}

fn execute(spec: &ExperimentSpec, trials: &[Trial], w: &mut Writer) -> Result<Summary, HarnessError> {
    let idx = load_source_data(spec)?;
    if spec.mode() == Mode::Sweep {
        return emit_sweep(spec, trials, idx.as_ref(), w);
    }
    let model = Model::new(spec.model_spec())?;
    let source = Source::new(spec, idx.as_ref())?;
    match spec.mode() {
        Mode::Train => emit_train(spec, &model, &source, trials, w),
        Mode::Attack => emit_attack(spec, &model, &source, trials, false, w),
        Mode::Oracle => emit_attack(spec, &model, &source, trials, true, w),
        Mode::Divergence => emit_divergence(spec, &model, &source, trials, w),
        Mode::Sweep => unreachable!("handled above"),
    }
}

/// Runs `spec` into `out` on a pool of `threads` workers (0 picks the
/// machine's parallelism) and writes `manifest.json` whether or not the run
/// succeeds. Artifacts do not depend on the worker count.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, threads: usize) -> Result<RunManifest, HarnessError> {
    spec.validate()?;
    let started = Instant::now();
    let mut writer = Writer::new(out).map_err(|e| HarnessError::Validation(format!("out: directory not writable ({e})")))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))?;
    let trials: Vec<Trial> = (0..spec.trials).map(|t| Trial::new(spec.seed, t)).collect();
    let result = pool.install(|| execute(spec, &trials, &mut writer));
    let (status, error, exit_code, summary) = match &result {
        Ok(s) => ("ok", None, 0, s.clone()),
        Err(e) => ("failed", Some(e.to_string()), e.exit_code(), Summary::new()),
    };
    let manifest = RunManifest {
        schema: super::config::SCHEMA_VERSION,
        tool: TOOL_NAME.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        mode: spec.mode().name().into(),
        spec_hash: Sha256::digest(spec.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        master_seed: spec.seed,
        trial_seeds: trials.iter().map(|t| t.seed).collect(),
        threads: pool.current_num_threads(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        status: status.into(),
        error,
        exit_code,
        files: writer.files().to_vec(),
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_atomic(&out.join("manifest.json"), format!("{text}\n").as_bytes())?;
    result.map(|_| manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_product_order() {
        let mut axes = BTreeMap::new();
        axes.insert("a".to_string(), vec![toml::Value::Integer(1), toml::Value::Integer(2)]);
        axes.insert(
            "b".to_string(),
            vec![toml::Value::Integer(7), toml::Value::Integer(8), toml::Value::Integer(9)],
        );
        let p = sweep_points(&axes);
        assert_eq!(p.len(), 6);
        assert_eq!(
            p[1],
            vec![("a".into(), toml::Value::Integer(1)), ("b".into(), toml::Value::Integer(8))]
        );
    }

    #[test]
    fn trial_seeds_are_prefix_stable() {
        let a: Vec<u64> = (0..3).map(|t| Trial::new(5, t).seed).collect();
        let b: Vec<u64> = (0..5).map(|t| Trial::new(5, t).seed).collect();
        assert_eq!(a, b[..3]);
    }
}
