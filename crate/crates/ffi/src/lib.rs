//! C ABI over the gradleak core.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Every call returns a [`GlStatus`]; on failure the
//! message is kept per thread and read with [`gl_last_error_message`].
//! Panics never unwind into C; they surface as `GL_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gradleak::analysis::delta_tau;
use gradleak::attack::{extract_update, run_attack, AttackConfig};
use gradleak::data::{synth_dataset, SynthSpec};
use gradleak::fl::{partition, run_round, FlConfig};
use gradleak::models::{Example, Model, ModelSpec, ParamVector};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Arguments were rejected before any work started.
    InvalidArgument = 2,
    /// The computation failed; see the last error message.
    Runtime = 3,
    /// A caller buffer is too small.
    BufferTooSmall = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// A model architecture.
pub struct GlModel(Model);

/// A flat parameter vector tied to a model layout.
pub struct GlParams(ParamVector);

/// An ordered list of labelled images.
pub struct GlDataset(Vec<Example>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

struct Fail(GlStatus, String);

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(GlStatus::InvalidArgument, msg.into())
}

fn runtime(e: impl std::fmt::Display) -> Fail {
    Fail(GlStatus::Runtime, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GlStatus::Panic
        }
    }
}

unsafe fn href<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(GlStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(GlStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(GlStatus::NullPointer, format!("{name} is null")));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns its full length in bytes.
/// Pass a null `buf` to query the length.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Tanh MLP on `channels x height x width` inputs with `n_hidden` hidden
/// widths (none gives a linear model).
#[no_mangle]
pub unsafe extern "C" fn gl_model_mlp(
    channels: usize,
    height: usize,
    width: usize,
    hidden: *const usize,
    n_hidden: usize,
    classes: usize,
    out: *mut *mut GlModel,
) -> GlStatus {
    guard(|| {
        let hidden = slice(hidden, n_hidden, "hidden")?;
        let model = Model::new(ModelSpec::mlp([channels, height, width], hidden, classes)).map_err(|e| invalid(e.to_string()))?;
        put(out, GlModel(model), "out")
    })
}

/// Two-stage tanh CNN with mean pooling.
#[no_mangle]
pub unsafe extern "C" fn gl_model_lenet_tiny(
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    out: *mut *mut GlModel,
) -> GlStatus {
    guard(|| {
        let model = Model::new(ModelSpec::lenet_tiny([channels, height, width], classes)).map_err(|e| invalid(e.to_string()))?;
        put(out, GlModel(model), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    free(model)
}

/// Parameter count of `model`, 0 if it is null.
#[no_mangle]
pub unsafe extern "C" fn gl_model_param_count(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

/// Seeded initial parameters.
#[no_mangle]
pub unsafe extern "C" fn gl_params_init(model: *const GlModel, seed: u64, out: *mut *mut GlParams) -> GlStatus {
    guard(|| {
        let m = href(model, "model")?;
        put(out, GlParams(m.0.init(seed)), "out")
    })
}

/// Parameters from `len` caller values laid out as in `gl_params_copy`.
#[no_mangle]
pub unsafe extern "C" fn gl_params_from_values(model: *const GlModel, values: *const f64, len: usize, out: *mut *mut GlParams) -> GlStatus {
    guard(|| {
        let m = href(model, "model")?;
        let v = slice(values, len, "values")?;
        if v.len() != m.0.param_count() {
            return Err(invalid(format!("model has {} parameters, got {}", m.0.param_count(), v.len())));
        }
        put(out, GlParams(m.0.init(0).with_values(v.to_vec())), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_params_free(params: *mut GlParams) {
    free(params)
}

/// Entry count, 0 if `params` is null.
#[no_mangle]
pub unsafe extern "C" fn gl_params_len(params: *const GlParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.len())
}

/// Copies the values into `buf`, which must hold `gl_params_len` entries.
#[no_mangle]
pub unsafe extern "C" fn gl_params_copy(params: *const GlParams, buf: *mut f64, len: usize) -> GlStatus {
    guard(|| {
        let p = href(params, "params")?;
        let v = p.0.values();
        if len < v.len() {
            return Err(Fail(GlStatus::BufferTooSmall, format!("buffer holds {len}, need {}", v.len())));
        }
        if buf.is_null() {
            return Err(Fail(GlStatus::NullPointer, "buf is null".into()));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// `count` synthetic blob images for `model`'s input shape and classes.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_synth(
    model: *const GlModel,
    blobs: usize,
    count: usize,
    seed: u64,
    out: *mut *mut GlDataset,
) -> GlStatus {
    guard(|| {
        let m = href(model, "model")?;
        let spec = SynthSpec {
            blobs,
            shape: m.0.spec().input,
            classes: m.0.spec().classes,
        };
        let data = synth_dataset(&spec, count, seed).map_err(|e| invalid(e.to_string()))?;
        put(out, GlDataset(data), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_dataset_free(dataset: *mut GlDataset) {
    free(dataset)
}

/// Example count, 0 if `dataset` is null.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_len(dataset: *const GlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Copies image `index` (`C*H*W` values) into `buf` and its label into `label`.
#[no_mangle]
pub unsafe extern "C" fn gl_dataset_image(
    dataset: *const GlDataset,
    index: usize,
    buf: *mut f64,
    len: usize,
    label: *mut usize,
) -> GlStatus {
    guard(|| {
        let d = href(dataset, "dataset")?;
        let z =
            d.0.get(index)
                .ok_or_else(|| invalid(format!("index {index} out of range for {} examples", d.0.len())))?;
        let v = z.image.data();
        if len < v.len() {
            return Err(Fail(GlStatus::BufferTooSmall, format!("buffer holds {len}, need {}", v.len())));
        }
        if buf.is_null() || label.is_null() {
            return Err(Fail(GlStatus::NullPointer, "buf or label is null".into()));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        *label = z.label;
        Ok(())
    })
}

type RoundInputs<'a> = (&'a Model, &'a ParamVector, Vec<Vec<Example>>, FlConfig);

unsafe fn fl_setup<'a>(
    model: *const GlModel,
    params: *const GlParams,
    dataset: *const GlDataset,
    sizes: *const usize,
    clients: usize,
    local_iters: usize,
    eta: f64,
) -> Result<RoundInputs<'a>, Fail> {
    let m = href(model, "model")?;
    let p = href(params, "params")?;
    let d = href(dataset, "dataset")?;
    let sizes = slice(sizes, clients, "sizes")?.to_vec();
    let mut cfg = FlConfig::uniform(m.0.spec().clone(), 1, 1, local_iters, eta);
    cfg.batch_sizes = sizes;
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    let shards = partition(&d.0, &cfg.batch_sizes).map_err(|e| invalid(e.to_string()))?;
    Ok((&m.0, &p.0, shards, cfg))
}

/// One FedAvg round: `dataset` is split into consecutive shards of
/// `sizes[0..clients]`, each client runs `local_iters` full-batch steps.
#[no_mangle]
pub unsafe extern "C" fn gl_fedavg_round(
    model: *const GlModel,
    params: *const GlParams,
    dataset: *const GlDataset,
    sizes: *const usize,
    clients: usize,
    local_iters: usize,
    eta: f64,
    out: *mut *mut GlParams,
) -> GlStatus {
    guard(|| {
        let (m, w, shards, cfg) = fl_setup(model, params, dataset, sizes, clients, local_iters, eta)?;
        let log = run_round(m, w, &cfg, &shards, 0).map_err(runtime)?;
        put(out, GlParams(log.w_after), "out")
    })
}

/// Gradient sum over the round's images divided by its size, recovered
/// from two consecutive global parameter vectors.
#[no_mangle]
pub unsafe extern "C" fn gl_extract_update(w_t: *const GlParams, w_t1: *const GlParams, eta: f64, out: *mut *mut GlParams) -> GlStatus {
    guard(|| {
        let a = href(w_t, "w_t")?;
        let b = href(w_t1, "w_t1")?;
        let u = extract_update(&a.0, &b.0, eta, 0).map_err(|e| invalid(e.to_string()))?;
        put(out, GlParams(u.gradient), "out")
    })
}

/// Norm of the gap between the FedAvg round and the super-client round
/// on the same data; written to `norm`.
#[no_mangle]
pub unsafe extern "C" fn gl_delta_tau(
    model: *const GlModel,
    params: *const GlParams,
    dataset: *const GlDataset,
    sizes: *const usize,
    clients: usize,
    local_iters: usize,
    eta: f64,
    norm: *mut f64,
) -> GlStatus {
    guard(|| {
        let (m, w, shards, cfg) = fl_setup(model, params, dataset, sizes, clients, local_iters, eta)?;
        if norm.is_null() {
            return Err(Fail(GlStatus::NullPointer, "norm is null".into()));
        }
        *norm = delta_tau(m, &cfg, w, &shards, 0).map_err(runtime)?.norm();
        Ok(())
    })
}

/// Super-client inversion of the update from `w_t` to `w_t1`.
///
/// `labels[0..count]` are the assumed labels; the best reconstruction
/// (`count*C*H*W` values) goes to `recon` and its loss to `loss`.
#[no_mangle]
pub unsafe extern "C" fn gl_attack(
    model: *const GlModel,
    w_t: *const GlParams,
    w_t1: *const GlParams,
    labels: *const usize,
    count: usize,
    eta: f64,
    local_iters: usize,
    lr: f64,
    budget: usize,
    upsample: usize,
    seed: u64,
    recon: *mut f64,
    recon_len: usize,
    loss: *mut f64,
) -> GlStatus {
    guard(|| {
        let m = href(model, "model")?;
        let a = href(w_t, "w_t")?;
        let b = href(w_t1, "w_t1")?;
        let labels = slice(labels, count, "labels")?;
        let mut cfg = AttackConfig::new(count, eta, local_iters);
        cfg.lr = lr;
        cfg.budget = budget;
        cfg.upsample = upsample;
        cfg.seed = seed;
        cfg.validate(m.0.spec()).map_err(|e| invalid(e.to_string()))?;
        let need = count * m.0.spec().image_len();
        if recon_len < need {
            return Err(Fail(GlStatus::BufferTooSmall, format!("recon holds {recon_len}, need {need}")));
        }
        if recon.is_null() || loss.is_null() {
            return Err(Fail(GlStatus::NullPointer, "recon or loss is null".into()));
        }
        let state = run_attack(&m.0, &cfg, &a.0, &b.0, labels).map_err(runtime)?;
        ptr::copy_nonoverlapping(state.reconstruction.data().as_ptr(), recon, need);
        *loss = state.best_loss();
        Ok(())
    })
}
