//! Desk-scale classifiers and per-example loss derivatives.
//!
//! Two architectures are provided, both twice differentiable everywhere:
//!
//! * `mlp`: flatten, then `tanh` hidden layers, then a linear head.
//! * `lenet_tiny`: 3x3 conv (same padding) -> tanh -> 2x2 mean pool ->
//!   3x3 conv -> tanh -> 2x2 mean pool -> linear head.
//!
//! The loss is softmax cross-entropy against one-hot labels. All weights of a
//! model live in one flat [`ParamVector`]; the graph views layers through
//! slices of that vector.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, SparseMap, Tensor, Var};

/// Upper bound on `M` for dense `M x M` Jacobians.
pub const DEFAULT_JACOBIAN_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example {index}: expected image shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("example {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("Jacobian of {m} parameters exceeds the cap of {cap}")]
    JacobianCap { m: usize, cap: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    LenetTiny,
}

/// Architecture, input shape, class count and layer widths.
///
/// For `mlp`, `widths` lists hidden layer sizes. For `lenet_tiny` it lists the
/// two convolution channel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input: [usize; 3],
    pub classes: usize,
    pub widths: Vec<usize>,
}

impl ModelSpec {
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Mlp,
            input,
            classes,
            widths: hidden.to_vec(),
        }
    }

    pub fn lenet_tiny(input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::LenetTiny,
            input,
            classes,
            widths: vec![4, 8],
        }
    }

    pub fn image_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::InvalidSpec(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::InvalidSpec("layer widths must be positive".into()));
        }
        if self.arch == Architecture::LenetTiny {
            if self.widths.len() != 2 {
                return Err(ModelError::InvalidSpec(format!(
                    "lenet_tiny takes exactly 2 channel widths, got {}",
                    self.widths.len()
                )));
            }
            if h % 4 != 0 || w % 4 != 0 {
                return Err(ModelError::InvalidSpec(format!(
                    "lenet_tiny needs height and width divisible by 4, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter segments `(name, shape, fan_in)` in storage order.
    fn segments(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut segs = Vec::new();
        let dense = |segs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
            segs.push((format!("{name}.weight"), vec![fan_in, fan_out], fan_in));
            segs.push((format!("{name}.bias"), vec![fan_out], fan_in));
        };
        match self.arch {
            Architecture::Mlp => {
                let mut prev = self.image_len();
                for (i, &width) in self.widths.iter().enumerate() {
                    dense(&mut segs, &format!("hidden{i}"), prev, width);
                    prev = width;
                }
                dense(&mut segs, "head", prev, self.classes);
            }
            Architecture::LenetTiny => {
                let [c, h, w] = self.input;
                let (c1, c2) = (self.widths[0], self.widths[1]);
                dense(&mut segs, "conv1", c * 9, c1);
                dense(&mut segs, "conv2", c1 * 9, c2);
                dense(&mut segs, "head", (h / 4) * (w / 4) * c2, self.classes);
            }
        }
        segs
    }

    /// Total parameter count `M`.
    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|(_, shape, _)| shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer boundaries of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Flat model weights with named layer views.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(ModelError::ParamLength {
                expected: layout.total,
                got: values.len(),
            });
        }
        Ok(ParamVector { layout, values })
    }

    /// Reassembles a vector from per-layer tensors in layout order.
    pub fn flatten(layout: Arc<ParamLayout>, layers: &[Tensor]) -> Result<Self> {
        let values: Vec<f64> = layers.iter().flat_map(|t| t.data().iter().copied()).collect();
        let shapes_ok =
            layers.len() == layout.segments.len() && layers.iter().zip(&layout.segments).all(|(t, s)| t.shape() == s.shape.as_slice());
        if !shapes_ok {
            return Err(ModelError::ParamLength {
                expected: layout.total,
                got: values.len(),
            });
        }
        Self::from_values(layout, values)
    }

    /// Per-layer tensors in layout order.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .segments
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.values[s.start..s.start + s.len()].to_vec()))
            .collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParamVector {
            layout: Arc::clone(&self.layout),
            values,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One image-label pair. `image` is `C x H x W` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

/// A validated model with its prebuilt patch and pooling operators.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
    conv: Option<ConvMaps>,
}

#[derive(Debug, Clone)]
struct ConvMaps {
    patches1: Arc<SparseMap>,
    pool1: Arc<SparseMap>,
    patches2: Arc<SparseMap>,
    pool2: Arc<SparseMap>,
}

/// Image layouts understood by the patch extractor.
#[derive(Clone, Copy)]
enum Layout {
    ChannelsFirst,
    ChannelsLast,
}

fn pixel_index(layout: Layout, c: usize, y: usize, x: usize, channels: usize, height: usize, width: usize) -> usize {
    match layout {
        Layout::ChannelsFirst => (c * height + y) * width + x,
        Layout::ChannelsLast => (y * width + x) * channels + c,
    }
}

/// 3x3 zero-padded patches: output row layout is `[position][channel * 9 + ky * 3 + kx]`.
fn patch_map(layout: Layout, channels: usize, height: usize, width: usize) -> Arc<SparseMap> {
    let mut rows = Vec::with_capacity(height * width * channels * 9);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                            rows.push(Vec::new());
                        } else {
                            let i = pixel_index(layout, c, sy as usize, sx as usize, channels, height, width);
                            rows.push(vec![(i, 1.0)]);
                        }
                    }
                }
            }
        }
    }
    SparseMap::from_rows(format!("patches3x3_{channels}x{height}x{width}"), channels * height * width, rows)
}

/// 2x2 mean pooling on a channels-last image.
fn pool_map(channels: usize, height: usize, width: usize) -> Arc<SparseMap> {
    let (oh, ow) = (height / 2, width / 2);
    let mut rows = Vec::with_capacity(oh * ow * channels);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..channels {
                let mut row = Vec::with_capacity(4);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = pixel_index(Layout::ChannelsLast, c, 2 * y + dy, 2 * x + dx, channels, height, width);
                        row.push((i, 0.25));
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(format!("meanpool2_{channels}x{height}x{width}"), channels * height * width, rows)
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut start = 0;
        let segments = spec
            .segments()
            .into_iter()
            .map(|(name, shape, _)| {
                let seg = Segment { name, start, shape };
                start += seg.len();
                seg
            })
            .collect();
        let layout = Arc::new(ParamLayout { segments, total: start });
        let conv = match spec.arch {
            Architecture::Mlp => None,
            Architecture::LenetTiny => {
                let [c, h, w] = spec.input;
                let c1 = spec.widths[0];
                Some(ConvMaps {
                    patches1: patch_map(Layout::ChannelsFirst, c, h, w),
                    pool1: pool_map(c1, h, w),
                    patches2: patch_map(Layout::ChannelsLast, c1, h / 2, w / 2),
                    pool2: pool_map(spec.widths[1], h / 2, w / 2),
                })
            }
        };
        Ok(Model { spec, layout, conv })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Deterministic `W^0`: each layer uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.layout.total);
        for (_, shape, fan_in) in self.spec.segments() {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            values.extend((0..n).map(|_| rng.gen_range(-s..=s)));
        }
        ParamVector {
            layout: Arc::clone(&self.layout),
            values,
        }
    }

    pub fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.layout.total {
            return Err(ModelError::ParamLength {
                expected: self.layout.total,
                got: w.len(),
            });
        }
        Ok(())
    }

    pub fn check_example(&self, index: usize, z: &Example) -> Result<()> {
        if z.image.shape() != self.spec.input.as_slice() {
            return Err(ModelError::ShapeMismatch {
                index,
                expected: self.spec.input.to_vec(),
                got: z.image.shape().to_vec(),
            });
        }
        if z.label >= self.spec.classes {
            return Err(ModelError::LabelOutOfRange {
                index,
                label: z.label,
                classes: self.spec.classes,
            });
        }
        Ok(())
    }

    /// Stacks a batch into `[N, C*H*W]` images and its label list.
    pub fn pack(&self, batch: &[Example]) -> Result<(Tensor, Vec<usize>)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let d = self.spec.image_len();
        let mut data = Vec::with_capacity(batch.len() * d);
        let mut labels = Vec::with_capacity(batch.len());
        for (i, z) in batch.iter().enumerate() {
            self.check_example(i, z)?;
            data.extend_from_slice(z.image.data());
            labels.push(z.label);
        }
        Ok((Tensor::matrix(batch.len(), d, data), labels))
    }

    pub fn one_hot(&self, labels: &[usize]) -> Result<Tensor> {
        let c = self.spec.classes;
        let mut data = vec![0.0; labels.len() * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(ModelError::LabelOutOfRange {
                    index: i,
                    label: y,
                    classes: c,
                });
            }
            data[i * c + y] = 1.0;
        }
        Ok(Tensor::matrix(labels.len(), c, data))
    }

    fn layer(&self, g: &mut Graph, w: Var, index: usize) -> Result<Var> {
        let seg = &self.layout.segments[index];
        let flat = g.slice(w, seg.start, seg.len())?;
        Ok(if seg.shape.len() == 1 { flat } else { g.reshape(flat, &seg.shape)? })
    }

    fn dense(&self, g: &mut Graph, w: Var, index: usize, h: Var) -> Result<Var> {
        let weight = self.layer(g, w, index)?;
        let bias = self.layer(g, w, index + 1)?;
        let z = g.matmul(h, weight)?;
        Ok(g.add_row(z, bias)?)
    }

    /// Logits `[N, classes]` for images `x: [N, C*H*W]` under weights `w: [M]`.
    pub fn logits(&self, g: &mut Graph, w: Var, x: Var) -> Result<Var> {
        match &self.conv {
            None => {
                let mut h = x;
                let hidden = self.spec.widths.len();
                for i in 0..hidden {
                    let z = self.dense(g, w, 2 * i, h)?;
                    h = g.tanh(z)?;
                }
                self.dense(g, w, 2 * hidden, h)
            }
            Some(maps) => {
                let n = g.value(x).shape()[0];
                let [c, hgt, wid] = self.spec.input;
                let (c1, c2) = (self.spec.widths[0], self.spec.widths[1]);

                let p = g.sparse(x, &maps.patches1)?;
                let p = g.reshape(p, &[n * hgt * wid, c * 9])?;
                let a = self.dense(g, w, 0, p)?;
                let a = g.tanh(a)?;
                let a = g.reshape(a, &[n, hgt * wid * c1])?;
                let a = g.sparse(a, &maps.pool1)?;

                let (h2, w2) = (hgt / 2, wid / 2);
                let p = g.sparse(a, &maps.patches2)?;
                let p = g.reshape(p, &[n * h2 * w2, c1 * 9])?;
                let a = self.dense(g, w, 2, p)?;
                let a = g.tanh(a)?;
                let a = g.reshape(a, &[n, h2 * w2 * c2])?;
                let a = g.sparse(a, &maps.pool2)?;
                self.dense(g, w, 4, a)
            }
        }
    }

    /// Summed (not averaged) cross-entropy over the rows of `x`.
    pub fn loss_sum(&self, g: &mut Graph, w: Var, x: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(g, w, x)?;
        let logp = g.log_softmax(logits)?;
        let onehot = g.constant(self.one_hot(labels)?);
        let picked = g.dot(onehot, logp)?;
        Ok(g.neg(picked)?)
    }

    /// Builds the mean cross-entropy of `batch` under `w`. Returns the graph
    /// with handles to the weight leaf and the loss.
    pub fn forward_loss(&self, w: &ParamVector, batch: &[Example]) -> Result<LossGraph> {
        self.check_params(w)?;
        let (x, labels) = self.pack(batch)?;
        let mut graph = Graph::new();
        let wv = graph.input("w", w.to_tensor());
        let xv = graph.input("x", x);
        let total = self.loss_sum(&mut graph, wv, xv, &labels)?;
        let loss = graph.scale(total, 1.0 / labels.len() as f64)?;
        Ok(LossGraph {
            graph,
            weights: wv,
            images: xv,
            loss,
        })
    }

    pub fn loss(&self, w: &ParamVector, batch: &[Example]) -> Result<f64> {
        let lg = self.forward_loss(w, batch)?;
        Ok(lg.graph.value(lg.loss).item())
    }

    /// `sum_i g(w; x_i, y_i)` and the summed loss for packed images.
    pub fn gradient_sum(&self, w: &[f64], x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let wv = g.input("w", Tensor::vector(w.to_vec()));
        let xv = g.constant(x.clone());
        let loss = self.loss_sum(&mut g, wv, xv, labels)?;
        let grad = g.gradient(loss, &[wv])?[0];
        Ok((g.value(loss).item(), g.value(grad).data().to_vec()))
    }

    /// Exact gradient of the single-example loss `g(W; z)`.
    pub fn per_example_gradient(&self, w: &ParamVector, z: &Example) -> Result<ParamVector> {
        self.check_params(w)?;
        let (x, labels) = self.pack(std::slice::from_ref(z))?;
        let (_, grad) = self.gradient_sum(w.values(), &x, &labels)?;
        Ok(w.with_values(grad))
    }

    /// Hessian-vector product `J(W; z) v`.
    pub fn hessian_vector_product(&self, w: &ParamVector, z: &Example, v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(w)?;
        let (x, labels) = self.pack(std::slice::from_ref(z))?;
        self.hvp_packed(w.values(), &x, &labels, v)
    }

    /// Hessian of the summed loss over packed images, applied to `v`.
    pub fn hvp_packed(&self, w: &[f64], x: &Tensor, labels: &[usize], v: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let wv = g.input("w", Tensor::vector(w.to_vec()));
        let xv = g.constant(x.clone());
        let loss = self.loss_sum(&mut g, wv, xv, labels)?;
        let grad = g.gradient(loss, &[wv])?[0];
        let cot = g.constant(Tensor::vector(v.to_vec()));
        let hv = g.vjp(grad, cot, &[wv])?[0];
        Ok(g.value(hv).data().to_vec())
    }

    /// Dense `M x M` Jacobian of `g(W; z)`; row `i` is `d g_i / d W`.
    pub fn per_example_jacobian(&self, w: &ParamVector, z: &Example, cap: usize) -> Result<Vec<Vec<f64>>> {
        self.check_params(w)?;
        let (x, labels) = self.pack(std::slice::from_ref(z))?;
        self.jacobian_packed(w.values(), &x, &labels, cap)
    }

    /// Dense Hessian of the summed loss over packed images.
    pub fn jacobian_packed(&self, w: &[f64], x: &Tensor, labels: &[usize], cap: usize) -> Result<Vec<Vec<f64>>> {
        let m = w.len();
        if m > cap {
            return Err(ModelError::JacobianCap { m, cap });
        }
        let mut g = Graph::new();
        let wv = g.input("w", Tensor::vector(w.to_vec()));
        let xv = g.constant(x.clone());
        let loss = self.loss_sum(&mut g, wv, xv, labels)?;
        let grad = g.gradient(loss, &[wv])?[0];
        let mark = g.len();
        let mut rows = Vec::with_capacity(m);
        let mut basis = vec![0.0; m];
        for i in 0..m {
            basis[i] = 1.0;
            let cot = g.constant(Tensor::vector(basis.clone()));
            basis[i] = 0.0;
            let row = g.vjp(grad, cot, &[wv])?[0];
            rows.push(g.value(row).data().to_vec());
            g.truncate(mark);
        }
        Ok(rows)
    }
}

/// Handles into a graph holding a model's mean loss.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub weights: Var,
    pub images: Var,
    pub loss: Var,
}

/// Convenience wrapper for [`Model::new`] followed by [`Model::init`].
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    Ok(Model::new(spec.clone())?.init(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_example(spec: &ModelSpec, seed: u64, label: usize) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.image_len();
        Example {
            image: Tensor::new(spec.input.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()),
            label,
        }
    }

    #[test]
    fn mlp_parameter_count() {
        let spec = ModelSpec::mlp([1, 8, 8], &[32], 4);
        assert_eq!(spec.param_count(), 64 * 32 + 32 + 32 * 4 + 4);
        assert_eq!(Model::new(spec).unwrap().param_count(), 2212);
    }

    #[test]
    fn lenet_parameter_count() {
        let spec = ModelSpec::lenet_tiny([1, 16, 16], 4);
        assert_eq!(spec.param_count(), (9 * 4 + 4) + (36 * 8 + 8) + (128 * 4 + 4));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Model::new(ModelSpec::lenet_tiny([1, 10, 10], 4)).is_err());
        assert!(Model::new(ModelSpec::mlp([1, 0, 8], &[4], 4)).is_err());
        assert!(Model::new(ModelSpec::mlp([1, 8, 8], &[4], 1)).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::mlp([1, 8, 8], &[32], 4);
        let a = init_model(&spec, 1).unwrap();
        let b = init_model(&spec, 1).unwrap();
        let c = init_model(&spec, 2).unwrap();
        assert_eq!(a, b);
        let differing = a.values().iter().zip(c.values()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.99 * a.len() as f64);
        let s = 1.0 / 64f64.sqrt();
        assert!(a.values()[..64 * 32].iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let model = Model::new(ModelSpec::lenet_tiny([1, 8, 8], 3)).unwrap();
        let w = model.init(5);
        let back = ParamVector::flatten(Arc::clone(model.layout()), &w.unflatten()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let spec = ModelSpec::mlp([1, 4, 4], &[3], 4);
        let model = Model::new(spec.clone()).unwrap();
        let w = model.init(0).with_values(vec![0.0; spec.param_count()]);
        let z = tiny_example(&spec, 1, 2);
        let loss = model.loss(&w, &[z]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_example_keeps_mean_loss() {
        let spec = ModelSpec::mlp([1, 4, 4], &[5], 3);
        let model = Model::new(spec.clone()).unwrap();
        let w = model.init(3);
        let z = tiny_example(&spec, 9, 1);
        let one = model.loss(&w, std::slice::from_ref(&z)).unwrap();
        let two = model.loss(&w, &[z.clone(), z]).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_examples() {
        let spec = ModelSpec::mlp([1, 4, 4], &[5], 3);
        let model = Model::new(spec.clone()).unwrap();
        let w = model.init(3);
        let bad_label = tiny_example(&spec, 1, 3);
        assert!(matches!(model.loss(&w, &[bad_label]), Err(ModelError::LabelOutOfRange { .. })));
        let bad_shape = Example {
            image: Tensor::zeros(&[1, 4, 5]),
            label: 0,
        };
        assert!(matches!(model.loss(&w, &[bad_shape]), Err(ModelError::ShapeMismatch { .. })));
        assert_eq!(model.loss(&w, &[]), Err(ModelError::EmptyBatch));
    }

    #[test]
    fn jacobian_cap_enforced() {
        let spec = ModelSpec::mlp([1, 4, 4], &[5], 3);
        let model = Model::new(spec.clone()).unwrap();
        let w = model.init(3);
        let z = tiny_example(&spec, 1, 0);
        assert_eq!(
            model.per_example_jacobian(&w, &z, 10),
            Err(ModelError::JacobianCap {
                m: spec.param_count(),
                cap: 10
            })
        );
    }

    #[test]
    fn patch_map_matches_direct_convolution() {
        // one channel 3x3 image, centre patch equals the whole image
        let map = patch_map(Layout::ChannelsFirst, 1, 3, 3);
        let img: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let patches = map.apply(&img, 1, false);
        let centre = &patches[4 * 9..5 * 9];
        assert_eq!(centre, img.as_slice());
        // corner patch has zero padding on the top-left
        assert_eq!(&patches[0..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }
}
