//! A small deterministic tensor/layer engine: the CNN-LSTM counting network,
//! the fully connected baseline, SGD, finite-difference gradient checks and
//! checkpoints.

pub mod layers;

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Layer, LayerSpec, Param};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 5;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// Stacks equally shaped samples along a new leading batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("no samples to stack"))?;
        let mut shape = vec![samples.len()];
        shape.extend(&first.shape);
        let mut data = Vec::with_capacity(samples.len() * first.data.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", s.shape, first.shape)));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self { shape, data })
    }

    /// Sample `i` of a batched tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }
}

/// How a counting window is presented to a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkInput {
    /// The full `T x W` window.
    Sequence,
    /// Per-column means over the window.
    ColumnMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    input_shape: Vec<usize>,
    input_kind: NetworkInput,
    layers: Vec<LayerSpec>,
    rng_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub input_kind: NetworkInput,
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
    dropout_rng: ChaCha8Rng,
}

impl Network {
    /// Builds a network; layers feeding a rectifier get He-uniform weights,
    /// the others LeCun-uniform.
    pub fn new(input_shape: Vec<usize>, input_kind: NetworkInput, specs: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let gain = if matches!(specs.get(i + 1), Some(LayerSpec::Relu)) { 6.0 } else { 3.0 };
            let (layer, out) = Layer::build(spec, &shape, gain, &mut init_rng)?;
            layers.push(layer);
            shape = out;
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng_seed);
        dropout_rng.set_stream(1);
        Ok(Self { input_shape, input_kind, specs, layers, rng_seed, dropout_rng })
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    fn output_shape(&self) -> Vec<usize> {
        // Shapes were validated at build time.
        let mut shape = self.input_shape.clone();
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        for spec in &self.specs {
            shape = Layer::build(spec, &shape, 3.0, &mut scratch).expect("validated architecture").1;
        }
        shape
    }

    /// Seeded batch of uniform(-1, 1) inputs matching the input shape.
    pub fn random_input(&self, batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![batch];
        shape.extend(&self.input_shape);
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(Layer::params).map(Param::len).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(Layer::params)
    }

    /// All parameter values, concatenated in layer order.
    pub fn parameter_vector(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn set_parameter_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.len();
                p.value.copy_from_slice(&values[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// Index of the final layer that has parameters.
    pub fn last_dense_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::Dense(_)))
    }

    fn batched(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape == self.input_shape {
            let mut shape = vec![1];
            shape.extend(&input.shape);
            return Ok(Tensor { shape, data: input.data.clone() });
        }
        if input.shape.len() == self.input_shape.len() + 1 && input.shape[1..] == self.input_shape[..] {
            return Ok(input.clone());
        }
        Err(Error::Shape(format!("network expects {:?} (optionally batched), got {:?}", self.input_shape, input.shape)))
    }

    /// Runs layers `range` on an already batched activation.
    pub fn forward_range(&mut self, range: Range<usize>, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut act = x.clone();
        for i in range {
            let layer = &mut self.layers[i];
            act = layer.forward(&act, training, &mut self.dropout_rng)?;
            if act.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i, name: layer.name() });
            }
        }
        Ok(act)
    }

    /// Class probabilities `[B, classes]`; a single unbatched sample is
    /// accepted and treated as a batch of one.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<Tensor> {
        let x = self.batched(input)?;
        self.forward_range(0..self.layers.len(), &x, training)
    }

    /// Forward pass that also records the per-sample output shape at the end
    /// of every block. Activations, dropout, pooling and the softmax belong
    /// to the block of the layer before them.
    pub fn forward_trace(&mut self, input: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut act = self.batched(input)?;
        let mut trace = Vec::new();
        let n = self.layers.len();
        for i in 0..n {
            act = self.forward_range(i..i + 1, &act, false)?;
            let block_end = match self.specs.get(i + 1) {
                None => true,
                Some(LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::MaxPool2d { .. } | LayerSpec::Softmax) => false,
                Some(_) => true,
            };
            if block_end {
                trace.push(act.shape[1..].to_vec());
            }
        }
        Ok((act, trace))
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.grad.fill(0.0);
            }
        }
    }

    fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        let classes = self.output_dim();
        match labels.iter().find(|&&l| l == 0 || l > classes) {
            Some(&l) => Err(Error::LabelOutOfRange(l)),
            None => Ok(()),
        }
    }

    /// Mean cross-entropy of a batch, without touching gradients.
    pub fn loss(&mut self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let x = self.batched(inputs)?;
        self.check_labels(labels, x.batch_size())?;
        let p = self.forward_range(0..self.layers.len(), &x, false)?;
        Ok(cross_entropy(&p, labels).0)
    }

    /// Mean cross-entropy over the batch; gradient buffers are overwritten.
    /// Labels are class numbers starting at 1.
    pub fn loss_and_gradients(&mut self, inputs: &Tensor, labels: &[usize], training: bool) -> Result<f64> {
        let x = self.batched(inputs)?;
        self.loss_and_gradients_from(0, &x, labels, training)
    }

    /// Like [`Network::loss_and_gradients`] but starting from the activation
    /// entering layer `start`; only layers `start..` receive gradients.
    pub fn loss_and_gradients_from(&mut self, start: usize, x: &Tensor, labels: &[usize], training: bool) -> Result<f64> {
        self.check_labels(labels, x.shape[0])?;
        self.zero_grad();
        let p = self.forward_range(start..self.layers.len(), x, training)?;
        let (loss, mut grad) = cross_entropy(&p, labels);
        for i in (start..self.layers.len()).rev() {
            match self.layers[i].backward(&grad, i > start) {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(loss)
    }

    /// `theta -= lr * grad` for every parameter, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        self.sgd_step_layers(0..self.layers.len(), lr);
    }

    pub fn sgd_step_layers(&mut self, range: Range<usize>, lr: f64) {
        for layer in &mut self.layers[range] {
            for p in layer.params_mut() {
                for (v, g) in p.value.iter_mut().zip(p.grad.iter_mut()) {
                    *v -= lr * *g;
                    *g = 0.0;
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let desc = Descriptor {
            input_shape: self.input_shape.clone(),
            input_kind: self.input_kind,
            layers: self.specs.clone(),
            rng_seed: self.rng_seed,
        };
        let json = serde_json::to_vec(&desc)?;
        let params = self.parameter_vector();
        let mut out = Vec::with_capacity(18 + json.len() + params.len() * 8);
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidModel(m.to_owned());
        if bytes.len() < 10 || bytes[..4] != CKPT_MAGIC {
            return Err(bad("missing CNET magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = bytes.get(10..10 + json_len).ok_or_else(|| bad("truncated descriptor"))?;
        let desc: Descriptor = serde_json::from_slice(json)?;
        let pos = 10 + json_len;
        let n = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated parameter count"))?;
        let n = u64::from_le_bytes(n.try_into().unwrap()) as usize;
        let body = bytes.get(pos + 8..).filter(|b| b.len() == n * 8).ok_or_else(|| bad("parameter payload size mismatch"))?;
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut net = Network::new(desc.input_shape, desc.input_kind, desc.layers, desc.rng_seed)?;
        net.set_parameter_vector(&values)?;
        Ok(net)
    }
}

const CKPT_MAGIC: [u8; 4] = *b"CNET";
const CKPT_VERSION: u16 = 1;

/// Mean cross-entropy of `probs` against 1-based labels with probabilities
/// clamped at [`PROB_CLAMP`], and its gradient with respect to `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let bsz = probs.shape[0];
    let n = probs.data.len() / bsz;
    let mut grad = Tensor::zeros(probs.shape.clone());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let p = probs.data[b * n + label - 1];
        if p > PROB_CLAMP {
            loss -= p.ln();
            grad.data[b * n + label - 1] = -1.0 / (p * bsz as f64);
        } else {
            loss -= PROB_CLAMP.ln();
        }
    }
    (loss / bsz as f64, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepCountConfig {
    pub seq_len: usize,
    pub width: usize,
    pub lstm_cells: usize,
    pub dropout: f64,
    /// (filters, kernel_h, kernel_w, stride)
    pub conv1: (usize, usize, usize, usize),
    /// (size, stride)
    pub pool: (usize, usize),
    pub conv2: (usize, usize, usize, usize),
    pub dense: Vec<usize>,
}

impl DeepCountConfig {
    pub fn published() -> Self {
        Self {
            seq_len: 200,
            width: 360,
            lstm_cells: 64,
            dropout: 0.1,
            conv1: (6, 5, 5, 1),
            pool: (2, 2),
            conv2: (10, 5, 3, 3),
            dense: vec![1000, 200],
        }
    }

    /// Same topology shrunk to 12 x 20 inputs for fast gradient checks.
    pub fn toy() -> Self {
        Self {
            seq_len: 12,
            width: 20,
            lstm_cells: 12,
            dropout: 0.1,
            conv1: (6, 3, 3, 1),
            pool: (2, 2),
            conv2: (10, 3, 3, 2),
            dense: vec![24, 12],
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let conv = |(filters, kernel_h, kernel_w, stride)| LayerSpec::Conv2d { filters, kernel_h, kernel_w, stride };
        let mut specs = vec![
            LayerSpec::Lstm { cells: self.lstm_cells },
            LayerSpec::Dropout { rate: self.dropout },
            conv(self.conv1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: self.pool.0, stride: self.pool.1 },
            conv(self.conv2),
            LayerSpec::Relu,
            LayerSpec::Flatten,
        ];
        for &units in &self.dense {
            specs.push(LayerSpec::Dense { units });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense { units: N_CLASSES });
        specs.push(LayerSpec::Softmax);
        specs
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        Network::new(vec![self.seq_len, self.width], NetworkInput::Sequence, self.specs(), seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcbpConfig {
    pub width: usize,
    pub hidden: Vec<usize>,
}

impl FcbpConfig {
    pub fn published() -> Self {
        Self { width: 360, hidden: vec![300, 100] }
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut specs = vec![LayerSpec::Flatten];
        for &units in &self.hidden {
            specs.push(LayerSpec::Dense { units });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense { units: N_CLASSES });
        specs.push(LayerSpec::Softmax);
        Network::new(vec![self.width], NetworkInput::ColumnMeans, specs, seed)
    }
}

/// The published CNN-LSTM counting network for 200 x 360 windows.
pub fn build_deepcount() -> Network {
    DeepCountConfig::published().build(0).expect("published architecture is consistent")
}

/// The 360-300-100-5 fully connected baseline.
pub fn build_fcbp() -> Network {
    FcbpConfig::published().build(0).expect("published architecture is consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Stop early once the smoothed training loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, learning_rate: LR_SEMI, max_iter: 3000, seed: 0, target_loss: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning rates for the three data regimes (fixed, open, semi).
pub const LR_FIXED: f64 = 0.2;
pub const LR_OPEN: f64 = 0.15;
pub const LR_SEMI: f64 = 0.1;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Which parameter entries a gradient check visits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coverage {
    All,
    /// Per tensor: every entry if it has at most `per_tensor` entries,
    /// otherwise `per_tensor` seeded random entries plus the quarter as many
    /// entries with the largest analytic gradient.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (layer index, parameter name, flat index) of the worst entry.
    pub worst: Option<(usize, &'static str, usize)>,
    /// Entries left out because every step size down to `MIN_FD_EPS`
    /// crossed a kink.
    pub kinked: usize,
}

pub const MIN_FD_EPS: f64 = 1e-7;

/// Central difference of the loss for one parameter entry, re-running only
/// the layers from `layer` onward; `act` is the activation entering `layer`.
///
/// Returns `None` when a perturbation flips a ReLU sign or pooling winner
/// relative to `baseline` (the loss has a kink inside `±eps`).
fn numeric_entry(
    net: &mut Network,
    layer: usize,
    param: usize,
    index: usize,
    act: &Tensor,
    labels: &[usize],
    eps: f64,
    baseline: &[Vec<usize>],
) -> Result<Option<f64>> {
    let n = net.layers.len();
    let orig = net.layers[layer].params()[param].value[index];
    let eval = |net: &mut Network, v: f64| -> Result<(f64, bool)> {
        net.layers[layer].params_mut()[param].value[index] = v;
        let p = net.forward_range(layer..n, act, false)?;
        let smooth = (layer..n).all(|i| net.layers[i].switch_pattern() == baseline[i]);
        Ok((cross_entropy(&p, labels).0, smooth))
    };
    let plus = eval(net, orig + eps);
    let minus = eval(net, orig - eps);
    net.layers[layer].params_mut()[param].value[index] = orig;
    let ((plus, smooth_p), (minus, smooth_m)) = (plus?, minus?);
    Ok((smooth_p && smooth_m).then(|| (plus - minus) / (2.0 * eps)))
}

/// Compares analytic gradients (dropout disabled) with central finite
/// differences. `grads` overrides the analytic gradients, one vector per
/// parameter tensor in layer order; used to probe the harness itself.
pub fn gradient_check(
    net: &mut Network,
    inputs: &Tensor,
    labels: &[usize],
    eps: f64,
    coverage: Coverage,
    grads: Option<&[Vec<f64>]>,
) -> Result<GradCheckReport> {
    if !(MIN_FD_EPS..=1e-3).contains(&eps) {
        return Err(Error::InvalidParameter(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let x = net.batched(inputs)?;
    net.loss_and_gradients(&x, labels, false)?;
    let baseline: Vec<Vec<usize>> = net.layers.iter().map(Layer::switch_pattern).collect();
    let analytic: Vec<Vec<f64>> = match grads {
        Some(g) => g.to_vec(),
        None => net.params().map(|p| p.grad.clone()).collect(),
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None, kinked: 0 };
    let mut tensor = 0;
    let mut act = x;
    for li in 0..net.layers.len() {
        let names: Vec<&'static str> = net.layers[li].params().iter().map(|p| p.name).collect();
        for (pi, name) in names.into_iter().enumerate() {
            let g = &analytic[tensor];
            tensor += 1;
            let indices: Vec<usize> = match coverage {
                Coverage::All => (0..g.len()).collect(),
                Coverage::Sampled { per_tensor, .. } if g.len() <= per_tensor => (0..g.len()).collect(),
                Coverage::Sampled { per_tensor, seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut idx = sample(&mut rng, g.len(), per_tensor).into_vec();
                    let mut by_mag: Vec<usize> = (0..g.len()).collect();
                    by_mag.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
                    idx.extend(by_mag.into_iter().take(per_tensor.div_ceil(4)));
                    idx.sort_unstable();
                    idx.dedup();
                    idx
                }
            };
            for i in indices {
                let mut h = eps;
                let num = loop {
                    match numeric_entry(net, li, pi, i, &act, labels, h, &baseline)? {
                        Some(v) => break Some(v),
                        None if h / 10.0 >= MIN_FD_EPS * (1.0 - 1e-9) => h /= 10.0,
                        None => break None,
                    }
                };
                let Some(num) = num else {
                    report.kinked += 1;
                    continue;
                };
                let err = relative_error(g[i], num);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    report.worst = Some((li, name, i));
                }
            }
        }
        act = net.forward_range(li..li + 1, &act, false)?;
    }
    Ok(report)
}

/// Maximum relative error over every parameter entry.
pub fn finite_difference_check(net: &mut Network, inputs: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    Ok(gradient_check(net, inputs, labels, eps, Coverage::All, None)?.max_rel_err)
}
