//! Offline training and evaluation of the counting networks, and the online
//! session that fuses network predictions with door events from the
//! activity HMMs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use ndarray::{s, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csi_io::{read_capture, split_streams, CsiCapture};
use crate::dwt::{component_features, DEFAULT_FEATURE_WINDOW, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::hmm::{classify_activity, ActivityLabel, DoorDetector, DoorEventKind, GaussianHmm, DEFAULT_DEBOUNCE};
use crate::neural::{Network, NetworkInput, Tensor, TrainConfig, LR_FIXED, LR_OPEN, LR_SEMI, N_CLASSES};
use crate::preprocess::{activity_components_from, counting_windows, ActivityConfig, CountingConfig, CsiWindow};
use crate::sim::{make_count_scene, simulate_capture};

pub const MIN_COUNT: usize = 1;
pub const MAX_COUNT: usize = N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Fixed,
    Semi,
    Open,
}

impl Regime {
    pub fn learning_rate(self) -> f64 {
        match self {
            Regime::Fixed => LR_FIXED,
            Regime::Semi => LR_SEMI,
            Regime::Open => LR_OPEN,
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Regime::Fixed),
            "semi" => Ok(Regime::Semi),
            "open" => Ok(Regime::Open),
            _ => Err(Error::InvalidParameter(format!("unknown regime {s:?} (fixed|semi|open)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Fixed => "fixed",
            Regime::Semi => "semi",
            Regime::Open => "open",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(CsiWindow, usize)>,
    pub regime: Regime,
}

impl Dataset {
    pub fn new(samples: Vec<(CsiWindow, usize)>, regime: Regime) -> Result<Self> {
        if let Some((_, l)) = samples.iter().find(|(_, l)| !(MIN_COUNT..=MAX_COUNT).contains(l)) {
            return Err(Error::LabelOutOfRange(*l));
        }
        Ok(Self { samples, regime })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for (_, l) in &self.samples {
            counts[l - 1] += 1;
        }
        counts
    }

    /// Seeded random split; `train_fraction` of every class goes to the
    /// first set.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for class in MIN_COUNT..=MAX_COUNT {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].1 == class).collect();
            idx.shuffle(&mut rng);
            let n_train = (idx.len() as f64 * train_fraction).round() as usize;
            for (k, i) in idx.into_iter().enumerate() {
                let dst = if k < n_train { &mut train } else { &mut test };
                dst.push(self.samples[i].clone());
            }
        }
        (Dataset { samples: train, regime: self.regime }, Dataset { samples: test, regime: self.regime })
    }
}

/// Network input for one window, per the network's input kind.
pub fn window_tensor(window: &CsiWindow, kind: NetworkInput) -> Tensor {
    match kind {
        NetworkInput::Sequence => Tensor {
            shape: vec![window.len(), window.width()],
            data: window.data.iter().copied().collect(),
        },
        NetworkInput::ColumnMeans => Tensor { shape: vec![window.width()], data: window.column_mean.clone() },
    }
}

fn batch_tensor<'a>(windows: impl Iterator<Item = &'a CsiWindow>, kind: NetworkInput) -> Result<Tensor> {
    let samples: Vec<Tensor> = windows.map(|w| window_tensor(w, kind)).collect();
    Tensor::stack(&samples)
}

/// Simulator-grounded dataset: for every count 1..=5, `scenes_per_class`
/// random rooms, each contributing `windows_per_class / scenes_per_class`
/// consecutive windows.
pub fn synthetic_dataset(
    windows_per_class: usize,
    scenes_per_class: usize,
    cfg: &CountingConfig,
    regime: Regime,
    seed: u64,
) -> Result<Dataset> {
    if scenes_per_class == 0 || windows_per_class < scenes_per_class {
        return Err(Error::InvalidParameter("need 1 <= scenes_per_class <= windows_per_class".into()));
    }
    let rate = f64::from(crate::csi_io::DEFAULT_RATE_HZ);
    let mut samples = Vec::with_capacity(windows_per_class * N_CLASSES);
    for count in MIN_COUNT..=MAX_COUNT {
        for s in 0..scenes_per_class {
            let n_windows = windows_per_class / scenes_per_class + usize::from(s < windows_per_class % scenes_per_class);
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add((count * 1000 + s) as u64);
            let scene = make_count_scene(count, scene_seed)?;
            let frames = (n_windows - 1) * cfg.stride + cfg.window_len;
            let capture = simulate_capture(&scene, frames as f64 / rate, rate, scene_seed)?;
            let windows = counting_windows(&capture, cfg)?;
            samples.extend(windows.into_iter().take(n_windows).map(|w| (w, count)));
        }
    }
    Dataset::new(samples, regime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss at every iteration.
    pub losses: Vec<f64>,
    /// Iteration whose parameters were returned.
    pub best_iteration: usize,
}

const SMOOTHING: usize = 10;

/// Seeded shuffled mini-batch SGD. Returns the parameters with the lowest
/// running-mean loss (over the last 10 iterations); stops early once that
/// running mean drops below `cfg.target_loss`.
pub fn train(mut net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.max_iter);
    let mut best = (f64::INFINITY, 0, net.parameter_vector());
    for iteration in 0..cfg.max_iter {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = batch_tensor(idx.iter().map(|&i| &data.samples[i].0), net.input_kind)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].1).collect();
        let loss = match net.loss_and_gradients(&x, &labels, true) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(Error::Diverged { iteration, loss: l }),
            Err(Error::NonFiniteLayer { layer, name }) => {
                warn!("non-finite activation in layer {layer} ({name}) at iteration {iteration}");
                return Err(Error::Diverged { iteration, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        net.sgd_step(cfg.learning_rate);
        losses.push(loss);
        let tail = &losses[losses.len().saturating_sub(SMOOTHING)..];
        let smoothed = tail.iter().sum::<f64>() / tail.len() as f64;
        if iteration % 50 == 0 {
            debug!("iteration {iteration}: loss {loss:.5} (running {smoothed:.5})");
        }
        if tail.len() == SMOOTHING && smoothed < best.0 {
            best = (smoothed, iteration, net.parameter_vector());
        }
        if cfg.target_loss.is_some_and(|t| tail.len() == SMOOTHING && smoothed < t) {
            info!("target loss reached at iteration {iteration} (running loss {smoothed:.5})");
            break;
        }
    }
    if best.0.is_finite() {
        net.set_parameter_vector(&best.2)?;
    } else {
        // fewer iterations than the smoothing span: keep the final state
        best.1 = losses.len().saturating_sub(1);
    }
    Ok((net, TrainReport { losses, best_iteration: best.1 }))
}

/// Rows are true counts, columns predicted counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[usize; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth - 1][predicted - 1] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: usize = (0..N_CLASSES).map(|i| self.counts[i][i]).sum();
        trace as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> [usize; N_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "confusion_{}={}", i + 1, cells.join(","))?;
        }
        write!(f, "accuracy={:.6}", self.accuracy())
    }
}

/// Index of the largest probability plus one; ties go to the smaller count.
pub fn argmax_count(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    best + 1
}

pub fn predict_count(net: &mut Network, sample: &CsiWindow) -> Result<(usize, Vec<f64>)> {
    let p = net.forward(&window_tensor(sample, net.input_kind), false)?;
    Ok((argmax_count(&p.data), p.data))
}

pub fn evaluate(net: &mut Network, data: &Dataset) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut cm = ConfusionMatrix::default();
    for chunk in data.samples.chunks(64) {
        let x = batch_tensor(chunk.iter().map(|(w, _)| w), net.input_kind)?;
        let p = net.forward(&x, false)?;
        for ((_, label), probs) in chunk.iter().zip(p.data.chunks_exact(N_CLASSES)) {
            cm.add(*label, argmax_count(probs));
        }
    }
    Ok(cm)
}

/// Activity recognition front end: low-pass + PCA, wavelet features over a
/// trailing context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityPipeline {
    pub preprocess: ActivityConfig,
    pub levels: usize,
    pub feature_window: usize,
    /// Trailing samples used to classify the activity at a counting window.
    pub context: usize,
    /// Take `ln` of the energy/variance features (floored at 1e-12).
    pub log_features: bool,
}

impl Default for ActivityPipeline {
    fn default() -> Self {
        Self {
            preprocess: ActivityConfig::default(),
            levels: DEFAULT_LEVELS,
            feature_window: DEFAULT_FEATURE_WINDOW,
            context: 12 * DEFAULT_FEATURE_WINDOW,
            log_features: true,
        }
    }
}

impl ActivityPipeline {
    /// HMM observation sequence (one `2L`-vector per feature window) from
    /// raw amplitude rows.
    pub fn observations(&self, amplitude: ArrayView2<f64>, rate_hz: f64) -> Result<Vec<Vec<f64>>> {
        let comps = activity_components_from(amplitude, rate_hz, &self.preprocess)?;
        let mut obs = component_features(&comps, self.levels, self.feature_window)?.columns();
        if self.log_features {
            obs.iter_mut().flatten().for_each(|v| *v = v.max(1e-12).ln());
        }
        Ok(obs)
    }

    pub fn capture_observations(&self, capture: &CsiCapture) -> Result<Vec<Vec<f64>>> {
        let (amp, _) = split_streams(capture)?;
        self.observations(amp.data.view(), f64::from(capture.rate_hz))
    }

    /// Shortest context the wavelet decomposition accepts.
    pub fn min_context(&self) -> usize {
        (1usize << self.levels).max(self.feature_window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// No door event: the network prediction stands.
    Predicted,
    /// Door event agreed with the network.
    Confirmed,
    /// Door event contradicted the network; the last layer was fine-tuned.
    Amended,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Predicted => "predicted",
            Action::Confirmed => "confirmed",
            Action::Amended => "amended",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEvent {
    pub time: f64,
    pub prediction: usize,
    pub event: DoorEventKind,
    pub activity: Option<ActivityLabel>,
    pub action: Action,
    pub count: usize,
}

pub struct CountSession {
    pub network: Network,
    pub hmm_models: BTreeMap<ActivityLabel, GaussianHmm>,
    pub current_count: usize,
    pub finetune_lr: f64,
    pub finetune_steps: usize,
    pub event_log: Vec<SessionEvent>,
    pub counting: CountingConfig,
    pub activity: ActivityPipeline,
    door: DoorDetector,
}

impl CountSession {
    pub fn new(network: Network, hmm_models: BTreeMap<ActivityLabel, GaussianHmm>, current_count: usize) -> Self {
        Self {
            network,
            hmm_models,
            current_count,
            finetune_lr: 0.01,
            finetune_steps: 5,
            event_log: Vec::new(),
            counting: CountingConfig::default(),
            activity: ActivityPipeline::default(),
            door: DoorDetector::new(DEFAULT_DEBOUNCE),
        }
    }

    fn finetune(&mut self, sample: &CsiWindow, label: usize) -> Result<()> {
        let last = self.network.last_dense_index().ok_or(Error::InvalidModel("network has no dense layer".into()))?;
        let x = window_tensor(sample, self.network.input_kind);
        let mut batch_shape = vec![1];
        batch_shape.extend(&x.shape);
        let x = Tensor { shape: batch_shape, data: x.data };
        let features = self.network.forward_range(0..last, &x, false)?;
        let end = self.network.layers.len();
        for _ in 0..self.finetune_steps {
            self.network.loss_and_gradients_from(last, &features, &[label], false)?;
            self.network.sgd_step_layers(last..end, self.finetune_lr);
        }
        Ok(())
    }

    /// Fuses one network prediction with an optional door event. Returns the
    /// new count.
    pub fn amend_and_finetune(&mut self, sample: &CsiWindow, event: DoorEventKind) -> Result<usize> {
        self.amend_at(sample, event, None, f64::NAN)
    }

    fn amend_at(&mut self, sample: &CsiWindow, event: DoorEventKind, activity: Option<ActivityLabel>, time: f64) -> Result<usize> {
        let (prediction, _) = predict_count(&mut self.network, sample)?;
        let expected = match event {
            DoorEventKind::Enter => self.current_count + 1,
            DoorEventKind::Leave => self.current_count.saturating_sub(1),
            DoorEventKind::None => {
                self.current_count = prediction;
                self.event_log.push(SessionEvent { time, prediction, event, activity, action: Action::Predicted, count: prediction });
                return Ok(prediction);
            }
        };
        let label = expected.clamp(MIN_COUNT, MAX_COUNT);
        if label != expected {
            warn!("expected count {expected} is outside the 1..=5 head; training target clamped to {label}");
        }
        let action = if prediction == label {
            Action::Confirmed
        } else {
            self.finetune(sample, label)?;
            info!("{event} event: network said {prediction}, amended to {expected}");
            Action::Amended
        };
        self.current_count = expected;
        self.event_log.push(SessionEvent { time, prediction, event, activity, action, count: expected });
        Ok(expected)
    }

    /// Runs the full online pipeline over `capture`, one timeline entry per
    /// counting window.
    pub fn run_online(&mut self, capture: &CsiCapture) -> Result<Vec<SessionEvent>> {
        let windows = counting_windows(capture, &self.counting)?;
        if windows.is_empty() {
            return Err(Error::Empty("capture shorter than one counting window"));
        }
        let (amp, _) = split_streams(capture)?;
        let rate = f64::from(capture.rate_hz);
        let start = self.event_log.len();
        for (w, window) in windows.iter().enumerate() {
            let end = w * self.counting.stride + self.counting.window_len;
            let begin = end.saturating_sub(self.activity.context);
            let activity = if end - begin >= self.activity.min_context() && !self.hmm_models.is_empty() {
                let obs = self.activity.observations(amp.data.slice(s![begin..end, ..]), rate)?;
                Some(classify_activity(&self.hmm_models, &obs)?)
            } else {
                None
            };
            let event = activity.map_or(DoorEventKind::None, |a| self.door.push(a));
            let time = capture.frames[end - 1].timestamp;
            let count = self.amend_at(window, event, activity, time)?;
            debug!("window {w}: t={time:.3} activity={activity:?} event={event} count={count}");
        }
        Ok(self.event_log[start..].to_vec())
    }
}

/// JSON dataset manifest: capture paths (relative to the manifest) with
/// count labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_regime")]
    pub regime: Regime,
    pub captures: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

fn default_regime() -> Regime {
    Regime::Semi
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads and windows every capture; paths resolve against `base`.
    pub fn load(&self, base: &Path, cfg: &CountingConfig) -> Result<Dataset> {
        let mut samples = Vec::new();
        for entry in &self.captures {
            let capture = read_capture(base.join(&entry.path))?;
            for w in counting_windows(&capture, cfg)? {
                samples.push((w, entry.label));
            }
        }
        Dataset::new(samples, self.regime)
    }
}
