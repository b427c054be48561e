//! Gaussian-emission hidden Markov models for activity recognition, and
//! door-event extraction from the recognized activity stream.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_STATES: usize = 4;
pub const DEFAULT_DEBOUNCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivityLabel {
    Empty,
    Walking,
    SittingDown,
    Falling,
    Running,
    EnteringRoom,
    LeavingRoom,
    Waving,
}

impl ActivityLabel {
    pub const ALL: [ActivityLabel; 8] = [
        ActivityLabel::Empty,
        ActivityLabel::Walking,
        ActivityLabel::SittingDown,
        ActivityLabel::Falling,
        ActivityLabel::Running,
        ActivityLabel::EnteringRoom,
        ActivityLabel::LeavingRoom,
        ActivityLabel::Waving,
    ];

    pub fn abbrev(self) -> char {
        use ActivityLabel::*;
        match self {
            Empty => 'E',
            Walking => 'W',
            SittingDown => 'S',
            Falling => 'F',
            Running => 'R',
            EnteringRoom => 'O',
            LeavingRoom => 'L',
            Waving => 'A',
        }
    }

    pub fn name(self) -> &'static str {
        use ActivityLabel::*;
        match self {
            Empty => "Empty",
            Walking => "Walking",
            SittingDown => "SittingDown",
            Falling => "Falling",
            Running => "Running",
            EnteringRoom => "EnteringRoom",
            LeavingRoom => "LeavingRoom",
            Waving => "Waving",
        }
    }

    pub fn door_event(self) -> DoorEventKind {
        match self {
            ActivityLabel::EnteringRoom => DoorEventKind::Enter,
            ActivityLabel::LeavingRoom => DoorEventKind::Leave,
            _ => DoorEventKind::None,
        }
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActivityLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s) || (s.len() == 1 && s.starts_with(l.abbrev())))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown activity {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoorEventKind {
    Enter,
    Leave,
    None,
}

impl fmt::Display for DoorEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoorEventKind::Enter => "enter",
            DoorEventKind::Leave => "leave",
            DoorEventKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoorEvent {
    pub kind: DoorEventKind,
    pub time_index: usize,
}

/// HMM with diagonal-covariance Gaussian emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHmm {
    pub initial: Vec<f64>,
    /// Row-stochastic, `transition[from][to]`.
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn check_stochastic(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidModel(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

impl GaussianHmm {
    pub fn new(
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let model = Self { initial, transition, means, variances };
        model.validate()?;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states();
        if s == 0 {
            return Err(Error::InvalidModel("no states".into()));
        }
        check_stochastic(&self.initial, "initial distribution")?;
        if self.transition.len() != s || self.means.len() != s || self.variances.len() != s {
            return Err(Error::InvalidModel("inconsistent state count".into()));
        }
        for row in &self.transition {
            if row.len() != s {
                return Err(Error::InvalidModel("transition matrix not square".into()));
            }
            check_stochastic(row, "transition row")?;
        }
        let d = self.dim();
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != d || v.len() != d {
                return Err(Error::InvalidModel("inconsistent emission dimension".into()));
            }
            if v.iter().any(|x| !(*x >= VARIANCE_FLOOR)) || m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidModel("emission variance below floor or non-finite mean".into()));
            }
        }
        Ok(())
    }

    pub fn log_emission(&self, state: usize, x: &[f64]) -> f64 {
        self.means[state]
            .iter()
            .zip(&self.variances[state])
            .zip(x)
            .map(|((m, v), xi)| -0.5 * ((2.0 * PI * v).ln() + (xi - m).powi(2) / v))
            .sum()
    }

    fn check_obs(&self, obs: &[Vec<f64>]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::Empty("observation sequence"));
        }
        if let Some(bad) = obs.iter().find(|o| o.len() != self.dim()) {
            return Err(Error::Shape(format!("observation has dim {}, model expects {}", bad.len(), self.dim())));
        }
        Ok(())
    }

    /// Emission likelihoods rescaled per step: `b[t][s] = exp(log b - max_t)`.
    fn scaled_emissions(&self, obs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let s = self.n_states();
        let mut b = Vec::with_capacity(obs.len());
        let mut offsets = Vec::with_capacity(obs.len());
        for x in obs {
            let logs: Vec<f64> = (0..s).map(|k| self.log_emission(k, x)).collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            b.push(logs.iter().map(|l| (l - m).exp()).collect());
            offsets.push(m);
        }
        (b, offsets)
    }

    /// Scaled forward pass. Returns normalized alphas, scales and log P(obs).
    fn forward(&self, b: &[Vec<f64>], offsets: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
        let s = self.n_states();
        let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(b.len());
        let mut scales = Vec::with_capacity(b.len());
        let mut ll = 0.0;
        for (t, bt) in b.iter().enumerate() {
            let mut a: Vec<f64> = if t == 0 {
                (0..s).map(|k| self.initial[k] * bt[k]).collect()
            } else {
                let prev = &alphas[t - 1];
                (0..s)
                    .map(|k| (0..s).map(|j| prev[j] * self.transition[j][k]).sum::<f64>() * bt[k])
                    .collect()
            };
            let c: f64 = a.iter().sum();
            a.iter_mut().for_each(|v| *v /= c);
            ll += c.ln() + offsets[t];
            alphas.push(a);
            scales.push(c);
        }
        (alphas, scales, ll)
    }

    /// `log P(obs | model)` via the scaled forward algorithm.
    pub fn log_likelihood(&self, obs: &[Vec<f64>]) -> Result<f64> {
        self.check_obs(obs)?;
        let (b, offsets) = self.scaled_emissions(obs);
        Ok(self.forward(&b, &offsets).2)
    }

    /// Most probable state path; ties go to the lower state index.
    pub fn viterbi(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>> {
        self.check_obs(obs)?;
        let s = self.n_states();
        let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let log_a: Vec<Vec<f64>> = self.transition.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect();
        let mut delta: Vec<f64> = (0..s).map(|k| ln(self.initial[k]) + self.log_emission(k, &obs[0])).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(obs.len());
        for x in &obs[1..] {
            let mut next = vec![f64::NEG_INFINITY; s];
            let mut ptr = vec![0usize; s];
            for k in 0..s {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..s {
                    let v = delta[j] + log_a[j][k];
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                next[k] = best + self.log_emission(k, x);
                ptr[k] = arg;
            }
            back.push(ptr);
            delta = next;
        }
        let mut state = 0;
        for k in 1..s {
            if delta[k] > delta[state] {
                state = k;
            }
        }
        let mut path = vec![state; obs.len()];
        for (t, ptr) in back.iter().enumerate().rev() {
            state = ptr[state];
            path[t] = state;
        }
        Ok(path)
    }

    /// Joint `log P(obs, path)`.
    pub fn path_log_prob(&self, obs: &[Vec<f64>], path: &[usize]) -> f64 {
        let mut lp = self.initial[path[0]].ln() + self.log_emission(path[0], &obs[0]);
        for t in 1..obs.len() {
            lp += self.transition[path[t - 1]][path[t]].ln() + self.log_emission(path[t], &obs[t]);
        }
        lp
    }

    /// Draws a state path and observations of length `len`.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
        let draw = |p: &[f64], rng: &mut dyn rand::RngCore| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        };
        let mut states = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        let mut state = draw(&self.initial, rng);
        for t in 0..len {
            if t > 0 {
                state = draw(&self.transition[state], rng);
            }
            let x = self.means[state]
                .iter()
                .zip(&self.variances[state])
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            states.push(state);
            obs.push(x);
        }
        (states, obs)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: GaussianHmm,
    /// Total log-likelihood of the training data at the start of each EM
    /// iteration (the last entry is the returned model's).
    pub log_likelihoods: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Seeded k-means++ selection followed by a few Lloyd iterations.
fn kmeans_init(frames: &[&Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = vec![frames[rng.random_range(0..frames.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = frames
            .iter()
            .map(|f| centers.iter().map(|c| sq_dist(f, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d.iter().position(|&di| {
                acc += di;
                acc > u
            })
            .unwrap_or(frames.len() - 1)
        } else {
            rng.random_range(0..frames.len())
        };
        centers.push(frames[pick].clone());
    }
    for _ in 0..10 {
        let dim = centers[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for f in frames {
            let c = (0..k).min_by(|&a, &b| sq_dist(f, &centers[a]).total_cmp(&sq_dist(f, &centers[b]))).unwrap();
            counts[c] += 1;
            sums[c].iter_mut().zip(f.iter()).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

fn initial_model(sequences: &[Vec<Vec<f64>>], n_states: usize, seed: u64) -> GaussianHmm {
    let frames: Vec<&Vec<f64>> = sequences.iter().flatten().collect();
    let dim = frames[0].len();
    let n = frames.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| frames.iter().map(|f| f[d]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..dim)
        .map(|d| (frames.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = kmeans_init(&frames, n_states, &mut rng);
    let stay = if n_states == 1 { 1.0 } else { 0.6 };
    let leave = if n_states == 1 { 0.0 } else { 0.4 / (n_states - 1) as f64 };
    let transition = (0..n_states)
        .map(|i| (0..n_states).map(|j| if i == j { stay } else { leave }).collect())
        .collect();
    GaussianHmm {
        initial: vec![1.0 / n_states as f64; n_states],
        transition,
        means,
        variances: vec![var; n_states],
    }
}

/// Sufficient statistics accumulated over all sequences in one E-step.
struct Stats {
    ll: f64,
    gamma0: Vec<f64>,
    gamma_sum: Vec<f64>,
    gamma_sum_trans: Vec<f64>,
    xi_sum: Vec<Vec<f64>>,
    x_sum: Vec<Vec<f64>>,
    x2_sum: Vec<Vec<f64>>,
}

fn e_step(model: &GaussianHmm, sequences: &[Vec<Vec<f64>>]) -> Stats {
    let s = model.n_states();
    let d = model.dim();
    let mut st = Stats {
        ll: 0.0,
        gamma0: vec![0.0; s],
        gamma_sum: vec![0.0; s],
        gamma_sum_trans: vec![0.0; s],
        xi_sum: vec![vec![0.0; s]; s],
        x_sum: vec![vec![0.0; d]; s],
        x2_sum: vec![vec![0.0; d]; s],
    };
    for obs in sequences {
        let (b, offsets) = model.scaled_emissions(obs);
        let (alphas, scales, ll) = model.forward(&b, &offsets);
        st.ll += ll;
        let t_len = obs.len();
        let mut betas = vec![vec![1.0; s]; t_len];
        for t in (0..t_len - 1).rev() {
            for j in 0..s {
                betas[t][j] = (0..s)
                    .map(|k| model.transition[j][k] * b[t + 1][k] * betas[t + 1][k])
                    .sum::<f64>()
                    / scales[t + 1];
            }
        }
        for t in 0..t_len {
            let g: Vec<f64> = (0..s).map(|k| alphas[t][k] * betas[t][k]).collect();
            let norm: f64 = g.iter().sum();
            for k in 0..s {
                let gk = g[k] / norm;
                if t == 0 {
                    st.gamma0[k] += gk;
                }
                st.gamma_sum[k] += gk;
                if t + 1 < t_len {
                    st.gamma_sum_trans[k] += gk;
                }
                for (dd, &x) in obs[t].iter().enumerate() {
                    st.x_sum[k][dd] += gk * x;
                    st.x2_sum[k][dd] += gk * x * x;
                }
            }
            if t + 1 < t_len {
                let mut xi = vec![vec![0.0; s]; s];
                let mut total = 0.0;
                for j in 0..s {
                    for k in 0..s {
                        let v = alphas[t][j] * model.transition[j][k] * b[t + 1][k] * betas[t + 1][k];
                        xi[j][k] = v;
                        total += v;
                    }
                }
                for j in 0..s {
                    for k in 0..s {
                        st.xi_sum[j][k] += xi[j][k] / total;
                    }
                }
            }
        }
    }
    st
}

fn m_step(model: &GaussianHmm, st: &Stats, n_sequences: usize) -> GaussianHmm {
    let s = model.n_states();
    let mut next = model.clone();
    let g0: f64 = st.gamma0.iter().sum();
    next.initial = st.gamma0.iter().map(|g| g / g0).collect();
    for j in 0..s {
        let row_total: f64 = st.xi_sum[j].iter().sum();
        if row_total > 0.0 {
            next.transition[j] = st.xi_sum[j].iter().map(|x| x / row_total).collect();
        }
        let w = st.gamma_sum[j];
        if w > 0.0 {
            next.means[j] = st.x_sum[j].iter().map(|x| x / w).collect();
            // Two-pass form is unnecessary here; clamp tiny negatives from
            // cancellation into the floor.
            next.variances[j] = st.x2_sum[j]
                .iter()
                .zip(&next.means[j])
                .map(|(x2, m)| (x2 / w - m * m).max(VARIANCE_FLOOR))
                .collect();
        }
    }
    debug_assert!(n_sequences > 0);
    next
}

/// Baum-Welch EM. Stops when the log-likelihood changes by less than `tol`
/// or after `max_iter` iterations.
pub fn fit_hmm_report(
    sequences: &[Vec<Vec<f64>>],
    n_states: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<FitReport> {
    if sequences.is_empty() {
        return Err(Error::Empty("no training sequences"));
    }
    if n_states == 0 {
        return Err(Error::InvalidParameter("n_states must be >= 1".into()));
    }
    let dim = sequences[0].first().map_or(0, Vec::len);
    for seq in sequences {
        if seq.len() < n_states {
            return Err(Error::InvalidParameter(format!(
                "sequence of length {} shorter than {n_states} states",
                seq.len()
            )));
        }
        if seq.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Shape("training frames differ in dimension or are non-finite".into()));
        }
    }
    if dim == 0 {
        return Err(Error::Shape("zero-dimensional observations".into()));
    }
    let mut model = initial_model(sequences, n_states, seed);
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let stats = e_step(&model, sequences);
        let converged = history.last().is_some_and(|prev: &f64| (stats.ll - prev).abs() < tol);
        history.push(stats.ll);
        if converged {
            break;
        }
        model = m_step(&model, &stats, sequences.len());
    }
    if history.len() == max_iter.max(1) {
        // Report the likelihood of the model actually returned.
        history.push(e_step(&model, sequences).ll);
    }
    Ok(FitReport { model, log_likelihoods: history })
}

pub fn fit_hmm(sequences: &[Vec<Vec<f64>>], n_states: usize, tol: f64, max_iter: usize, seed: u64) -> Result<GaussianHmm> {
    Ok(fit_hmm_report(sequences, n_states, tol, max_iter, seed)?.model)
}

pub fn log_likelihood(model: &GaussianHmm, obs: &[Vec<f64>]) -> Result<f64> {
    model.log_likelihood(obs)
}

pub fn viterbi(model: &GaussianHmm, obs: &[Vec<f64>]) -> Result<Vec<usize>> {
    model.viterbi(obs)
}

/// Label of the model with the highest likelihood; ties go to the earlier
/// label in enumeration order.
pub fn classify_activity(models: &BTreeMap<ActivityLabel, GaussianHmm>, obs: &[Vec<f64>]) -> Result<ActivityLabel> {
    let mut best: Option<(ActivityLabel, f64)> = None;
    for (&label, model) in models {
        let ll = model.log_likelihood(obs)?;
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((label, ll));
        }
    }
    best.map(|(l, _)| l).ok_or(Error::Empty("no activity models"))
}

/// Debounced door-event detector: fires once `k` consecutive windows carry
/// the same door label, then waits for a non-door label before re-arming.
#[derive(Debug, Clone)]
pub struct DoorDetector {
    k: usize,
    run_label: Option<ActivityLabel>,
    run_len: usize,
    armed: bool,
}

impl DoorDetector {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(1), run_label: None, run_len: 0, armed: true }
    }

    pub fn push(&mut self, label: ActivityLabel) -> DoorEventKind {
        let kind = label.door_event();
        if kind == DoorEventKind::None {
            self.run_label = None;
            self.run_len = 0;
            self.armed = true;
            return DoorEventKind::None;
        }
        if self.run_label == Some(label) {
            self.run_len += 1;
        } else {
            self.run_label = Some(label);
            self.run_len = 1;
            self.armed = true;
        }
        if self.armed && self.run_len >= self.k {
            self.armed = false;
            return kind;
        }
        DoorEventKind::None
    }
}

impl Default for DoorDetector {
    fn default() -> Self {
        Self::new(DEFAULT_DEBOUNCE)
    }
}

pub fn detect_door_event(labels: &[ActivityLabel], k: usize) -> Vec<DoorEvent> {
    let mut det = DoorDetector::new(k);
    labels
        .iter()
        .enumerate()
        .filter_map(|(t, &l)| match det.push(l) {
            DoorEventKind::None => None,
            kind => Some(DoorEvent { kind, time_index: t }),
        })
        .collect()
}

const HMM_MAGIC: [u8; 4] = *b"CHMM";
const HMM_VERSION: u16 = 1;

pub fn encode_hmm(label: &str, model: &GaussianHmm) -> Result<Vec<u8>> {
    model.validate()?;
    if label.len() > u8::MAX as usize {
        return Err(Error::InvalidParameter("label longer than 255 bytes".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&HMM_MAGIC);
    out.extend_from_slice(&HMM_VERSION.to_le_bytes());
    out.push(label.len() as u8);
    out.extend_from_slice(label.as_bytes());
    out.extend_from_slice(&(model.n_states() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    let values = model
        .initial
        .iter()
        .chain(model.transition.iter().flatten())
        .chain(model.means.iter().flatten())
        .chain(model.variances.iter().flatten());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_hmm(bytes: &[u8]) -> Result<(String, GaussianHmm)> {
    let bad = |m: &str| Error::InvalidModel(m.to_owned());
    if bytes.len() < 7 || bytes[..4] != HMM_MAGIC {
        return Err(bad("missing CHMM magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HMM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let label_len = bytes[6] as usize;
    let mut pos = 7 + label_len;
    let label = std::str::from_utf8(bytes.get(7..pos).ok_or_else(|| bad("truncated label"))?)
        .map_err(|_| bad("label not UTF-8"))?
        .to_owned();
    let head = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated header"))?;
    let s = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
    pos += 8;
    let n = s + s * s + 2 * s * d;
    let body = bytes.get(pos..).filter(|b| b.len() == n * 8).ok_or_else(|| bad("payload size mismatch"))?;
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let initial = vals[..s].to_vec();
    let rows = |start: usize, width: usize| -> Vec<Vec<f64>> {
        (0..s).map(|i| vals[start + i * width..start + (i + 1) * width].to_vec()).collect()
    };
    let transition = rows(s, s);
    let means = rows(s + s * s, d);
    let variances = rows(s + s * s + s * d, d);
    Ok((label, GaussianHmm::new(initial, transition, means, variances)?))
}

pub fn write_hmm(path: impl AsRef<Path>, label: &str, model: &GaussianHmm) -> Result<()> {
    fs::write(path, encode_hmm(label, model)?)?;
    Ok(())
}

pub fn read_hmm(path: impl AsRef<Path>) -> Result<(String, GaussianHmm)> {
    decode_hmm(&fs::read(path)?)
}

/// Loads every `*.hmm` file in `dir`, keyed by the activity label stored in
/// the file.
pub fn read_hmm_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<ActivityLabel, GaussianHmm>> {
    let mut models = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "hmm") {
            let (label, model) = read_hmm(&path)?;
            models.insert(label.parse()?, model);
        }
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> GaussianHmm {
        GaussianHmm::new(
            vec![0.6, 0.4],
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            vec![vec![1.0, 0.5], vec![0.3, 2.0]],
        )
        .unwrap()
    }

    #[test]
    fn single_state_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..20).map(|_| vec![rng.random_range(-1.0..3.0), rng.random_range(0.0..1.0)]).collect())
            .collect();
        let m = fit_hmm(&seqs, 1, 1e-10, 20, 0).unwrap();
        let frames: Vec<&Vec<f64>> = seqs.iter().flatten().collect();
        let n = frames.len() as f64;
        for d in 0..2 {
            let mean = frames.iter().map(|f| f[d]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((m.means[0][d] - mean).abs() < 1e-8);
            assert!((m.variances[0][d] - var).abs() < 1e-8);
        }
        let obs = &seqs[0];
        let direct: f64 = obs.iter().map(|x| m.log_emission(0, x)).sum();
        assert!((m.log_likelihood(obs).unwrap() - direct).abs() < 1e-9);
        assert!(m.viterbi(obs).unwrap().iter().all(|&s| s == 0));
    }

    #[test]
    fn recovers_change_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let change = 37;
        let obs: Vec<Vec<f64>> = (0..80)
            .map(|t| {
                let mu = if t < change { 0.0 } else { 8.0 };
                vec![mu + rng.sample::<f64, _>(StandardNormal), -mu + rng.sample::<f64, _>(StandardNormal)]
            })
            .collect();
        let m = fit_hmm(std::slice::from_ref(&obs), 2, 1e-8, 100, 5).unwrap();
        let path = m.viterbi(&obs).unwrap();
        let first = path[0];
        let switch = path.iter().position(|&s| s != first).unwrap();
        assert!((switch as i64 - change as i64).abs() <= 1);
        assert!(path[switch..].iter().all(|&s| s != first));
    }

    #[test]
    fn identical_frames_engage_floor() {
        let seqs = vec![vec![vec![1.0, 2.0]; 10]];
        let m = fit_hmm(&seqs, 2, 1e-8, 10, 1).unwrap();
        m.validate().unwrap();
        assert!(m.variances.iter().flatten().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_hmm(&[], 2, 1e-6, 10, 0).is_err());
        assert!(fit_hmm(&[vec![vec![1.0]]], 2, 1e-6, 10, 0).is_err());
    }

    #[test]
    fn appending_frame_lowers_likelihood() {
        let m = toy_model();
        let obs = vec![vec![0.1, 0.9], vec![2.1, -0.5]];
        let mut longer = obs.clone();
        longer.push(vec![0.0, 1.0]);
        // each emission density here is < 1 on the appended frame
        assert!(m.log_likelihood(&longer).unwrap() < m.log_likelihood(&obs).unwrap());
        assert!(m.log_likelihood(&[vec![1.0]]).is_err());
        assert!(m.log_likelihood(&[]).is_err());
    }

    #[test]
    fn viterbi_tie_goes_to_lower_index() {
        let m = GaussianHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![vec![0.0], vec![0.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        assert_eq!(m.viterbi(&vec![vec![0.3]; 5]).unwrap(), vec![0; 5]);
    }

    #[test]
    fn classify_prefers_generating_model() {
        let a = toy_model();
        let mut b = toy_model();
        b.means = vec![vec![5.0, 5.0], vec![-5.0, 5.0]];
        let models: BTreeMap<_, _> =
            [(ActivityLabel::Walking, a.clone()), (ActivityLabel::Running, b)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, obs) = a.sample(20, &mut rng);
        assert_eq!(classify_activity(&models, &obs).unwrap(), ActivityLabel::Walking);
        let single: BTreeMap<_, _> = [(ActivityLabel::Falling, a)].into_iter().collect();
        assert_eq!(classify_activity(&single, &obs).unwrap(), ActivityLabel::Falling);
        assert!(classify_activity(&BTreeMap::new(), &obs).is_err());
    }

    #[test]
    fn door_debounce() {
        use ActivityLabel::*;
        let ev = detect_door_event(&[Walking, Walking, EnteringRoom, EnteringRoom, EnteringRoom, Walking], 3);
        assert_eq!(ev, vec![DoorEvent { kind: DoorEventKind::Enter, time_index: 4 }]);
        assert!(detect_door_event(&[Walking; 10], 3).is_empty());
        assert!(detect_door_event(&[EnteringRoom, EnteringRoom], 3).is_empty());
        // One event per door episode, re-armed by a non-door label.
        let labels = [LeavingRoom, LeavingRoom, LeavingRoom, LeavingRoom, LeavingRoom, Empty, LeavingRoom, LeavingRoom, LeavingRoom];
        let ev = detect_door_event(&labels, 3);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[1], DoorEvent { kind: DoorEventKind::Leave, time_index: 8 });
    }

    #[test]
    fn door_label_change_rearms() {
        use ActivityLabel::*;
        let labels = [EnteringRoom, EnteringRoom, EnteringRoom, LeavingRoom, LeavingRoom, LeavingRoom, LeavingRoom];
        let kinds: Vec<_> = detect_door_event(&labels, 3).iter().map(|e| (e.kind, e.time_index)).collect();
        assert_eq!(kinds, vec![(DoorEventKind::Enter, 2), (DoorEventKind::Leave, 5)]);
    }

    #[test]
    fn labels_parse() {
        for l in ActivityLabel::ALL {
            assert_eq!(l.name().parse::<ActivityLabel>().unwrap(), l);
            assert_eq!(l.abbrev().to_string().parse::<ActivityLabel>().unwrap(), l);
        }
        assert!("Dancing".parse::<ActivityLabel>().is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = toy_model();
        let bytes = encode_hmm("Walking", &m).unwrap();
        let (label, back) = decode_hmm(&bytes).unwrap();
        assert_eq!(label, "Walking");
        assert_eq!(back, m);
        assert!(decode_hmm(&bytes[..bytes.len() - 8]).is_err());
    }
}
