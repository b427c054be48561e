//! Denoising for both branches.
//!
//! Activity branch: zero-phase Butterworth low-pass on every amplitude
//! stream, then PCA (DC removal, eigen-decomposition of `H^T H`, 5-point
//! median smoothing) keeping components 2..=keep+1.
//!
//! Counting branch: weighted moving average on amplitudes, per-packet phase
//! sanitization (unwrap along subcarriers, remove the common linear trend),
//! windowing, and per-column standardization into a [`CsiWindow`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::csi_io::{split_streams, window, CsiCapture, StreamKind, StreamTensor};
use crate::error::{Error, Result};

/// One second-order section `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Runs the section in transposed direct form II, starting from the
    /// steady state for a constant input equal to `x[0]`.
    fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let y0 = self.dc_gain() * x0;
        let mut s2 = b2 * x0 - a2 * y0;
        let mut s1 = b1 * x0 - a1 * y0 + s2;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + s1;
            s1 = b1 * input - a1 * y + s2;
            s2 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass designed by the bilinear transform with
/// frequency prewarping, as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Biquad>,
    pub order: usize,
    pub rate_hz: f64,
    pub cutoff_hz: f64,
}

impl Butterworth {
    pub fn lowpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("filter order must be >= 1".into()));
        }
        if !(rate_hz > 0.0) || !(cutoff_hz > 0.0) || cutoff_hz >= rate_hz / 2.0 {
            return Err(Error::InvalidParameter(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {}) for rate {rate_hz} Hz",
                rate_hz / 2.0
            )));
        }
        let k = (PI * cutoff_hz / rate_hz).tan();
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        for idx in 0..order / 2 {
            let theta = (2 * idx + 1) as f64 * PI / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.cos());
            let norm = 1.0 / (1.0 + k / q + k * k);
            let b0 = k * k * norm;
            sections.push(Biquad {
                b: [b0, 2.0 * b0, b0],
                a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            });
        }
        if order % 2 == 1 {
            let b0 = k / (1.0 + k);
            sections.push(Biquad { b: [b0, b0, 0.0], a: [(k - 1.0) / (k + 1.0), 0.0] });
        }
        Ok(Self { sections, order, rate_hz, cutoff_hz })
    }

    /// Single-pass magnitude response `1 / sqrt(1 + (tan(pi f/fs) / tan(pi fc/fs))^(2n))`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let ratio = (PI * freq_hz / self.rate_hz).tan() / (PI * self.cutoff_hz / self.rate_hz).tan();
        1.0 / (1.0 + ratio.powi(2 * self.order as i32)).sqrt()
    }

    pub fn filter(&self, x: &mut [f64]) {
        for sec in &self.sections {
            sec.filter_in_place(x);
        }
    }

    /// Forward-backward filtering with odd reflection padding at both ends.
    pub fn filtfilt(&self, series: &[f64]) -> Vec<f64> {
        let n = series.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (series[0], series[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - series[i]));
        ext.extend_from_slice(series);
        ext.extend((1..=pad).map(|i| 2.0 * last - series[n - 1 - i]));
        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

pub const DEFAULT_BUTTER_ORDER: usize = 4;
pub const DEFAULT_CUTOFF_HZ: f64 = 200.0;

/// Zero-phase Butterworth low-pass of a single series.
pub fn butterworth_lowpass(series: &[f64], rate_hz: f64, cutoff_hz: f64, order: usize) -> Result<Vec<f64>> {
    Ok(Butterworth::lowpass(order, cutoff_hz, rate_hz)?.filtfilt(series))
}

/// Sliding median with edge replication; `width` should be odd.
pub fn median_filter(series: &[f64], width: usize) -> Vec<f64> {
    let n = series.len();
    let half = width / 2;
    let mut buf = Vec::with_capacity(width);
    (0..n)
        .map(|t| {
            buf.clear();
            for k in 0..width {
                let idx = (t + k).saturating_sub(half).min(n - 1);
                buf.push(series[idx]);
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            buf[half]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// All eigenvalues of `Z = H^T H`, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, in the same order.
    pub eigenvectors: Array2<f64>,
    /// The DC-removed input.
    pub centered: Array2<f64>,
}

impl Pca {
    pub fn fit(stream_matrix: ArrayView2<f64>) -> Result<Self> {
        let (t, d) = stream_matrix.dim();
        if t == 0 || d == 0 {
            return Err(Error::Empty("PCA input"));
        }
        let means = stream_matrix.mean_axis(Axis(0)).unwrap();
        let centered = &stream_matrix - &means;
        let z = centered.t().dot(&centered);
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| z[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let eigenvectors = Array2::from_shape_fn((d, d), |(i, c)| eig.eigenvectors[(i, order[c])]);
        Ok(Self { eigenvalues, eigenvectors, centered })
    }

    /// Component `h_i = H q_i` (0-based `i`).
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.centered.dot(&self.eigenvectors.column(i)).to_vec()
    }

    /// Components `skip..skip+keep` as columns, unsmoothed.
    pub fn components(&self, skip: usize, keep: usize) -> Array2<f64> {
        let q = self.eigenvectors.slice(s![.., skip..skip + keep]);
        self.centered.dot(&q)
    }
}

pub const DEFAULT_PCA_KEEP: usize = 10;

/// Components 2..=keep+1 of the stream matrix, unsmoothed.
pub fn principal_components(stream_matrix: ArrayView2<f64>, keep: usize) -> Result<Array2<f64>> {
    if keep + 1 > stream_matrix.ncols() {
        return Err(Error::InvalidParameter(format!(
            "keep={keep} needs at least {} columns",
            keep + 1
        )));
    }
    Ok(Pca::fit(stream_matrix)?.components(1, keep))
}

/// PCA denoising: drop the first component, keep the next `keep`, and
/// apply a 5-point median filter to each.
pub fn pca_denoise(stream_matrix: ArrayView2<f64>, keep: usize) -> Result<Array2<f64>> {
    let mut comps = principal_components(stream_matrix, keep)?;
    for mut col in comps.columns_mut() {
        let smoothed = median_filter(&col.to_vec(), 5);
        col.iter_mut().zip(smoothed).for_each(|(c, v)| *c = v);
    }
    Ok(comps)
}

/// Linearly weighted moving average with weights `m, m-1, ..., 1` from the
/// newest sample back. Near the start the window is cut to the available
/// prefix and renormalized.
pub fn weighted_moving_average(series: &[f64], m: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty("WMA input"));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("WMA window m must be >= 1".into()));
    }
    Ok((0..series.len())
        .map(|t| {
            let span = m.min(t + 1);
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..span {
                let w = (m - k) as f64;
                num += w * series[t - k];
                den += w;
            }
            num / den
        })
        .collect())
}

/// Removes jumps larger than pi by adding multiples of 2pi; the first
/// element is kept and successive differences land in (-pi, pi].
pub fn unwrap(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let Some(&first) = phases.first() else { return out };
    out.push(first);
    let mut turns = 0.0f64;
    for w in phases.windows(2) {
        let d = w[1] - w[0];
        let mut dd = (d + PI).rem_euclid(2.0 * PI) - PI;
        if dd == -PI && d > 0.0 {
            dd = PI;
        }
        if d.abs() >= PI {
            turns += ((dd - d) / (2.0 * PI)).round();
        }
        out.push(w[1] + 2.0 * PI * turns);
    }
    out
}

/// Slope of the least-squares line through `(j, y_j)`, `j = 0..n`.
pub fn fitted_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (j, &v) in y.iter().enumerate() {
        let dx = j as f64 - x_mean;
        sxy += dx * (v - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Sanitizes one packet's phases laid out as `n_pairs` consecutive blocks of
/// `n_sub` subcarriers.
pub fn sanitize_packet(row: &[f64], n_pairs: usize, n_sub: usize) -> Vec<f64> {
    let mut unwrapped: Vec<f64> = Vec::with_capacity(row.len());
    for pair in row.chunks_exact(n_sub).take(n_pairs) {
        unwrapped.extend(unwrap(pair));
    }
    let mean: Vec<f64> = (0..n_sub)
        .map(|j| (0..n_pairs).map(|i| unwrapped[i * n_sub + j]).sum::<f64>() / n_pairs as f64)
        .collect();
    let slope = fitted_slope(&mean);
    for (c, v) in unwrapped.iter_mut().enumerate() {
        *v -= slope * (c % n_sub) as f64;
    }
    unwrapped
}

/// Phase sanitization of a `T x (n_pairs * n_sub)` matrix, packet by packet.
///
/// Only the common slope is removed; the constant offset stays.
pub fn sanitize_phase(phase: ArrayView2<f64>, n_pairs: usize, n_sub: usize) -> Result<Array2<f64>> {
    if phase.ncols() != n_pairs * n_sub {
        return Err(Error::Shape(format!(
            "phase matrix has {} columns, expected {n_pairs}x{n_sub}",
            phase.ncols()
        )));
    }
    if phase.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite phase".into()));
    }
    let mut out = Array2::zeros(phase.dim());
    for (src, mut dst) in phase.rows().into_iter().zip(out.rows_mut()) {
        let clean = sanitize_packet(&src.to_vec(), n_pairs, n_sub);
        dst.iter_mut().zip(clean).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

/// A network input: `[amplitude | phase]` columns, standardized per column.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiWindow {
    pub data: Array2<f64>,
    /// Per-column means removed during standardization.
    pub column_mean: Vec<f64>,
}

impl CsiWindow {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

pub fn build_count_sample(amplitude: ArrayView2<f64>, phase: ArrayView2<f64>) -> Result<CsiWindow> {
    if amplitude.dim() != phase.dim() {
        return Err(Error::Shape(format!(
            "amplitude {:?} and phase {:?} windows differ",
            amplitude.dim(),
            phase.dim()
        )));
    }
    if amplitude.nrows() == 0 {
        return Err(Error::Empty("count sample window"));
    }
    let mut data = concatenate(Axis(1), &[amplitude, phase]).map_err(|e| Error::Shape(e.to_string()))?;
    let n = data.nrows() as f64;
    let mut column_mean = Vec::with_capacity(data.ncols());
    for mut col in data.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        column_mean.push(mean);
        if std <= 1e-12 * mean.abs().max(1.0) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
    Ok(CsiWindow { data, column_mean })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountingConfig {
    pub wma_m: usize,
    pub window_len: usize,
    pub stride: usize,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self { wma_m: 100, window_len: 200, stride: 200 }
    }
}

/// WMA-smoothed amplitudes and sanitized phases for a whole capture.
pub fn counting_streams(capture: &CsiCapture, m: usize) -> Result<(StreamTensor, StreamTensor)> {
    let (amp, phase) = split_streams(capture)?;
    let mut smoothed = Array2::zeros(amp.data.dim());
    for (src, mut dst) in amp.data.columns().into_iter().zip(smoothed.columns_mut()) {
        let s = weighted_moving_average(&src.to_vec(), m)?;
        dst.iter_mut().zip(s).for_each(|(d, v)| *d = v);
    }
    let clean = sanitize_phase(phase.data.view(), capture.n_streams(), capture.n_sub)?;
    Ok((
        StreamTensor { data: smoothed, kind: StreamKind::Amplitude },
        StreamTensor { data: clean, kind: StreamKind::Phase },
    ))
}

/// Full counting preprocessing: one [`CsiWindow`] per window of the capture.
pub fn counting_windows(capture: &CsiCapture, cfg: &CountingConfig) -> Result<Vec<CsiWindow>> {
    let (amp, phase) = counting_streams(capture, cfg.wma_m)?;
    let amp_w = window(&amp, cfg.window_len, cfg.stride)?;
    let phase_w = window(&phase, cfg.window_len, cfg.stride)?;
    amp_w
        .iter()
        .zip(&phase_w)
        .map(|(a, p)| build_count_sample(a.data.view(), p.data.view()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityConfig {
    pub cutoff_hz: f64,
    pub order: usize,
    pub keep: usize,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        Self { cutoff_hz: DEFAULT_CUTOFF_HZ, order: DEFAULT_BUTTER_ORDER, keep: DEFAULT_PCA_KEEP }
    }
}

/// Low-pass filters every amplitude stream of `amplitude` then PCA-denoises.
pub fn activity_components_from(amplitude: ArrayView2<f64>, rate_hz: f64, cfg: &ActivityConfig) -> Result<Array2<f64>> {
    let filter = Butterworth::lowpass(cfg.order, cfg.cutoff_hz, rate_hz)?;
    let mut filtered = Array2::zeros(amplitude.dim());
    for (src, mut dst) in amplitude.columns().into_iter().zip(filtered.columns_mut()) {
        let f = filter.filtfilt(&src.to_vec());
        dst.iter_mut().zip(f).for_each(|(d, v)| *d = v);
    }
    pca_denoise(filtered.view(), cfg.keep)
}

/// Activity preprocessing of a capture: `T x keep` denoised components.
pub fn activity_components(capture: &CsiCapture, cfg: &ActivityConfig) -> Result<Array2<f64>> {
    let (amp, _) = split_streams(capture)?;
    activity_components_from(amp.data.view(), capture.rate_hz as f64, cfg)
}
