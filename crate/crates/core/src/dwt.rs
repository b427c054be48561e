//! Daubechies D4 discrete wavelet transform with periodic boundary, and the
//! per-level energy/variance feature matrix used by the activity HMMs.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 10;
pub const DEFAULT_FEATURE_WINDOW: usize = 128;

/// Orthogonal wavelet given by its low-pass analysis filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavelet {
    pub lowpass: Vec<f64>,
    pub highpass: Vec<f64>,
}

impl Wavelet {
    /// The 4-tap Daubechies wavelet (two vanishing moments).
    pub fn d4() -> Self {
        let s3 = 3f64.sqrt();
        let norm = 4.0 * 2f64.sqrt();
        let lowpass = vec![(1.0 + s3) / norm, (3.0 + s3) / norm, (3.0 - s3) / norm, (1.0 - s3) / norm];
        Self::from_lowpass(lowpass)
    }

    /// Quadrature mirror: `g[n] = (-1)^n h[L-1-n]`.
    pub fn from_lowpass(lowpass: Vec<f64>) -> Self {
        let len = lowpass.len();
        let highpass = (0..len)
            .map(|n| if n % 2 == 0 { lowpass[len - 1 - n] } else { -lowpass[len - 1 - n] })
            .collect();
        Self { lowpass, highpass }
    }

    /// One analysis step. Odd-length input is extended by repeating its last
    /// sample, so outputs have `ceil(n / 2)` coefficients.
    pub fn analyze(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut ext = x.to_vec();
        if ext.len() % 2 == 1 {
            ext.push(*ext.last().unwrap());
        }
        let n = ext.len();
        let half = n / 2;
        let mut approx = vec![0.0; half];
        let mut detail = vec![0.0; half];
        for k in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            // The high-pass taps sum to zero; measuring against the first
            // sample keeps the DC response exactly zero in floating point.
            let v0 = ext[2 * k % n];
            for (tap, (&h, &g)) in self.lowpass.iter().zip(&self.highpass).enumerate() {
                let v = ext[(2 * k + tap) % n];
                a += h * v;
                d += g * (v - v0);
            }
            approx[k] = a;
            detail[k] = d;
        }
        (approx, detail)
    }

    /// Inverse of [`Wavelet::analyze`] for an even-length signal of
    /// `2 * approx.len()` samples.
    pub fn synthesize(&self, approx: &[f64], detail: &[f64]) -> Vec<f64> {
        let n = 2 * approx.len();
        let mut x = vec![0.0; n];
        for k in 0..approx.len() {
            for (tap, (&h, &g)) in self.lowpass.iter().zip(&self.highpass).enumerate() {
                x[(2 * k + tap) % n] += h * approx[k] + g * detail[k];
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletDecomposition {
    /// Detail coefficients; index 0 is level 1 (highest band).
    pub detail: Vec<Vec<f64>>,
    pub approx: Vec<f64>,
    /// Length of the input to each level (level 1 first).
    pub input_lengths: Vec<usize>,
    pub wavelet: Wavelet,
}

impl WaveletDecomposition {
    pub fn levels(&self) -> usize {
        self.detail.len()
    }

    pub fn signal_len(&self) -> usize {
        self.input_lengths.first().copied().unwrap_or(0)
    }

    pub fn energy(&self) -> f64 {
        let sq = |v: &Vec<f64>| v.iter().map(|c| c * c).sum::<f64>();
        self.detail.iter().map(sq).sum::<f64>() + sq(&self.approx)
    }
}

/// Cascade decomposition: the approximation is split again at every level.
pub fn dwt_decompose_with(signal: &[f64], levels: usize, wavelet: &Wavelet) -> Result<WaveletDecomposition> {
    if levels == 0 {
        return Err(Error::InvalidParameter("levels must be >= 1".into()));
    }
    if levels >= usize::BITS as usize || signal.len() < 1usize << levels {
        return Err(Error::InvalidParameter(format!(
            "signal of length {} too short for {levels} levels",
            signal.len()
        )));
    }
    let mut approx = signal.to_vec();
    let mut detail = Vec::with_capacity(levels);
    let mut input_lengths = Vec::with_capacity(levels);
    for _ in 0..levels {
        input_lengths.push(approx.len());
        let (a, d) = wavelet.analyze(&approx);
        detail.push(d);
        approx = a;
    }
    Ok(WaveletDecomposition { detail, approx, input_lengths, wavelet: wavelet.clone() })
}

pub fn dwt_decompose(signal: &[f64], levels: usize) -> Result<WaveletDecomposition> {
    dwt_decompose_with(signal, levels, &Wavelet::d4())
}

pub fn dwt_reconstruct(decomp: &WaveletDecomposition) -> Result<Vec<f64>> {
    let levels = decomp.levels();
    if levels == 0 || decomp.input_lengths.len() != levels {
        return Err(Error::Shape("decomposition has no levels or mismatched lengths".into()));
    }
    let mut approx = decomp.approx.clone();
    for level in (0..levels).rev() {
        let detail = &decomp.detail[level];
        let expected = decomp.input_lengths[level].div_ceil(2);
        if detail.len() != expected || approx.len() != expected {
            return Err(Error::Shape(format!(
                "level {} has {} detail / {} approx coefficients, expected {expected}",
                level + 1,
                detail.len(),
                approx.len()
            )));
        }
        let mut x = decomp.wavelet.synthesize(&approx, detail);
        x.truncate(decomp.input_lengths[level]);
        approx = x;
    }
    Ok(approx)
}

/// `20 x n` matrix: rows 0..L are mean energies per level, rows L..2L the
/// variances, one column per feature window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn levels(&self) -> usize {
        self.values.nrows() / 2
    }

    pub fn n_windows(&self) -> usize {
        self.values.ncols()
    }

    /// Observation columns as owned vectors, in time order.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        self.values.columns().into_iter().map(|c| c.to_vec()).collect()
    }

    pub fn energy(&self, level: usize, window: usize) -> f64 {
        self.values[[level - 1, window]]
    }

    pub fn variance(&self, level: usize, window: usize) -> f64 {
        self.values[[self.levels() + level - 1, window]]
    }
}

/// Per-window mean and variance of each level's squared detail coefficients.
///
/// Window `j` covers original samples `[window*j, window*(j+1))`; coefficient
/// `k` of level `l` belongs to the window containing sample `k * 2^l`. At
/// coarse levels some windows receive no coefficient and repeat the level's
/// previous value.
pub fn extract_features(decomp: &WaveletDecomposition, window: usize) -> Result<FeatureMatrix> {
    if window == 0 {
        return Err(Error::InvalidParameter("feature window must be positive".into()));
    }
    let n = decomp.signal_len() / window;
    if n == 0 {
        return Err(Error::Empty("signal shorter than one feature window"));
    }
    let levels = decomp.levels();
    let mut values = Array2::zeros((2 * levels, n));
    for (li, coeffs) in decomp.detail.iter().enumerate() {
        let scale = 1usize << (li + 1);
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (k, &c) in coeffs.iter().enumerate() {
            let w = k * scale / window;
            if w < n {
                buckets[w].push(c);
            }
        }
        let (mut last_e, mut last_v) = (0.0, 0.0);
        for (w, bucket) in buckets.iter().enumerate() {
            if !bucket.is_empty() {
                let m = bucket.len() as f64;
                last_e = bucket.iter().map(|c| c * c).sum::<f64>() / m;
                last_v = bucket.iter().map(|c| (c * c - last_e).powi(2)).sum::<f64>() / m;
            }
            values[[li, w]] = last_e;
            values[[levels + li, w]] = last_v;
        }
    }
    Ok(FeatureMatrix { values })
}

/// Feature matrix of each column of `components`, averaged elementwise.
pub fn component_features(components: &Array2<f64>, levels: usize, window: usize) -> Result<FeatureMatrix> {
    if components.ncols() == 0 {
        return Err(Error::Empty("no components"));
    }
    let mut acc: Option<Array2<f64>> = None;
    for col in components.columns() {
        let fm = extract_features(&dwt_decompose(&col.to_vec(), levels)?, window)?;
        match acc.as_mut() {
            Some(a) => *a += &fm.values,
            None => acc = Some(fm.values),
        }
    }
    let mut values = acc.unwrap();
    values /= components.ncols() as f64;
    Ok(FeatureMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn d4_filter_is_orthonormal() {
        let w = Wavelet::d4();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&w.lowpass, &w.lowpass) - 1.0).abs() < 1e-15);
        assert!((w.lowpass.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-15);
        assert!(w.highpass.iter().sum::<f64>().abs() < 1e-15);
        assert!(dot(&w.lowpass, &w.highpass).abs() < 1e-15);
    }

    #[test]
    fn constant_signal() {
        let d = dwt_decompose(&[1.5; 1024], 10).unwrap();
        for level in &d.detail {
            assert!(level.iter().all(|&c| c == 0.0));
        }
        assert_eq!(d.approx.len(), 1);
        assert!((d.approx[0] - 1.5 * 2f64.powf(5.0)).abs() < 1e-10);
    }

    #[test]
    fn single_level_matches_brute_force() {
        let x = [1.0, -2.0, 3.5, 0.25, 4.0, -1.0, 0.0, 2.0];
        let w = Wavelet::d4();
        let d = dwt_decompose(&x, 1).unwrap();
        let h = &w.lowpass;
        let g = &w.highpass;
        for k in 0..4 {
            let a: f64 = (0..4).map(|n| h[n] * x[(2 * k + n) % 8]).sum();
            let det: f64 = (0..4).map(|n| g[n] * x[(2 * k + n) % 8]).sum();
            assert!((d.approx[k] - a).abs() < 1e-14);
            assert!((d.detail[0][k] - det).abs() < 1e-14);
        }
    }

    #[test]
    fn level_lengths() {
        let d = dwt_decompose(&vec![0.0; 1536], 10).unwrap();
        let lens: Vec<usize> = d.detail.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![768, 384, 192, 96, 48, 24, 12, 6, 3, 2]);
        let odd = vec![0.3; 1100];
        let d = dwt_decompose(&odd, 10).unwrap();
        for (l, c) in d.detail.iter().enumerate() {
            assert_eq!(c.len(), 1100usize.div_ceil(1 << (l + 1)));
        }
        let back = dwt_reconstruct(&d).unwrap();
        assert_eq!(back.len(), 1100);
        assert!(back.iter().zip(&odd).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(dwt_decompose(&[0.0; 1000], 10).is_err());
    }

    #[test]
    fn parseval_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = dwt_decompose(&x, 10).unwrap();
        let e: f64 = x.iter().map(|v| v * v).sum();
        assert!((d.energy() - e).abs() < 1e-9 * e);
        let back = dwt_reconstruct(&d).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn zero_and_impulse_round_trip() {
        let mut d = dwt_decompose(&vec![1.0; 256], 4).unwrap();
        d.detail.iter_mut().for_each(|l| l.fill(0.0));
        d.approx.fill(0.0);
        assert!(dwt_reconstruct(&d).unwrap().iter().all(|&v| v == 0.0));
        let mut imp = vec![0.0; 256];
        imp[37] = 1.0;
        let back = dwt_reconstruct(&dwt_decompose(&imp, 6).unwrap()).unwrap();
        for (k, v) in back.iter().enumerate() {
            assert!((v - imp[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_rejects_inconsistent_lengths() {
        let mut d = dwt_decompose(&vec![1.0; 64], 3).unwrap();
        d.detail[1].pop();
        assert!(dwt_reconstruct(&d).is_err());
    }

    fn tone(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * freq * t as f64 / 1500.0).sin()).collect()
    }

    fn argmax_energy_level(fm: &FeatureMatrix) -> usize {
        let totals: Vec<f64> = (1..=fm.levels()).map(|l| (0..fm.n_windows()).map(|w| fm.energy(l, w)).sum()).collect();
        1 + totals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn tone_lands_in_its_band() {
        let fm = extract_features(&dwt_decompose(&tone(300.0, 2048), 10).unwrap(), 128).unwrap();
        assert_eq!(fm.values.dim(), (20, 16));
        assert_eq!(argmax_energy_level(&fm), 2);
    }

    #[test]
    fn swept_tone_moves_monotonically_to_finer_levels() {
        let mut prev = usize::MAX;
        for freq in [1.0, 2.0, 4.5, 9.0, 17.0, 35.0, 70.0, 140.0, 280.0, 560.0] {
            let fm = extract_features(&dwt_decompose(&tone(freq, 4096), 10).unwrap(), 128).unwrap();
            let level = argmax_energy_level(&fm);
            assert!(level <= prev, "{freq} Hz -> level {level} after {prev}");
            prev = level;
        }
        assert_eq!(prev, 1);
    }

    #[test]
    fn feature_homogeneity_and_zero_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = 3.0;
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let f1 = extract_features(&dwt_decompose(&x, 10).unwrap(), 128).unwrap();
        let f2 = extract_features(&dwt_decompose(&cx, 10).unwrap(), 128).unwrap();
        for l in 1..=10 {
            for w in 0..8 {
                assert!((f2.energy(l, w) - c * c * f1.energy(l, w)).abs() <= 1e-9 * f2.energy(l, w).max(1e-12));
                let c4 = c.powi(4);
                assert!((f2.variance(l, w) - c4 * f1.variance(l, w)).abs() <= 1e-9 * f2.variance(l, w).max(1e-12));
            }
        }
        let z = extract_features(&dwt_decompose(&[0.0; 1024], 10).unwrap(), 128).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(z.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn coarse_levels_carry_last_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = extract_features(&dwt_decompose(&x, 10).unwrap(), 128).unwrap();
        // Level 10 has 2 coefficients at samples 0 and 1024 -> windows 0 and 8.
        for w in 0..8 {
            assert_eq!(fm.energy(10, w), fm.energy(10, 0));
        }
        assert_eq!(fm.variance(10, 3), 0.0);
        assert!(extract_features(&dwt_decompose(&x[..100], 2).unwrap(), 128).is_err());
    }
}
