//! CSI capture data model, its on-disk format, and amplitude/phase extraction.
//!
//! Capture file layout (all little-endian):
//!
//! ```text
//! "CSIC"            4 bytes magic
//! version           u16 (= 1)
//! n_tx, n_rx, n_sub u16 each
//! rate_hz           f32
//! n_packets         u64
//! label_len         u8, followed by label_len bytes of UTF-8
//! per packet:       f64 timestamp, then n_tx*n_rx*n_sub (re: f32, im: f32)
//!                   pairs in row-major (pair, subcarrier) order
//! ```
//!
//! Values are held as `f64` in memory and stored as `f32` on disk, so a
//! round trip is bit-exact for any capture whose entries are representable
//! as `f32`. Everything produced by [`read_capture`] and by the simulator
//! satisfies that.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CSIC";
pub const VERSION: u16 = 1;
pub const DEFAULT_RATE_HZ: f32 = 1500.0;
pub const DEFAULT_N_TX: usize = 2;
pub const DEFAULT_N_RX: usize = 3;
pub const DEFAULT_N_SUB: usize = 30;

/// Fixed header size for an unlabeled capture.
pub const HEADER_LEN: usize = 4 + 2 * 4 + 4 + 8 + 1;

/// One CSI packet: a (Tx-Rx pair) x subcarrier complex matrix.
///
/// Row `i = tx * n_rx + rx`, column `j` is the subcarrier index.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    pub timestamp: f64,
    pub values: Array2<Complex64>,
}

impl CsiFrame {
    pub fn new(timestamp: f64, values: Array2<Complex64>) -> Self {
        Self { timestamp, values }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiCapture {
    pub frames: Vec<CsiFrame>,
    pub rate_hz: f32,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sub: usize,
    /// Stored as a length-prefixed string; an empty label reads back as `None`.
    pub label: Option<String>,
}

impl CsiCapture {
    pub fn empty(rate_hz: f32, n_tx: usize, n_rx: usize, n_sub: usize) -> Self {
        Self { frames: Vec::new(), rate_hz, n_tx, n_rx, n_sub, label: None }
    }

    pub fn n_streams(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Interprets the label as a person count, if it is one.
    pub fn count_label(&self) -> Option<usize> {
        self.label.as_deref().and_then(|l| l.trim().parse().ok())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidCapture(format!("rate_hz must be > 0, got {}", self.rate_hz)));
        }
        if self.n_tx == 0 || self.n_rx == 0 || self.n_sub == 0 {
            return Err(Error::InvalidCapture("zero antenna or subcarrier count".into()));
        }
        if self.n_tx > u16::MAX as usize || self.n_rx > u16::MAX as usize || self.n_sub > u16::MAX as usize {
            return Err(Error::InvalidCapture("dimension exceeds u16".into()));
        }
        if let Some(label) = &self.label {
            if label.len() > u8::MAX as usize {
                return Err(Error::InvalidCapture(format!("label longer than 255 bytes ({})", label.len())));
            }
        }
        let shape = [self.n_streams(), self.n_sub];
        let mut prev = f64::NEG_INFINITY;
        for (idx, frame) in self.frames.iter().enumerate() {
            if frame.values.shape() != shape {
                return Err(Error::InvalidCapture(format!(
                    "frame {idx} has shape {:?}, expected {:?}",
                    frame.values.shape(),
                    shape
                )));
            }
            if !frame.is_finite() {
                return Err(Error::NonFinite { frame: idx as u64 });
            }
            if frame.timestamp <= prev {
                return Err(Error::InvalidCapture(format!("timestamps not strictly increasing at frame {idx}")));
            }
            prev = frame.timestamp;
        }
        Ok(())
    }

    /// Rounds every stored value to `f32` precision, matching what the file
    /// format can represent.
    pub fn quantize(&mut self) {
        for frame in &mut self.frames {
            frame.values.mapv_inplace(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64));
        }
    }
}

pub fn encode_capture(capture: &CsiCapture) -> Result<Vec<u8>> {
    capture.validate()?;
    let label = capture.label.as_deref().unwrap_or("");
    let per_frame = 8 + capture.n_streams() * capture.n_sub * 8;
    let mut out = Vec::with_capacity(HEADER_LEN + label.len() + per_frame * capture.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(capture.n_tx as u16).to_le_bytes());
    out.extend_from_slice(&(capture.n_rx as u16).to_le_bytes());
    out.extend_from_slice(&(capture.n_sub as u16).to_le_bytes());
    out.extend_from_slice(&capture.rate_hz.to_le_bytes());
    out.extend_from_slice(&(capture.len() as u64).to_le_bytes());
    out.push(label.len() as u8);
    out.extend_from_slice(label.as_bytes());
    for frame in &capture.frames {
        out.extend_from_slice(&frame.timestamp.to_le_bytes());
        for v in frame.values.iter() {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            out.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let chunk = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(chunk)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_capture(bytes: &[u8]) -> Result<CsiCapture> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4).ok_or(Error::TruncatedHeader)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u16().ok_or(Error::TruncatedHeader)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_tx = r.u16().ok_or(Error::TruncatedHeader)? as usize;
    let n_rx = r.u16().ok_or(Error::TruncatedHeader)? as usize;
    let n_sub = r.u16().ok_or(Error::TruncatedHeader)? as usize;
    let rate_hz = r.f32().ok_or(Error::TruncatedHeader)?;
    let n_packets = r.u64().ok_or(Error::TruncatedHeader)?;
    let label_len = r.take(1).ok_or(Error::TruncatedHeader)?[0] as usize;
    let label_bytes = r.take(label_len).ok_or(Error::TruncatedHeader)?;
    let label = if label_len == 0 {
        None
    } else {
        Some(
            std::str::from_utf8(label_bytes)
                .map_err(|_| Error::InvalidCapture("label is not UTF-8".into()))?
                .to_owned(),
        )
    };

    let n_streams = n_tx * n_rx;
    let per_frame = 8 + n_streams * n_sub * 8;
    let remaining = bytes.len() - r.pos;
    // Reject impossible packet counts before allocating.
    if (remaining as u128) < n_packets as u128 * per_frame as u128 {
        let frame = (remaining / per_frame.max(1)) as u64;
        return Err(Error::Truncated { frame });
    }

    let mut frames = Vec::with_capacity(n_packets as usize);
    for idx in 0..n_packets {
        let timestamp = r.f64().ok_or(Error::Truncated { frame: idx })?;
        let mut values = Array2::zeros((n_streams, n_sub));
        for v in values.iter_mut() {
            let re = r.f32().ok_or(Error::Truncated { frame: idx })?;
            let im = r.f32().ok_or(Error::Truncated { frame: idx })?;
            if !re.is_finite() || !im.is_finite() {
                return Err(Error::NonFinite { frame: idx });
            }
            *v = Complex64::new(re as f64, im as f64);
        }
        if !timestamp.is_finite() {
            return Err(Error::NonFinite { frame: idx });
        }
        frames.push(CsiFrame { timestamp, values });
    }
    let capture = CsiCapture { frames, rate_hz, n_tx, n_rx, n_sub, label };
    capture.validate()?;
    Ok(capture)
}

pub fn write_capture(capture: &CsiCapture, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_capture(capture)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_capture(path: impl AsRef<Path>) -> Result<CsiCapture> {
    let bytes = fs::read(path)?;
    decode_capture(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Amplitude,
    Phase,
}

/// Time x (stream * n_sub + subcarrier) real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTensor {
    pub data: Array2<f64>,
    pub kind: StreamKind,
}

impl StreamTensor {
    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }
}

/// Column index of (stream, subcarrier) in a [`StreamTensor`].
#[inline]
pub fn column_index(stream: usize, sub: usize, n_sub: usize) -> usize {
    stream * n_sub + sub
}

/// Splits a capture into amplitude (modulus) and phase (principal argument)
/// tensors.
pub fn split_streams(capture: &CsiCapture) -> Result<(StreamTensor, StreamTensor)> {
    if capture.is_empty() {
        return Err(Error::Empty("capture has no frames"));
    }
    let cols = capture.n_streams() * capture.n_sub;
    let mut amp = Array2::zeros((capture.len(), cols));
    let mut phase = Array2::zeros((capture.len(), cols));
    for (t, frame) in capture.frames.iter().enumerate() {
        for (c, v) in frame.values.iter().enumerate() {
            amp[[t, c]] = v.norm();
            phase[[t, c]] = v.arg();
        }
    }
    Ok((
        StreamTensor { data: amp, kind: StreamKind::Amplitude },
        StreamTensor { data: phase, kind: StreamKind::Phase },
    ))
}

/// Number of windows [`window`] produces for `n_rows` rows.
pub fn window_count(n_rows: usize, len: usize, stride: usize) -> usize {
    if len == 0 || stride == 0 || len > n_rows {
        0
    } else {
        (n_rows - len) / stride + 1
    }
}

/// Cuts `len`-row windows every `stride` rows, without padding.
pub fn window(tensor: &StreamTensor, len: usize, stride: usize) -> Result<Vec<StreamTensor>> {
    if len == 0 || stride == 0 {
        return Err(Error::InvalidParameter("window length and stride must be positive".into()));
    }
    let n = window_count(tensor.n_rows(), len, stride);
    if n == 0 {
        return Err(Error::Empty("window longer than tensor"));
    }
    Ok((0..n)
        .map(|w| StreamTensor {
            data: tensor.data.slice(s![w * stride..w * stride + len, ..]).to_owned(),
            kind: tensor.kind,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn frame(t: f64, n_streams: usize, n_sub: usize, f: impl Fn(usize, usize) -> Complex64) -> CsiFrame {
        CsiFrame::new(t, Array2::from_shape_fn((n_streams, n_sub), |(i, j)| f(i, j)))
    }

    fn small_capture(n: usize) -> CsiCapture {
        let mut c = CsiCapture::empty(DEFAULT_RATE_HZ, 2, 3, 30);
        for k in 0..n {
            c.frames.push(frame(k as f64 / 1500.0, 6, 30, |i, j| {
                Complex64::new((i + k) as f64 * 0.25, j as f64 - 3.5)
            }));
        }
        c.label = Some("3".into());
        c
    }

    #[test]
    fn empty_label_reads_back_as_none() {
        let mut c = CsiCapture::empty(DEFAULT_RATE_HZ, 1, 1, 1);
        c.label = Some(String::new());
        assert_eq!(decode_capture(&encode_capture(&c).unwrap()).unwrap().label, None);
    }

    #[test]
    fn empty_capture_is_header_only() {
        let c = CsiCapture::empty(DEFAULT_RATE_HZ, 2, 3, 30);
        let bytes = encode_capture(&c).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(HEADER_LEN, 25);
        let back = decode_capture(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, c);
    }

    #[test]
    fn one_frame_byte_count() {
        let mut c = small_capture(1);
        c.label = None;
        let bytes = encode_capture(&c).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 + 6 * 30 * 2 * 4);
    }

    #[test]
    fn truncation_names_frame() {
        let c = small_capture(3);
        let bytes = encode_capture(&c).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        match decode_capture(cut) {
            Err(Error::Truncated { frame }) => assert_eq!(frame, 2),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn distinct_errors() {
        let c = small_capture(1);
        let mut bytes = encode_capture(&c).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_capture(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_capture(&bad), Err(Error::UnsupportedVersion(2))));
        let off = HEADER_LEN + 1 + 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_capture(&bytes), Err(Error::NonFinite { frame: 0 })));
        assert!(matches!(decode_capture(&[b'C', b'S']), Err(Error::TruncatedHeader)));
    }

    #[test]
    fn invariant_violations_rejected_before_writing() {
        let mut c = small_capture(2);
        c.frames[1].timestamp = c.frames[0].timestamp;
        assert!(encode_capture(&c).is_err());
        let mut c = small_capture(1);
        c.frames[0].values[[0, 0]] = Complex64::new(f64::INFINITY, 0.0);
        assert!(matches!(encode_capture(&c), Err(Error::NonFinite { frame: 0 })));
        let mut c = small_capture(1);
        c.rate_hz = 0.0;
        assert!(encode_capture(&c).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csic");
        let c = small_capture(5);
        write_capture(&c, &path).unwrap();
        assert_eq!(read_capture(&path).unwrap(), c);
    }

    #[test]
    fn split_known_values() {
        let mut c = CsiCapture::empty(DEFAULT_RATE_HZ, 2, 3, 30);
        c.frames.push(frame(0.0, 6, 30, |i, _| {
            if i == 0 {
                Complex64::new(3.0, 4.0)
            } else {
                Complex64::new(-1.0, 0.0)
            }
        }));
        let (amp, phase) = split_streams(&c).unwrap();
        assert_eq!(amp.data.dim(), (1, 180));
        assert!((amp.data[[0, 0]] - 5.0).abs() < 1e-12);
        assert!((phase.data[[0, 0]] - 4f64.atan2(3.0)).abs() < 1e-12);
        assert!((phase.data[[0, 0]] - 0.9273).abs() < 1e-4);
        assert!((amp.data[[0, 31]] - 1.0).abs() < 1e-12);
        assert!((phase.data[[0, 31]] - PI).abs() < 1e-12);
        assert!(split_streams(&CsiCapture::empty(1500.0, 2, 3, 30)).is_err());
    }

    #[test]
    fn column_layout_is_stream_major() {
        let c = {
            let mut c = CsiCapture::empty(DEFAULT_RATE_HZ, 2, 3, 30);
            c.frames.push(frame(0.0, 6, 30, |i, j| Complex64::new((i * 100 + j) as f64 + 1.0, 0.0)));
            c
        };
        let (amp, _) = split_streams(&c).unwrap();
        assert_eq!(amp.data[[0, column_index(4, 7, 30)]], 407.0 + 1.0);
    }

    #[test]
    fn window_counts() {
        let t = |n| StreamTensor { data: Array2::zeros((n, 180)), kind: StreamKind::Amplitude };
        assert_eq!(window(&t(200), 200, 200).unwrap().len(), 1);
        assert_eq!(window(&t(600), 200, 200).unwrap().len(), 3);
        assert_eq!(window(&t(650), 200, 100).unwrap().len(), 5);
        assert!(window(&t(199), 200, 200).is_err());
    }

    #[test]
    fn windows_concatenate_to_prefix() {
        let data = Array2::from_shape_fn((530, 4), |(t, c)| (t * 4 + c) as f64);
        let tensor = StreamTensor { data: data.clone(), kind: StreamKind::Phase };
        let ws = window(&tensor, 100, 100).unwrap();
        assert_eq!(ws.len(), 5);
        for (w, win) in ws.iter().enumerate() {
            assert_eq!(win.kind, StreamKind::Phase);
            assert_eq!(win.data, data.slice(s![w * 100..(w + 1) * 100, ..]));
        }
    }
}
