//! Multipath CSI simulator.
//!
//! Each path contributes `a * exp(-j 2 pi f_j tau(t))` on subcarrier `j`,
//! where `tau(t) = tau0 + 2 v t / c` for a reflector moving radially at `v`
//! (the reflected path length changes at twice the reflector speed, giving a
//! CSI oscillation at `2 v / lambda`). The six Tx-Rx streams are modeled as a
//! virtual uniform linear array at half-wavelength spacing, so path `k` on
//! stream `i` picks up an extra delay `i * (lambda / 2) * sin(aoa_k) / c`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::csi_io::{CsiCapture, CsiFrame, DEFAULT_N_RX, DEFAULT_N_SUB, DEFAULT_N_TX};
use crate::error::{Error, Result};
use crate::hmm::ActivityLabel;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_CARRIER_HZ: f64 = 5.0e9;
pub const DEFAULT_SPACING_HZ: f64 = 625.0e3;
/// Gives roughly 30 dB SNR against a unit line-of-sight path.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.03;
pub const MAX_PERSONS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub attenuation: Complex64,
    /// Seconds.
    pub initial_delay: f64,
    /// Radial reflector speed in m/s; 0 for static paths.
    pub velocity: f64,
    /// Arrival angle in radians, used for the per-stream delay offset.
    pub aoa: f64,
}

impl Path {
    pub fn new(attenuation: Complex64, initial_delay: f64, velocity: f64) -> Self {
        Self { attenuation, initial_delay, velocity, aoa: 0.0 }
    }

    pub fn with_aoa(mut self, aoa: f64) -> Self {
        self.aoa = aoa;
        self
    }

    fn validate(&self) -> Result<()> {
        let finite = self.attenuation.re.is_finite()
            && self.attenuation.im.is_finite()
            && self.initial_delay.is_finite()
            && self.velocity.is_finite()
            && self.aoa.is_finite();
        if !finite {
            return Err(Error::InvalidParameter("path has non-finite field".into()));
        }
        if self.attenuation.norm() <= 0.0 {
            return Err(Error::InvalidParameter("path attenuation must be non-zero".into()));
        }
        if self.initial_delay < 0.0 {
            return Err(Error::InvalidParameter("path delay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Person {
    pub paths: Vec<Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub static_paths: Vec<Path>,
    pub persons: Vec<Person>,
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub noise_sigma: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sub: usize,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            static_paths: Vec::new(),
            persons: Vec::new(),
            carrier_hz: DEFAULT_CARRIER_HZ,
            subcarrier_spacing_hz: DEFAULT_SPACING_HZ,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            n_tx: DEFAULT_N_TX,
            n_rx: DEFAULT_N_RX,
            n_sub: DEFAULT_N_SUB,
        }
    }
}

impl Scene {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Frequency of subcarrier `j` (0-based), centered on the carrier.
    pub fn subcarrier_hz(&self, j: usize) -> f64 {
        self.carrier_hz + (j as f64 - (self.n_sub as f64 - 1.0) / 2.0) * self.subcarrier_spacing_hz
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    fn all_paths(&self) -> impl Iterator<Item = &Path> {
        self.static_paths.iter().chain(self.persons.iter().flat_map(|p| p.paths.iter()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.static_paths.is_empty() {
            return Err(Error::InvalidParameter("scene needs at least one static path".into()));
        }
        if self.persons.len() > MAX_PERSONS {
            return Err(Error::InvalidParameter(format!("at most {MAX_PERSONS} persons")));
        }
        if !(self.carrier_hz > 0.0) || !(self.subcarrier_spacing_hz >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("carrier, spacing and noise must be non-negative".into()));
        }
        if self.n_tx == 0 || self.n_rx == 0 || self.n_sub == 0 {
            return Err(Error::InvalidParameter("zero antenna or subcarrier count".into()));
        }
        self.all_paths().try_for_each(Path::validate)
    }
}

/// Channel response for one instant, before noise.
fn channel_at(scene: &Scene, t: f64, out: &mut Array2<Complex64>) {
    let n_streams = scene.n_tx * scene.n_rx;
    let half_wave = scene.wavelength() / 2.0;
    out.fill(Complex64::new(0.0, 0.0));
    for path in scene.all_paths() {
        let tau_t = path.initial_delay + 2.0 * path.velocity * t / SPEED_OF_LIGHT;
        let stream_step = half_wave * path.aoa.sin() / SPEED_OF_LIGHT;
        for i in 0..n_streams {
            let tau = tau_t + i as f64 * stream_step;
            for j in 0..scene.n_sub {
                let phase = -2.0 * PI * scene.subcarrier_hz(j) * tau;
                out[[i, j]] += path.attenuation * Complex64::from_polar(1.0, phase);
            }
        }
    }
}

fn frame_rng(seed: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    rng
}

fn simulate_frames(scene: &Scene, n_frames: usize, rate_hz: f64, t0: f64, seed: u64, frame0: u64) -> Vec<CsiFrame> {
    let n_streams = scene.n_tx * scene.n_rx;
    let noise_std = scene.noise_sigma / 2f64.sqrt();
    let mut buf = Array2::zeros((n_streams, scene.n_sub));
    (0..n_frames)
        .map(|k| {
            let t = t0 + k as f64 / rate_hz;
            channel_at(scene, t, &mut buf);
            let mut values = buf.clone();
            if scene.noise_sigma > 0.0 {
                let mut rng = frame_rng(seed, frame0 + k as u64);
                for v in values.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *v += Complex64::new(re * noise_std, im * noise_std);
                }
            }
            values.mapv_inplace(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64));
            CsiFrame::new(t, values)
        })
        .collect()
}

/// Simulates `floor(duration * rate_hz)` frames of `scene`.
///
/// Noise for frame `k` comes from its own RNG stream derived from
/// `(seed, k)`. Values are rounded to `f32`, the on-disk precision.
pub fn simulate_capture(scene: &Scene, duration: f64, rate_hz: f64, seed: u64) -> Result<CsiCapture> {
    scene.validate()?;
    if !(rate_hz > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidParameter("duration and rate must be positive".into()));
    }
    let n_frames = (duration * rate_hz + 1e-9).floor() as usize;
    if n_frames == 0 {
        return Err(Error::InvalidParameter("duration * rate_hz < 1".into()));
    }
    let frames = simulate_frames(scene, n_frames, rate_hz, 0.0, seed, 0);
    Ok(CsiCapture {
        frames,
        rate_hz: rate_hz as f32,
        n_tx: scene.n_tx,
        n_rx: scene.n_rx,
        n_sub: scene.n_sub,
        label: Some(scene.n_persons().to_string()),
    })
}

/// Simulates consecutive segments, each with its own scene, on one
/// continuous time axis. All scenes must share the antenna layout.
pub fn simulate_script(segments: &[(Scene, f64)], rate_hz: f64, seed: u64) -> Result<CsiCapture> {
    let first = segments.first().ok_or(Error::Empty("script has no segments"))?;
    let mut frames = Vec::new();
    for (scene, duration) in segments {
        scene.validate()?;
        if (scene.n_tx, scene.n_rx, scene.n_sub) != (first.0.n_tx, first.0.n_rx, first.0.n_sub) {
            return Err(Error::InvalidParameter("script scenes differ in antenna layout".into()));
        }
        let n = (duration * rate_hz + 1e-9).floor() as usize;
        let k0 = frames.len();
        frames.extend(simulate_frames(scene, n, rate_hz, k0 as f64 / rate_hz, seed, k0 as u64));
    }
    let last = &segments[segments.len() - 1].0;
    Ok(CsiCapture {
        frames,
        rate_hz: rate_hz as f32,
        n_tx: first.0.n_tx,
        n_rx: first.0.n_rx,
        n_sub: first.0.n_sub,
        label: Some(last.n_persons().to_string()),
    })
}

/// Hardware phase distortion: a linear-in-subcarrier SFO term, a constant
/// CFO offset and Gaussian per-entry jitter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseDistortion {
    /// Radians per subcarrier index.
    pub sfo_slope: f64,
    /// Radians.
    pub cfo_offset: f64,
    /// Radians.
    pub jitter_sigma: f64,
}

impl PhaseDistortion {
    pub fn new(sfo_slope: f64, cfo_offset: f64, jitter_sigma: f64) -> Self {
        Self { sfo_slope, cfo_offset, jitter_sigma }
    }
}

/// Rotates each entry's phase by `sfo_slope * j + cfo_offset + jitter`.
///
/// The result is kept in `f64`; writing it to disk rounds to `f32`.
pub fn inject_phase_offsets(capture: &CsiCapture, d: PhaseDistortion, seed: u64) -> Result<CsiCapture> {
    capture.validate()?;
    if !(d.sfo_slope.is_finite() && d.cfo_offset.is_finite() && d.jitter_sigma.is_finite()) || d.jitter_sigma < 0.0 {
        return Err(Error::InvalidParameter("phase distortion must be finite, jitter >= 0".into()));
    }
    let mut out = capture.clone();
    if d == PhaseDistortion::default() {
        return Ok(out);
    }
    for (k, frame) in out.frames.iter_mut().enumerate() {
        let mut rng = frame_rng(seed ^ 0x9e37_79b9_7f4a_7c15, k as u64);
        for ((_, j), v) in frame.values.indexed_iter_mut() {
            let jitter = if d.jitter_sigma > 0.0 {
                d.jitter_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let theta = d.sfo_slope * j as f64 + d.cfo_offset + jitter;
            *v *= Complex64::from_polar(1.0, theta);
        }
    }
    Ok(out)
}

fn random_static_paths(rng: &mut ChaCha8Rng) -> Vec<Path> {
    let los = Path::new(
        Complex64::from_polar(1.0, rng.random_range(-PI..PI)),
        rng.random_range(10e-9..20e-9),
        0.0,
    )
    .with_aoa(rng.random_range(-1.2..1.2));
    let mut paths = vec![los];
    for _ in 0..rng.random_range(2..=3) {
        paths.push(
            Path::new(
                Complex64::from_polar(rng.random_range(0.2..0.5), rng.random_range(-PI..PI)),
                rng.random_range(20e-9..60e-9),
                0.0,
            )
            .with_aoa(rng.random_range(-1.2..1.2)),
        );
    }
    paths
}

fn random_person(rng: &mut ChaCha8Rng, n_paths: usize, speed: (f64, f64), gain: (f64, f64)) -> Person {
    let paths = (0..n_paths)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Path::new(
                Complex64::from_polar(rng.random_range(gain.0..gain.1), rng.random_range(-PI..PI)),
                rng.random_range(15e-9..80e-9),
                sign * rng.random_range(speed.0..speed.1),
            )
            .with_aoa(rng.random_range(-1.2..1.2))
        })
        .collect();
    Person { paths }
}

/// Random room with `n_persons` walkers, each 2-4 specular paths moving at
/// 0.2-1.5 m/s.
pub fn make_count_scene(n_persons: usize, seed: u64) -> Result<Scene> {
    if n_persons > MAX_PERSONS {
        return Err(Error::InvalidParameter(format!("n_persons must be <= {MAX_PERSONS}, got {n_persons}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let static_paths = random_static_paths(&mut rng);
    let persons = (0..n_persons)
        .map(|_| {
            let n = rng.random_range(2..=4);
            random_person(&mut rng, n, (0.2, 1.5), (0.05, 0.25))
        })
        .collect();
    Ok(Scene { static_paths, persons, ..Scene::default() })
}

/// Speed bands (m/s) per activity: (body band, optional door/limb band).
/// Bands are chosen to land in distinct dyadic wavelet levels at 1500 Hz.
fn activity_bands(label: ActivityLabel) -> Option<((f64, f64), Option<(f64, f64)>)> {
    use ActivityLabel::*;
    match label {
        Empty => None,
        SittingDown => Some(((0.1, 0.3), None)),
        Waving => Some(((0.4, 0.6), None)),
        Walking => Some(((0.8, 1.2), None)),
        Running => Some(((2.0, 2.6), None)),
        Falling => Some(((3.5, 5.0), None)),
        EnteringRoom => Some(((0.8, 1.2), Some((0.2, 0.3)))),
        LeavingRoom => Some(((0.8, 1.2), Some((3.5, 5.0)))),
    }
}

/// Random single-person scene performing `label`. Door activities add a
/// strong door-leaf path to the walking body.
pub fn make_activity_scene(label: ActivityLabel, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let static_paths = random_static_paths(&mut rng);
    let mut persons = Vec::new();
    if let Some((body, door)) = activity_bands(label) {
        let mut person = random_person(&mut rng, 3, body, (0.15, 0.3));
        if let Some(door) = door {
            person.paths.extend(random_person(&mut rng, 1, door, (0.3, 0.4)).paths);
        }
        persons.push(person);
    }
    Scene { static_paths, persons, ..Scene::default() }
}

fn parse_f64(tok: Option<&str>, line: usize, what: &str) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })?;
    tok.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what}: {tok:?}") })
}

/// Parses the scene description format:
///
/// ```text
/// # comments and blank lines are ignored
/// carrier_hz 5e9
/// spacing_hz 625000
/// noise_sigma 0.03
/// path <a_re> <a_im> <tau_s> <v_mps> [aoa_rad]   # static path
/// person
/// path ...                                     # paths of this person
/// end
/// ```
pub fn parse_scene(text: &str) -> Result<Scene> {
    let mut scene = Scene::default();
    let mut current: Option<Person> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let key = toks.next().unwrap();
        match key {
            "carrier_hz" => scene.carrier_hz = parse_f64(toks.next(), line, "carrier_hz")?,
            "spacing_hz" => scene.subcarrier_spacing_hz = parse_f64(toks.next(), line, "spacing_hz")?,
            "noise_sigma" => scene.noise_sigma = parse_f64(toks.next(), line, "noise_sigma")?,
            "path" => {
                let re = parse_f64(toks.next(), line, "a_re")?;
                let im = parse_f64(toks.next(), line, "a_im")?;
                let tau = parse_f64(toks.next(), line, "tau")?;
                let v = parse_f64(toks.next(), line, "v")?;
                let aoa = match toks.next() {
                    Some(t) => parse_f64(Some(t), line, "aoa")?,
                    None => 0.0,
                };
                let path = Path::new(Complex64::new(re, im), tau, v).with_aoa(aoa);
                match current.as_mut() {
                    Some(person) => person.paths.push(path),
                    None => scene.static_paths.push(path),
                }
            }
            "person" => {
                if current.is_some() {
                    return Err(Error::Parse { line, msg: "nested person block".into() });
                }
                current = Some(Person::default());
            }
            "end" => {
                let person = current.take().ok_or(Error::Parse { line, msg: "end without person".into() })?;
                scene.persons.push(person);
            }
            other => return Err(Error::Parse { line, msg: format!("unknown key {other:?}") }),
        }
        if toks.next().is_some() {
            return Err(Error::Parse { line, msg: "trailing tokens".into() });
        }
    }
    if current.is_some() {
        return Err(Error::Parse { line: text.lines().count(), msg: "unterminated person block".into() });
    }
    scene.validate()?;
    Ok(scene)
}

pub fn format_scene(scene: &Scene) -> String {
    let mut out = String::new();
    let path_line = |out: &mut String, p: &Path, indent: &str| {
        let _ = writeln!(
            out,
            "{indent}path {:e} {:e} {:e} {:e} {:e}",
            p.attenuation.re, p.attenuation.im, p.initial_delay, p.velocity, p.aoa
        );
    };
    let _ = writeln!(out, "carrier_hz {:e}", scene.carrier_hz);
    let _ = writeln!(out, "spacing_hz {:e}", scene.subcarrier_spacing_hz);
    let _ = writeln!(out, "noise_sigma {:e}", scene.noise_sigma);
    for p in &scene.static_paths {
        path_line(&mut out, p, "");
    }
    for person in &scene.persons {
        out.push_str("person\n");
        for p in &person.paths {
            path_line(&mut out, p, "  ");
        }
        out.push_str("end\n");
    }
    out
}
