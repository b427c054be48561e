//! `csicount` command line. Every subcommand prints `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{ArrayD, IxDyn};
use serde::Deserialize;

use crate::counting::{evaluate, train, ActivityPipeline, CountSession, Manifest, Regime};
use crate::csi_io::{read_capture, write_capture, DEFAULT_RATE_HZ};
use crate::dwt::{component_features, DEFAULT_FEATURE_WINDOW, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::hmm::{fit_hmm, read_hmm_dir, write_hmm, ActivityLabel, DEFAULT_STATES};
use crate::neural::{gradient_check, Coverage, DeepCountConfig, FcbpConfig, Network, TrainConfig};
use crate::preprocess::{activity_components, counting_windows, ActivityConfig, CountingConfig};
use crate::sim::{inject_phase_offsets, make_activity_scene, make_count_scene, parse_scene, simulate_capture, PhaseDistortion};

#[derive(Debug, Parser)]
#[command(name = "csicount", version, about = "WiFi CSI crowd counting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NetKind {
    Deepcount,
    DeepcountToy,
    Fcbp,
}

impl NetKind {
    fn build(self, seed: u64) -> Result<Network> {
        match self {
            NetKind::Deepcount => DeepCountConfig::published().build(seed),
            NetKind::DeepcountToy => DeepCountConfig::toy().build(seed),
            NetKind::Fcbp => FcbpConfig::published().build(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PreprocessMode {
    Counting,
    Activity,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a capture from a random room, an activity template or a scene file.
    Simulate {
        #[arg(long, conflicts_with_all = ["scene", "activity"])]
        persons: Option<usize>,
        #[arg(long, conflicts_with = "activity")]
        scene: Option<PathBuf>,
        #[arg(long)]
        activity: Option<String>,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, default_value_t = f64::from(DEFAULT_RATE_HZ))]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply SFO/CFO phase distortion to a capture.
    Inject {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Radians per subcarrier.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        sfo: f64,
        /// Radians.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        cfo: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Counting windows ([n, 200, 360]) or activity components ([T, k]) as a tensor file.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "counting")]
        mode: PreprocessMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wavelet energy/variance features ([2L, n]) of a capture as a tensor file.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
        #[arg(long, default_value_t = DEFAULT_FEATURE_WINDOW)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one HMM per activity; writes <out>/<Activity>.hmm.
    TrainHmm {
        /// JSON manifest: {"captures": [{"path": "...", "activity": "Walking"}]}.
        #[arg(long, required_unless_present = "synthetic")]
        manifest: Option<PathBuf>,
        /// Instead of a manifest, simulate this many captures per activity.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Activities to simulate with --synthetic (default: all).
        #[arg(long, value_delimiter = ',')]
        activities: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_STATES)]
        states: usize,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify the activity in a capture.
    Classify {
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train a counting network from a dataset manifest.
    TrainCount {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long, value_enum, default_value = "deepcount")]
        net: NetKind,
        /// Defaults to the regime's learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 3000)]
        iters: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        target_loss: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion matrix and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Online counting with door-event amendment; prints the timeline.
    Online {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        capture: PathBuf,
        #[arg(long, default_value_t = 1)]
        initial_count: usize,
        /// Write the fine-tuned network here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Finite-difference gradient check.
    Gradcheck {
        #[arg(long, value_enum, default_value = "deepcount-toy")]
        net: NetKind,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Entries checked per parameter tensor (default: all).
        #[arg(long)]
        per_tensor: Option<usize>,
        /// Fail (exit 1) when max_rel_err reaches this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Deserialize)]
struct ActivityManifest {
    captures: Vec<ActivityEntry>,
}

#[derive(Debug, Deserialize)]
struct ActivityEntry {
    path: PathBuf,
    activity: String,
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn emit(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{key}={value}")?;
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate { persons, scene, activity, duration, rate, seed, out: path } => {
            let scene = match (persons, scene, activity) {
                (_, Some(file), _) => parse_scene(&fs::read_to_string(file)?)?,
                (_, _, Some(label)) => make_activity_scene(label.parse()?, seed),
                (persons, _, _) => make_count_scene(persons.unwrap_or(1), seed)?,
            };
            let capture = simulate_capture(&scene, duration, rate, seed)?;
            write_capture(&capture, &path)?;
            emit(out, "frames", capture.len())?;
            emit(out, "persons", scene.n_persons())?;
            emit(out, "out", path.display())?;
        }
        Command::Inject { input, out: path, sfo, cfo, jitter, seed } => {
            let capture = read_capture(&input)?;
            let distorted = inject_phase_offsets(&capture, PhaseDistortion::new(sfo, cfo, jitter), seed)?;
            write_capture(&distorted, &path)?;
            emit(out, "frames", distorted.len())?;
            emit(out, "out", path.display())?;
        }
        Command::Preprocess { input, mode, out: path } => {
            let capture = read_capture(&input)?;
            let array = match mode {
                PreprocessMode::Counting => {
                    let windows = counting_windows(&capture, &CountingConfig::default())?;
                    let (t, w) = windows.first().map_or((0, 0), |x| (x.len(), x.width()));
                    let data: Vec<f64> = windows.iter().flat_map(|x| x.data.iter().copied()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[windows.len(), t, w]), data).map_err(|e| Error::Shape(e.to_string()))?
                }
                PreprocessMode::Activity => activity_components(&capture, &ActivityConfig::default())?.into_dyn(),
            };
            crate::tensor_file::write_array(&array, &path)?;
            emit(out, "shape", format!("{:?}", array.shape()))?;
            emit(out, "out", path.display())?;
        }
        Command::Features { input, levels, window, out: path } => {
            let capture = read_capture(&input)?;
            let comps = activity_components(&capture, &ActivityConfig::default())?;
            let fm = component_features(&comps, levels, window)?;
            crate::tensor_file::write_array(&fm.values.clone().into_dyn(), &path)?;
            emit(out, "levels", fm.levels())?;
            emit(out, "windows", fm.n_windows())?;
            emit(out, "out", path.display())?;
        }
        Command::TrainHmm { manifest, synthetic, activities, states, max_iter, tol, seed, out: dir } => {
            let pipeline = ActivityPipeline::default();
            let mut sequences: BTreeMap<ActivityLabel, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
            if let Some(path) = manifest {
                let m: ActivityManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
                for entry in m.captures {
                    let capture = read_capture(base_dir(&path).join(&entry.path))?;
                    sequences.entry(entry.activity.parse()?).or_default().push(pipeline.capture_observations(&capture)?);
                }
            } else {
                let per_class = synthetic.unwrap_or(0);
                let labels: Vec<ActivityLabel> = if activities.is_empty() {
                    ActivityLabel::ALL.to_vec()
                } else {
                    activities.iter().map(|a| a.parse()).collect::<Result<_>>()?
                };
                let duration = pipeline.context as f64 / f64::from(DEFAULT_RATE_HZ);
                for label in labels {
                    for k in 0..per_class {
                        let s = seed.wrapping_add(1000 * label as u64 + k as u64);
                        let capture = simulate_capture(&make_activity_scene(label, s), duration, f64::from(DEFAULT_RATE_HZ), s)?;
                        sequences.entry(label).or_default().push(pipeline.capture_observations(&capture)?);
                    }
                }
            }
            if sequences.is_empty() {
                return Err(Error::Empty("no training captures"));
            }
            fs::create_dir_all(&dir)?;
            for (label, seqs) in &sequences {
                let model = fit_hmm(seqs, states, tol, max_iter, seed)?;
                let path = dir.join(format!("{label}.hmm"));
                write_hmm(&path, label.name(), &model)?;
                emit(out, &format!("model_{label}"), path.display())?;
            }
            emit(out, "models", sequences.len())?;
        }
        Command::Classify { hmm, input } => {
            let models = read_hmm_dir(&hmm)?;
            let capture = read_capture(&input)?;
            let obs = ActivityPipeline::default().capture_observations(&capture)?;
            for (label, model) in &models {
                emit(out, &format!("loglik_{label}"), format!("{:.6}", model.log_likelihood(&obs)?))?;
            }
            emit(out, "activity", crate::hmm::classify_activity(&models, &obs)?)?;
        }
        Command::TrainCount { data, regime, net, lr, iters, batch, target_loss, seed, out: path } => {
            let manifest = Manifest::read(&data)?;
            let mut dataset = manifest.load(base_dir(&data), &CountingConfig::default())?;
            if let Some(r) = regime {
                dataset.regime = r;
            }
            let cfg = TrainConfig {
                batch_size: batch,
                learning_rate: lr.unwrap_or_else(|| dataset.regime.learning_rate()),
                max_iter: iters,
                seed,
                target_loss,
            };
            let (trained, report) = train(net.build(seed)?, &dataset, &cfg)?;
            trained.save(&path)?;
            emit(out, "samples", dataset.len())?;
            emit(out, "learning_rate", cfg.learning_rate)?;
            emit(out, "iterations", report.losses.len())?;
            emit(out, "best_iteration", report.best_iteration)?;
            emit(out, "final_loss", format!("{:.6}", report.losses.last().copied().unwrap_or(f64::NAN)))?;
            emit(out, "out", path.display())?;
        }
        Command::Eval { ckpt, data } => {
            let mut net = Network::load(&ckpt)?;
            let manifest = Manifest::read(&data)?;
            let dataset = manifest.load(base_dir(&data), &CountingConfig::default())?;
            let cm = evaluate(&mut net, &dataset)?;
            emit(out, "samples", cm.total())?;
            writeln!(out, "{cm}")?;
        }
        Command::Online { ckpt, hmm, capture, initial_count, save } => {
            let net = Network::load(&ckpt)?;
            let models = read_hmm_dir(&hmm)?;
            let capture = read_capture(&capture)?;
            let mut session = CountSession::new(net, models, initial_count);
            let timeline = session.run_online(&capture)?;
            for (w, e) in timeline.iter().enumerate() {
                let activity = e.activity.map_or("-".to_owned(), |a| a.to_string());
                writeln!(
                    out,
                    "window={w} time={:.4} prediction={} activity={activity} event={} action={} count={}",
                    e.time, e.prediction, e.event, e.action, e.count
                )?;
            }
            emit(out, "windows", timeline.len())?;
            emit(out, "final_count", session.current_count)?;
            if let Some(path) = save {
                session.network.save(&path)?;
            }
        }
        Command::Gradcheck { net, eps, batch, per_tensor, tol, seed } => {
            let mut network = net.build(seed)?;
            let x = network.random_input(batch.max(1), seed.wrapping_add(1));
            let labels: Vec<usize> = (0..batch.max(1)).map(|i| i % 5 + 1).collect();
            let coverage = match per_tensor {
                Some(n) => Coverage::Sampled { per_tensor: n, seed },
                None => Coverage::All,
            };
            let report = gradient_check(&mut network, &x, &labels, eps, coverage, None)?;
            emit(out, "params", network.param_count())?;
            emit(out, "checked", report.checked)?;
            emit(out, "kinked", report.kinked)?;
            emit(out, "max_rel_err", format!("{:.3e}", report.max_rel_err))?;
            if let Some((layer, name, index)) = report.worst {
                emit(out, "worst", format!("{layer}:{name}[{index}]"))?;
            }
            if !(report.max_rel_err < tol) {
                return Err(Error::InvalidModel(format!("gradient check failed: max_rel_err {:.3e} >= {tol:e}", report.max_rel_err)));
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let first = e.render().to_string();
                    let line = first.lines().next().unwrap_or("usage error").to_owned();
                    let _ = writeln!(err, "{line}");
                    2
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
