//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! if any criterion fails. Heavy (several minutes); run with
//! `cargo test --release --test acceptance` for the quickest turnaround.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use csicount::counting::{evaluate, synthetic_dataset, train, ActivityPipeline, CountSession, Dataset, Regime};
use csicount::csi_io::{read_capture, split_streams, write_capture, CsiCapture, CsiFrame};
use csicount::dwt::{dwt_decompose, dwt_reconstruct, DEFAULT_LEVELS};
use csicount::hmm::{classify_activity, fit_hmm, fit_hmm_report, ActivityLabel, DoorEventKind, GaussianHmm};
use csicount::neural::{build_deepcount, build_fcbp, gradient_check, Coverage, DeepCountConfig, Network, Tensor, TrainConfig};
use csicount::preprocess::{fitted_slope, sanitize_phase, CountingConfig};
use csicount::sim::{
    inject_phase_offsets, make_activity_scene, simulate_capture, simulate_script, Path, Person, PhaseDistortion, Scene,
};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

const RATE: f64 = 1500.0;

type Outcome = Result<(bool, String), String>;

fn criterion(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let (pass, detail) = match outcome {
        Ok((ok, detail)) => (ok && elapsed < limit, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {id} {name}: {} ({detail}; {:.1}s, limit {}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_capture(rng: &mut ChaCha8Rng) -> CsiCapture {
    let (n_tx, n_rx, n_sub) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=30));
    let mut cap = CsiCapture::empty(rng.random_range(100.0..3000.0), n_tx, n_rx, n_sub);
    let mut t = rng.random_range(0.0..10.0);
    for _ in 0..rng.random_range(0..=40) {
        t += rng.random_range(1e-4..1e-2);
        let values = Array2::from_shape_fn((n_tx * n_rx, n_sub), |_| {
            Complex64::new(rng.sample::<f64, _>(StandardNormal) * 10.0, rng.sample::<f64, _>(StandardNormal) * 10.0)
        });
        cap.frames.push(CsiFrame::new(t, values));
    }
    if rng.random_bool(0.5) {
        cap.label = Some(format!("run-{}", rng.random_range(0..1000)));
    }
    cap.quantize();
    cap
}

fn bits(cap: &CsiCapture) -> Vec<u64> {
    let mut out = vec![u64::from(cap.rate_hz.to_bits()), cap.n_tx as u64, cap.n_rx as u64, cap.n_sub as u64];
    for f in &cap.frames {
        out.push(f.timestamp.to_bits());
        out.extend(f.values.iter().flat_map(|v| [v.re.to_bits(), v.im.to_bits()]));
    }
    out
}

fn c1_format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = 0;
    for i in 0..1000 {
        let cap = random_capture(&mut rng);
        let path = dir.path().join(format!("{i}.csic"));
        write_capture(&cap, &path).map_err(err)?;
        let back = read_capture(&path).map_err(err)?;
        if bits(&back) == bits(&cap) && back.label == cap.label {
            exact += 1;
        }
    }
    Ok((exact == 1000, format!("{exact}/1000 bit-exact")))
}

fn c2_phase_sanitization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let scene = make_activity_scene(ActivityLabel::Walking, trial);
        let clean = simulate_capture(&scene, 0.02, RATE, trial).map_err(err)?;
        let d = PhaseDistortion::new(rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0), 0.0);
        let distorted = inject_phase_offsets(&clean, d, trial).map_err(err)?;
        let (_, phase) = split_streams(&distorted).map_err(err)?;
        let (pairs, n_sub) = (distorted.n_streams(), distorted.n_sub);
        let out = sanitize_phase(phase.data.view(), pairs, n_sub).map_err(err)?;
        for row in out.rows() {
            let mean: Vec<f64> =
                (0..n_sub).map(|j| (0..pairs).map(|i| row[i * n_sub + j]).sum::<f64>() / pairs as f64).collect();
            worst = worst.max(fitted_slope(&mean).abs());
        }
    }
    Ok((worst < 1e-9, format!("max residual slope {worst:.2e} rad/subcarrier")))
}

fn c3_doppler() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (k, &v) in [0.25, 0.5, 1.0].iter().enumerate() {
        let scene = Scene {
            static_paths: vec![Path::new(Complex64::new(1.0, 0.0), 12e-9, 0.0)],
            persons: vec![Person { paths: vec![Path::new(Complex64::new(0.5, 0.0), 30e-9, v)] }],
            noise_sigma: 0.0,
            ..Scene::default()
        };
        let cap = simulate_capture(&scene, 2.0, RATE, k as u64).map_err(err)?;
        let n = cap.len();
        let series: Vec<Complex64> = cap.frames.iter().map(|f| f.values[[0, 0]]).collect();
        let mean = series.iter().sum::<Complex64>() / n as f64;
        let mut buf: Vec<Complex64> = series.iter().map(|x| x - mean).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n).max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr())).unwrap();
        let signed = if peak > n / 2 { peak as f64 - n as f64 } else { peak as f64 };
        let bin = RATE / n as f64;
        let expected = 2.0 * v / scene.wavelength();
        let off = (signed.abs() * bin - expected).abs();
        pass &= off <= bin;
        details.push(format!("v={v}: peak {:.2} Hz vs {expected:.2} Hz", signed.abs() * bin));
    }
    Ok((pass, details.join(", ")))
}

fn c4_dwt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut recon, mut parseval) = (0f64, 0f64);
    for _ in 0..100 {
        let x: Vec<f64> = (0..1024).map(|_| rng.sample::<f64, _>(StandardNormal) * rng.random_range(0.1..10.0)).collect();
        let d = dwt_decompose(&x, DEFAULT_LEVELS).map_err(err)?;
        let y = dwt_reconstruct(&d).map_err(err)?;
        recon = recon.max(x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let e: f64 = x.iter().map(|v| v * v).sum();
        parseval = parseval.max((d.energy() - e).abs() / e);
    }
    let mut constant_nonzero = 0;
    for c in [1.0, -3.7, 1234.5678, 1e-8] {
        let d = dwt_decompose(&[c; 1024], DEFAULT_LEVELS).map_err(err)?;
        constant_nonzero += d.detail.iter().flatten().filter(|&&v| v != 0.0).count();
    }
    Ok((
        recon < 1e-9 && parseval < 1e-9 && constant_nonzero == 0,
        format!("recon {recon:.1e}, parseval {parseval:.1e}, nonzero constant details {constant_nonzero}"),
    ))
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_model(rng: &mut ChaCha8Rng, s: usize, d: usize) -> GaussianHmm {
    GaussianHmm::new(
        random_stochastic(rng, s),
        (0..s).map(|_| random_stochastic(rng, s)).collect(),
        (0..s).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        (0..s).map(|_| (0..d).map(|_| rng.random_range(0.3..2.0)).collect()).collect(),
    )
    .unwrap()
}

/// Every state path of length `t` over `s` states.
fn all_paths(s: usize, t: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![vec![]];
    for _ in 0..t {
        paths = paths.into_iter().flat_map(|p| (0..s).map(move |k| [p.clone(), vec![k]].concat())).collect();
    }
    paths
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn c5_hmm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ll_err, mut vit_err, mut instances) = (0f64, 0f64, 0);
    let mut bw_violations = 0;
    for m in 0..50 {
        let s = 1 + m % 3;
        let model = random_model(&mut rng, s, 1 + m % 2);
        for t in 1..=8 {
            let (_, obs) = model.sample(t, &mut rng);
            let joint: Vec<f64> = all_paths(s, t).iter().map(|p| model.path_log_prob(&obs, p)).collect();
            let brute_ll = log_sum_exp(&joint);
            let brute_best = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ll_err = ll_err.max((model.log_likelihood(&obs).map_err(err)? - brute_ll).abs());
            let path = model.viterbi(&obs).map_err(err)?;
            vit_err = vit_err.max((model.path_log_prob(&obs, &path) - brute_best).abs());
            instances += 1;
        }
        let seqs: Vec<Vec<Vec<f64>>> = (0..4).map(|_| model.sample(30, &mut rng).1).collect();
        let report = fit_hmm_report(&seqs, s, 0.0, 25, m as u64).map_err(err)?;
        let ll = &report.log_likelihoods;
        bw_violations += ll.windows(2).filter(|w| w[1] < w[0] - 1e-9 * w[0].abs()).count();
    }
    Ok((
        ll_err < 1e-8 && vit_err < 1e-8 && bw_violations == 0,
        format!("{instances} instances, forward err {ll_err:.1e}, viterbi err {vit_err:.1e}, baum-welch decreases {bw_violations}"),
    ))
}

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() }
}

fn c6_gradients() -> Outcome {
    let mut toy = DeepCountConfig::toy().build(6).map_err(err)?;
    let toy_report =
        gradient_check(&mut toy, &random_tensor(vec![2, 12, 20], 61), &[2, 5], 1e-5, Coverage::All, None).map_err(err)?;
    let mut published = build_deepcount();
    let sample = random_tensor(vec![200, 360], 62);
    let pub_report =
        gradient_check(&mut published, &sample, &[3], 1e-5, Coverage::Sampled { per_tensor: 150, seed: 63 }, None)
            .map_err(err)?;
    let pass = toy_report.max_rel_err < 1e-4
        && pub_report.max_rel_err < 1e-4
        && toy_report.checked + toy_report.kinked == toy.param_count();
    Ok((
        pass,
        format!(
            "toy {:.2e} over {} entries ({} kinked); published {:.2e} over {} sampled entries ({} kinked)",
            toy_report.max_rel_err,
            toy_report.checked,
            toy_report.kinked,
            pub_report.max_rel_err,
            pub_report.checked,
            pub_report.kinked
        ),
    ))
}

fn c7_shapes() -> Outcome {
    let mut net = build_deepcount();
    let (_, trace) = net.forward_trace(&Tensor::zeros(vec![200, 360])).map_err(err)?;
    let expected: Vec<Vec<usize>> =
        vec![vec![200, 64], vec![98, 30, 6], vec![32, 10, 10], vec![3200], vec![1000], vec![200], vec![5]];
    Ok((trace == expected, format!("{trace:?}")))
}

fn train_cfg(regime: Regime) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        learning_rate: regime.learning_rate(),
        max_iter: 3000,
        seed: 8,
        target_loss: Some(0.02),
    }
}

fn c8_counting(trained: &mut Option<Network>) -> Outcome {
    let regime = Regime::Semi;
    let data = synthetic_dataset(200, 4, &CountingConfig::default(), regime, 8).map_err(err)?;
    let (train_set, test_set): (Dataset, Dataset) = data.split(0.8, 8);
    let untrained = evaluate(&mut build_deepcount(), &test_set).map_err(err)?.accuracy();
    let (mut net, report) = train(build_deepcount(), &train_set, &train_cfg(regime)).map_err(err)?;
    let acc = evaluate(&mut net, &test_set).map_err(err)?.accuracy();
    let (mut fcbp, fcbp_report) = train(build_fcbp(), &train_set, &train_cfg(regime)).map_err(err)?;
    let fcbp_acc = evaluate(&mut fcbp, &test_set).map_err(err)?.accuracy();
    *trained = Some(net);
    Ok((
        acc >= 0.90 && (untrained - 0.20).abs() <= 0.05 && fcbp_acc >= 0.80,
        format!(
            "deepcount {acc:.3} after {} iterations, untrained {untrained:.3}, fcbp {fcbp_acc:.3} after {} iterations, {} test windows",
            report.losses.len(),
            fcbp_report.losses.len(),
            test_set.len()
        ),
    ))
}

fn fit_activity_models(labels: &[ActivityLabel], per_label: usize) -> Result<BTreeMap<ActivityLabel, GaussianHmm>, String> {
    let pipeline = ActivityPipeline::default();
    let duration = pipeline.context as f64 / RATE;
    let mut models = BTreeMap::new();
    for &label in labels {
        let seqs = (0..per_label)
            .map(|k| {
                let seed = 10_000 + k as u64 * 31 + label as u64;
                let cap = simulate_capture(&make_activity_scene(label, seed), duration, RATE, seed).map_err(err)?;
                pipeline.capture_observations(&cap).map_err(err)
            })
            .collect::<Result<Vec<_>, String>>()?;
        models.insert(label, fit_hmm(&seqs, 4, 1e-4, 200, 1).map_err(err)?);
    }
    Ok(models)
}

fn param_bits(net: &Network, layers: std::ops::Range<usize>) -> Vec<u64> {
    layers.flat_map(|i| net.layers[i].params().into_iter().flat_map(|p| p.value.iter().map(|v| v.to_bits())).collect::<Vec<_>>()).collect()
}

fn c9_amendment(trained: Option<Network>) -> Outcome {
    use ActivityLabel::*;
    let net = trained.ok_or("no trained network from criterion 8")?;
    let models = fit_activity_models(&ActivityLabel::ALL, 20)?;
    let mut script = vec![
        (make_activity_scene(Walking, 1), 2.0),
        (make_activity_scene(EnteringRoom, 2), 2.5),
        (make_activity_scene(Walking, 3), 2.0),
        (make_activity_scene(LeavingRoom, 4), 2.5),
        (make_activity_scene(Walking, 5), 2.0),
    ];
    // One room throughout: only the people change between segments.
    let room = script[0].0.static_paths.clone();
    script.iter_mut().for_each(|(scene, _)| scene.static_paths = room.clone());
    let capture = simulate_script(&script, RATE, 9).map_err(err)?;

    let last = net.last_dense_index().ok_or("network has no dense layer")?;
    let frozen_before = param_bits(&net, 0..last);
    let head_before = param_bits(&net, last..net.layers.len());
    let initial = 2;
    let mut session = CountSession::new(net, models, initial);
    let timeline = session.run_online(&capture).map_err(err)?;

    let (mut prev, mut bad, mut enters, mut leaves, mut amended) = (initial, 0, 0, 0, 0);
    for e in &timeline {
        match e.event {
            DoorEventKind::Enter => enters += 1,
            DoorEventKind::Leave => leaves += 1,
            DoorEventKind::None => {}
        }
        if e.event != DoorEventKind::None {
            bad += usize::from(e.count.abs_diff(prev) != 1);
            amended += usize::from(e.action == csicount::counting::Action::Amended);
        }
        prev = e.count;
    }
    let net = &session.network;
    let frozen_ok = param_bits(net, 0..last) == frozen_before;
    let head_changed = param_bits(net, last..net.layers.len()) != head_before;
    Ok((
        bad == 0 && enters >= 1 && leaves >= 1 && frozen_ok && (amended == 0 || head_changed),
        format!(
            "{enters} enter / {leaves} leave events, {bad} non-unit transitions, {amended} amendments, frozen layers unchanged: {frozen_ok}, head updated: {head_changed}"
        ),
    ))
}

fn c10_activity() -> Outcome {
    use ActivityLabel::*;
    let labels = [Walking, Running, SittingDown, Falling];
    let models = fit_activity_models(&labels, 20)?;
    let pipeline = ActivityPipeline::default();
    let duration = pipeline.context as f64 / RATE;
    let mut correct = 0;
    for trial in 0..100u64 {
        let label = labels[trial as usize % labels.len()];
        let seed = 900_000 + trial;
        let cap = simulate_capture(&make_activity_scene(label, seed), duration, RATE, seed).map_err(err)?;
        let obs = pipeline.capture_observations(&cap).map_err(err)?;
        correct += usize::from(classify_activity(&models, &obs).map_err(err)? == label);
    }
    let acc = correct as f64 / 100.0;
    Ok((acc >= 0.9, format!("accuracy {acc:.2} over 100 held-out trials")))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut trained = None;
    let results = [
        criterion(1, "format round-trip", secs(10), c1_format_round_trip),
        criterion(2, "phase sanitization", secs(5), c2_phase_sanitization),
        criterion(3, "doppler fidelity", secs(10), c3_doppler),
        criterion(4, "dwt oracles", secs(5), c4_dwt),
        criterion(5, "hmm oracles", secs(30), c5_hmm),
        criterion(6, "gradient correctness", secs(300), c6_gradients),
        criterion(7, "shape contract", secs(60), c7_shapes),
        criterion(8, "synthetic counting", secs(1800), || c8_counting(&mut trained)),
        criterion(9, "amendment locality", secs(300), || c9_amendment(trained.take())),
        criterion(10, "activity self-consistency", secs(300), c10_activity),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
