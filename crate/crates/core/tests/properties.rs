use std::f64::consts::PI;

use csicount::csi_io::{decode_capture, encode_capture, CsiCapture, CsiFrame};
use csicount::dwt::{dwt_decompose, dwt_reconstruct};
use csicount::hmm::{decode_hmm, encode_hmm, GaussianHmm};
use csicount::preprocess::{sanitize_phase, unwrap, weighted_moving_average};
use csicount::tensor_file::{decode_array, encode_array};
use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use proptest::prelude::*;

fn capture_strategy() -> impl Strategy<Value = CsiCapture> {
    (1usize..=3, 1usize..=3, 1usize..=8, 0usize..6, proptest::option::of("[a-z0-9 ]{1,12}")).prop_flat_map(
        |(n_tx, n_rx, n_sub, n_frames, label)| {
            let values = proptest::collection::vec(-1e3f32..1e3f32, n_frames * n_tx * n_rx * n_sub * 2);
            let gaps = proptest::collection::vec(1e-4f64..1.0, n_frames);
            (values, gaps).prop_map(move |(values, gaps)| {
                let per = n_tx * n_rx * n_sub * 2;
                let mut cap = CsiCapture::empty(1500.0, n_tx, n_rx, n_sub);
                cap.label = label.clone();
                let mut t = 0.0;
                for (k, gap) in gaps.iter().enumerate() {
                    t += gap;
                    let chunk = &values[k * per..(k + 1) * per];
                    let frame = Array2::from_shape_fn((n_tx * n_rx, n_sub), |(i, j)| {
                        let c = 2 * (i * n_sub + j);
                        Complex64::new(f64::from(chunk[c]), f64::from(chunk[c + 1]))
                    });
                    cap.frames.push(CsiFrame::new(t, frame));
                }
                cap
            })
        },
    )
}

fn model_strategy() -> impl Strategy<Value = GaussianHmm> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(s, d)| {
        let w = proptest::collection::vec(0.05f64..1.0, s + s * s);
        let m = proptest::collection::vec(-3.0f64..3.0, s * d);
        let v = proptest::collection::vec(0.1f64..3.0, s * d);
        (w, m, v).prop_map(move |(w, m, v)| {
            let norm = |x: &[f64]| {
                let t: f64 = x.iter().sum();
                x.iter().map(|v| v / t).collect::<Vec<_>>()
            };
            GaussianHmm::new(
                norm(&w[..s]),
                (0..s).map(|i| norm(&w[s + i * s..s + (i + 1) * s])).collect(),
                m.chunks(d).map(<[f64]>::to_vec).collect(),
                v.chunks(d).map(<[f64]>::to_vec).collect(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #[test]
    fn capture_codec_round_trips(cap in capture_strategy()) {
        let bytes = encode_capture(&cap).unwrap();
        prop_assert_eq!(decode_capture(&bytes).unwrap(), cap);
    }

    #[test]
    fn truncated_capture_is_an_error(cap in capture_strategy(), cut in 0.0f64..1.0) {
        let bytes = encode_capture(&cap).unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_capture(&bytes[..n]).is_err());
    }

    #[test]
    fn tensor_file_round_trips(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) as f64).sin()).collect();
        let a = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
        let bytes = encode_array(&a);
        prop_assert_eq!(&decode_array(&bytes).unwrap(), &a);
        prop_assert!(decode_array(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn unwrap_only_adds_whole_turns(x in proptest::collection::vec(-PI..PI, 1..64)) {
        let u = unwrap(&x);
        for (a, b) in u.iter().zip(&x) {
            let turns = (a - b) / (2.0 * PI);
            prop_assert!((turns - turns.round()).abs() < 1e-9);
        }
        for w in u.windows(2) {
            prop_assert!((w[1] - w[0]).abs() <= PI + 1e-9);
        }
    }

    #[test]
    fn wma_is_shift_equivariant(x in proptest::collection::vec(-10.0f64..10.0, 1..80), c in -100.0f64..100.0, m in 1usize..20) {
        let base = weighted_moving_average(&x, m).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in weighted_moving_average(&shifted, m).unwrap().iter().zip(&base) {
            prop_assert!((a - (b + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn dwt_reconstructs_any_length(x in proptest::collection::vec(-5.0f64..5.0, 16..300), levels in 1usize..=4) {
        let d = dwt_decompose(&x, levels).unwrap();
        let y = dwt_reconstruct(&d).unwrap();
        prop_assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sanitize_is_idempotent(
        slope in -1.0f64..1.0,
        offsets in proptest::collection::vec(-PI..PI, 3),
        noise in proptest::collection::vec(proptest::collection::vec(-0.5f64..0.5, 12), 1..5),
    ) {
        // Wrapped linear phase plus bounded noise: subcarrier steps stay well
        // within pi of the common trend, as for any physical channel.
        let wrap = |v: f64| (v + PI).rem_euclid(2.0 * PI) - PI;
        let m = Array2::from_shape_fn((noise.len(), 12), |(t, c)| wrap(slope * (c % 4) as f64 + offsets[c / 4] + noise[t][c]));
        let once = sanitize_phase(m.view(), 3, 4).unwrap();
        let twice = sanitize_phase(once.view(), 3, 4).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_bounds_viterbi(model in model_strategy(), len in 1usize..30, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (_, obs) = model.sample(len, &mut rng);
        let ll = model.log_likelihood(&obs).unwrap();
        let best = model.path_log_prob(&obs, &model.viterbi(&obs).unwrap());
        prop_assert!(best <= ll + 1e-9);
        prop_assert!(ll <= best + (model.n_states() as f64).ln() * len as f64 + 1e-9);
    }

    #[test]
    fn hmm_codec_round_trips(model in model_strategy(), label in "[A-Za-z]{1,16}") {
        let bytes = encode_hmm(&label, &model).unwrap();
        let (l, back) = decode_hmm(&bytes).unwrap();
        prop_assert_eq!(l, label);
        prop_assert_eq!(back, model);
    }
}
