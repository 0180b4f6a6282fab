use metasep::autodiff::{Graph, ParamVector, Tensor};
use metasep::dsp::{mix_at_snr, Waveform};
use metasep::gradcheck::{central_difference, relative_error, FD_STEP};
use metasep::model::{
    apply_masks, decode, encode, forward_separate, separate_masks, upit_loss, upit_loss_value, Permutation,
    Separator, SeparatorConfig,
};
use proptest::prelude::*;

mod common;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn set(params: &mut ParamVector, name: &str, f: impl Fn(usize) -> f64) {
    let i = params.layout().index_of(name).unwrap();
    let e = params.layout().entries()[i].clone();
    for k in 0..e.len() {
        params.values_mut()[e.offset + k] = f(k);
    }
}

#[test]
fn encoder_frame_count() {
    let cfg = SeparatorConfig::default();
    let p = cfg.init_params(0);
    let x = Waveform::new(vec![0.01; 32_000]);
    assert_eq!(encode(&x, &p, &cfg).unwrap().shape(), &[64, 3999]);
}

#[test]
fn identity_encoder() {
    let cfg = SeparatorConfig {
        enc_channels: 1,
        enc_kernel: 1,
        enc_stride: 1,
        ..SeparatorConfig::tiny()
    };
    let mut p = cfg.init_params(0);
    set(&mut p, "encoder.weight", |_| 1.0);
    let x = random_wave(&mut ChaCha8Rng::seed_from_u64(1), 50);
    let y = encode(&x, &p, &cfg).unwrap();
    assert_eq!(y.shape(), &[1, 50]);
    assert_eq!(y.data(), &x.samples[..]);
}

#[test]
fn encoder_matches_naive_convolution() {
    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(7);
    let x = random_wave(&mut ChaCha8Rng::seed_from_u64(2), 203);
    let y = encode(&x, &p, &cfg).unwrap();
    let w = p.get("encoder.weight").unwrap();
    let (h, l, s) = (cfg.enc_channels, cfg.enc_kernel, cfg.enc_stride);
    let frames = (x.len() - l) / s + 1;
    assert_eq!(y.shape(), &[h, frames]);
    for c in 0..h {
        for t in 0..frames {
            let mut acc = 0.0;
            for k in 0..l {
                acc += w[c * l + k] * x.samples[t * s + k];
            }
            assert!((y.data()[c * frames + t] - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn masks_are_bounded_and_half_for_zero_head() {
    let cfg = SeparatorConfig::tiny();
    let mut p = cfg.init_params(3);
    let x = random_wave(&mut ChaCha8Rng::seed_from_u64(3), 400);
    let enc = encode(&x, &p, &cfg).unwrap();
    let masks = separate_masks(&enc, &p, &cfg).unwrap();
    assert_eq!(masks.len(), 2);
    for m in &masks {
        assert_eq!(m.shape(), enc.shape());
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    for c in 0..2 {
        set(&mut p, &format!("mask.{c}.weight"), |_| 0.0);
        set(&mut p, &format!("mask.{c}.bias"), |_| 0.0);
    }
    for m in separate_masks(&enc, &p, &cfg).unwrap() {
        assert!(m.data().iter().all(|&v| v == 0.5));
    }
    let d = apply_masks(&enc, &masks).unwrap();
    for di in &d {
        for (a, b) in di.data().iter().zip(enc.data()) {
            assert!(a.abs() <= b.abs());
        }
    }
}

/// Frames of the mask output that change when a single encoder frame is perturbed.
fn impulse_support(cfg: &SeparatorConfig, frames: usize) -> usize {
    let p = cfg.init_params(11);
    let h = cfg.enc_channels;
    let base = Tensor::zeros(&[h, frames]);
    let mut probe = base.clone();
    for c in 0..h {
        probe.data_mut()[c * frames + frames / 2] = 1.0;
    }
    let m0 = separate_masks(&base, &p, cfg).unwrap();
    let m1 = separate_masks(&probe, &p, cfg).unwrap();
    (0..frames)
        .filter(|&t| (0..h).any(|c| m0[0].data()[c * frames + t] != m1[0].data()[c * frames + t]))
        .count()
}

#[test]
fn receptive_field_matches_impulse_probe() {
    for cfg in [
        SeparatorConfig::tiny(),
        SeparatorConfig {
            stacks: 2,
            kernel: 5,
            ..SeparatorConfig::tiny()
        },
        SeparatorConfig::default(),
    ] {
        let cfg = SeparatorConfig {
            global_norm: false,
            ..cfg
        };
        let rf = cfg.receptive_field();
        assert_eq!(impulse_support(&cfg, 3 * rf), rf, "{cfg:?}");
    }
}

#[test]
fn mask_application_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let m = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let comp = Tensor::new(vec![3, 5], m.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    let d = apply_masks(&enc, &[Tensor::full(&[3, 5], 1.0), Tensor::zeros(&[3, 5]), m, comp]).unwrap();
    assert_eq!(d[0], enc);
    assert!(d[1].data().iter().all(|&v| v == 0.0));
    for i in 0..15 {
        assert!((d[2].data()[i] + d[3].data()[i] - enc.data()[i]).abs() < 1e-15);
    }
    assert!(apply_masks(&enc, &[Tensor::zeros(&[3, 4])]).is_err());
}

#[test]
fn decode_zero_is_zero() {
    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(1);
    let out = decode(&Tensor::zeros(&[16, 9]), &p, &cfg, 80).unwrap();
    assert_eq!(out.len(), 80);
    assert!(out.samples.iter().all(|&v| v == 0.0));
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs())).unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}

#[test]
fn pseudo_inverse_decoder_reconstructs() {
    let n = 4;
    let cfg = SeparatorConfig {
        enc_channels: n,
        enc_kernel: n,
        enc_stride: n,
        ..SeparatorConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w: Vec<f64> = (0..n * n)
        .map(|i| rng.random_range(-0.5..0.5) + if i / n == i % n { 2.0 } else { 0.0 })
        .collect();
    let winv = invert(&w, n);
    let mut p = cfg.init_params(0);
    set(&mut p, "encoder.weight", |i| w[i]);
    // decoder[h, k] = (W^{-1})[k, h]
    set(&mut p, "decoder.weight", |i| winv[(i % n) * n + i / n]);
    let x = random_wave(&mut rng, 64);
    let enc = encode(&x, &p, &cfg).unwrap();
    let back = decode(&enc, &p, &cfg, 64).unwrap();
    for (a, b) in back.samples.iter().zip(&x.samples) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn decode_gradient_matches_finite_differences() {
    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames = 7;
    let samples = (frames - 1) * cfg.enc_stride + cfg.enc_kernel;
    let d0: Vec<f64> = (0..cfg.enc_channels * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..samples).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let sep = Separator::bind(&mut g, &cfg, &p).unwrap();
    let d = g.input(Tensor::new(vec![cfg.enc_channels, frames], d0.clone()).unwrap());
    let y = sep.decode(&mut g, d, samples).unwrap();
    let pr = g.constant(Tensor::row(probe));
    let loss = g.dot(y, pr).unwrap();
    let loss = g.mul(loss, loss).unwrap();
    let gd = g.grad(loss, &[d]).unwrap()[0];
    let analytic = g.value(gd).data().to_vec();
    let params = p.tensors();
    let numeric = central_difference(
        |v| {
            let t = Tensor::new(vec![cfg.enc_channels, frames], v.to_vec()).unwrap();
            g.evaluate(&params, &[t]).unwrap()[loss.index()].item()
        },
        &d0,
        FD_STEP,
    );
    assert!(relative_error(&analytic, &numeric) <= 1e-5);
}

#[test]
fn output_length_equals_input_length() {
    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [16, 100, 203, 1000] {
        let x = random_wave(&mut rng, n);
        let [a, b] = forward_separate(&x, &p, &cfg).unwrap();
        assert_eq!((a.len(), b.len()), (n, n));
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = SeparatorConfig::tiny();
    let p = cfg.init_params(2);
    let x = random_wave(&mut ChaCha8Rng::seed_from_u64(10), 500);
    assert_eq!(forward_separate(&x, &p, &cfg).unwrap(), forward_separate(&x, &p, &cfg).unwrap());
    assert_eq!(cfg.init_params(2), p);
    assert_ne!(cfg.init_params(3), p);
}

fn graph_upit(est: &[Waveform; 2], src: &[Waveform; 2]) -> (f64, Permutation) {
    let mut g = Graph::new();
    let a = g.input(Tensor::row(est[0].samples.clone()));
    let b = g.input(Tensor::row(est[1].samples.clone()));
    let l = upit_loss(&mut g, [a, b], src).unwrap();
    (g.value(l.loss).item(), l.permutation)
}

#[test]
fn upit_in_order_and_swapped() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = mix_at_snr(&random_wave(&mut rng, 300), &random_wave(&mut rng, 300), 2.0).unwrap();
    let noisy = |w: &Waveform, rng: &mut ChaCha8Rng| {
        Waveform::new(w.samples.iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect())
    };
    let est = [noisy(&p.sources[0], &mut rng), noisy(&p.sources[1], &mut rng)];
    let (l_id, perm_id) = graph_upit(&est, &p.sources);
    let (l_sw, perm_sw) = graph_upit(&[est[1].clone(), est[0].clone()], &p.sources);
    assert_eq!(perm_id, Permutation::Identity);
    assert_eq!(perm_sw, Permutation::Swap);
    assert_eq!(l_id, l_sw);
}

#[test]
fn upit_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let n = rng.random_range(8..200);
        let src = [random_wave(&mut rng, n), random_wave(&mut rng, n)];
        let est = [random_wave(&mut rng, n), random_wave(&mut rng, n)];
        let (l, perm) = graph_upit(&est, &src);
        let (lv, pv) = upit_loss_value(&est, &src).unwrap();
        assert!((l - lv).abs() <= 1e-10 * lv.abs().max(1.0));
        assert_eq!(perm, pv);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..40 {
        if let Some(err) = common::end_to_end_error(seed, 64) {
            assert!(err <= 1e-4, "seed {seed}: {err}");
            checked += 1;
        }
        if checked == 8 {
            break;
        }
    }
    assert_eq!(checked, 8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upit_symmetric_and_scale_invariant(seed in 0u64..100_000, c0 in 0.1f64..5.0, c1 in -5.0f64..-0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(8..120);
        let src = [random_wave(&mut rng, n), random_wave(&mut rng, n)];
        let est = [random_wave(&mut rng, n), random_wave(&mut rng, n)];
        let (a, _) = graph_upit(&est, &src);
        let (b, _) = graph_upit(&[est[1].clone(), est[0].clone()], &src);
        prop_assert_eq!(a, b);
        let scaled = [
            Waveform::new(est[0].samples.iter().map(|v| c0 * v).collect()),
            Waveform::new(est[1].samples.iter().map(|v| c1 * v).collect()),
        ];
        let (s, _) = graph_upit(&scaled, &src);
        prop_assert!((a - s).abs() <= 1e-9);
    }
}
