use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vqmir_core::dsp::AudioClip;
use vqmir_core::numerics::{
    check_gradients, Adam, AdamConfig, GradCheckConfig, Graph, Precision, Tensor,
};
use vqmir_core::vqcodec::{
    codebook_stats, quantize, read_codebook, read_token_cache, train_vqvae, write_codebook,
    write_token_cache, CodebookSequence, TokenSequence, VqTrainConfig, VqVae, VqVaeConfig,
};
use vqmir_core::Error;

fn tiny(compression: usize) -> VqVaeConfig {
    VqVaeConfig {
        compression,
        vocab_size: 16,
        code_dim: 4,
        channels: 4,
        commitment_beta: 0.25,
    }
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// Independent nearest-neighbour oracle: full distance list, first minimum.
fn exhaustive_scan(z: &[f64], codebook: &Tensor) -> usize {
    let dists: Vec<f64> = (0..codebook.rows())
        .map(|c| {
            codebook
                .row(c)
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        })
        .collect();
    dists
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new("c", samples, 22050).unwrap()
}

#[test]
fn token_length_is_ceil_over_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = VqVae::new(
        VqVaeConfig {
            channels: 1,
            code_dim: 2,
            vocab_size: 4,
            ..tiny(128)
        },
        &mut rng,
    )
    .unwrap();
    for n in 1..=1280usize {
        let samples = (0..n).map(|i| (i as f64 * 0.01).sin()).collect();
        let (tokens, vectors) = model.tokenize(&clip(samples)).unwrap();
        assert_eq!(tokens.len(), n.div_ceil(128), "n = {n}");
        assert_eq!(vectors.len(), tokens.len());
        assert!(tokens.ids().all(|t| t < 4));
    }
}

#[test]
fn thirty_second_clip_gives_10336_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = VqVae::new(
        VqVaeConfig {
            channels: 1,
            code_dim: 2,
            vocab_size: 4,
            ..tiny(128)
        },
        &mut rng,
    )
    .unwrap();
    let c = AudioClip::new("long", vec![0.0; 1_323_000], 44100).unwrap();
    assert_eq!(model.encode(&c).unwrap().rows(), 10336);
    assert_eq!(model.encode(&clip(vec![0.1; 128])).unwrap().rows(), 1);
}

#[test]
fn empty_clip_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = VqVae::new(tiny(8), &mut rng).unwrap();
    let empty = AudioClip {
        id: "e".into(),
        samples: vec![],
        sample_rate: 22050,
    };
    assert!(matches!(
        model.encode(&empty),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn zero_input_latents_are_deterministic_bias_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = VqVae::new(tiny(8), &mut rng).unwrap();
    let a = model.encode(&clip(vec![0.0; 64])).unwrap();
    let b = model.encode(&clip(vec![0.0; 64])).unwrap();
    assert_eq!(a, b);
    // Biases start at zero, so the all-zero input maps to all-zero latents.
    assert!(a.data().iter().all(|&v| v == 0.0));
}

#[test]
fn exact_code_and_tie_break() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codebook = randn(&mut rng, &[32, 8]);
    let z = Tensor::new(vec![1, 8], codebook.row(17).to_vec()).unwrap();
    let (tokens, _) = quantize(&z, &codebook, "x", 128).unwrap();
    assert_eq!(tokens.tokens, vec![17]);

    // Codes 3 and 9 at +-1 on the first axis, everything else far away.
    let mut data = vec![100.0; 16 * 2];
    data[6..8].copy_from_slice(&[1.0, 0.0]);
    data[18..20].copy_from_slice(&[-1.0, 0.0]);
    let codebook = Tensor::new(vec![16, 2], data).unwrap();
    let z = Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap();
    let (tokens, _) = quantize(&z, &codebook, "x", 128).unwrap();
    assert_eq!(tokens.tokens, vec![3]);
}

#[test]
fn quantize_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codebook = randn(&mut rng, &[2048, 64]);
    let latents = randn(&mut rng, &[1000, 64]);
    let (tokens, vectors) = quantize(&latents, &codebook, "x", 128).unwrap();
    for i in 0..latents.rows() {
        let want = exhaustive_scan(latents.row(i), &codebook);
        assert_eq!(tokens.tokens[i] as usize, want, "row {i}");
        let got: Vec<u64> = vectors.vectors.row(i).iter().map(|v| v.to_bits()).collect();
        let row: Vec<u64> = codebook.row(want).iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, row);
    }
}

#[test]
fn quantize_rejects_width_mismatch() {
    let codebook = Tensor::zeros(&[4, 3]);
    let latents = Tensor::zeros(&[2, 2]);
    assert!(matches!(
        quantize(&latents, &codebook, "x", 8),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn decode_length_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = VqVae::new(
        VqVaeConfig {
            channels: 2,
            ..tiny(128)
        },
        &mut rng,
    )
    .unwrap();
    let tokens = TokenSequence {
        clip_id: "x".into(),
        compression: 128,
        tokens: (0..10).map(|i| i % 16).collect(),
    };
    let seq = CodebookSequence::gather(model.codebook(), &tokens).unwrap();
    let a = model.decode(&seq, "y", 22050).unwrap();
    let b = model.decode(&seq, "y", 22050).unwrap();
    assert_eq!(a.len(), 1280);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn identity_on_zero_input_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = VqVae::new(tiny(8), &mut rng).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model
            .params
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let zeros = vec![0.0; 32];
    let fwd = model.net.loss(&mut g, &model.params, &[&zeros]).unwrap();
    assert_eq!(g.scalar(fwd.total), 0.0);
}

#[test]
fn beta_zero_removes_commit_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = VqVae::new(
        VqVaeConfig {
            commitment_beta: 0.0,
            ..tiny(8)
        },
        &mut rng,
    )
    .unwrap();
    let audio: Vec<f64> = (0..48).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut g = Graph::new();
    let fwd = model.net.loss(&mut g, &model.params, &[&audio]).unwrap();
    let l = fwd.losses(&g);
    assert_eq!(l.commit, 0.0);
    assert_eq!(l.total, l.recon + l.codebook);
}

#[test]
fn straight_through_copies_gradient_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = VqVae::new(
        VqVaeConfig {
            commitment_beta: 0.0,
            ..tiny(8)
        },
        &mut rng,
    )
    .unwrap();
    let audio: Vec<f64> = (0..64).map(|i| (i as f64 * 0.2).cos() * 0.5).collect();
    let mut g = Graph::new();
    let fwd = model.net.loss(&mut g, &model.params, &[&audio]).unwrap();
    let grads = g.backward(fwd.total).unwrap();
    let dz = grads.wrt(fwd.latents).unwrap();
    let dq = grads.wrt(fwd.quantized).unwrap();
    assert_eq!(dz, dq);
    assert!(dq.iter().any(|&v| v != 0.0));
}

#[test]
fn vq_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let VqVae {
        net, mut params, ..
    } = VqVae::new(tiny(8), &mut rng).unwrap();
    let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 0.8).collect();
    let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.11).cos() * 0.6).collect();
    let frozen = net.freeze(&params, &[&a, &b]).unwrap();

    // The straight-through tape and the frozen surrogate agree at the base point.
    let mut g = Graph::new();
    let fwd = net.loss(&mut g, &params, &[&a, &b]).unwrap();
    g.backward_into(fwd.total, &mut params).unwrap();
    let live: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    params.zero_grad();
    let mut g = Graph::new();
    let fwd = net
        .loss_frozen(&mut g, &params, &[&a, &b], &frozen)
        .unwrap();
    g.backward_into(fwd.total, &mut params).unwrap();
    for ((_, p), want) in params.iter().zip(&live) {
        for (x, y) in p.grad.iter().zip(want) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{}", p.name);
        }
    }
    params.zero_grad();

    let cfg = GradCheckConfig::default();
    let report = check_gradients(
        &mut params,
        |g, p| Ok(net.loss_frozen(g, p, &[&a, &b], &frozen)?.total),
        &cfg,
    )
    .unwrap();
    assert!(report.checked.len() >= 60, "{report}");
    assert!(report.passed(), "{report}");

    let encoder_only = check_gradients(
        &mut params,
        |g, p| Ok(net.loss_frozen(g, p, &[&a, &b], &frozen)?.total),
        &GradCheckConfig {
            seed: 3,
            param_prefix: Some("enc.".into()),
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(encoder_only.checked.len() + encoder_only.excluded.len(), 64);
    assert!(encoder_only
        .checked
        .iter()
        .all(|c| c.param.starts_with("enc.")));
    assert!(encoder_only.passed(), "{encoder_only}");
}

#[test]
fn perplexity_and_utilization() {
    let seq = |tokens: Vec<u16>| TokenSequence {
        clip_id: "s".into(),
        compression: 128,
        tokens,
    };
    let same = codebook_stats(&[seq(vec![5; 100])], 64).unwrap();
    assert_eq!(same.utilization, 1.0 / 64.0);
    assert_eq!(same.perplexity, 1.0);

    let uniform = codebook_stats(&[seq((0..32).collect()), seq((0..32).collect())], 32).unwrap();
    assert!((uniform.perplexity - 32.0).abs() < 1e-9);
    assert_eq!(uniform.utilization, 1.0);

    // p = (1/2, 1/4, 1/4): H = 1.5 ln 2, so exp(H) = 2^1.5.
    let skew = codebook_stats(&[seq(vec![0, 0, 1, 2])], 4).unwrap();
    assert!((skew.perplexity - 2f64.powf(1.5)).abs() < 1e-12);
    assert!((skew.perplexity - 2.828427).abs() < 1e-6);
    assert_eq!(skew.utilization, 0.75);

    assert!(codebook_stats(&[], 4).is_err());
}

#[test]
fn dead_code_reset_keeps_batch_tokens_and_rows_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = VqVae::new(tiny(8), &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let audio: Vec<f64> = (0..64).map(|i| (i as f64 * 0.5).sin()).collect();
    let expected: Vec<usize> = {
        let (t, _) = model.tokenize(&clip(audio.clone())).unwrap();
        t.ids().collect()
    };
    let mut counts = vec![0u64; 16];
    let (_, tokens) = model
        .train_step(&mut adam, &[&audio], 1e-3, &mut counts)
        .unwrap();
    assert_eq!(tokens, expected);

    let latents = model.encode(&clip(audio.clone())).unwrap();
    let before = model.codebook().clone();
    let reset = model.reset_dead_codes(&latents, &counts, Some(&mut adam), &mut rng);
    assert_eq!(reset, counts.iter().filter(|&&c| c == 0).count());
    assert!(reset > 0);
    for c in 0..16 {
        if counts[c] > 0 {
            assert_eq!(model.codebook().row(c), before.row(c));
        }
    }
    let cb = model.codebook();
    for i in 0..16 {
        for j in i + 1..16 {
            assert_ne!(cb.row(i), cb.row(j), "rows {i} and {j} duplicate");
        }
    }
}

#[test]
fn training_reduces_reconstruction_error() {
    let clips: Vec<AudioClip> = (0..4)
        .map(|k| {
            let f = 0.02 + 0.01 * k as f64;
            clip(
                (0..2048)
                    .map(|i| 0.5 * (i as f64 * f * std::f64::consts::TAU).sin())
                    .collect(),
            )
        })
        .collect();
    let tc = VqTrainConfig {
        steps: 80,
        batch: 4,
        window: 256,
        lr: 3e-3,
        reset_every: 20,
        seed: 1,
        precision: Precision::F64,
    };
    let config = VqVaeConfig {
        channels: 8,
        ..tiny(8)
    };
    let (model, report) = train_vqvae(&clips, config.clone(), &tc).unwrap();
    let first: f64 = report.history[..10].iter().map(|h| h[1]).sum::<f64>() / 10.0;
    let last: f64 = report.history[70..].iter().map(|h| h[1]).sum::<f64>() / 10.0;
    assert!(last < 0.5 * first, "recon {first} -> {last}");
    let (again, _) = train_vqvae(&clips, config, &tc).unwrap();
    assert_eq!(model.codebook(), again.codebook());
}

#[test]
fn caches_round_trip_and_reject_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let seq = TokenSequence {
        clip_id: "track_7".into(),
        compression: 128,
        tokens: vec![0, 2047, 5, 17],
    };
    let path = dir.path().join("track_7.tok");
    write_token_cache(&path, &seq, 2048).unwrap();
    let (back, vocab) = read_token_cache(&path).unwrap();
    assert_eq!(back, seq);
    assert_eq!(vocab, 2048);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_token_cache(&path), Err(Error::Format { .. })));
    let mut bumped = bytes.clone();
    bumped[8] = 9;
    std::fs::write(&path, &bumped).unwrap();
    assert!(matches!(
        read_token_cache(&path),
        Err(Error::VersionMismatch {
            found: 9,
            expected: 1
        })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cb = randn(&mut rng, &[16, 4]);
    let cpath = dir.path().join("codebook.bin");
    write_codebook(&cpath, &cb).unwrap();
    let back = read_codebook(&cpath).unwrap();
    for (a, b) in cb.data().iter().zip(back.data()) {
        assert_eq!(*a as f32 as f64, *b);
    }
}

#[test]
fn codec_checkpoint_is_bit_exact_at_f64() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = VqVae::new(tiny(32), &mut rng).unwrap();
    let path = dir.path().join("vq.ckpt");
    model.save(&path, Precision::F64).unwrap();
    let back = VqVae::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(VqVae::load(&path).is_err());
}
