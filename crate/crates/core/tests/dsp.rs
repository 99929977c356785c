use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use vqmir_core::dsp::{
    frame_count, hann_window, hz_to_mel, mel_filterbank, mel_spectrogram, power_to_db,
    read_mel_cache, read_wav, stft, write_mel_cache, write_wav, AudioClip, SpectrogramConfig,
};
use vqmir_core::numerics::Tensor;

fn tone(freq: f64, rate: u32, n: usize, amp: f64) -> AudioClip {
    let samples = (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
        .collect();
    AudioClip::new("tone", samples, rate).unwrap()
}

/// Cosine whose reflect-padded continuation is seamless at both ends
/// (`freq * 2 * (n - 1) / rate` must be an integer).
fn edge_aligned_cosine(freq: f64, rate: u32, n: usize) -> AudioClip {
    let samples = (0..n)
        .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).cos())
        .collect();
    AudioClip::new("cos", samples, rate).unwrap()
}

fn tone_concentration(power: &Tensor, k: usize, frames: impl Iterator<Item = usize>) {
    for t in frames {
        let row = power.row(t);
        let total: f64 = row.iter().sum();
        let near: f64 = row[k - 1..=k + 1].iter().sum();
        assert!(near / total >= 0.95, "frame {t}: {}", near / total);
    }
}

/// Direct O(n^2) DFT power of one windowed frame.
fn brute_force_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..n / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn hann_window_values() {
    let w = hann_window(512).unwrap();
    assert_eq!(w[0], 0.0);
    assert_eq!(w[256], 1.0);
    let w8 = hann_window(8).unwrap();
    assert_abs_diff_eq!(w8[2], 0.5, epsilon = 1e-15);
    for k in 1..512 {
        assert_abs_diff_eq!(w[k], w[512 - k], epsilon = 1e-15);
    }
    assert!(hann_window(1).is_err());
}

#[test]
fn stft_matches_brute_force_dft_and_concentrates_tone() {
    let cfg = SpectrogramConfig::default();
    let rate = 44_100;
    let k = 20;
    let f = k as f64 * rate as f64 / cfg.frame_size as f64;
    let clip = tone(f, rate, 8192, 0.5);
    let power = stft(&clip, &cfg).unwrap();
    assert_eq!(power.shape(), &[64, 257]);

    // interior frame 10 starts at 10*128 - 256 without padding
    let w = hann_window(512).unwrap();
    let start = 10 * 128 - 256;
    let frame: Vec<f64> = (0..512).map(|j| clip.samples[start + j] * w[j]).collect();
    let oracle = brute_force_power(&frame);
    for (a, b) in power.row(10).iter().zip(&oracle) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-8 * oracle[k].max(1.0));
    }

    // frames that never touch the padded edges: 2..62
    tone_concentration(&power, k, 2..62);

    // a phase-aligned cosine continues seamlessly through reflect padding,
    // so every frame qualifies
    let cos = edge_aligned_cosine(f, rate, 8193);
    let power = stft(&cos, &cfg).unwrap();
    tone_concentration(&power, k, 0..power.shape()[0]);
}

#[test]
fn stft_zero_clip_and_errors() {
    let cfg = SpectrogramConfig::default();
    let clip = AudioClip::new("z", vec![0.0; 1000], 44_100).unwrap();
    let p = stft(&clip, &cfg).unwrap();
    assert_eq!(p.shape(), &[8, 257]);
    assert!(p.data().iter().all(|&v| v == 0.0));
    let empty = AudioClip::new("e", vec![], 44_100).unwrap();
    assert!(stft(&empty, &cfg).is_err());
}

#[test]
fn thirty_second_clip_frame_count() {
    let cfg = SpectrogramConfig::default();
    assert_eq!(frame_count(1_323_000, &cfg), 10336);
    let clip = AudioClip::new("silence", vec![0.0; 1_323_000], 44_100).unwrap();
    assert_abs_diff_eq!(clip.duration_secs(), 30.0);
    let mel = mel_spectrogram(&clip, &cfg).unwrap();
    assert_eq!(mel.frames.shape(), &[10336, 86]);
    assert!(mel.frames.data().iter().all(|&v| v == -80.0));
}

#[test]
fn mel_scale_values() {
    assert_eq!(hz_to_mel(0.0), 0.0);
    assert_abs_diff_eq!(hz_to_mel(700.0), 2595.0 * 2f64.log10(), epsilon = 1e-12);
    assert_abs_diff_eq!(hz_to_mel(700.0), 781.17, epsilon = 5e-3);
}

#[test]
fn filterbank_rows_are_unimodal_and_cover_interior_bins() {
    let cfg = SpectrogramConfig::default();
    let fb = mel_filterbank(&cfg, 44_100).unwrap();
    assert_eq!(fb.shape(), &[86, 257]);
    for m in 0..86 {
        let row = fb.row(m);
        assert!(row.iter().all(|&v| v >= 0.0));
        let peak = row.iter().copied().fold(0.0, f64::max);
        assert!(peak > 0.0 && peak <= 1.0, "row {m}");
        assert_eq!(row.iter().filter(|&&v| v == peak).count(), 1, "row {m}");
        let argmax = row.iter().position(|&v| v == peak).unwrap();
        assert!(
            row[..=argmax].windows(2).all(|w| w[0] <= w[1]),
            "row {m} rise"
        );
        assert!(
            row[argmax..].windows(2).all(|w| w[0] >= w[1]),
            "row {m} fall"
        );
    }
    // filter centres from the formula, independent of the implementation
    let top = hz_to_mel(22_050.0);
    let centre_hz = |m: usize| 700.0 * (10f64.powf(top * (m + 1) as f64 / 87.0 / 2595.0) - 1.0);
    let df = 44_100.0 / 512.0;
    let first = (centre_hz(0) / df).ceil() as usize;
    let last = (centre_hz(85) / df).floor() as usize;
    for k in first..=last {
        let col: f64 = (0..86).map(|m| fb.row(m)[k]).sum();
        assert!(col > 0.0, "bin {k} uncovered");
    }

    let too_many = SpectrogramConfig {
        n_mels: 258,
        ..Default::default()
    };
    assert!(mel_filterbank(&too_many, 44_100).is_err());
}

#[test]
fn power_to_db_examples() {
    let s = Tensor::new(vec![1, 4], vec![5.0, 0.5, 5e-12, 0.0]).unwrap();
    let db = power_to_db(&s, -80.0);
    assert_eq!(db.data()[0], 0.0);
    assert_abs_diff_eq!(db.data()[1], -10.0, epsilon = 1e-12);
    assert_eq!(db.data()[2], -80.0);
    assert_eq!(db.data()[3], -80.0);
    let zero = power_to_db(&Tensor::zeros(&[2, 2]), -80.0);
    assert!(zero.data().iter().all(|&v| v == -80.0));
}

#[test]
fn tone_peaks_in_nearest_mel_band() {
    let cfg = SpectrogramConfig::default();
    let clip = edge_aligned_cosine(440.0, 44_100, 44_101);
    let mel = mel_spectrogram(&clip, &cfg).unwrap();
    // nearest filter centre to m(440) on the uniform Mel grid
    let top = hz_to_mel(22_050.0);
    let step = top / 87.0;
    let target = hz_to_mel(440.0);
    let expected = (0..86)
        .min_by(|&a, &b| {
            let da = ((a + 1) as f64 * step - target).abs();
            let db = ((b + 1) as f64 * step - target).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    for t in 0..mel.n_frames() {
        let row = mel.frames.row(t);
        let arg = (0..86)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(arg, expected, "frame {t}");
    }
}

#[test]
fn power_of_two_gain_leaves_db_unchanged_exactly() {
    let cfg = SpectrogramConfig::default();
    let base: Vec<f64> = (0..6000)
        .map(|i| ((i as f64 * 0.031).sin() + 0.3 * (i as f64 * 0.17).cos()) * 0.2)
        .collect();
    let clip = AudioClip::new("x", base.clone(), 22_050).unwrap();
    let mel = mel_spectrogram(&clip, &cfg).unwrap();
    for gain in [4.0, 0.25] {
        let scaled = AudioClip::new("x", base.iter().map(|v| v * gain).collect(), 22_050).unwrap();
        assert_eq!(mel_spectrogram(&scaled, &cfg).unwrap().frames, mel.frames);
    }
    let scaled = AudioClip::new("x", base.iter().map(|v| v * 0.37).collect(), 22_050).unwrap();
    let other = mel_spectrogram(&scaled, &cfg).unwrap();
    for (a, b) in other.frames.data().iter().zip(mel.frames.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn frame_count_is_ceil_and_db_respects_floor(n in 1usize..3000) {
        let cfg = SpectrogramConfig::default();
        let clip = AudioClip::new(
            "p",
            (0..n).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect(),
            16_000,
        ).unwrap();
        let mel = mel_spectrogram(&clip, &cfg).unwrap();
        prop_assert_eq!(mel.n_frames(), n.div_ceil(128));
        prop_assert!(mel.frames.data().iter().all(|&v| v >= -80.0 && v <= 0.0));
    }
}

#[test]
fn config_validation() {
    let bad_hop = SpectrogramConfig {
        hop_size: 1024,
        ..Default::default()
    };
    assert!(bad_hop.validate().is_err());
    let bad_frame = SpectrogramConfig {
        frame_size: 480,
        ..Default::default()
    };
    assert!(bad_frame.validate().is_err());
    assert!(SpectrogramConfig::long_frame().validate().is_ok());
}

#[test]
fn mel_cache_roundtrip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SpectrogramConfig::default();
    let clip = tone(1000.0, 22_050, 4000, 0.3);
    let mel = mel_spectrogram(&clip, &cfg).unwrap();
    let path = dir.path().join("a.mel");
    write_mel_cache(&path, &mel).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"VQMIRMEL");
    assert_eq!(bytes.len(), 24 + 4 * mel.n_frames() * 86);
    let back = read_mel_cache(&path).unwrap();
    assert_eq!(back.shape(), mel.frames.shape());
    for (a, b) in back.data().iter().zip(mel.frames.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_mel_cache(&path).is_err());
}

#[test]
fn wav_roundtrip_and_stereo_downmix() {
    let dir = tempfile::tempdir().unwrap();
    let clip = tone(220.0, 8_000, 800, 0.6);
    let path = dir.path().join("t.wav");
    write_wav(&path, &clip).unwrap();
    let back = read_wav(&path, "t").unwrap();
    assert_eq!(back.sample_rate, 8_000);
    for (a, b) in back.samples.iter().zip(&clip.samples) {
        assert!((a - b).abs() < 1.0 / 32767.0);
    }

    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let stereo = dir.path().join("s.wav");
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..10 {
        w.write_sample(16384i16).unwrap();
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let mono = read_wav(&stereo, "s").unwrap();
    assert_eq!(mono.len(), 10);
    assert!(mono.samples.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}
