use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::features::DataContext;
use super::manifest::{RunManifest, Stage};
use crate::datalab::verify_split;
use crate::error::{Error, Result};
use crate::evalkit::{macro_f1, ConfusionMatrix};
use crate::models::{
    apply_pretrain_mask, MaskConfig, ModelVariant, Sample, SeqInput, TransformerConfig,
    TransformerModel,
};
use crate::numerics::{check_gradients, GradCheckConfig, Tensor};
use crate::vqcodec::quantize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<SelfCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Split checks on the run's data stage plus gradient, metric and quantizer
/// oracles on small random inputs. The data stage must already be complete.
pub fn self_checks(config: &ExperimentConfig) -> Result<VerifyReport> {
    let cfg = config.resolved();
    let manifest_path = cfg
        .out_dir
        .join("runs")
        .join(&cfg.name)
        .join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "run {} has no manifest at {}; run the data stage first",
            cfg.name,
            manifest_path.display()
        )));
    }
    let manifest = RunManifest::load(&manifest_path)?;
    let ctx = DataContext::load(manifest.stage_dir(Stage::Data)?, cfg.data.multi_root)?;
    let split = verify_split(&ctx.split, &ctx.tracks);
    let mut checks = vec![SelfCheck {
        name: "split".into(),
        passed: split.hard_pass(),
        detail: format!(
            "{} tracks; leakage and coverage {}; tolerances {}",
            ctx.tracks.len(),
            if split.hard_pass() { "ok" } else { "violated" },
            if split.soft_pass() {
                "met"
            } else {
                "not met (warning)"
            }
        ),
    }];
    checks.push(gradient_check(cfg.seed)?);
    checks.push(metric_check(cfg.seed)?);
    checks.push(quantizer_check(cfg.seed)?);
    Ok(VerifyReport { checks })
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn gradient_check(seed: u64) -> Result<SelfCheck> {
    let variants = [
        ModelVariant::Spectro { n_mels: 6 },
        ModelVariant::Token { vocab: 12 },
        ModelVariant::Codebook {
            code_dim: 4,
            vocab: 12,
        },
    ];
    let config = TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        ffn_mult: 2,
        max_seq_len: 20,
        dropout: 0.0,
        ..TransformerConfig::default()
    };
    let mask = MaskConfig {
        spectro_span_len: 3,
        ..MaskConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut passed = true;
    for variant in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = TransformerModel::new(config.clone(), variant, 3, &mut rng)?;
        let samples: Vec<Sample> = (0..2)
            .map(|_| match variant {
                ModelVariant::Spectro { n_mels } => {
                    Sample::Spectro(random_tensor(&mut rng, 18, n_mels))
                }
                ModelVariant::Token { vocab } => {
                    Sample::Token((0..18).map(|_| rng.gen_range(0..vocab)).collect())
                }
                ModelVariant::Codebook { code_dim, vocab } => Sample::Codebook {
                    vectors: random_tensor(&mut rng, 18, code_dim),
                    tokens: (0..18).map(|_| rng.gen_range(0..vocab)).collect(),
                },
            })
            .collect();
        let batch = samples
            .iter()
            .map(|s| apply_pretrain_mask(&variant, s, &mut rng, &mask, Some(0.3)))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<SeqInput> = batch.iter().map(|b| b.input.clone()).collect();
        let net = m.net.clone();
        let report = check_gradients(
            &mut m.params,
            |g, p| {
                let enc = net.encode(g, p, &inputs, None)?;
                net.pretrain_loss(g, p, &enc, &batch, mask.huber_delta)
            },
            &GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            },
        )?;
        worst = worst.max(report.max_rel_error);
        passed &= report.passed();
    }
    Ok(SelfCheck {
        name: "gradients".into(),
        passed,
        detail: format!("pretrain losses of all variants; max relative error {worst:.2e}"),
    })
}

fn metric_check(seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.gen_range(2..8);
        let mut cm = ConfusionMatrix::zeros(k);
        for row in cm.counts.iter_mut() {
            row.iter_mut().for_each(|c| *c = rng.gen_range(0..20));
        }
        let mut sum = 0.0;
        for c in 0..k {
            let tp = cm.counts[c][c] as f64;
            let fp = (0..k)
                .filter(|&r| r != c)
                .map(|r| cm.counts[r][c] as f64)
                .sum::<f64>();
            let fne = (0..k)
                .filter(|&p| p != c)
                .map(|p| cm.counts[c][p] as f64)
                .sum::<f64>();
            if tp + fp + fne > 0.0 {
                sum += 2.0 * tp / (2.0 * tp + fp + fne);
            }
        }
        worst = worst.max((macro_f1(&cm) - sum / k as f64).abs());
    }
    Ok(SelfCheck {
        name: "macro_f1".into(),
        passed: worst <= 1e-12,
        detail: format!("200 random matrices against a direct count; max difference {worst:.1e}"),
    })
}

fn quantizer_check(seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook = random_tensor(&mut rng, 64, 8);
    let latents = random_tensor(&mut rng, 1000, 8);
    let (tokens, _) = quantize(&latents, &codebook, "check", 128)?;
    let mismatches = (0..latents.rows())
        .filter(|&i| {
            let z = latents.row(i);
            let d = |c: usize| {
                codebook
                    .row(c)
                    .iter()
                    .zip(z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            let best = (0..codebook.rows()).fold(0, |b, c| if d(c) < d(b) { c } else { b });
            tokens.tokens[i] as usize != best
        })
        .count();
    Ok(SelfCheck {
        name: "quantizer".into(),
        passed: mismatches == 0,
        detail: format!("1000 latents against an exhaustive scan; {mismatches} mismatches"),
    })
}
