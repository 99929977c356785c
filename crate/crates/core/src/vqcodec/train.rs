use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{VqLosses, VqVae, VqVaeConfig};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Training window in samples; rounded up to a multiple of the compression factor.
    pub window: usize,
    pub lr: f64,
    /// Codes unused for this many steps are reassigned to encoder outputs.
    pub reset_every: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            steps: 400,
            batch: 8,
            window: 8192,
            lr: 5e-4,
            reset_every: 50,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VqTrainReport {
    /// `[total, recon, codebook, commit]` per step.
    pub history: Vec<[f64; 4]>,
    pub codes_reset: usize,
}

impl VqVae {
    /// One optimizer step; returns the losses and the token assignment of the batch.
    ///
    /// `window_counts` accumulates per-code usage for dead-code detection.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        batch: &[&[f64]],
        lr: f64,
        window_counts: &mut [u64],
    ) -> Result<(VqLosses, Vec<usize>)> {
        let mut g = Graph::new();
        let fwd = self.net.loss(&mut g, &self.params, batch)?;
        let losses = fwd.losses(&g);
        g.backward_into(fwd.total, &mut self.params)?;
        adam.step(&mut self.params, lr)?;
        for &t in &fwd.tokens {
            self.usage_counts[t] += 1;
            window_counts[t] += 1;
        }
        Ok((losses, fwd.tokens))
    }

    /// Reassigns every code with a zero window count to a jittered random row of
    /// `latents`. Runs after assignment, so tokens already emitted are untouched.
    pub fn reset_dead_codes(
        &mut self,
        latents: &Tensor,
        window_counts: &[u64],
        adam: Option<&mut Adam>,
        rng: &mut impl Rng,
    ) -> usize {
        let dead: Vec<usize> = (0..window_counts.len())
            .filter(|&c| window_counts[c] == 0)
            .collect();
        if dead.is_empty() || latents.rows() == 0 {
            return 0;
        }
        let d = latents.cols();
        let scale = (latents.data().iter().map(|v| v * v).sum::<f64>() / latents.len() as f64)
            .sqrt()
            .max(1e-6);
        let id = self.net.codebook_id();
        let codebook = self.params.value_mut(id).data_mut();
        for &c in &dead {
            let src = latents.row(rng.gen_range(0..latents.rows()));
            for j in 0..d {
                let jitter: f64 = rng.sample(StandardNormal);
                codebook[c * d + j] = src[j] + 1e-2 * scale * jitter;
            }
        }
        if let Some(adam) = adam {
            let slot = id.index();
            for &c in &dead {
                adam.m[slot][c * d..(c + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                adam.v[slot][c * d..(c + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        dead.len()
    }

    fn batch_latents(&self, batch: &[&[f64]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(self.net.pad_batch(batch)?)?;
        let z = self.net.encode_graph(&mut g, &self.params, x)?;
        Ok(g.value(z).clone())
    }
}

fn sample_window(clip: &AudioClip, window: usize, rng: &mut impl Rng) -> Vec<f64> {
    if clip.len() <= window {
        let mut w = clip.samples.clone();
        w.resize(window, 0.0);
        return w;
    }
    let start = rng.gen_range(0..=clip.len() - window);
    clip.samples[start..start + window].to_vec()
}

/// Trains a codec from scratch on random windows of `clips`.
pub fn train_vqvae(
    clips: &[AudioClip],
    config: VqVaeConfig,
    tc: &VqTrainConfig,
) -> Result<(VqVae, VqTrainReport)> {
    if clips.is_empty() || clips.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidArgument(
            "codec training needs nonempty clips".into(),
        ));
    }
    if tc.batch == 0 || tc.window == 0 {
        return Err(Error::Config(
            "codec batch and window must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = VqVae::new(config, &mut rng)?;
    let window = tc.window.div_ceil(model.config().compression) * model.config().compression;
    let vocab = model.config().vocab_size;
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..tc.batch)
            .map(|_| {
                let clip = clips.choose(rng).expect("nonempty");
                sample_window(clip, window, rng)
            })
            .collect()
    };

    // Data-dependent init: every code starts at a jittered encoder output.
    let init = draw(&mut rng);
    let init_refs: Vec<&[f64]> = init.iter().map(Vec::as_slice).collect();
    let latents = model.batch_latents(&init_refs)?;
    model.reset_dead_codes(&latents, &vec![0; vocab], None, &mut rng);

    let mut report = VqTrainReport::default();
    let mut window_counts = vec![0u64; vocab];
    for step in 0..tc.steps {
        let batch = draw(&mut rng);
        let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let (losses, _) = model.train_step(&mut adam, &refs, tc.lr, &mut window_counts)?;
        if tc.precision == Precision::F32 {
            model.params.round_to_f32();
        }
        report
            .history
            .push([losses.total, losses.recon, losses.codebook, losses.commit]);
        if tc.reset_every > 0 && (step + 1) % tc.reset_every == 0 && step + 1 < tc.steps {
            let latents = model.batch_latents(&refs)?;
            report.codes_reset +=
                model.reset_dead_codes(&latents, &window_counts, Some(&mut adam), &mut rng);
            window_counts.iter_mut().for_each(|c| *c = 0);
        }
        log::debug!(
            "vq step {step}: total {:.5} recon {:.5} codebook {:.5} commit {:.5}",
            losses.total,
            losses.recon,
            losses.codebook,
            losses.commit
        );
    }
    Ok((model, report))
}
