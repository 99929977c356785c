use rand::Rng;

use super::quantize::quantize_with_margins;
use super::{quantize, CodebookSequence, TokenSequence, VqVaeConfig, VORONOI_BAND};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(
        params: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_bias(params, name, shape, fan_in, shape[0], rng)
    }

    /// Transposed-conv weights are `[c_in, c_out, k]`.
    fn transposed(
        params: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_bias(params, name, shape, fan_in, shape[1], rng)
    }

    fn with_bias(
        params: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        fan_in: usize,
        bias_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add_normal(
            format!("{name}.w"),
            &shape,
            (1.0 / fan_in as f64).sqrt(),
            rng,
        );
        let b = params.add_const(format!("{name}.b"), &[bias_len], 0.0);
        Conv { w, b }
    }

    fn apply(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv1d(x, w, b, stride, pad)
    }

    fn apply_transposed(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv_transpose1d(x, w, b, 2, 1)
    }
}

/// Parameter layout of the codec; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct VqNet {
    pub config: VqVaeConfig,
    enc_down: Vec<Conv>,
    enc_res: Vec<Conv>,
    enc_proj: Conv,
    codebook: ParamId,
    dec_proj: Conv,
    dec_res: Vec<Conv>,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

/// Scalar loss terms of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone)]
pub struct VqForward {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    /// Encoder output `[B*L, code_dim]`.
    pub latents: Var,
    /// Straight-through quantized latents fed to the decoder.
    pub quantized: Var,
    pub tokens: Vec<usize>,
}

impl VqForward {
    pub fn losses(&self, g: &Graph) -> VqLosses {
        VqLosses {
            total: g.scalar(self.total),
            recon: g.scalar(self.recon),
            codebook: g.scalar(self.codebook),
            commit: g.scalar(self.commit),
        }
    }
}

impl VqNet {
    pub fn new(config: VqVaeConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, d, s) = (config.channels, config.code_dim, config.stages());
        let mut enc_down = Vec::with_capacity(s);
        let mut enc_res = Vec::with_capacity(s);
        for i in 0..s {
            let c_in = if i == 0 { 1 } else { c };
            enc_down.push(Conv::new(
                params,
                &format!("enc.{i}.down"),
                [c, c_in, 4],
                c_in * 4,
                rng,
            ));
            enc_res.push(Conv::new(
                params,
                &format!("enc.{i}.res"),
                [c, c, 3],
                c * 3,
                rng,
            ));
        }
        let enc_proj = Conv::new(params, "enc.proj", [d, c, 1], c, rng);
        let codebook = params.add_normal("codebook", &[config.vocab_size, d], 1.0, rng);
        let dec_proj = Conv::new(params, "dec.proj", [c, d, 1], d, rng);
        let mut dec_res = Vec::with_capacity(s);
        let mut dec_up = Vec::with_capacity(s);
        for i in 0..s {
            dec_res.push(Conv::new(
                params,
                &format!("dec.{i}.res"),
                [c, c, 3],
                c * 3,
                rng,
            ));
            dec_up.push(Conv::transposed(
                params,
                &format!("dec.{i}.up"),
                [c, c, 4],
                c * 2,
                rng,
            ));
        }
        let dec_out = Conv::new(params, "dec.out", [1, c, 1], c, rng);
        Ok(VqNet {
            config,
            enc_down,
            enc_res,
            enc_proj,
            codebook,
            dec_proj,
            dec_res,
            dec_up,
            dec_out,
        })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    fn residual(&self, g: &mut Graph, p: &ParamStore, conv: &Conv, x: Var) -> Result<Var> {
        let h = g.gelu(x)?;
        let h = conv.apply(g, p, h, 1, 1)?;
        g.add(x, h)
    }

    /// Right-pads each row with zeros to a multiple of the compression factor
    /// and stacks the batch as `[B, 1, N]`.
    pub fn pad_batch(&self, audio: &[&[f64]]) -> Result<Tensor> {
        let n = audio.first().map_or(0, |a| a.len());
        if n == 0 || audio.iter().any(|a| a.len() != n) {
            return Err(Error::InvalidArgument(
                "codec batch needs nonempty rows of equal length".into(),
            ));
        }
        let padded = n.div_ceil(self.config.compression) * self.config.compression;
        let mut data = Vec::with_capacity(audio.len() * padded);
        for a in audio {
            data.extend_from_slice(a);
            data.resize(data.len() + padded - n, 0.0);
        }
        Tensor::new(vec![audio.len(), 1, padded], data)
    }

    /// `[B, 1, N] -> [B*L, code_dim]` latents.
    pub fn encode_graph(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (down, res)) in self.enc_down.iter().zip(&self.enc_res).enumerate() {
            if i > 0 {
                h = g.gelu(h)?;
            }
            h = down.apply(g, p, h, 2, 1)?;
            h = self.residual(g, p, res, h)?;
        }
        let h = g.gelu(h)?;
        let z = self.enc_proj.apply(g, p, h, 1, 0)?;
        g.channels_last(z)
    }

    /// `[B*L, code_dim] -> [B, 1, L*compression]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &ParamStore, q: Var, batch: usize) -> Result<Var> {
        let x = g.channels_first(q, batch)?;
        let mut h = self.dec_proj.apply(g, p, x, 1, 0)?;
        for (res, up) in self.dec_res.iter().zip(&self.dec_up) {
            h = self.residual(g, p, res, h)?;
            let a = g.gelu(h)?;
            h = up.apply_transposed(g, p, a)?;
        }
        let h = g.gelu(h)?;
        self.dec_out.apply(g, p, h, 1, 0)
    }

    /// Full VQ-VAE objective on a batch of equal-length clips.
    ///
    /// recon = MSE over the unpadded samples, codebook = mean ‖sg(z) − e‖²,
    /// commit = β · mean ‖z − sg(e)‖²; all means are per element.
    pub fn loss(&self, g: &mut Graph, p: &ParamStore, audio: &[&[f64]]) -> Result<VqForward> {
        self.loss_impl(g, p, audio, None)
    }

    /// The same objective with every gradient-stopped quantity (`sg(z)`,
    /// `sg(e)`, token choice, straight-through offset) pinned to `frozen`.
    ///
    /// Its exact gradient at the point where `frozen` was captured equals the
    /// straight-through gradient of [`VqNet::loss`], and it is smooth, so it is
    /// the function finite differences should be taken of.
    pub fn loss_frozen(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        audio: &[&[f64]],
        frozen: &FrozenQuantizer,
    ) -> Result<VqForward> {
        self.loss_impl(g, p, audio, Some(frozen))
    }

    /// Captures the stop-gradient values of a forward pass.
    pub fn freeze(&self, p: &ParamStore, audio: &[&[f64]]) -> Result<FrozenQuantizer> {
        let mut g = Graph::new();
        let fwd = self.loss(&mut g, p, audio)?;
        Ok(FrozenQuantizer {
            tokens: fwd.tokens,
            latents: g.value(fwd.latents).clone(),
            codes: g.value(fwd.quantized).clone(),
        })
    }

    fn loss_impl(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        audio: &[&[f64]],
        frozen: Option<&FrozenQuantizer>,
    ) -> Result<VqForward> {
        let n = audio.first().map_or(0, |a| a.len());
        let input = self.pad_batch(audio)?;
        let batch = audio.len();
        let x = g.constant(input)?;
        let z = self.encode_graph(g, p, x)?;

        let codebook = g.param(p, self.codebook);
        let (tokens, margins) = quantize_with_margins(g.value(z), p.value(self.codebook))?;
        let near_boundary = margins.iter().any(|&m| m < VORONOI_BAND);
        let signature = tokens
            .iter()
            .fold(0u64, |h, &t| (h ^ t as u64).wrapping_mul(0x0100_0000_01b3));
        g.note_branch(signature, if near_boundary { 0.0 } else { f64::INFINITY });

        let (quantized, e, z_sg, e_sg, tokens) = match frozen {
            None => {
                let e = g.gather_rows(codebook, &tokens)?;
                let e_value = g.value(e).clone();
                let quantized = g.straight_through(z, e_value.clone())?;
                let z_sg = g.detach(z);
                let e_sg = g.constant(e_value)?;
                (quantized, e, z_sg, e_sg, tokens)
            }
            Some(f) => {
                let offset: Vec<f64> = f
                    .codes
                    .data()
                    .iter()
                    .zip(f.latents.data())
                    .map(|(e, z)| e - z)
                    .collect();
                let offset = g.constant(Tensor::new(f.codes.shape().to_vec(), offset)?)?;
                let quantized = g.add(z, offset)?;
                let e = g.gather_rows(codebook, &f.tokens)?;
                let z_sg = g.constant(f.latents.clone())?;
                let e_sg = g.constant(f.codes.clone())?;
                (quantized, e, z_sg, e_sg, f.tokens.clone())
            }
        };
        let y = self.decode_graph(g, p, quantized, batch)?;
        let y = g.slice_time(y, 0, n)?;
        let target: Vec<f64> = audio.iter().flat_map(|a| a.iter().copied()).collect();
        let target = g.constant(Tensor::new(vec![batch, 1, n], target)?)?;
        let diff = g.sub(y, target)?;
        let sq = g.square(diff)?;
        let recon = g.mean(sq)?;

        let diff = g.sub(z_sg, e)?;
        let sq = g.square(diff)?;
        let codebook_loss = g.mean(sq)?;

        let diff = g.sub(z, e_sg)?;
        let sq = g.square(diff)?;
        let commit_raw = g.mean(sq)?;
        let commit = g.scale(commit_raw, self.config.commitment_beta)?;

        let total = g.add(recon, codebook_loss)?;
        let total = g.add(total, commit)?;
        Ok(VqForward {
            total,
            recon,
            codebook: codebook_loss,
            commit,
            latents: z,
            quantized,
            tokens,
        })
    }
}

/// Stop-gradient values captured at one parameter point.
#[derive(Debug, Clone)]
pub struct FrozenQuantizer {
    pub tokens: Vec<usize>,
    pub latents: Tensor,
    pub codes: Tensor,
}

/// Codec weights plus per-code usage counters.
#[derive(Debug, Clone)]
pub struct VqVae {
    pub net: VqNet,
    pub params: ParamStore,
    pub usage_counts: Vec<u64>,
}

impl VqVae {
    pub fn new(config: VqVaeConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = VqNet::new(config, &mut params, rng)?;
        let usage_counts = vec![0; net.config.vocab_size];
        Ok(VqVae {
            net,
            params,
            usage_counts,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.net.config
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.value(self.net.codebook)
    }

    /// Latents `[ceil(n/compression), code_dim]` for a nonempty clip.
    pub fn encode(&self, clip: &AudioClip) -> Result<Tensor> {
        if clip.is_empty() {
            return Err(Error::InvalidArgument(format!("clip {} is empty", clip.id)));
        }
        let mut g = Graph::new();
        let x = g.constant(self.net.pad_batch(&[&clip.samples])?)?;
        let z = self.net.encode_graph(&mut g, &self.params, x)?;
        Ok(g.value(z).clone())
    }

    pub fn tokenize(&self, clip: &AudioClip) -> Result<(TokenSequence, CodebookSequence)> {
        let z = self.encode(clip)?;
        quantize(&z, self.codebook(), &clip.id, self.config().compression)
    }

    /// Decodes `L` codebook rows to `L * compression` samples.
    pub fn decode(&self, seq: &CodebookSequence, id: &str, sample_rate: u32) -> Result<AudioClip> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot decode an empty sequence".into(),
            ));
        }
        if seq.vectors.cols() != self.config().code_dim {
            return Err(Error::Shape {
                op: "decode",
                lhs: seq.vectors.shape().to_vec(),
                rhs: vec![self.config().vocab_size, self.config().code_dim],
            });
        }
        let mut g = Graph::new();
        let q = g.constant(seq.vectors.clone())?;
        let y = self.net.decode_graph(&mut g, &self.params, q, 1)?;
        AudioClip::new(id, g.value(y).data().to_vec(), sample_rate)
    }
}
