use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mask::{MaskedSample, Targets};
use super::{ModelVariant, SeqInput, TransformerConfig};
use crate::error::{Error, Result};
use crate::numerics::{AttentionMeta, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        p: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: p.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng),
            b: p.add_const(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(p: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: p.add_const(format!("{name}.g"), &[d], 1.0),
            bias: p.add_const(format!("{name}.b"), &[d], 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, p: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let (gain, bias) = (g.param(p, self.gain), g.param(p, self.bias));
        g.layer_norm(x, gain, bias, eps)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, Copy)]
enum FrontEnd {
    Projection(Linear),
    Embedding(ParamId),
}

/// Parameter layout of one classifier; weights live in a separate [`ParamStore`].
///
/// Pre-LN encoder blocks (`x + Attn(LN(x))`, `x + FFN(LN(x))`) with a final
/// layer norm, learned positions, GELU feed-forward and bidirectional
/// attention over non-pad keys.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub variant: ModelVariant,
    pub n_classes: usize,
    front: FrontEnd,
    pos: ParamId,
    layers: Vec<Layer>,
    final_norm: Norm,
    pretrain_head: Linear,
    cls_head: Linear,
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[B * max_len, d_model]`
    pub hidden: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl Transformer {
    pub fn new(
        config: TransformerConfig,
        variant: ModelVariant,
        n_classes: usize,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let (d, std) = (config.d_model, config.init_std);
        let front = match variant {
            ModelVariant::Spectro { n_mels: w } | ModelVariant::Codebook { code_dim: w, .. } => {
                FrontEnd::Projection(Linear::new(params, "embed", w, d, std, rng))
            }
            ModelVariant::Token { vocab } => {
                FrontEnd::Embedding(params.add_normal("embed.table", &[vocab + 2, d], std, rng))
            }
        };
        let pos = params.add_normal("pos", &[config.max_seq_len, d], std, rng);
        let ffn = d * config.ffn_mult;
        let layers = (0..config.n_layers)
            .map(|i| {
                let n = |s: &str| format!("layer{i}.{s}");
                Layer {
                    ln1: Norm::new(params, &n("ln1"), d),
                    q: Linear::new(params, &n("q"), d, d, std, rng),
                    k: Linear::new(params, &n("k"), d, d, std, rng),
                    v: Linear::new(params, &n("v"), d, d, std, rng),
                    o: Linear::new(params, &n("o"), d, d, std, rng),
                    ln2: Norm::new(params, &n("ln2"), d),
                    ff1: Linear::new(params, &n("ff1"), d, ffn, std, rng),
                    ff2: Linear::new(params, &n("ff2"), ffn, d, std, rng),
                }
            })
            .collect();
        let final_norm = Norm::new(params, "final_ln", d);
        let pretrain_head = Linear::new(
            params,
            "pretrain_head",
            d,
            variant.pretrain_width(),
            std,
            rng,
        );
        let cls_head = Linear::new(params, "cls_head", d, n_classes, std, rng);
        Ok(Transformer {
            config,
            variant,
            n_classes,
            front,
            pos,
            layers,
            final_norm,
            pretrain_head,
            cls_head,
        })
    }

    fn check_input(&self, x: &SeqInput) -> Result<()> {
        let len = x.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        match (self.variant, x) {
            (ModelVariant::Token { vocab }, SeqInput::Tokens(ids)) => {
                if let Some(bad) = ids.iter().find(|&&t| t >= vocab + 2) {
                    return Err(Error::InvalidArgument(format!(
                        "token id {bad} outside [0, {})",
                        vocab + 2
                    )));
                }
                Ok(())
            }
            (ModelVariant::Spectro { n_mels: w }, SeqInput::Frames(t))
            | (ModelVariant::Codebook { code_dim: w, .. }, SeqInput::Frames(t)) => {
                if t.shape().len() != 2 || t.cols() != w {
                    return Err(Error::Shape {
                        op: "embed_input",
                        lhs: t.shape().to_vec(),
                        rhs: vec![len, w],
                    });
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!(
                "input kind does not match the {} variant",
                self.variant.name()
            ))),
        }
    }

    /// Front-end only (no positions): `[B * max_len, d_model]`, pad rows included.
    pub fn embed_input(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        inputs: &[SeqInput],
    ) -> Result<(Var, Vec<usize>, usize)> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let lens: Vec<usize> = inputs.iter().map(SeqInput::len).collect();
        let max_len = *lens.iter().max().expect("nonempty");
        let e = match self.front {
            FrontEnd::Embedding(table) => {
                let pad = self.variant.pad_id().expect("token variant");
                let mut ids = Vec::with_capacity(inputs.len() * max_len);
                for x in inputs {
                    let SeqInput::Tokens(t) = x else {
                        unreachable!("checked")
                    };
                    ids.extend_from_slice(t);
                    ids.resize(ids.len() + max_len - t.len(), pad);
                }
                let table = g.param(p, table);
                g.gather_rows(table, &ids)?
            }
            FrontEnd::Projection(lin) => {
                let w = self.variant_width();
                let mut data = Vec::with_capacity(inputs.len() * max_len * w);
                for x in inputs {
                    let SeqInput::Frames(t) = x else {
                        unreachable!("checked")
                    };
                    data.extend_from_slice(t.data());
                    data.resize(data.len() + (max_len - t.rows()) * w, 0.0);
                }
                let x = g.constant(Tensor::new(vec![inputs.len() * max_len, w], data)?)?;
                lin.apply(g, p, x)?
            }
        };
        Ok((e, lens, max_len))
    }

    fn variant_width(&self) -> usize {
        match self.variant {
            ModelVariant::Spectro { n_mels } => n_mels,
            ModelVariant::Codebook { code_dim, .. } => code_dim,
            ModelVariant::Token { .. } => self.config.d_model,
        }
    }

    /// Embeds, adds learned positions and runs every encoder block.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        inputs: &[SeqInput],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let (e, lens, max_len) = self.embed_input(g, p, inputs)?;
        let positions: Vec<usize> = (0..inputs.len()).flat_map(|_| 0..max_len).collect();
        let pos = g.param(p, self.pos);
        let pos = g.gather_rows(pos, &positions)?;
        let mut x = g.add(e, pos)?;
        let rate = self.config.dropout;
        let meta = AttentionMeta {
            batch: inputs.len(),
            seq_len: max_len,
            n_heads: self.config.n_heads,
        };
        let eps = self.config.ln_eps;
        for layer in &self.layers {
            let h = layer.ln1.apply(g, p, x, eps)?;
            let q = layer.q.apply(g, p, h)?;
            let k = layer.k.apply(g, p, h)?;
            let v = layer.v.apply(g, p, h)?;
            let a = g.attention(q, k, v, meta, &lens)?;
            let mut a = layer.o.apply(g, p, a)?;
            if let Some(rng) = dropout.as_deref_mut() {
                a = g.dropout(a, rate, rng)?;
            }
            x = g.add(x, a)?;
            let h = layer.ln2.apply(g, p, x, eps)?;
            let h = layer.ff1.apply(g, p, h)?;
            let h = g.gelu(h)?;
            let mut f = layer.ff2.apply(g, p, h)?;
            if let Some(rng) = dropout.as_deref_mut() {
                f = g.dropout(f, rate, rng)?;
            }
            x = g.add(x, f)?;
        }
        let hidden = self.final_norm.apply(g, p, x, eps)?;
        Ok(Encoded {
            hidden,
            lens,
            max_len,
        })
    }

    /// Raw pretraining-head output `[B * max_len, width]`.
    pub fn pretrain_head(&self, g: &mut Graph, p: &ParamStore, enc: &Encoded) -> Result<Var> {
        self.pretrain_head.apply(g, p, enc.hidden)
    }

    /// Masked-position loss: cross-entropy over token ids (Token, Codebook) or
    /// Huber on normalised frames (Spectro).
    pub fn pretrain_loss(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        enc: &Encoded,
        samples: &[MaskedSample],
        huber_delta: f64,
    ) -> Result<Var> {
        let out = self.pretrain_head(g, p, enc)?;
        self.pretrain_loss_from_output(g, out, enc, samples, huber_delta)
    }

    /// Loss on a precomputed head output `[B * max_len, width]`.
    pub fn pretrain_loss_from_output(
        &self,
        g: &mut Graph,
        out: Var,
        enc: &Encoded,
        samples: &[MaskedSample],
        huber_delta: f64,
    ) -> Result<Var> {
        if samples.len() != enc.lens.len() {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a batch of {}",
                samples.len(),
                enc.lens.len()
            )));
        }
        let l = enc.max_len;
        let mut mask = Vec::with_capacity(samples.len() * l);
        for s in samples {
            mask.extend_from_slice(&s.mask);
            mask.resize(mask.len() + l - s.mask.len(), false);
        }
        match self.variant {
            ModelVariant::Token { .. } | ModelVariant::Codebook { .. } => {
                let mut targets = Vec::with_capacity(samples.len() * l);
                for s in samples {
                    let Targets::Ids(ids) = &s.targets else {
                        return Err(Error::InvalidArgument("expected token targets".into()));
                    };
                    targets.extend_from_slice(ids);
                    targets.resize(targets.len() + l - ids.len(), 0);
                }
                g.cross_entropy(out, &targets, &mask, None)
            }
            ModelVariant::Spectro { n_mels } => {
                let mut target = Vec::with_capacity(samples.len() * l * n_mels);
                for s in samples {
                    let Targets::Frames(t) = &s.targets else {
                        return Err(Error::InvalidArgument("expected frame targets".into()));
                    };
                    target.extend_from_slice(t.data());
                    target.resize(target.len() + (l - t.rows()) * n_mels, 0.0);
                }
                let target = Tensor::new(vec![samples.len() * l, n_mels], target)?;
                let elem_mask: Vec<bool> = mask
                    .iter()
                    .flat_map(|&m| std::iter::repeat(m).take(n_mels))
                    .collect();
                g.huber(out, &target, huber_delta, &elem_mask)
            }
        }
    }

    /// Mean over non-pad positions, then a linear map to `n_classes` logits.
    pub fn classify(&self, g: &mut Graph, p: &ParamStore, enc: &Encoded) -> Result<Var> {
        let pooled = g.mean_pool(enc.hidden, enc.max_len, &enc.lens)?;
        self.cls_head.apply(g, p, pooled)
    }

    /// Parameter names that belong to the task heads rather than the shared encoder.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("pretrain_head.") || name.starts_with("cls_head.")
    }
}

/// A transformer layout bundled with its weights.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub net: Transformer,
    pub params: ParamStore,
}

impl TransformerModel {
    pub fn new(
        config: TransformerConfig,
        variant: ModelVariant,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Transformer::new(config, variant, n_classes, &mut params, rng)?;
        Ok(TransformerModel { net, params })
    }

    /// Class logits `[B, n_classes]` without dropout.
    pub fn logits(&self, inputs: &[SeqInput]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.net.encode(&mut g, &self.params, inputs, None)?;
        let out = self.net.classify(&mut g, &self.params, &enc)?;
        Ok(g.value(out).clone())
    }

    /// Argmax class per input; ties go to the lowest class index.
    pub fn predict(&self, inputs: &[SeqInput]) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Pretraining loss of already-masked samples without dropout.
    pub fn pretrain_loss_value(&self, samples: &[MaskedSample], huber_delta: f64) -> Result<f64> {
        let mut g = Graph::new();
        let inputs: Vec<SeqInput> = samples.iter().map(|s| s.input.clone()).collect();
        let enc = self.net.encode(&mut g, &self.params, &inputs, None)?;
        let loss = self
            .net
            .pretrain_loss(&mut g, &self.params, &enc, samples, huber_delta)?;
        Ok(g.scalar(loss))
    }
}
