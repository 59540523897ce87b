//! Toy encoder-decoder transformer with a hand-written backward pass.
//!
//! Pre-norm residual layout: every sublayer reads `LayerNorm(x)` and adds its
//! output back onto `x`. The encoder has one plain MHA self-attention layer,
//! the decoder `n_layers` layers of causal self-attention, cross-attention and
//! a feed-forward net. Only decoder attention blocks carry the configured
//! grouping/weighting variant; the encoder stays MHA. Learned absolute
//! position embeddings; feed-forward width `4·d` with tanh-approximated GELU.

use crate::attention::{attention_forward, AttentionBlock, AttentionConfig, Weighting};
use crate::autograd::{attention_backward, ForwardCache, Gradients};
use crate::checkpoint::{
    block_from_checkpoint, keys, AttnParam, AttnTensorName, BlockKind, Checkpoint, CheckpointError, Stack,
    TOY_SEQ2SEQ_LAYOUT,
};
use crate::numerics::{SeededRng, Tensor};

use super::TrainError;

const LN_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of output tokens; the embedding table has one extra row for BOS.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.vocab_size < 2 || self.n_layers == 0 || self.max_len == 0 {
            return Err(TrainError::Config(
                "vocab_size >= 2, n_layers >= 1 and max_len >= 1 required".into(),
            ));
        }
        AttentionConfig::mha(self.d_model, self.n_heads)?;
        Ok(())
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, LnCache) {
        let (n, d) = (x.rows(), x.cols());
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                *xhat.at_mut(i, j) = xh;
                *y.at_mut(i, j) = self.gamma.data()[j] * xh + self.beta.data()[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &Tensor, grads: &mut LayerNorm) -> Tensor {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dx = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                let g = dy.at(i, j);
                grads.gamma.data_mut()[j] += g * cache.xhat.at(i, j);
                grads.beta.data_mut()[j] += g;
                dxhat[j] = g * self.gamma.data()[j];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat =
                dxhat.iter().enumerate().map(|(j, v)| v * cache.xhat.at(i, j)).sum::<f64>() / d as f64;
            for j in 0..d {
                *dx.at_mut(i, j) =
                    cache.inv_std[i] * (dxhat[j] - mean_dxhat - cache.xhat.at(i, j) * mean_dxhat_xhat);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    let c = x.cols();
    for row in x.data_mut().chunks_mut(c) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

fn bias_grad(dy: &Tensor, acc: &mut Tensor) {
    let c = dy.cols();
    for row in dy.data().chunks(c) {
        for (a, v) in acc.data_mut().iter_mut().zip(row) {
            *a += v;
        }
    }
}

impl FeedForward {
    fn random(d: usize, rng: &mut SeededRng) -> Self {
        let hidden = FFN_MULT * d;
        Self {
            w1: rng.gaussian_scaled(&[d, hidden], 1.0 / (d as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: rng.gaussian_scaled(&[hidden, d], 1.0 / (hidden as f64).sqrt()),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, FfnCache), TrainError> {
        let mut pre = x.matmul(&self.w1)?;
        add_bias(&mut pre, &self.b1);
        let act = pre.map(gelu);
        let mut y = act.matmul(&self.w2)?;
        add_bias(&mut y, &self.b2);
        Ok((
            y,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    fn backward(&self, cache: &FfnCache, dy: &Tensor, grads: &mut FeedForward) -> Result<Tensor, TrainError> {
        grads.w2.add_assign(&cache.act.matmul_tn(dy)?)?;
        bias_grad(dy, &mut grads.b2);
        let d_act = dy.matmul_nt(&self.w2)?;
        let d_pre = d_act.hadamard(&cache.pre.map(gelu_grad))?;
        grads.w1.add_assign(&cache.x.matmul_tn(&d_pre)?)?;
        bias_grad(&d_pre, &mut grads.b1);
        Ok(d_pre.matmul_nt(&self.w1)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionBlock,
    pub ln_cross: LayerNorm,
    pub cross_attn: AttentionBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// Shared by every decoder attention block (flags aside).
    pub decoder_attention: AttentionConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub encoder: EncoderLayer,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub lm_head: Tensor,
}

pub struct EncoderCache {
    src: Vec<usize>,
    ln_self: LnCache,
    attn: ForwardCache,
    ln_ffn: LnCache,
    ffn: FfnCache,
    norm: LnCache,
}

struct DecoderLayerCache {
    ln_self: LnCache,
    self_attn: ForwardCache,
    ln_cross: LnCache,
    cross_attn: ForwardCache,
    ln_ffn: LnCache,
    ffn: FfnCache,
}

pub struct DecoderCache {
    dec_in: Vec<usize>,
    layers: Vec<DecoderLayerCache>,
    norm: LnCache,
    z: Tensor,
}

fn attn_config(base: &AttentionConfig, kind: BlockKind) -> AttentionConfig {
    let mut cfg = *base;
    cfg.causal = kind == BlockKind::SelfAttention;
    cfg.cross_attention = kind == BlockKind::CrossAttention;
    cfg
}

fn accumulate_block(acc: &mut AttentionBlock, g: Gradients) -> Result<(), TrainError> {
    let p = &mut acc.projections;
    p.w_q.add_assign(&g.d_w_q)?;
    p.w_k.add_assign(&g.d_w_k)?;
    p.w_v.add_assign(&g.d_w_v)?;
    p.w_o.add_assign(&g.d_w_o)?;
    if let (Some(agg), Some(dk), Some(dv)) = (acc.agg.as_mut(), g.d_agg_k, g.d_agg_v) {
        agg.k.add_assign(&dk)?;
        agg.v.add_assign(&dv)?;
    }
    Ok(())
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, ln: &'a LayerNorm) {
    out.push((format!("{prefix}.gamma"), &ln.gamma));
    out.push((format!("{prefix}.beta"), &ln.beta));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, f: &'a FeedForward) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.b1"), &f.b1));
    out.push((format!("{prefix}.w2"), &f.w2));
    out.push((format!("{prefix}.b2"), &f.b2));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Tensor)>, name: AttnTensorName, b: &'a AttentionBlock) {
    let p = &b.projections;
    for (param, t) in AttnParam::PROJECTIONS.into_iter().zip([&p.w_q, &p.w_k, &p.w_v, &p.w_o]) {
        out.push((name.with_param(param).to_string(), t));
    }
    if let Some(agg) = &b.agg {
        out.push((name.with_param(AttnParam::AggK).to_string(), &agg.k));
        out.push((name.with_param(AttnParam::AggV).to_string(), &agg.v));
    }
}

fn push_ln_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, ln: &'a mut LayerNorm) {
    out.push((format!("{prefix}.gamma"), &mut ln.gamma));
    out.push((format!("{prefix}.beta"), &mut ln.beta));
}

fn push_ffn_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, f: &'a mut FeedForward) {
    out.push((format!("{prefix}.w1"), &mut f.w1));
    out.push((format!("{prefix}.b1"), &mut f.b1));
    out.push((format!("{prefix}.w2"), &mut f.w2));
    out.push((format!("{prefix}.b2"), &mut f.b2));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: AttnTensorName, b: &'a mut AttentionBlock) {
    let p = &mut b.projections;
    out.push((name.with_param(AttnParam::Wq).to_string(), &mut p.w_q));
    out.push((name.with_param(AttnParam::Wk).to_string(), &mut p.w_k));
    out.push((name.with_param(AttnParam::Wv).to_string(), &mut p.w_v));
    out.push((name.with_param(AttnParam::Wo).to_string(), &mut p.w_o));
    if let Some(agg) = &mut b.agg {
        out.push((name.with_param(AttnParam::AggK).to_string(), &mut agg.k));
        out.push((name.with_param(AttnParam::AggV).to_string(), &mut agg.v));
    }
}

fn attn_name(stack: Stack, layer: usize, kind: BlockKind) -> AttnTensorName {
    AttnTensorName::new(stack, layer, kind, AttnParam::Wq)
}

impl ToyModel {
    /// Seeded model whose attention blocks are all plain MHA.
    pub fn init_mha(config: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let d = config.d_model;
        let base = AttentionConfig::mha(d, config.n_heads)?;
        let mut rng = SeededRng::new(seed);
        let tok_embed = rng.gaussian(&[config.vocab_size + 1, d]);
        let pos_embed = rng.gaussian(&[config.max_len, d]);
        let encoder = EncoderLayer {
            ln_self: LayerNorm::new(d),
            self_attn: AttentionBlock::random_mha(base, &mut rng)?,
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::random(d, &mut rng),
        };
        let mut decoder = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(d),
                self_attn: AttentionBlock::random_mha(attn_config(&base, BlockKind::SelfAttention), &mut rng)?,
                ln_cross: LayerNorm::new(d),
                cross_attn: AttentionBlock::random_mha(attn_config(&base, BlockKind::CrossAttention), &mut rng)?,
                ln_ffn: LayerNorm::new(d),
                ffn: FeedForward::random(d, &mut rng),
            });
        }
        let lm_head = rng.gaussian_scaled(&[d, config.vocab_size], 1.0 / (d as f64).sqrt());
        Ok(Self {
            config,
            decoder_attention: base,
            tok_embed,
            pos_embed,
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
            lm_head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embed.tok".to_string(), &self.tok_embed));
        out.push(("embed.pos".to_string(), &self.pos_embed));
        let e = &self.encoder;
        push_ln(&mut out, "encoder.0.ln_self", &e.ln_self);
        push_attn(&mut out, attn_name(Stack::Encoder, 0, BlockKind::SelfAttention), &e.self_attn);
        push_ln(&mut out, "encoder.0.ln_ffn", &e.ln_ffn);
        push_ffn(&mut out, "encoder.0.ffn", &e.ffn);
        push_ln(&mut out, "encoder.norm", &self.enc_norm);
        for (l, layer) in self.decoder.iter().enumerate() {
            push_ln(&mut out, &format!("decoder.{l}.ln_self"), &layer.ln_self);
            push_attn(&mut out, attn_name(Stack::Decoder, l, BlockKind::SelfAttention), &layer.self_attn);
            push_ln(&mut out, &format!("decoder.{l}.ln_cross"), &layer.ln_cross);
            push_attn(&mut out, attn_name(Stack::Decoder, l, BlockKind::CrossAttention), &layer.cross_attn);
            push_ln(&mut out, &format!("decoder.{l}.ln_ffn"), &layer.ln_ffn);
            push_ffn(&mut out, &format!("decoder.{l}.ffn"), &layer.ffn);
        }
        push_ln(&mut out, "decoder.norm", &self.dec_norm);
        out.push(("lm_head.w".to_string(), &self.lm_head));
        out
    }

    /// Same order as [`ToyModel::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("embed.tok".to_string(), &mut self.tok_embed));
        out.push(("embed.pos".to_string(), &mut self.pos_embed));
        let e = &mut self.encoder;
        push_ln_mut(&mut out, "encoder.0.ln_self", &mut e.ln_self);
        push_attn_mut(&mut out, attn_name(Stack::Encoder, 0, BlockKind::SelfAttention), &mut e.self_attn);
        push_ln_mut(&mut out, "encoder.0.ln_ffn", &mut e.ln_ffn);
        push_ffn_mut(&mut out, "encoder.0.ffn", &mut e.ffn);
        push_ln_mut(&mut out, "encoder.norm", &mut self.enc_norm);
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            push_ln_mut(&mut out, &format!("decoder.{l}.ln_self"), &mut layer.ln_self);
            push_attn_mut(&mut out, attn_name(Stack::Decoder, l, BlockKind::SelfAttention), &mut layer.self_attn);
            push_ln_mut(&mut out, &format!("decoder.{l}.ln_cross"), &mut layer.ln_cross);
            push_attn_mut(&mut out, attn_name(Stack::Decoder, l, BlockKind::CrossAttention), &mut layer.cross_attn);
            push_ln_mut(&mut out, &format!("decoder.{l}.ln_ffn"), &mut layer.ln_ffn);
            push_ffn_mut(&mut out, &format!("decoder.{l}.ffn"), &mut layer.ffn);
        }
        push_ln_mut(&mut out, "decoder.norm", &mut self.dec_norm);
        out.push(("lm_head.w".to_string(), &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero tensors with this model's structure, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_params_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, t) in self.named_params_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ToyModel) -> Result<(), TrainError> {
        let theirs = other.named_params();
        for ((_, mine), (_, t)) in self.named_params_mut().into_iter().zip(theirs) {
            mine.add_assign(t)?;
        }
        Ok(())
    }

    pub fn decoder_blocks(&self) -> impl Iterator<Item = (usize, BlockKind, &AttentionBlock)> {
        self.decoder.iter().enumerate().flat_map(|(l, layer)| {
            [
                (l, BlockKind::SelfAttention, &layer.self_attn),
                (l, BlockKind::CrossAttention, &layer.cross_attn),
            ]
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        let c = &self.config;
        let a = &self.decoder_attention;
        ckpt.set_meta(keys::LAYOUT, TOY_SEQ2SEQ_LAYOUT);
        ckpt.set_meta(keys::D_MODEL, c.d_model);
        ckpt.set_meta(keys::N_HEADS, c.n_heads);
        ckpt.set_meta(keys::N_KV_GROUPS, a.n_kv_groups);
        ckpt.set_meta(keys::WEIGHTING, a.weighting);
        ckpt.set_meta(keys::INIT, a.init);
        ckpt.set_meta(keys::VARIANT, a.variant().label(a.init));
        ckpt.set_meta("vocab_size", c.vocab_size);
        ckpt.set_meta("n_layers", c.n_layers);
        ckpt.set_meta("max_len", c.max_len);
        for (name, t) in self.named_params() {
            ckpt.insert(name, t.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let layout = ckpt.meta(keys::LAYOUT).unwrap_or("<none>");
        if layout != TOY_SEQ2SEQ_LAYOUT {
            return Err(CheckpointError::UnknownLayout(layout.to_string()).into());
        }
        ckpt.validate()?;
        let config = ModelConfig {
            vocab_size: ckpt.meta_parse("vocab_size")?,
            d_model: ckpt.meta_parse(keys::D_MODEL)?,
            n_heads: ckpt.meta_parse(keys::N_HEADS)?,
            n_layers: ckpt.meta_parse("n_layers")?,
            max_len: ckpt.meta_parse("max_len")?,
        };
        config.validate()?;
        let dec_cfg = ckpt
            .decoder_config()?
            .ok_or_else(|| CheckpointError::Inconsistent("missing geometry".into()))?;
        let enc_cfg = AttentionConfig::mha(config.d_model, config.n_heads)?;

        // Build a skeleton with the right structure, then fill it from the map.
        let mut model = Self::init_mha(config, 0)?;
        model.decoder_attention = dec_cfg;
        model.encoder.self_attn =
            block_from_checkpoint(ckpt, attn_name(Stack::Encoder, 0, BlockKind::SelfAttention), enc_cfg)?;
        for l in 0..config.n_layers {
            for kind in [BlockKind::SelfAttention, BlockKind::CrossAttention] {
                let block = block_from_checkpoint(ckpt, attn_name(Stack::Decoder, l, kind), attn_config(&dec_cfg, kind))?;
                match kind {
                    BlockKind::SelfAttention => model.decoder[l].self_attn = block,
                    BlockKind::CrossAttention => model.decoder[l].cross_attn = block,
                }
            }
        }
        let mut seen = 0;
        for (name, slot) in model.named_params_mut() {
            let t = ckpt.get(&name)?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Inconsistent(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                ))
                .into());
            }
            *slot = t.clone();
            seen += 1;
        }
        if seen != ckpt.tensors.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "checkpoint has {} tensors, layout uses {seen}",
                ckpt.tensors.len()
            ))
            .into());
        }
        Ok(model)
    }

    fn check_tokens(&self, tokens: &[usize], allow_bos: bool) -> Result<(), TrainError> {
        let limit = self.config.vocab_size + usize::from(allow_bos);
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(TrainError::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= limit) {
            return Err(TrainError::Input(format!("token {t} out of vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Tensor {
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (i, &tok) in tokens.iter().enumerate() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = self.tok_embed.at(tok, j) + self.pos_embed.at(i, j);
            }
        }
        x
    }

    pub fn encode(&self, src: &[usize]) -> Result<(Tensor, EncoderCache), TrainError> {
        self.check_tokens(src, false)?;
        let e = &self.encoder;
        let mut x = self.embed(src);
        let (a, ln_self) = e.ln_self.forward(&x);
        let (att, attn) = attention_forward(&e.self_attn, &a, &a)?;
        x.add_assign(&att)?;
        let (b, ln_ffn) = e.ln_ffn.forward(&x);
        let (f, ffn) = e.ffn.forward(&b)?;
        x.add_assign(&f)?;
        let (out, norm) = self.enc_norm.forward(&x);
        Ok((
            out,
            EncoderCache {
                src: src.to_vec(),
                ln_self,
                attn,
                ln_ffn,
                ffn,
                norm,
            },
        ))
    }

    pub fn decode(&self, dec_in: &[usize], enc_out: &Tensor) -> Result<(Tensor, DecoderCache), TrainError> {
        self.check_tokens(dec_in, true)?;
        let mut x = self.embed(dec_in);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (a, ln_self) = layer.ln_self.forward(&x);
            let (s, self_attn) = attention_forward(&layer.self_attn, &a, &a)?;
            x.add_assign(&s)?;
            let (b, ln_cross) = layer.ln_cross.forward(&x);
            let (c, cross_attn) = attention_forward(&layer.cross_attn, &b, enc_out)?;
            x.add_assign(&c)?;
            let (e, ln_ffn) = layer.ln_ffn.forward(&x);
            let (f, ffn) = layer.ffn.forward(&e)?;
            x.add_assign(&f)?;
            layers.push(DecoderLayerCache {
                ln_self,
                self_attn,
                ln_cross,
                cross_attn,
                ln_ffn,
                ffn,
            });
        }
        let (z, norm) = self.dec_norm.forward(&x);
        let logits = z.matmul(&self.lm_head)?;
        Ok((
            logits,
            DecoderCache {
                dec_in: dec_in.to_vec(),
                layers,
                norm,
                z,
            },
        ))
    }

    /// Logits `len(dec_in) × vocab_size`.
    pub fn forward(&self, src: &[usize], dec_in: &[usize]) -> Result<Tensor, TrainError> {
        let (enc, _) = self.encode(src)?;
        Ok(self.decode(dec_in, &enc)?.0)
    }

    /// Accumulates parameter gradients for `d_logits` into `grads`.
    pub fn backward(
        &self,
        enc_cache: &EncoderCache,
        dec_cache: &DecoderCache,
        d_logits: &Tensor,
        grads: &mut ToyModel,
    ) -> Result<(), TrainError> {
        grads.lm_head.add_assign(&dec_cache.z.matmul_tn(d_logits)?)?;
        let dz = d_logits.matmul_nt(&self.lm_head)?;
        let mut dx = self.dec_norm.backward(&dec_cache.norm, &dz, &mut grads.dec_norm);
        let mut d_enc = Tensor::zeros(&[enc_cache.src.len(), self.config.d_model]);

        for (l, layer) in self.decoder.iter().enumerate().rev() {
            let cache = &dec_cache.layers[l];
            let g = &mut grads.decoder[l];
            let d_e = layer.ffn.backward(&cache.ffn, &dx, &mut g.ffn)?;
            dx.add_assign(&layer.ln_ffn.backward(&cache.ln_ffn, &d_e, &mut g.ln_ffn))?;

            let cg = attention_backward(&layer.cross_attn, &cache.cross_attn, &dx)?;
            d_enc.add_assign(&cg.d_x_kv)?;
            let d_b = cg.d_x_q.clone();
            accumulate_block(&mut g.cross_attn, cg)?;
            dx.add_assign(&layer.ln_cross.backward(&cache.ln_cross, &d_b, &mut g.ln_cross))?;

            let sg = attention_backward(&layer.self_attn, &cache.self_attn, &dx)?;
            let d_a = sg.d_x_q.add(&sg.d_x_kv)?;
            accumulate_block(&mut g.self_attn, sg)?;
            dx.add_assign(&layer.ln_self.backward(&cache.ln_self, &d_a, &mut g.ln_self))?;
        }
        self.embed_backward(&dec_cache.dec_in, &dx, grads);

        let e = &self.encoder;
        let ge = &mut grads.encoder;
        let mut dx = self.enc_norm.backward(&enc_cache.norm, &d_enc, &mut grads.enc_norm);
        let d_b = e.ffn.backward(&enc_cache.ffn, &dx, &mut ge.ffn)?;
        dx.add_assign(&e.ln_ffn.backward(&enc_cache.ln_ffn, &d_b, &mut ge.ln_ffn))?;
        let ag = attention_backward(&e.self_attn, &enc_cache.attn, &dx)?;
        let d_a = ag.d_x_q.add(&ag.d_x_kv)?;
        accumulate_block(&mut ge.self_attn, ag)?;
        dx.add_assign(&e.ln_self.backward(&enc_cache.ln_self, &d_a, &mut ge.ln_self))?;
        self.embed_backward(&enc_cache.src, &dx, grads);
        Ok(())
    }

    fn embed_backward(&self, tokens: &[usize], dx: &Tensor, grads: &mut ToyModel) {
        for (i, &tok) in tokens.iter().enumerate() {
            for (j, &g) in dx.row(i).iter().enumerate() {
                *grads.tok_embed.at_mut(tok, j) += g;
                *grads.pos_embed.at_mut(i, j) += g;
            }
        }
    }

    /// Summed teacher-forced cross-entropy of `targets` given `src`, with its
    /// gradient accumulated into `grads`. The decoder input is
    /// `[BOS, targets[..n-1]]`.
    pub fn loss_and_grad(&self, src: &[usize], targets: &[usize], grads: &mut ToyModel) -> Result<f64, TrainError> {
        let dec_in = self.teacher_input(targets);
        let (enc, enc_cache) = self.encode(src)?;
        let (logits, dec_cache) = self.decode(&dec_in, &enc)?;
        let (loss, d_logits) = cross_entropy(&logits, targets);
        self.backward(&enc_cache, &dec_cache, &d_logits, grads)?;
        Ok(loss)
    }

    pub fn loss(&self, src: &[usize], targets: &[usize]) -> Result<f64, TrainError> {
        let logits = self.forward(src, &self.teacher_input(targets))?;
        Ok(cross_entropy(&logits, targets).0)
    }

    pub fn teacher_input(&self, targets: &[usize]) -> Vec<usize> {
        let mut dec_in = Vec::with_capacity(targets.len());
        dec_in.push(self.config.bos());
        dec_in.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        dec_in
    }

    /// Greedy decoding of exactly `len` tokens.
    pub fn greedy_decode(&self, src: &[usize], len: usize) -> Result<Vec<usize>, TrainError> {
        let (enc, _) = self.encode(src)?;
        let mut dec_in = vec![self.config.bos()];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let (logits, _) = self.decode(&dec_in, &enc)?;
            let last = logits.row(logits.rows() - 1);
            let best = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            out.push(best);
            dec_in.push(best);
        }
        Ok(out)
    }

    /// Decoder attention blocks folded into plain grouped blocks; no-op for
    /// unweighted models.
    pub fn folded(&self) -> Result<Self, TrainError> {
        if self.decoder_attention.weighting == Weighting::None {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.decoder_attention.weighting = Weighting::None;
        for layer in &mut out.decoder {
            layer.self_attn = crate::attention::fold_weights(&layer.self_attn)?;
            layer.cross_attn = crate::attention::fold_weights(&layer.cross_attn)?;
        }
        Ok(out)
    }
}

/// Summed cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let probs = logits.softmax_rows().expect("logits are a matrix");
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs.at(i, t).max(f64::MIN_POSITIVE).ln();
        *grad.at_mut(i, t) -= 1.0;
    }
    (loss, grad)
}
