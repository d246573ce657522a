//! Pyramid fusion transformer decoder.
//!
//! Each of the `L` layers applies, in order:
//! 1. intra-scale query self-attention, separately for every scale;
//! 2. cross-scale inter-query attention over the concatenation of all
//!    scales' queries, sliced back per scale afterwards;
//! 3. intra-scale query-pixel cross-attention against that scale's pyramid
//!    level, which also yields the head-averaged attention map `W_s`.
//!
//! Sub-layers are post-norm: attention, residual, layer norm, FFN, residual,
//! layer norm. Learnable positional encodings are added to queries and keys
//! only, never to values, and are shared by all layers.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::params::{Bindings, Linear, Norm, ParamId, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{Tape, Tensor, Var};

/// Strides carrying query sets.
pub const QUERY_SCALES: [usize; 3] = [8, 16, 32];

pub const SINE_TEMPERATURE: f64 = 10000.0;

/// Std of the query and positional-encoding initialisation.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub classes: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// Active query scales, a non-empty subset of [`QUERY_SCALES`] in order.
    pub scales: Vec<usize>,
    pub cross_scale: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(PftError::Config("decoder needs at least one layer".into()));
        }
        if self.classes < 1 {
            return Err(PftError::Config("need at least one category".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(PftError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !self.channels.is_multiple_of(2) {
            return Err(PftError::Config("channel width must be even for sine encodings".into()));
        }
        let ordered = QUERY_SCALES.iter().filter(|s| self.scales.contains(s)).count() == self.scales.len();
        if self.scales.is_empty() || !ordered || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PftError::Config(format!("invalid query scales {:?}", self.scales)));
        }
        Ok(())
    }
}

/// Fixed 2-D sine/cosine encoding `[C, h, w]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_encoding(channels: usize, h: usize, w: usize) -> Tensor {
    let half = channels / 2;
    let mut out = vec![0.0; channels * h * w];
    for (axis, len) in [(0usize, h), (1usize, w)] {
        for i in 0..half {
            let dim_t = SINE_TEMPERATURE.powf(2.0 * (i / 2) as f64 / half as f64);
            let c = axis * half + i;
            for y in 0..h {
                for x in 0..w {
                    let coord = if axis == 0 { y } else { x };
                    let embed = (coord as f64 + 1.0) / len as f64 * 2.0 * PI;
                    let v = embed / dim_t;
                    out[(c * h + y) * w + x] = if i % 2 == 0 { v.sin() } else { v.cos() };
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out).expect("sine shape")
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, rng),
            out: Linear::new(store, &format!("{name}.out"), c, c, rng),
        }
    }
}

/// Multi-head attention, FFN (hidden `4C`) and both layer norms of one sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub attn: AttentionParams,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

impl AttentionBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            attn: AttentionParams::new(store, &format!("{name}.attn"), c, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), c),
            ffn_in: Linear::new(store, &format!("{name}.ffn1"), c, 4 * c, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn2"), 4 * c, c, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c),
        }
    }

    /// `LN(x + FFN(x))` with `x = LN(residual + Attn(q, k, v))`; returns the
    /// pre-softmax attention logits as well.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape<'_>,
        b: &Bindings,
        heads: usize,
        residual: Var,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let (attn, logits) = multi_head_attention(tape, b, &self.attn, q, k, v, heads)?;
        let x = tape.add(residual, attn)?;
        let x = self.norm1.forward(tape, b, x)?;
        let h = self.ffn_in.forward(tape, b, x)?;
        let h = tape.gelu(h);
        let h = self.ffn_out.forward(tape, b, h)?;
        let x = tape.add(x, h)?;
        let x = self.norm2.forward(tape, b, x)?;
        Ok((x, logits))
    }
}

/// Scaled dot-product attention with `heads` heads of width `C / heads`.
///
/// `q` is `[Nq, C]`, `k` and `v` are `[Nk, C]`. Returns the output-projected
/// result `[Nq, C]` and the per-head logits `[heads, Nq, Nk]` before softmax.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    b: &Bindings,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let c = *tape.shape(q).last().unwrap_or(&0);
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(PftError::Config(format!("channels {c} not divisible by heads {heads}")));
    }
    let d = c / heads;
    let (nq, nk) = (tape.shape(q)[0], tape.shape(k)[0]);

    let qp = p.q.forward(tape, b, q)?;
    let qp = tape.reshape(qp, &[nq, heads, d])?;
    let qh = tape.permute(qp, &[1, 0, 2])?;

    let kp = p.k.forward(tape, b, k)?;
    let kp = tape.reshape(kp, &[nk, heads, d])?;
    let kt = tape.permute(kp, &[1, 2, 0])?;

    let vp = p.v.forward(tape, b, v)?;
    let vp = tape.reshape(vp, &[nk, heads, d])?;
    let vh = tape.permute(vp, &[1, 0, 2])?;

    let logits = tape.matmul(qh, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;
    let ctx = tape.matmul(weights, vh)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[nq, c])?;
    let out = p.out.forward(tape, b, ctx)?;
    Ok((out, logits))
}

/// Learnable per-scale category queries and positional encodings.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub scales: Vec<usize>,
    pub queries: Vec<ParamId>,
    pub pos: Vec<ParamId>,
}

impl QueryBank {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let shape = [cfg.classes, cfg.channels];
        let mut queries = Vec::new();
        let mut pos = Vec::new();
        for s in &cfg.scales {
            queries.push(store.randn(format!("queries.{s}"), &shape, QUERY_INIT_STD, rng));
            pos.push(store.randn(format!("query_pos.{s}"), &shape, QUERY_INIT_STD, rng));
        }
        Self {
            scales: cfg.scales.clone(),
            queries,
            pos,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    /// One block per active scale.
    pub self_attn: Vec<AttentionBlock>,
    /// Shared by all scales; absent when cross-scale attention is disabled.
    pub cross_scale: Option<AttentionBlock>,
    /// One block per active scale.
    pub cross_attn: Vec<AttentionBlock>,
}

/// Per-layer query states and attention maps.
#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// `queries[l][i]`: state of scale `i` after layer `l`; `l = 0` is the input.
    pub queries: Vec<Vec<Var>>,
    /// `attn_weights[l][i]`: `[K, H/s, W/s]` map of layer `l + 1`.
    pub attn_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct PftDecoder {
    pub config: DecoderConfig,
    pub bank: QueryBank,
    pub layers: Vec<DecoderLayerParams>,
}

impl PftDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bank = QueryBank::new(store, &config, rng);
        let c = config.channels;
        let layers = (0..config.layers)
            .map(|l| DecoderLayerParams {
                self_attn: config
                    .scales
                    .iter()
                    .map(|s| AttentionBlock::new(store, &format!("decoder.{l}.self{s}"), c, rng))
                    .collect(),
                cross_scale: (config.cross_scale && config.scales.len() > 1)
                    .then(|| AttentionBlock::new(store, &format!("decoder.{l}.cross_scale"), c, rng)),
                cross_attn: config
                    .scales
                    .iter()
                    .map(|s| AttentionBlock::new(store, &format!("decoder.{l}.pixel{s}"), c, rng))
                    .collect(),
            })
            .collect();
        Ok(Self { config, bank, layers })
    }

    /// Self-attention among the `K` queries of scale index `i`.
    pub fn intra_scale_self_attention(&self, tape: &mut Tape<'_>, b: &Bindings, layer: usize, i: usize, q: Var) -> Result<Var> {
        let pos = b[self.bank.pos[i]];
        let qk = tape.add(q, pos)?;
        let blk = &self.layers[layer].self_attn[i];
        Ok(blk.forward(tape, b, self.config.heads, q, qk, qk, q)?.0)
    }

    /// Attention over all scales' queries concatenated; identity when the
    /// layer has no cross-scale block.
    pub fn cross_scale_inter_query_attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bindings,
        layer: usize,
        qs: &[Var],
    ) -> Result<Vec<Var>> {
        let Some(blk) = &self.layers[layer].cross_scale else {
            return Ok(qs.to_vec());
        };
        let k = tape.shape(qs[0])[0];
        for q in qs {
            if tape.shape(*q) != tape.shape(qs[0]) {
                return Err(PftError::Shape {
                    op: "cross_scale_attention",
                    lhs: tape.shape(qs[0]).to_vec(),
                    rhs: tape.shape(*q).to_vec(),
                });
            }
        }
        let all = tape.concat(qs, 0)?;
        let pos: Vec<Var> = self.bank.pos.iter().map(|p| b[*p]).collect();
        let pos_all = tape.concat(&pos, 0)?;
        let qk = tape.add(all, pos_all)?;
        let (out, _) = blk.forward(tape, b, self.config.heads, all, qk, qk, all)?;
        (0..qs.len()).map(|i| tape.narrow(out, 0, i * k, k)).collect()
    }

    /// Cross-attention of scale `i`'s queries to the pixel tokens of
    /// `pixels` (`[C, h, w]`). Returns the updated queries and `W_s`
    /// (`[K, h, w]`), the softmax over pixels of the head-averaged logits.
    pub fn query_pixel_cross_attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bindings,
        layer: usize,
        i: usize,
        q: Var,
        pixels: Var,
    ) -> Result<(Var, Var)> {
        let [c, h, w] = crate::tensor::chw(tape.shape(pixels), "query_pixel_cross_attention")?;
        let sine = tape.constant(sine_encoding(c, h, w));
        let keyed = tape.add(pixels, sine)?;
        let tokens = tape.reshape(pixels, &[c, h * w])?;
        let tokens = tape.transpose(tokens)?;
        let keys = tape.reshape(keyed, &[c, h * w])?;
        let keys = tape.transpose(keys)?;
        let pos = b[self.bank.pos[i]];
        let qp = tape.add(q, pos)?;
        let blk = &self.layers[layer].cross_attn[i];
        let (out, logits) = blk.forward(tape, b, self.config.heads, q, qp, keys, tokens)?;
        let avg = tape.mean_axis(logits, 0)?;
        let weights = tape.softmax(avg, 1)?;
        let k = tape.shape(q)[0];
        let weights = tape.reshape(weights, &[k, h, w])?;
        Ok((out, weights))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, pyramid: &FeaturePyramid) -> Result<DecoderOutputs> {
        let mut qs: Vec<Var> = self.bank.queries.iter().map(|q| b[*q]).collect();
        let mut queries = vec![qs.clone()];
        let mut attn_weights = Vec::with_capacity(self.layers.len());
        for layer in 0..self.layers.len() {
            for (i, q) in qs.iter_mut().enumerate() {
                *q = self.intra_scale_self_attention(tape, b, layer, i, *q)?;
            }
            qs = self.cross_scale_inter_query_attention(tape, b, layer, &qs)?;
            let mut maps = Vec::with_capacity(qs.len());
            for (i, q) in qs.iter_mut().enumerate() {
                let pixels = pyramid.level(self.config.scales[i]);
                let (out, w) = self.query_pixel_cross_attention(tape, b, layer, i, *q, pixels)?;
                *q = out;
                maps.push(w);
            }
            queries.push(qs.clone());
            attn_weights.push(maps);
        }
        Ok(DecoderOutputs { queries, attn_weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_encoding_is_bounded_and_deterministic() {
        let a = sine_encoding(16, 4, 6);
        assert_eq!(a.shape(), &[16, 4, 6]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, sine_encoding(16, 4, 6));
    }

    #[test]
    fn config_rejects_bad_heads_and_layers() {
        let mut cfg = DecoderConfig {
            classes: 3,
            channels: 16,
            layers: 1,
            heads: 3,
            scales: QUERY_SCALES.to_vec(),
            cross_scale: true,
        };
        assert!(matches!(cfg.validate(), Err(PftError::Config(_))));
        cfg.heads = 4;
        cfg.layers = 0;
        assert!(matches!(cfg.validate(), Err(PftError::Config(_))));
        cfg.layers = 1;
        cfg.scales = vec![32, 8];
        assert!(cfg.validate().is_err());
        cfg.scales = vec![8, 32];
        assert!(cfg.validate().is_ok());
    }
}
