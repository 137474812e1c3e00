//! Audio-visual fusion (AVEF), the multi-modal encoder over all pyramid
//! tokens, and the decoder whose queries start from the audio embedding.

use crate::encoders::{AudioEmbedding, VisualPyramid};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{sinusoidal_2d, Attended, Builder, FeedForward, LayerNorm, Linear, MultiHeadAttention, WeightInit};
use crate::numeric::{Graph, ParamId, ParamStore, Var};

/// AVEF output: one `[T, C_av, H_l, W_l]` map per scale.
#[derive(Clone, Copy, Debug)]
pub struct FusedPyramid {
    pub scales: [Var; 3],
}

/// Token range of one pyramid scale inside [`EncodedFeatures::tokens`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleSpan {
    pub offset: usize,
    pub height: usize,
    pub width: usize,
}

impl ScaleSpan {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder memory `[T, L, C_av]` with `L` the total token count of all scales.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFeatures {
    pub tokens: Var,
    pub spans: [ScaleSpan; 3],
}

/// Decoder queries: `content: [T, N_q, D]` and `query_pos: [N_q, D]`.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub content: Var,
    pub query_pos: Var,
}

/// Decoded query embeddings `[T, N_q, D]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub embeddings: Var,
}

/// `[T, C, H, W] -> [T, H*W, C]`
pub(crate) fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose(x, 1, 2)
}

/// `[T, H*W, C] -> [T, C, H, W]`
pub(crate) fn from_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.transpose(x, 1, 2)?;
    g.reshape(x, &[s[0], s[2], h, w])
}

/// Pre-norm residual cross-attention from a token sequence to the frame's
/// single audio token: `x + Attn(LN(x), LN(a))`.
#[derive(Clone, Debug)]
pub struct AudioCrossAttention {
    norm_x: LayerNorm,
    norm_a: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl AudioCrossAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            norm_x: LayerNorm::new(&mut b, "norm_x", dim)?,
            norm_a: LayerNorm::new(&mut b, "norm_a", dim)?,
            attn: MultiHeadAttention::new(&mut b, "attn", dim, heads, true)?,
        })
    }

    /// `tokens: [T, N, D]`, `audio: [T, D]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, tokens: Var, audio: Var) -> Result<Attended> {
        let a_shape = g.shape(audio).to_vec();
        let t_shape = g.shape(tokens).to_vec();
        if a_shape.len() != 2 || a_shape[0] != t_shape[0] || a_shape[1] != t_shape[2] {
            return Err(Error::shape("audio cross-attention", &t_shape, &a_shape));
        }
        let a = g.reshape(audio, &[a_shape[0], 1, a_shape[1]])?;
        let a = self.norm_a.last(g, s, a)?;
        let h = self.norm_x.last(g, s, tokens)?;
        let att = self.attn.forward(g, s, h, a, a)?;
        Ok(Attended {
            out: g.add(tokens, att.out)?,
            weights: att.weights,
        })
    }
}

/// Per-scale fusion: pixel tokens query the audio embedding.
#[derive(Clone, Debug)]
pub struct Avef {
    pub blocks: [AudioCrossAttention; 3],
}

impl Avef {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("avef");
        let mk = |b: &mut Builder, i: usize| AudioCrossAttention::new(b, &format!("scale{i}"), cfg.c_av, cfg.heads);
        Ok(Self {
            blocks: [mk(&mut b, 0)?, mk(&mut b, 1)?, mk(&mut b, 2)?],
        })
    }

    /// Fuses each scale separately; also returns the attention weights.
    pub fn fuse_with_weights(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        pyramid: VisualPyramid,
        audio: AudioEmbedding,
    ) -> Result<(FusedPyramid, [Var; 3])> {
        let mut scales = pyramid.scales;
        let mut weights = pyramid.scales;
        for (l, block) in self.blocks.iter().enumerate() {
            let shape = g.shape(scales[l]).to_vec();
            if shape.len() != 4 || shape[1] != g.shape(audio.vectors).get(1).copied().unwrap_or(0) {
                return Err(Error::shape("avef_fuse", &shape, g.shape(audio.vectors)));
            }
            let tokens = to_tokens(g, scales[l])?;
            let att = block.forward(g, s, tokens, audio.vectors)?;
            scales[l] = from_tokens(g, att.out, shape[2], shape[3])?;
            weights[l] = att.weights;
        }
        Ok((FusedPyramid { scales }, weights))
    }

    pub fn fuse(&self, g: &mut Graph, s: &ParamStore, pyramid: VisualPyramid, audio: AudioEmbedding) -> Result<FusedPyramid> {
        Ok(self.fuse_with_weights(g, s, pyramid, audio)?.0)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut b, "norm1", cfg.c_av)?,
            attn: MultiHeadAttention::new(&mut b, "attn", cfg.c_av, cfg.heads, false)?,
            norm2: LayerNorm::new(&mut b, "norm2", cfg.c_av)?,
            ffn: FeedForward::new(&mut b, "ffn", cfg.c_av, cfg.ffn_dim)?,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.last(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, h)?.out;
        let x = g.add(x, a)?;
        let h = self.norm2.last(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Self-attention over the concatenated tokens of all scales, one frame per
/// batch row.
#[derive(Clone, Debug)]
pub struct MultiModalEncoder {
    level_embed: [ParamId; 3],
    layers: Vec<EncoderLayer>,
}

impl MultiModalEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("encoder");
        let bound = (3.0 / cfg.c_av as f64).sqrt() * 0.1;
        let level_embed = [
            b.uniform("level0", &[cfg.c_av], bound)?,
            b.uniform("level1", &[cfg.c_av], bound)?,
            b.uniform("level2", &[cfg.c_av], bound)?,
        ];
        let layers = (0..cfg.n_enc)
            .map(|i| EncoderLayer::new(&mut b, &format!("layer{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { level_embed, layers })
    }

    /// Flattens each scale, adds position and level embeddings and
    /// concatenates; this is the encoder input.
    pub fn embed(&self, g: &mut Graph, s: &ParamStore, fused: FusedPyramid) -> Result<EncodedFeatures> {
        let mut parts = Vec::with_capacity(3);
        let mut spans = [ScaleSpan {
            offset: 0,
            height: 0,
            width: 0,
        }; 3];
        let mut offset = 0;
        for (l, &x) in fused.scales.iter().enumerate() {
            let shape = g.shape(x).to_vec();
            let (h, w) = (shape[2], shape[3]);
            let tokens = to_tokens(g, x)?;
            let pe = g.constant(sinusoidal_2d(h, w, shape[1]));
            let tokens = g.add(tokens, pe)?;
            let level = g.param(s, self.level_embed[l]);
            parts.push(g.add(tokens, level)?);
            spans[l] = ScaleSpan {
                offset,
                height: h,
                width: w,
            };
            offset += h * w;
        }
        Ok(EncodedFeatures {
            tokens: g.concat(&parts, 1)?,
            spans,
        })
    }

    pub fn encode(&self, g: &mut Graph, s: &ParamStore, fused: FusedPyramid) -> Result<EncodedFeatures> {
        let mut enc = self.embed(g, s, fused)?;
        for layer in &self.layers {
            enc.tokens = layer.forward(g, s, enc.tokens)?;
        }
        Ok(enc)
    }
}

/// Builds decoder queries from the audio embedding.
#[derive(Clone, Debug)]
pub struct AudioQueries {
    /// `None` when queries are audio-agnostic (content fixed at zero).
    proj: Option<Linear>,
    pos: ParamId,
    n_q: usize,
}

impl AudioQueries {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("queries");
        let proj = if cfg.audio_queries {
            Some(Linear::with_init(&mut b, "proj", cfg.c_av, cfg.c_av, WeightInit::Identity, false)?)
        } else {
            None
        };
        let pos = b.uniform("pos", &[cfg.n_q, cfg.c_av], 1.0)?;
        Ok(Self { proj, pos, n_q: cfg.n_q })
    }

    pub fn pos_param(&self) -> ParamId {
        self.pos
    }

    /// `content[t, i] = proj(audio[t])` for every query `i`.
    pub fn make(&self, g: &mut Graph, s: &ParamStore, audio: AudioEmbedding) -> Result<QuerySet> {
        let a = g.shape(audio.vectors).to_vec();
        let (t, d) = (a[0], a[1]);
        let content = match &self.proj {
            Some(proj) => {
                let p = proj.forward(g, s, audio.vectors)?;
                let p = g.reshape(p, &[t, 1, d])?;
                g.broadcast_to(p, &[t, self.n_q, d])?
            }
            None => g.constant(crate::numeric::Tensor::zeros(&[t, self.n_q, d])),
        };
        Ok(QuerySet {
            content,
            query_pos: g.param(s, self.pos),
        })
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    norm_mem: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub(name);
        let d = cfg.c_av;
        Ok(Self {
            norm_self: LayerNorm::new(&mut b, "norm_self", d)?,
            self_attn: MultiHeadAttention::new(&mut b, "self_attn", d, cfg.heads, false)?,
            norm_cross: LayerNorm::new(&mut b, "norm_cross", d)?,
            norm_mem: LayerNorm::new(&mut b, "norm_mem", d)?,
            cross_attn: MultiHeadAttention::new(&mut b, "cross_attn", d, cfg.heads, false)?,
            norm_ffn: LayerNorm::new(&mut b, "norm_ffn", d)?,
            ffn: FeedForward::new(&mut b, "ffn", d, cfg.ffn_dim)?,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, q: Var, pos: Var, memory: Var) -> Result<Var> {
        let h = self.norm_self.last(g, s, q)?;
        let hp = g.add(h, pos)?;
        let a = self.self_attn.forward_set(g, s, hp, hp, h)?.out;
        let q = g.add(q, a)?;

        let h = self.norm_cross.last(g, s, q)?;
        let hp = g.add(h, pos)?;
        let mem = self.norm_mem.last(g, s, memory)?;
        let a = self.cross_attn.forward(g, s, hp, mem, mem)?.out;
        let q = g.add(q, a)?;

        let h = self.norm_ffn.last(g, s, q)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(q, f)
    }
}

/// Stack of decoder layers: query self-attention, cross-attention into the
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("decoder");
        let layers = (0..cfg.n_dec)
            .map(|i| DecoderLayer::new(&mut b, &format!("layer{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn decode(&self, g: &mut Graph, s: &ParamStore, queries: QuerySet, memory: &EncodedFeatures) -> Result<DecoderOutput> {
        let (qs, ms) = (g.shape(queries.content).to_vec(), g.shape(memory.tokens).to_vec());
        if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != ms[2] {
            return Err(Error::shape("decode", &qs, &ms));
        }
        let mut q = queries.content;
        for layer in &self.layers {
            q = layer.forward(g, s, q, queries.query_pos, memory.tokens)?;
        }
        Ok(DecoderOutput { embeddings: q })
    }
}
