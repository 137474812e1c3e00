//! Pixel decoder, dynamic kernel generation, dynamic convolution and the
//! sounding-score head.

use crate::encoders::{AudioEmbedding, VisualPyramid};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Builder, Conv1x1, Conv2d, Linear};
use crate::numeric::{Graph, ParamStore, Var};
use crate::transformer::{from_tokens, to_tokens, AudioCrossAttention, EncodedFeatures};

/// Mask features `[T, C_m, H0/4, W0/4]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskFeatures {
    pub features: Var,
}

/// Per (frame, query) kernels `[T, N_q, C_m + 1]`: 1x1 weights then bias.
#[derive(Clone, Copy, Debug)]
pub struct KernelSet {
    pub kernels: Var,
}

/// Raw mask logits `[N_q, T, H_m, W_m]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskLogits {
    pub logits: Var,
}

/// Sounding logits `[T, N_q]`.
#[derive(Clone, Copy, Debug)]
pub struct SoundingScores {
    pub scores: Var,
}

/// FPN-style top-down decoder over the unflattened encoder memory, with
/// the raw stride-4 visual features added laterally and one audio
/// cross-attention at the finest level.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    lateral: [Conv1x1; 3],
    visual_lateral: Conv1x1,
    smooth: [Conv2d; 2],
    pub audio_attn: AudioCrossAttention,
    out: Conv1x1,
}

impl PixelDecoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("pixel");
        let c = cfg.c_av;
        Ok(Self {
            lateral: [
                Conv1x1::new(&mut b, "lateral0", c, c)?,
                Conv1x1::new(&mut b, "lateral1", c, c)?,
                Conv1x1::new(&mut b, "lateral2", c, c)?,
            ],
            visual_lateral: Conv1x1::new(&mut b, "visual_lateral", cfg.vis_channels[0], c)?,
            smooth: [
                Conv2d::new(&mut b, "smooth0", c, c, 3, 1)?,
                Conv2d::new(&mut b, "smooth1", c, c, 3, 1)?,
            ],
            audio_attn: AudioCrossAttention::new(&mut b, "audio_attn", c, cfg.heads)?,
            out: Conv1x1::new(&mut b, "out", c, cfg.c_m)?,
        })
    }

    /// Splits encoder memory back into `[T, C, H_l, W_l]` maps.
    pub fn unflatten(g: &mut Graph, encoded: &EncodedFeatures) -> Result<[Var; 3]> {
        let total = g.shape(encoded.tokens)[1];
        let mut expect = 0;
        for span in &encoded.spans {
            if span.offset != expect {
                return Err(Error::contract(format!(
                    "scale offsets {:?} do not partition the {total} tokens",
                    encoded.spans
                )));
            }
            expect += span.len();
        }
        if expect != total {
            return Err(Error::contract(format!(
                "scale offsets cover {expect} tokens but the memory holds {total}"
            )));
        }
        let mut maps = [encoded.tokens; 3];
        for (l, span) in encoded.spans.iter().enumerate() {
            let part = g.narrow(encoded.tokens, 1, span.offset, span.len())?;
            maps[l] = from_tokens(g, part, span.height, span.width)?;
        }
        Ok(maps)
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        pyramid: VisualPyramid,
        audio: AudioEmbedding,
        encoded: &EncodedFeatures,
    ) -> Result<MaskFeatures> {
        let maps = Self::unflatten(g, encoded)?;
        let mut top = self.lateral[2].forward(g, s, maps[2])?;
        for l in [1usize, 0] {
            let shape = g.shape(maps[l]).to_vec();
            let up = g.bilinear_resize(top, shape[2], shape[3])?;
            let mut x = self.lateral[l].forward(g, s, maps[l])?;
            if l == 0 {
                let v = self.visual_lateral.forward(g, s, pyramid.scales[0])?;
                x = g.add(x, v)?;
            }
            let x = g.add(x, up)?;
            let x = self.smooth[l].forward(g, s, x)?;
            top = g.gelu(x);
        }
        let shape = g.shape(top).to_vec();
        let tokens = to_tokens(g, top)?;
        let tokens = self.audio_attn.forward(g, s, tokens, audio.vectors)?.out;
        let fine = from_tokens(g, tokens, shape[2], shape[3])?;
        Ok(MaskFeatures {
            features: self.out.forward(g, s, fine)?,
        })
    }
}

/// Shared two-layer MLP from each query embedding to a dynamic kernel.
#[derive(Clone, Debug)]
pub struct KernelGenerator {
    hidden: Linear,
    out: Linear,
}

impl KernelGenerator {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("kernels");
        Ok(Self {
            hidden: Linear::new(&mut b, "hidden", cfg.c_av, cfg.c_av)?,
            out: Linear::new(&mut b, "out", cfg.c_av, cfg.c_m + 1)?,
        })
    }

    pub fn generate(&self, g: &mut Graph, s: &ParamStore, embeddings: Var) -> Result<KernelSet> {
        let h = self.hidden.forward(g, s, embeddings)?;
        let h = g.relu(h);
        Ok(KernelSet {
            kernels: self.out.forward(g, s, h)?,
        })
    }
}

/// `logits[i, t, h, w] = sum_c k[t, i, c] * F[t, c, h, w] + k[t, i, C_m]`.
pub fn dynamic_convolve(g: &mut Graph, features: MaskFeatures, kernels: KernelSet) -> Result<MaskLogits> {
    let fs = g.shape(features.features).to_vec();
    let ks = g.shape(kernels.kernels).to_vec();
    if fs.len() != 4 || ks.len() != 3 || ks[0] != fs[0] || ks[2] != fs[1] + 1 {
        return Err(Error::contract(format!(
            "kernel width {} must equal mask-feature channels + 1 ({}); shapes {ks:?} and {fs:?}",
            ks.get(2).copied().unwrap_or(0),
            fs.get(1).copied().unwrap_or(0) + 1,
        )));
    }
    let (t, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let n_q = ks[1];
    let weight = g.narrow(kernels.kernels, 2, 0, c)?;
    let bias = g.narrow(kernels.kernels, 2, c, 1)?;
    let flat = g.reshape(features.features, &[t, c, h * w])?;
    let y = g.matmul(weight, flat)?;
    let y = g.add(y, bias)?;
    let y = g.reshape(y, &[t, n_q, h, w])?;
    Ok(MaskLogits {
        logits: g.permute(y, &[1, 0, 2, 3])?,
    })
}

/// Linear map from each query embedding to a sounding logit.
#[derive(Clone, Debug)]
pub struct SoundingHead {
    linear: Linear,
}

impl SoundingHead {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("sounding");
        Ok(Self {
            linear: Linear::new(&mut b, "linear", cfg.c_av, 1)?,
        })
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    pub fn score(&self, g: &mut Graph, s: &ParamStore, embeddings: Var) -> Result<SoundingScores> {
        let shape = g.shape(embeddings).to_vec();
        let y = self.linear.forward(g, s, embeddings)?;
        Ok(SoundingScores {
            scores: g.reshape(y, &[shape[0], shape[1]])?,
        })
    }
}
