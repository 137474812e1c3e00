//! Trainable visual and audio encoders and the projection to the shared
//! fusion width `C_av`.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Builder, Conv1x1, Conv2d, LayerNorm, Linear};
use crate::numeric::{Graph, ParamStore, Tensor, Var};

/// Video frames `[T, 3, H0, W0]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("video clip", s, &[0, 3, 0, 0]));
        }
        if !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) {
            return Err(Error::contract(format!(
                "frame size {}x{} must be divisible by 16",
                s[2], s[3]
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }
}

/// Per-frame spectrograms `[T, H_a, W_a]` (frequency rows, time columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    spectrograms: Tensor,
}

impl AudioClip {
    pub fn new(spectrograms: Tensor) -> Result<Self> {
        if spectrograms.ndim() != 3 {
            return Err(Error::shape("audio clip", spectrograms.shape(), &[0, 0, 0]));
        }
        if !spectrograms.is_finite() {
            return Err(Error::NonFinite("audio spectrogram".into()));
        }
        Ok(Self { spectrograms })
    }

    pub fn spectrograms(&self) -> &Tensor {
        &self.spectrograms
    }

    pub fn num_frames(&self) -> usize {
        self.spectrograms.shape()[0]
    }
}

/// Three visual scales at strides 4, 8 and 16, each `[T, C_l, H_l, W_l]`.
#[derive(Clone, Copy, Debug)]
pub struct VisualPyramid {
    pub scales: [Var; 3],
}

/// One pooled vector per frame, `[T, C]`.
#[derive(Clone, Copy, Debug)]
pub struct AudioEmbedding {
    pub vectors: Var,
}

/// Strided 3x3 conv stack: a stride-2 stem, then three stride-2 blocks whose
/// outputs are the pyramid taps. Every block is conv, GELU, channel norm.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    stem: (Conv2d, LayerNorm),
    blocks: [(Conv2d, LayerNorm); 3],
}

impl VisualEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("visual");
        let stem = (
            Conv2d::new(&mut b, "stem", 3, cfg.stem_channels, 3, 2)?,
            LayerNorm::new(&mut b, "stem_norm", cfg.stem_channels)?,
        );
        let c = cfg.vis_channels;
        let ins = [cfg.stem_channels, c[0], c[1]];
        let mut mk = |i: usize| -> Result<(Conv2d, LayerNorm)> {
            Ok((
                Conv2d::new(&mut b, &format!("block{i}"), ins[i], c[i], 3, 2)?,
                LayerNorm::new(&mut b, &format!("norm{i}"), c[i])?,
            ))
        };
        let blocks = [mk(0)?, mk(1)?, mk(2)?];
        Ok(Self { stem, blocks })
    }

    fn block(g: &mut Graph, s: &ParamStore, (conv, norm): &(Conv2d, LayerNorm), x: Var) -> Result<Var> {
        let h = conv.forward(g, s, x)?;
        let h = g.gelu(h);
        norm.forward(g, s, h, 1)
    }

    pub fn encode(&self, g: &mut Graph, s: &ParamStore, frames: Var) -> Result<VisualPyramid> {
        let shape = g.shape(frames);
        if shape.len() != 4 || !shape[2].is_multiple_of(16) || !shape[3].is_multiple_of(16) {
            return Err(Error::contract(format!(
                "visual input {shape:?} must be [T, 3, H, W] with H, W divisible by 16"
            )));
        }
        let x = Self::block(g, s, &self.stem, frames)?;
        let f1 = Self::block(g, s, &self.blocks[0], x)?;
        let f2 = Self::block(g, s, &self.blocks[1], f1)?;
        let f3 = Self::block(g, s, &self.blocks[2], f2)?;
        Ok(VisualPyramid { scales: [f1, f2, f3] })
    }
}

/// Conv/GELU/max-pool layers over each spectrogram, mean pooling over time,
/// then a linear map of the frequency-by-channel profile to `C_a`.
///
/// Pooling only the time axis keeps the frequency position of each band,
/// which is what identifies a sound source.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl AudioEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("audio");
        let mut convs = Vec::with_capacity(cfg.audio_depth);
        let mut c_in = 1;
        let mut rows = cfg.audio_bins;
        for i in 0..cfg.audio_depth {
            let c_out = cfg.audio_channels << i;
            convs.push(Conv2d::new(&mut b, &format!("conv{i}"), c_in, c_out, 3, 1)?);
            c_in = c_out;
            rows /= 2;
        }
        let proj = Linear::new(&mut b, "proj", c_in * rows, cfg.c_a)?;
        Ok(Self { convs, proj })
    }

    pub fn encode(&self, g: &mut Graph, s: &ParamStore, spectrograms: Var) -> Result<AudioEmbedding> {
        let shape = g.shape(spectrograms).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("encode_audio", &shape, &[0, 0, 0]));
        }
        let mut x = g.reshape(spectrograms, &[shape[0], 1, shape[1], shape[2]])?;
        for conv in &self.convs {
            x = conv.forward(g, s, x)?;
            x = g.gelu(x);
            x = g.max_pool2d(x)?;
        }
        let pooled = g.mean(x, 3)?;
        let ps = g.shape(pooled).to_vec();
        let flat = g.reshape(pooled, &[ps[0], ps[1] * ps[2]])?;
        Ok(AudioEmbedding {
            vectors: self.proj.forward(g, s, flat)?,
        })
    }
}

/// Per-scale 1x1 convs and a 2-layer audio MLP mapping both modalities to `C_av`.
#[derive(Clone, Debug)]
pub struct FeatureProjection {
    visual: [Conv1x1; 3],
    audio: (Linear, Linear),
}

impl FeatureProjection {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("project");
        let c = cfg.vis_channels;
        let visual = [
            Conv1x1::new(&mut b, "visual0", c[0], cfg.c_av)?,
            Conv1x1::new(&mut b, "visual1", c[1], cfg.c_av)?,
            Conv1x1::new(&mut b, "visual2", c[2], cfg.c_av)?,
        ];
        let audio = (
            Linear::new(&mut b, "audio0", cfg.c_a, cfg.c_av)?,
            Linear::new(&mut b, "audio1", cfg.c_av, cfg.c_av)?,
        );
        Ok(Self { visual, audio })
    }

    pub fn visual_convs(&self) -> &[Conv1x1; 3] {
        &self.visual
    }

    pub fn project(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        pyramid: VisualPyramid,
        audio: AudioEmbedding,
    ) -> Result<(VisualPyramid, AudioEmbedding)> {
        let mut scales = pyramid.scales;
        for (x, conv) in scales.iter_mut().zip(&self.visual) {
            *x = conv.forward(g, s, *x)?;
        }
        let h = self.audio.0.forward(g, s, audio.vectors)?;
        let h = g.gelu(h);
        let a = self.audio.1.forward(g, s, h)?;
        Ok((VisualPyramid { scales }, AudioEmbedding { vectors: a }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> (ParamStore, VisualEncoder, AudioEncoder, FeatureProjection) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = Builder::new(&mut store, &mut rng);
        let v = VisualEncoder::new(&mut b, cfg).unwrap();
        let a = AudioEncoder::new(&mut b, cfg).unwrap();
        let p = FeatureProjection::new(&mut b, cfg).unwrap();
        (store, v, a, p)
    }

    fn frames(t: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[t, 3, size, size], |i| ((i * 37 % 101) as f64) / 100.0)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let cfg = ModelConfig::default();
        let (store, enc, _, _) = setup(&cfg);
        let mut g = Graph::no_grad();
        let x = g.constant(frames(2, 64));
        let p = enc.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(p.scales[0]), &[2, 32, 16, 16]);
        assert_eq!(g.shape(p.scales[1]), &[2, 48, 8, 8]);
        assert_eq!(g.shape(p.scales[2]), &[2, 64, 4, 4]);
    }

    #[test]
    fn frames_are_encoded_independently() {
        let cfg = ModelConfig::default();
        let (store, enc, _, _) = setup(&cfg);
        let one = frames(1, 64);
        let mut two = Tensor::zeros(&[2, 3, 64, 64]);
        two.data_mut()[..one.len()].copy_from_slice(one.data());
        two.data_mut()[one.len()..].copy_from_slice(one.data());
        let mut g = Graph::no_grad();
        let a = g.constant(one);
        let b = g.constant(two);
        let pa = enc.encode(&mut g, &store, a).unwrap();
        let pb = enc.encode(&mut g, &store, b).unwrap();
        for l in 0..3 {
            let n = g.value(pa.scales[l]).len();
            assert_eq!(g.data(pa.scales[l]), &g.data(pb.scales[l])[..n]);
            assert_eq!(g.data(pa.scales[l]), &g.data(pb.scales[l])[n..]);
        }
    }

    #[test]
    fn zero_clip_gives_zero_pyramid() {
        let cfg = ModelConfig::default();
        let (store, enc, _, _) = setup(&cfg);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let p = enc.encode(&mut g, &store, x).unwrap();
        for l in p.scales {
            assert!(g.data(l).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_frames_rejected() {
        assert!(VideoClip::new(Tensor::zeros(&[1, 3, 40, 64])).is_err());
        let cfg = ModelConfig::default();
        let (store, enc, _, _) = setup(&cfg);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 3, 40, 64]));
        assert!(matches!(enc.encode(&mut g, &store, x), Err(Error::Contract(_))));
    }

    #[test]
    fn audio_shape_and_identical_rows() {
        let cfg = ModelConfig::default();
        let (store, _, enc, _) = setup(&cfg);
        let spec = Tensor::from_fn(&[2, 32, 32], |i| ((i % 1024) as f64 * 0.013).sin());
        let mut g = Graph::no_grad();
        let x = g.constant(spec);
        let e = enc.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(e.vectors), &[2, 32]);
        let d = g.data(e.vectors);
        assert_eq!(&d[..32], &d[32..]);
    }

    #[test]
    fn linear_audio_stack_is_time_shuffle_invariant() {
        let cfg = ModelConfig {
            audio_depth: 0,
            ..ModelConfig::default()
        };
        let (store, _, enc, _) = setup(&cfg);
        let spec = Tensor::from_fn(&[1, 32, 32], |i| ((i * 7919) % 97) as f64 / 97.0);
        // a fixed column permutation
        let perm: Vec<usize> = (0..32).map(|c| (c * 13 + 5) % 32).collect();
        let shuffled = Tensor::from_fn(&[1, 32, 32], |i| spec.data()[(i / 32) * 32 + perm[i % 32]]);
        let mut g = Graph::no_grad();
        let a = g.constant(spec);
        let b = g.constant(shuffled);
        let ea = enc.encode(&mut g, &store, a).unwrap();
        let eb = enc.encode(&mut g, &store, b).unwrap();
        let diff = g.value(ea.vectors).max_abs_diff(g.value(eb.vectors));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn projection_contracts() {
        let cfg = ModelConfig::default();
        let (mut store, venc, _, proj) = setup(&cfg);
        let mut g = Graph::no_grad();
        let x = g.constant(frames(2, 64));
        let p = venc.encode(&mut g, &store, x).unwrap();
        let zero_audio = g.constant(Tensor::zeros(&[2, cfg.c_a]));
        let (pv, pa) = proj
            .project(&mut g, &store, p, AudioEmbedding { vectors: zero_audio })
            .unwrap();
        for l in pv.scales {
            assert_eq!(g.shape(l)[1], 64);
        }
        assert_eq!(g.shape(pa.vectors), &[2, 64]);
        assert!(g.data(pa.vectors).iter().all(|&v| v == 0.0));

        // identity 1x1 conv on the scale whose width already equals C_av
        let w = proj.visual_convs()[2].weight;
        let eye = Tensor::from_fn(&[64, 64], |i| if i / 64 == i % 64 { 1.0 } else { 0.0 });
        *store.get_mut(w).tensor_mut() = eye;
        let mut g = Graph::no_grad();
        let x = g.constant(frames(2, 64));
        let p = venc.encode(&mut g, &store, x).unwrap();
        let a = g.constant(Tensor::zeros(&[2, cfg.c_a]));
        let (pv, _) = proj.project(&mut g, &store, p, AudioEmbedding { vectors: a }).unwrap();
        assert_eq!(g.data(pv.scales[2]), g.data(p.scales[2]));
    }
}
