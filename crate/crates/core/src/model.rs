//! The full network: encoders, fusion, transformer, mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{AudioClip, AudioEmbedding, AudioEncoder, FeatureProjection, VideoClip, VisualEncoder, VisualPyramid};
use crate::error::{Error, Result};
use crate::mask_head::{dynamic_convolve, KernelGenerator, KernelSet, MaskFeatures, MaskLogits, PixelDecoder, SoundingHead, SoundingScores};
use crate::nn::Builder;
use crate::numeric::{Graph, ParamStore, Tensor};
use crate::transformer::{AudioQueries, Avef, DecoderOutput, EncodedFeatures, FusedPyramid, MultiModalEncoder, QueryDecoder, QuerySet};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frame height and width `H0 = W0`.
    pub image_size: usize,
    /// Spectrogram frequency rows `H_a`.
    pub audio_bins: usize,
    /// Spectrogram time columns `W_a`.
    pub audio_steps: usize,
    pub c_a: usize,
    /// Fusion / transformer width; also the query width `D`.
    pub c_av: usize,
    pub vis_channels: [usize; 3],
    pub stem_channels: usize,
    pub audio_channels: usize,
    pub audio_depth: usize,
    pub n_q: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub ffn_dim: usize,
    pub c_m: usize,
    /// Initialize query content from audio; `false` is the audio-agnostic ablation.
    pub audio_queries: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            audio_bins: 32,
            audio_steps: 32,
            c_a: 32,
            c_av: 64,
            vis_channels: [32, 48, 64],
            stem_channels: 16,
            audio_channels: 16,
            audio_depth: 2,
            n_q: 4,
            heads: 4,
            n_enc: 2,
            n_dec: 2,
            ffn_dim: 128,
            c_m: 32,
            audio_queries: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.heads == 0 || !self.c_av.is_multiple_of(self.heads) {
            return bad(format!("c_av {} must be divisible by heads {}", self.c_av, self.heads));
        }
        if !(self.c_av / self.heads).is_multiple_of(2) || !self.c_av.is_multiple_of(4) {
            return bad(format!("c_av {} must allow an even 2-D sinusoid split", self.c_av));
        }
        if self.n_q == 0 {
            return bad("n_q must be at least 1".into());
        }
        let shrink = 1usize << self.audio_depth;
        if self.audio_bins == 0 || !self.audio_bins.is_multiple_of(shrink) || !self.audio_steps.is_multiple_of(shrink) {
            return bad(format!(
                "audio {}x{} must be divisible by 2^audio_depth = {shrink}",
                self.audio_bins, self.audio_steps
            ));
        }
        let dims = [self.c_a, self.c_av, self.stem_channels, self.audio_channels, self.ffn_dim, self.c_m];
        if dims.iter().chain(&self.vis_channels).any(|&d| d == 0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Mask-logit resolution `(H_m, W_m)`.
    pub fn mask_size(&self) -> (usize, usize) {
        (self.image_size / 4, self.image_size / 4)
    }

    /// Kernel width `D_s`.
    pub fn kernel_dim(&self) -> usize {
        self.c_m + 1
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub pyramid: VisualPyramid,
    pub audio: AudioEmbedding,
    pub projected: VisualPyramid,
    pub projected_audio: AudioEmbedding,
    pub fused: FusedPyramid,
    pub encoded: EncodedFeatures,
    pub queries: QuerySet,
    pub decoded: DecoderOutput,
    pub features: MaskFeatures,
    pub kernels: KernelSet,
    pub masks: MaskLogits,
    pub scores: SoundingScores,
}

/// Values of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[N_q, T, H_m, W_m]`
    pub logits: Tensor,
    /// `[T, N_q]`
    pub scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct AutrModel {
    cfg: ModelConfig,
    params: ParamStore,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub projection: FeatureProjection,
    pub avef: Avef,
    pub encoder: MultiModalEncoder,
    pub queries: AudioQueries,
    pub decoder: QueryDecoder,
    pub pixel: PixelDecoder,
    pub kernels: KernelGenerator,
    pub sounding: SoundingHead,
}

impl AutrModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let visual = VisualEncoder::new(&mut b, &cfg)?;
        let audio = AudioEncoder::new(&mut b, &cfg)?;
        let projection = FeatureProjection::new(&mut b, &cfg)?;
        let avef = Avef::new(&mut b, &cfg)?;
        let encoder = MultiModalEncoder::new(&mut b, &cfg)?;
        let queries = AudioQueries::new(&mut b, &cfg)?;
        let decoder = QueryDecoder::new(&mut b, &cfg)?;
        let pixel = PixelDecoder::new(&mut b, &cfg)?;
        let kernels = KernelGenerator::new(&mut b, &cfg)?;
        let sounding = SoundingHead::new(&mut b, &cfg)?;
        Ok(Self {
            cfg,
            params,
            visual,
            audio,
            projection,
            avef,
            encoder,
            queries,
            decoder,
            pixel,
            kernels,
            sounding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records a full forward pass of one clip into `g`.
    pub fn forward(&self, g: &mut Graph, video: &VideoClip, audio: &AudioClip) -> Result<Forward> {
        if video.num_frames() != audio.num_frames() {
            return Err(Error::contract(format!(
                "video has {} frames but audio has {}",
                video.num_frames(),
                audio.num_frames()
            )));
        }
        let s = &self.params;
        let frames = g.constant(video.frames().clone());
        let spec = g.constant(audio.spectrograms().clone());
        let pyramid = self.visual.encode(g, s, frames)?;
        let audio_emb = self.audio.encode(g, s, spec)?;
        let (projected, projected_audio) = self.projection.project(g, s, pyramid, audio_emb)?;
        let fused = self.avef.fuse(g, s, projected, projected_audio)?;
        let encoded = self.encoder.encode(g, s, fused)?;
        let queries = self.queries.make(g, s, projected_audio)?;
        let decoded = self.decoder.decode(g, s, queries, &encoded)?;
        let features = self.pixel.decode(g, s, pyramid, projected_audio, &encoded)?;
        let kernels = self.kernels.generate(g, s, decoded.embeddings)?;
        let masks = dynamic_convolve(g, features, kernels)?;
        let scores = self.sounding.score(g, s, decoded.embeddings)?;
        Ok(Forward {
            pyramid,
            audio: audio_emb,
            projected,
            projected_audio,
            fused,
            encoded,
            queries,
            decoded,
            features,
            kernels,
            masks,
            scores,
        })
    }

    pub fn predict(&self, video: &VideoClip, audio: &AudioClip) -> Result<Prediction> {
        let mut g = Graph::no_grad();
        let f = self.forward(&mut g, video, audio)?;
        Ok(Prediction {
            logits: g.value(f.masks.logits).clone(),
            scores: g.value(f.scores.scores).clone(),
        })
    }
}
