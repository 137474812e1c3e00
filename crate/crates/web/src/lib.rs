//! Browser bindings: render synthetic scenes, sweep mask costs, and train a
//! small model in the page.

use wasm_bindgen::prelude::*;

use autr::metrics::{iou, select_masks};
use autr::numeric::{AdamW, Tensor};
use autr::objective::{batch_step, dice_cost, focal_cost, CostWeights, TrainOptions};
use autr::synth::{generate_scene, DataConfig, Scene, SceneSpec};
use autr::{AutrModel, ModelConfig};

const SIZE: usize = 32;

fn data_config() -> DataConfig {
    DataConfig {
        image_size: SIZE,
        audio_bins: 32,
        audio_steps: 8,
        frames: 1,
        num_classes: 6,
        train_classes: (0..4).collect(),
        open_set_classes: vec![4, 5],
        ..DataConfig::default()
    }
}

fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: SIZE,
        audio_bins: 32,
        audio_steps: 8,
        c_a: 16,
        c_av: 16,
        vis_channels: [8, 12, 16],
        stem_channels: 8,
        audio_channels: 8,
        audio_depth: 2,
        n_q: 3,
        heads: 2,
        n_enc: 1,
        n_dec: 1,
        ffn_dim: 32,
        c_m: 8,
        audio_queries: true,
        init_seed: seed,
    }
}

fn err(e: autr::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn build_scene(seed: u64, sounding_slot: usize, noise: f64) -> Result<Scene, JsError> {
    let cfg = data_config();
    let drawn = SceneSpec::draw(seed, &cfg.train_classes, 1, noise).map_err(err)?;
    let spec = SceneSpec {
        sounding: vec![sounding_slot.min(1)],
        ..drawn
    };
    generate_scene(&spec, &cfg).map_err(err)
}

fn gray_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    values
        .iter()
        .flat_map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// One rendered scene, first frame only.
#[wasm_bindgen]
pub struct SceneView {
    image: Vec<u8>,
    truth: Vec<u8>,
    spectrogram: Vec<u8>,
    spec_width: usize,
    spec_height: usize,
    classes: Vec<u32>,
    sounding: u32,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, sounding_slot: usize, noise: f64) -> Result<SceneView, JsError> {
        let scene = build_scene(seed, sounding_slot, noise)?;
        let frames = scene.data.video.frames().index0(0);
        let n = SIZE * SIZE;
        let image = (0..n)
            .flat_map(|p| {
                let c = |k: usize| (frames.data()[k * n + p] * 255.0).round() as u8;
                [c(0), c(1), c(2), 255]
            })
            .collect();
        let audio = scene.data.audio.spectrograms().index0(0);
        let (hi, lo) = audio
            .data()
            .iter()
            .fold((f64::MIN, f64::MAX), |(h, l), &v| (h.max(v), l.min(v)));
        let cfg = data_config();
        Ok(SceneView {
            image,
            truth: gray_rgba(scene.data.gt.mask().index0(0).data(), 0.0, 1.0),
            spectrogram: gray_rgba(audio.data(), lo, hi),
            spec_width: cfg.audio_steps,
            spec_height: cfg.audio_bins,
            classes: scene.spec.classes.iter().map(|&c| c as u32).collect(),
            sounding: scene.spec.sounding[0] as u32,
        })
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        self.truth.clone()
    }

    pub fn spectrogram_rgba(&self) -> Vec<u8> {
        self.spectrogram.clone()
    }

    pub fn spectrogram_width(&self) -> usize {
        self.spec_width
    }

    pub fn spectrogram_height(&self) -> usize {
        self.spec_height
    }

    pub fn classes(&self) -> Vec<u32> {
        self.classes.clone()
    }

    pub fn sounding_slot(&self) -> u32 {
        self.sounding
    }
}

/// Dice, focal and IoU of a prediction made by shifting the scene's target
/// mask right by `0..=max_shift` pixels, with logits of `±sharpness`.
/// Returns rows of `[shift, dice, focal, weighted, iou]`.
#[wasm_bindgen]
pub fn cost_curve(seed: u64, sharpness: f64, max_shift: usize) -> Result<Vec<f64>, JsError> {
    let scene = build_scene(seed, 0, 0.0)?;
    let gt = scene.data.gt.mask().index0(0);
    let w = CostWeights::default();
    let mut rows = Vec::with_capacity(5 * (max_shift + 1));
    for shift in 0..=max_shift {
        let moved = Tensor::from_fn(&[SIZE, SIZE], |i| {
            let (y, x) = (i / SIZE, i % SIZE);
            if x >= shift {
                gt.data()[y * SIZE + x - shift]
            } else {
                0.0
            }
        });
        let logits = Tensor::from_fn(&[SIZE, SIZE], |i| if moved.data()[i] > 0.5 { sharpness } else { -sharpness });
        let dice = dice_cost(&logits, &gt, w.dice_eps).map_err(err)?;
        let focal = focal_cost(&logits, &gt, w.focal_gamma, w.focal_alpha).map_err(err)?;
        rows.extend([
            shift as f64,
            dice,
            focal,
            w.lambda_dice * dice + w.lambda_focal * focal,
            iou(&moved, &gt).map_err(err)?,
        ]);
    }
    Ok(rows)
}

/// A small model trained in the page on a fixed pool of scenes.
#[wasm_bindgen]
pub struct Trainer {
    model: AutrModel,
    optimizer: AdamW,
    scenes: Vec<Scene>,
    cursor: usize,
    steps: usize,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, pool_size: usize) -> Result<Trainer, JsError> {
        let scenes = (0..pool_size.max(1) as u64)
            .map(|i| build_scene(seed.wrapping_mul(1000).wrapping_add(i), (i % 2) as usize, 0.05))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trainer {
            model: AutrModel::new(model_config(seed)).map_err(err)?,
            optimizer: AdamW::new(2e-3, 0.0),
            scenes,
            cursor: 0,
            steps: 0,
        })
    }

    /// Runs `updates` batches of 4 scenes; returns the mean matched cost.
    pub fn train(&mut self, updates: usize) -> Result<f64, JsError> {
        let opts = TrainOptions {
            negative_supervision: true,
            ..TrainOptions::default()
        };
        let (mut total, mut count) = (0.0, 0);
        for _ in 0..updates {
            let batch: Vec<_> = (0..4)
                .map(|k| self.scenes[(self.cursor + k) % self.scenes.len()].data.example())
                .collect();
            self.cursor = (self.cursor + 4) % self.scenes.len();
            let losses = batch_step(&mut self.model, &mut self.optimizer, &batch, &opts).map_err(err)?;
            total += losses.iter().map(|l| l.loss).sum::<f64>();
            count += losses.len();
            self.steps += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Mask, sounding probability and IoU on a scene outside the pool.
    pub fn predict(&mut self, seed: u64, sounding_slot: usize) -> Result<Prediction, JsError> {
        let scene = build_scene(seed, sounding_slot, 0.05)?;
        let pred = self.model.predict(&scene.data.video, &scene.data.audio).map_err(err)?;
        let sel = select_masks(&pred, SIZE, SIZE).map_err(err)?;
        let prob = sel.mask_prob.index0(0);
        let binary = Tensor::from_fn(prob.shape(), |i| f64::from(u8::from(prob.data()[i] >= 0.5)));
        Ok(Prediction {
            mask: gray_rgba(prob.data(), 0.0, 1.0),
            sounding: sel.sounding_prob.data()[0],
            iou: iou(&binary, &scene.data.gt.mask().index0(0)).map_err(err)?,
        })
    }
}

#[wasm_bindgen]
pub struct Prediction {
    mask: Vec<u8>,
    sounding: f64,
    iou: f64,
}

#[wasm_bindgen]
impl Prediction {
    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask.clone()
    }

    pub fn sounding_prob(&self) -> f64 {
        self.sounding
    }

    pub fn iou(&self) -> f64 {
        self.iou
    }
}
