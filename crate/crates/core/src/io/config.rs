//! Flat `key=value` configuration covering every tunable of the system.
//!
//! Blank lines and text after `#` are ignored. Unknown and repeated keys are
//! rejected; keys that are absent keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::objective::TrainOptions;
use crate::synth::DataConfig;
use crate::train::{LrSchedule, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("image_size", "frame height and width in pixels"),
    ("audio_bins", "spectrogram frequency rows"),
    ("audio_steps", "spectrogram time columns"),
    ("c_a", "audio embedding width"),
    ("c_av", "fusion and transformer width"),
    ("vis_channels", "visual pyramid widths, three comma-separated values"),
    ("stem_channels", "visual stem width"),
    ("audio_channels", "audio conv width"),
    ("audio_depth", "audio conv blocks"),
    ("n_q", "number of queries"),
    ("heads", "attention heads"),
    ("n_enc", "encoder layers"),
    ("n_dec", "decoder layers"),
    ("ffn_dim", "feed-forward hidden width"),
    ("c_m", "mask feature width"),
    ("audio_queries", "initialize query content from audio (true/false)"),
    ("init_seed", "parameter initialization seed"),
    ("lambda_dice", "dice cost weight"),
    ("lambda_focal", "focal cost weight"),
    ("lambda_sound", "sounding cost weight"),
    ("focal_gamma", "focal focusing exponent"),
    ("focal_alpha", "focal positive-class weight"),
    ("dice_eps", "dice smoothing constant"),
    ("negative_supervision", "push unmatched sounding scores to silent (true/false)"),
    ("grad_clip", "global gradient norm limit, or none"),
    ("lr", "initial AdamW learning rate"),
    ("lr_schedule", "constant or cosine decay to zero over the run"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("epochs", "training epochs"),
    ("batch_size", "examples per update"),
    ("shuffle_seed", "example order seed"),
    ("data_seed", "scene generation seed"),
    ("frames", "frames per clip"),
    ("num_classes", "object classes"),
    ("train_classes", "class pool of train/val/test, comma-separated"),
    ("open_set_classes", "class pool of the open-set split, comma-separated"),
    ("sources", "sounding objects per scene, 1 or 2"),
    ("noise_level", "spectrogram noise standard deviation"),
    ("color_jitter", "largest per-object deviation of a colour channel from its class level"),
    ("object_min", "smallest object half-extent as a fraction of image size"),
    ("object_max", "largest object half-extent as a fraction of image size"),
    ("max_drift", "largest per-frame displacement as a fraction of image size"),
    ("train_count", "scenes in the train split"),
    ("val_count", "scenes in the val split"),
    ("test_count", "scenes in the test split"),
    ("open_set_count", "scenes in the open-set split"),
    ("beta_sq", "F-measure beta squared"),
    ("threshold", "mask probability threshold"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub objective: TrainOptions,
    pub train: TrainConfig,
    /// `image_size`, `audio_bins` and `audio_steps` mirror `model`.
    pub data: DataConfig,
    pub metrics: MetricConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.objective;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "image_size" => {
                m.image_size = parse(key, v)?;
                d.image_size = m.image_size;
            }
            "audio_bins" => {
                m.audio_bins = parse(key, v)?;
                d.audio_bins = m.audio_bins;
            }
            "audio_steps" => {
                m.audio_steps = parse(key, v)?;
                d.audio_steps = m.audio_steps;
            }
            "c_a" => m.c_a = parse(key, v)?,
            "c_av" => m.c_av = parse(key, v)?,
            "vis_channels" => {
                let list = parse_list(key, v)?;
                m.vis_channels = list
                    .try_into()
                    .map_err(|_| Error::Config(format!("vis_channels needs three values, got {v:?}")))?;
            }
            "stem_channels" => m.stem_channels = parse(key, v)?,
            "audio_channels" => m.audio_channels = parse(key, v)?,
            "audio_depth" => m.audio_depth = parse(key, v)?,
            "n_q" => m.n_q = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "n_enc" => m.n_enc = parse(key, v)?,
            "n_dec" => m.n_dec = parse(key, v)?,
            "ffn_dim" => m.ffn_dim = parse(key, v)?,
            "c_m" => m.c_m = parse(key, v)?,
            "audio_queries" => m.audio_queries = parse(key, v)?,
            "init_seed" => m.init_seed = parse(key, v)?,
            "lambda_dice" => o.weights.lambda_dice = parse(key, v)?,
            "lambda_focal" => o.weights.lambda_focal = parse(key, v)?,
            "lambda_sound" => o.weights.lambda_sound = parse(key, v)?,
            "focal_gamma" => o.weights.focal_gamma = parse(key, v)?,
            "focal_alpha" => o.weights.focal_alpha = parse(key, v)?,
            "dice_eps" => o.weights.dice_eps = parse(key, v)?,
            "negative_supervision" => o.negative_supervision = parse(key, v)?,
            "grad_clip" => {
                o.grad_clip = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "lr" => t.lr = parse(key, v)?,
            "lr_schedule" => t.lr_schedule = LrSchedule::parse(v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "shuffle_seed" => t.shuffle_seed = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "frames" => d.frames = parse(key, v)?,
            "num_classes" => d.num_classes = parse(key, v)?,
            "train_classes" => d.train_classes = parse_list(key, v)?,
            "open_set_classes" => d.open_set_classes = parse_list(key, v)?,
            "sources" => d.sources = parse(key, v)?,
            "noise_level" => d.noise_level = parse(key, v)?,
            "color_jitter" => d.color_jitter = parse(key, v)?,
            "object_min" => d.object_min = parse(key, v)?,
            "object_max" => d.object_max = parse(key, v)?,
            "max_drift" => d.max_drift = parse(key, v)?,
            "train_count" => d.train_count = parse(key, v)?,
            "val_count" => d.val_count = parse(key, v)?,
            "test_count" => d.test_count = parse(key, v)?,
            "open_set_count" => d.open_set_count = parse(key, v)?,
            "beta_sq" => self.metrics.beta_sq = parse(key, v)?,
            "threshold" => self.metrics.threshold = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, o, t, d) = (&self.model, &self.objective, &self.train, &self.data);
        let w = &o.weights;
        vec![
            ("image_size", m.image_size.to_string()),
            ("audio_bins", m.audio_bins.to_string()),
            ("audio_steps", m.audio_steps.to_string()),
            ("c_a", m.c_a.to_string()),
            ("c_av", m.c_av.to_string()),
            ("vis_channels", join(&m.vis_channels)),
            ("stem_channels", m.stem_channels.to_string()),
            ("audio_channels", m.audio_channels.to_string()),
            ("audio_depth", m.audio_depth.to_string()),
            ("n_q", m.n_q.to_string()),
            ("heads", m.heads.to_string()),
            ("n_enc", m.n_enc.to_string()),
            ("n_dec", m.n_dec.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("c_m", m.c_m.to_string()),
            ("audio_queries", m.audio_queries.to_string()),
            ("init_seed", m.init_seed.to_string()),
            ("lambda_dice", w.lambda_dice.to_string()),
            ("lambda_focal", w.lambda_focal.to_string()),
            ("lambda_sound", w.lambda_sound.to_string()),
            ("focal_gamma", w.focal_gamma.to_string()),
            ("focal_alpha", w.focal_alpha.to_string()),
            ("dice_eps", w.dice_eps.to_string()),
            ("negative_supervision", o.negative_supervision.to_string()),
            ("grad_clip", o.grad_clip.map_or("none".into(), |c| c.to_string())),
            ("lr", t.lr.to_string()),
            ("lr_schedule", t.lr_schedule.name().to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("shuffle_seed", t.shuffle_seed.to_string()),
            ("data_seed", d.seed.to_string()),
            ("frames", d.frames.to_string()),
            ("num_classes", d.num_classes.to_string()),
            ("train_classes", join(&d.train_classes)),
            ("open_set_classes", join(&d.open_set_classes)),
            ("sources", d.sources.to_string()),
            ("noise_level", d.noise_level.to_string()),
            ("color_jitter", d.color_jitter.to_string()),
            ("object_min", d.object_min.to_string()),
            ("object_max", d.object_max.to_string()),
            ("max_drift", d.max_drift.to_string()),
            ("train_count", d.train_count.to_string()),
            ("val_count", d.val_count.to_string()),
            ("test_count", d.test_count.to_string()),
            ("open_set_count", d.open_set_count.to_string()),
            ("beta_sq", self.metrics.beta_sq.to_string()),
            ("threshold", self.metrics.threshold.to_string()),
        ]
    }

    /// Text that `parse` maps back to `self`.
    pub fn print(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.weights.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let (m, d) = (&self.model, &self.data);
        if (m.image_size, m.audio_bins, m.audio_steps) != (d.image_size, d.audio_bins, d.audio_steps) {
            return Err(Error::Config("model and data disagree on clip dimensions".into()));
        }
        if let Some(c) = self.objective.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        let mc = &self.metrics;
        if !(mc.beta_sq > 0.0) || !(0.0..=1.0).contains(&mc.threshold) {
            return Err(Error::Config(format!(
                "beta_sq {} must be positive and threshold {} in [0, 1]",
                mc.beta_sq, mc.threshold
            )));
        }
        Ok(())
    }
}
