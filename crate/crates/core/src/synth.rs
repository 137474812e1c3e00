//! Synthetic audio-visual scenes: two coloured objects drift across the
//! frames, the spectrogram tells which of them is sounding, and the target
//! mask covers only the sounding one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::{AudioClip, VideoClip};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::numeric::Tensor;
use crate::objective::{Example, GroundTruth};

/// Channel value of a set colour bit.
pub const HIGH: f64 = 0.85;
pub const LOW: f64 = 0.15;
pub const BACKGROUND: f64 = 0.5;
/// Amplitude of the per-class identity stripe; the bit stripes use 1.
pub const IDENTITY_LEVEL: f64 = 0.5;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub audio_bins: usize,
    pub audio_steps: usize,
    pub frames: usize,
    pub num_classes: usize,
    /// Class pool of the train, val and test splits.
    pub train_classes: Vec<usize>,
    /// Disjoint class pool of the open-set split.
    pub open_set_classes: Vec<usize>,
    /// Sounding objects per scene: 1 or 2.
    pub sources: usize,
    pub noise_level: f64,
    /// Per-object colour channels are drawn within this distance of their
    /// class level.
    pub color_jitter: f64,
    /// Object half-extent range as a fraction of the image size.
    pub object_min: f64,
    pub object_max: f64,
    /// Largest per-frame displacement as a fraction of the image size.
    pub max_drift: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub open_set_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            image_size: 64,
            audio_bins: 32,
            audio_steps: 32,
            frames: 2,
            num_classes: 8,
            train_classes: (0..6).collect(),
            open_set_classes: vec![6, 7],
            sources: 1,
            noise_level: 0.05,
            color_jitter: 0.12,
            object_min: 0.15,
            object_max: 0.24,
            max_drift: 0.05,
            train_count: 512,
            val_count: 64,
            test_count: 64,
            open_set_count: 64,
        }
    }
}

/// Number of colour bits used to code a class.
fn class_bits(num_classes: usize) -> usize {
    (usize::BITS - (num_classes.max(2) - 1).leading_zeros()) as usize
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=8).contains(&self.num_classes) {
            return bad(format!("num_classes {} must lie in 2..=8", self.num_classes));
        }
        let rows = 4 * class_bits(self.num_classes) + 2 * self.num_classes;
        if self.audio_bins < rows {
            return bad(format!("audio_bins {} cannot hold the {rows} band rows", self.audio_bins));
        }
        if self.frames == 0 || self.image_size == 0 || self.audio_steps == 0 {
            return bad("frames, image_size and audio_steps must be positive".into());
        }
        if !(1..=2).contains(&self.sources) {
            return bad(format!("sources {} must be 1 or 2", self.sources));
        }
        for (name, pool) in [("train_classes", &self.train_classes), ("open_set_classes", &self.open_set_classes)] {
            if pool.len() < 2 || pool.iter().any(|&c| c >= self.num_classes) {
                return bad(format!("{name} {pool:?} needs at least two classes below {}", self.num_classes));
            }
        }
        if self.train_classes.iter().any(|c| self.open_set_classes.contains(c)) {
            return bad("train_classes and open_set_classes overlap".into());
        }
        if !(self.noise_level >= 0.0) {
            return bad(format!("noise_level {} must be >= 0", self.noise_level));
        }
        if !(0.0..0.3).contains(&self.color_jitter) {
            return bad(format!("color_jitter {} must lie in [0, 0.3)", self.color_jitter));
        }
        if !(0.0 < self.object_min && self.object_min <= self.object_max && self.object_max < 0.25) {
            return bad(format!("object extent range [{}, {}] must lie in (0, 0.25)", self.object_min, self.object_max));
        }
        if !(self.max_drift >= 0.0) {
            return bad(format!("max_drift {} must be >= 0", self.max_drift));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    OpenSet,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::OpenSet];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::OpenSet => "open_set",
        }
    }

    pub fn pool(self, cfg: &DataConfig) -> &[usize] {
        match self {
            Split::OpenSet => &cfg.open_set_classes,
            _ => &cfg.train_classes,
        }
    }

    pub fn count(self, cfg: &DataConfig) -> usize {
        match self {
            Split::Train => cfg.train_count,
            Split::Val => cfg.val_count,
            Split::Test => cfg.test_count,
            Split::OpenSet => cfg.open_set_count,
        }
    }

    /// First scene seed of the split; scene `i` uses `base + i`.
    pub fn seed_base(self, cfg: &DataConfig) -> u64 {
        let k = self as u64;
        cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k << 40)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Class of object slot 0 and slot 1.
    pub classes: [usize; 2],
    /// Sounding object slots.
    pub sounding: Vec<usize>,
    pub noise_level: f64,
}

impl SceneSpec {
    /// Draws two distinct classes from `pool` and the sounding slots.
    pub fn draw(seed: u64, pool: &[usize], sources: usize, noise_level: f64) -> Result<Self> {
        if pool.len() < 2 {
            return Err(Error::Generation(format!("class pool {pool:?} has fewer than two classes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        let sounding = if sources >= 2 {
            vec![0, 1]
        } else {
            vec![rng.random_range(0..2)]
        };
        Ok(Self {
            seed,
            classes: [pool[a], pool[b]],
            sounding,
            noise_level,
        })
    }

    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        if self.classes[0] == self.classes[1] || self.classes.iter().any(|&c| c >= cfg.num_classes) {
            return Err(Error::Generation(format!("invalid classes {:?}", self.classes)));
        }
        if self.sounding.is_empty() || self.sounding.iter().any(|&s| s > 1) {
            return Err(Error::Generation(format!("invalid sounding slots {:?}", self.sounding)));
        }
        Ok(())
    }

    pub fn sounding_classes(&self) -> Vec<usize> {
        self.sounding.iter().map(|&s| self.classes[s]).collect()
    }
}

/// Fill colour of a class: channel `b` is high when bit `b` is set.
pub fn class_color(class: usize) -> [f64; 3] {
    [0, 1, 2].map(|b| if class >> b & 1 == 1 { HIGH } else { LOW })
}

/// Noise-free spectrogram `[audio_bins, audio_steps]` of one class: for each
/// colour bit a stripe in its "on" or "off" rows, plus a class stripe.
pub fn band_pattern(class: usize, cfg: &DataConfig) -> Tensor {
    let bits = class_bits(cfg.num_classes);
    let mut rows = vec![0.0; cfg.audio_bins];
    for b in 0..bits {
        let base = 4 * b + if class >> b & 1 == 1 { 0 } else { 2 };
        rows[base] = 1.0;
        rows[base + 1] = 1.0;
    }
    let id = 4 * bits + 2 * class;
    rows[id] = IDENTITY_LEVEL;
    rows[id + 1] = IDENTITY_LEVEL;
    Tensor::from_fn(&[cfg.audio_bins, cfg.audio_steps], |i| rows[i / cfg.audio_steps])
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Object {
    shape: Shape,
    center: (f64, f64),
    half: (f64, f64),
    velocity: (f64, f64),
}

impl Object {
    fn center_at(&self, t: usize) -> (f64, f64) {
        (self.center.0 + self.velocity.0 * t as f64, self.center.1 + self.velocity.1 * t as f64)
    }

    fn contains(&self, t: usize, y: f64, x: f64) -> bool {
        let (cy, cx) = self.center_at(t);
        let (dy, dx) = ((y - cy) / self.half.0, (x - cx) / self.half.1);
        match self.shape {
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }

    /// Bounding boxes at frame `t` are at least `gap` apart on some axis.
    fn separated(&self, other: &Object, t: usize, gap: f64) -> bool {
        let (a, b) = (self.center_at(t), other.center_at(t));
        (a.0 - b.0).abs() >= self.half.0 + other.half.0 + gap || (a.1 - b.1).abs() >= self.half.1 + other.half.1 + gap
    }
}

fn place(rng: &mut ChaCha8Rng, cfg: &DataConfig) -> Option<Object> {
    let size = cfg.image_size as f64;
    let span = (cfg.frames - 1) as f64;
    let shape = if rng.random_bool(0.5) {
        Shape::Ellipse
    } else {
        Shape::Rectangle
    };
    let half = (
        rng.random_range(cfg.object_min..=cfg.object_max) * size,
        rng.random_range(cfg.object_min..=cfg.object_max) * size,
    );
    let drift = cfg.max_drift * size;
    let velocity = (rng.random_range(-drift..=drift), rng.random_range(-drift..=drift));
    let axis = |rng: &mut ChaCha8Rng, h: f64, v: f64| {
        let lo = h - (v * span).min(0.0);
        let hi = size - h - (v * span).max(0.0);
        (lo <= hi).then(|| rng.random_range(lo..=hi))
    };
    let cy = axis(rng, half.0, velocity.0)?;
    let cx = axis(rng, half.1, velocity.1)?;
    Some(Object {
        shape,
        center: (cy, cx),
        half,
        velocity,
    })
}

/// Generated clip with full ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub video: VideoClip,
    pub audio: AudioClip,
    pub gt: GroundTruth,
    /// `[T, H, W]` union of the silent objects.
    pub silent: Tensor,
}

impl SceneData {
    pub fn example(&self) -> Example<'_> {
        Example {
            video: &self.video,
            audio: &self.audio,
            gt: &self.gt,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("video", self.video.frames().clone())?;
        c.insert("audio", self.audio.spectrograms().clone())?;
        c.insert("gt", self.gt.mask().clone())?;
        let present = self.gt.sounding_present().iter().map(|&p| f64::from(u8::from(p))).collect();
        c.insert("sounding_present", Tensor::new(&[self.gt.num_frames()], present)?)?;
        c.insert("silent", self.silent.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let gt = c.require("gt")?.clone();
        let t = gt.shape()[0];
        let present = match c.get("sounding_present") {
            Some(p) => p.data().iter().map(|&v| v != 0.0).collect(),
            None => vec![true; t],
        };
        let silent = match c.get("silent") {
            Some(s) => s.clone(),
            None => Tensor::zeros(gt.shape()),
        };
        Ok(Self {
            video: VideoClip::new(c.require("video")?.clone())?,
            audio: AudioClip::new(c.require("audio")?.clone())?,
            gt: GroundTruth::new(gt, present)?,
            silent,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub data: SceneData,
}

pub fn generate_scene(spec: &SceneSpec, cfg: &DataConfig) -> Result<Scene> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F5C_E4E5_0001);
    let objects = (0..MAX_ATTEMPTS)
        .find_map(|_| {
            let a = place(&mut rng, cfg)?;
            let b = place(&mut rng, cfg)?;
            (0..cfg.frames).all(|t| a.separated(&b, t, 2.0)).then_some([a, b])
        })
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place two separate objects after {MAX_ATTEMPTS} attempts (seed {})",
                spec.seed
            ))
        })?;

    let (t_len, s) = (cfg.frames, cfg.image_size);
    let mut video = Tensor::full(&[t_len, 3, s, s], BACKGROUND);
    let mut gt = Tensor::zeros(&[t_len, s, s]);
    let mut silent = Tensor::zeros(&[t_len, s, s]);
    for (slot, obj) in objects.iter().enumerate() {
        let color = class_color(spec.classes[slot]).map(|v| {
            if cfg.color_jitter > 0.0 {
                v + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)
            } else {
                v
            }
        });
        let target = if spec.sounding.contains(&slot) {
            &mut gt
        } else {
            &mut silent
        };
        for t in 0..t_len {
            for y in 0..s {
                for x in 0..s {
                    if obj.contains(t, y as f64 + 0.5, x as f64 + 0.5) {
                        target.data_mut()[(t * s + y) * s + x] = 1.0;
                        for (c, &v) in color.iter().enumerate() {
                            video.data_mut()[((t * 3 + c) * s + y) * s + x] = v;
                        }
                    }
                }
            }
        }
    }

    let mut pattern = Tensor::zeros(&[cfg.audio_bins, cfg.audio_steps]);
    for class in spec.sounding_classes() {
        let p = band_pattern(class, cfg);
        pattern.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    let per_frame = pattern.len();
    let audio = Tensor::from_fn(&[t_len, cfg.audio_bins, cfg.audio_steps], |i| {
        let clean = pattern.data()[i % per_frame];
        if spec.noise_level > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            clean + spec.noise_level * n
        } else {
            clean
        }
    });

    Ok(Scene {
        spec: spec.clone(),
        data: SceneData {
            video: VideoClip::new(video)?,
            audio: AudioClip::new(audio)?,
            gt: GroundTruth::new(gt, vec![true; t_len])?,
            silent,
        },
    })
}

/// Scenes of one split, generated in memory.
pub fn generate_split(split: Split, cfg: &DataConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let base = split.seed_base(cfg);
    (0..split.count(cfg))
        .map(|i| {
            let spec = SceneSpec::draw(base.wrapping_add(i as u64), split.pool(cfg), cfg.sources, cfg.noise_level)?;
            generate_scene(&spec, cfg)
        })
        .collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn scene_file(id: usize) -> String {
    format!("scene_{id:05}.autr")
}

/// Writes `scenes` and their `manifest.txt` into `dir`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (id, scene) in scenes.iter().enumerate() {
        let file = scene_file(id);
        scene.data.to_container()?.write(&dir.join(&file))?;
        let _ = writeln!(
            manifest,
            "id={id} file={file} classes={} sounding={}",
            join(&scene.spec.classes),
            join(&scene.spec.sounding)
        );
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Generates every split under `root/<split name>/`.
pub fn write_all_splits(root: &Path, cfg: &DataConfig) -> Result<()> {
    for split in Split::ALL {
        write_dataset(&root.join(split.name()), &generate_split(split, cfg)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: usize,
    pub file: PathBuf,
    pub classes: Vec<usize>,
    pub sounding: Vec<usize>,
    pub data: SceneData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

fn parse_list(v: &str, line: usize) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {line}: bad number {x:?}")))
        })
        .collect()
}

impl Dataset {
    /// Reads `dir/manifest.txt` and every scene file it lists.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = n + 1;
            let (mut id, mut file, mut classes, mut sounding) = (None, None, None, None);
            for field in line.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("manifest line {line_no}: field {field:?} lacks '='")))?;
                match k {
                    "id" => {
                        id = Some(
                            v.parse()
                                .map_err(|_| Error::Config(format!("manifest line {line_no}: bad id {v:?}")))?,
                        )
                    }
                    "file" => file = Some(dir.join(v)),
                    "classes" => classes = Some(parse_list(v, line_no)?),
                    "sounding" => sounding = Some(parse_list(v, line_no)?),
                    _ => return Err(Error::Config(format!("manifest line {line_no}: unknown field {k:?}"))),
                }
            }
            let missing = || Error::Config(format!("manifest line {line_no} is missing a field"));
            let (Some(id), Some(file), Some(classes), Some(sounding)) = (id, file, classes, sounding) else {
                return Err(missing());
            };
            let data = SceneData::from_container(&Container::read(&file)?)?;
            items.push(DatasetItem {
                id,
                file,
                classes,
                sounding,
                data,
            });
        }
        Ok(Self { items })
    }

    pub fn from_scenes(scenes: Vec<Scene>) -> Self {
        let items = scenes
            .into_iter()
            .enumerate()
            .map(|(id, s)| DatasetItem {
                id,
                file: PathBuf::from(scene_file(id)),
                classes: s.spec.classes.to_vec(),
                sounding: s.spec.sounding,
                data: s.data,
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.items.iter().map(|it| it.data.example()).collect()
    }
}

/// Nearest noise-free pattern among all single classes and class pairs.
/// Returns the sorted class set.
pub fn classify_audio(audio: &Tensor, cfg: &DataConfig) -> Vec<usize> {
    let per_frame = cfg.audio_bins * cfg.audio_steps;
    let frames = audio.len() / per_frame;
    let mean = Tensor::from_fn(&[cfg.audio_bins, cfg.audio_steps], |i| {
        (0..frames).map(|f| audio.data()[f * per_frame + i]).sum::<f64>() / frames as f64
    });
    let patterns: Vec<Tensor> = (0..cfg.num_classes).map(|c| band_pattern(c, cfg)).collect();
    let mut candidates: Vec<Vec<usize>> = (0..cfg.num_classes).map(|c| vec![c]).collect();
    for a in 0..cfg.num_classes {
        for b in a + 1..cfg.num_classes {
            candidates.push(vec![a, b]);
        }
    }
    let dist = |set: &[usize]| -> f64 {
        (0..per_frame)
            .map(|i| {
                let p: f64 = set.iter().map(|&c| patterns[c].data()[i]).sum();
                (mean.data()[i] - p).powi(2)
            })
            .sum()
    };
    candidates
        .into_iter()
        .map(|c| (dist(&c), c))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
        .unwrap_or_default()
}
