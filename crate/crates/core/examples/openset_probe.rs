//! Where does a single-source model put its mask on seen vs unseen classes?
//!
//! Usage: `openset_probe <checkpoint> [epochs] [train_classes] [open_set_classes]`
//! (trains and saves when the checkpoint is missing).

use std::path::PathBuf;

use autr::encoders::AudioClip;
use autr::io::{load_checkpoint, save_checkpoint};
use autr::metrics::{evaluate, select_masks, MetricConfig};
use autr::objective::TrainOptions;
use autr::synth::{generate_split, DataConfig, Dataset, Split};
use autr::train::{fit, LrSchedule, TrainConfig};
use autr::{AutrModel, ModelConfig};

fn main() -> autr::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = PathBuf::from(&args[1]);
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let pool = |i: usize, default: Vec<usize>| {
        args.get(i)
            .map(|s| s.split(',').map(|c| c.parse().unwrap()).collect())
            .unwrap_or(default)
    };
    let data = DataConfig {
        train_classes: pool(3, (0..6).collect()),
        open_set_classes: pool(4, vec![6, 7]),
        color_jitter: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.12),
        ..DataConfig::default()
    };
    let model = if ckpt.exists() {
        load_checkpoint(&ckpt, &ModelConfig::default())?
    } else {
        let train = Dataset::from_scenes(generate_split(Split::Train, &data)?);
        let mut model = AutrModel::new(ModelConfig::default())?;
        let cfg = TrainConfig {
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            epochs,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            negative_supervision: true,
            ..TrainOptions::default()
        };
        fit(&mut model, &train.examples(), &cfg, &opts, |s, _| {
            eprintln!("epoch {} loss {:.4}", s.epoch, s.mean_loss);
            Ok(())
        })?;
        save_checkpoint(&model, &ckpt)?;
        model
    };
    let bits = ((data.num_classes - 1).ilog2() + 1) as usize;
    for split in [Split::Test, Split::OpenSet] {
        let set = generate_split(split, &data)?;
        let ds = Dataset::from_scenes(set.clone());
        let r = evaluate(&model, &ds.examples(), &MetricConfig::default())?;
        let mut by_class = std::collections::BTreeMap::<usize, (f64, usize)>::new();
        for (item, frames) in ds.items.iter().zip(r.per_frame.chunks(data.frames)) {
            let c = item.classes[item.sounding[0]];
            let e = by_class.entry(c).or_default();
            e.0 += frames.iter().map(|f| f.iou).sum::<f64>();
            e.1 += frames.len();
        }
        let per: Vec<String> = by_class.iter().map(|(c, (s, n))| format!("{c}:{:.1}", 100.0 * s / *n as f64)).collect();
        println!("{:>8} m_j {:.2} per sounding class {}", split.name(), r.m_j, per.join(" "));
        for strip_identity in [false, true] {
            let (mut area, mut on_gt, mut on_silent, mut maxp, mut score, mut frames) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for scene in &set {
                let d = &scene.data;
                let mut audio = d.audio.spectrograms().clone();
                if strip_identity {
                    let (f, s) = (audio.shape()[1], audio.shape()[2]);
                    let t = audio.shape()[0];
                    for ti in 0..t {
                        for r in 4 * bits..f {
                            for c in 0..s {
                                audio.data_mut()[(ti * f + r) * s + c] = 0.0;
                            }
                        }
                    }
                }
                let audio = AudioClip::new(audio)?;
                let pred = model.predict(&d.video, &audio)?;
                let (h, w) = d.video.size();
                let sel = select_masks(&pred, h, w)?;
                let px = h * w;
                for t in 0..d.gt.num_frames() {
                    let p = &sel.mask_prob.data()[t * px..][..px];
                    let g = &d.gt.mask().data()[t * px..][..px];
                    let sl = &d.silent.data()[t * px..][..px];
                    let fg: Vec<bool> = p.iter().map(|&v| v > 0.5).collect();
                    let n = fg.iter().filter(|&&b| b).count() as f64;
                    area += n / px as f64;
                    on_gt += fg.iter().zip(g).filter(|(b, &v)| **b && v > 0.5).count() as f64 / g.iter().sum::<f64>();
                    on_silent += fg.iter().zip(sl).filter(|(b, &v)| **b && v > 0.5).count() as f64 / sl.iter().sum::<f64>().max(1.0);
                    maxp += p.iter().cloned().fold(0.0, f64::max);
                    score += sel.sounding_prob.data()[t];
                    frames += 1.0;
                }
            }
            println!(
                "{:>8} strip_id={strip_identity:<5} pred_area {:.3} gt_recall {:.3} silent_cover {:.3} max_p {:.3} sound_p {:.3}",
                split.name(),
                area / frames,
                on_gt / frames,
                on_silent / frames,
                maxp / frames,
                score / frames
            );
        }
    }
    Ok(())
}
