//! Trains on a synthetic split and prints held-out metrics after every epoch.
//!
//! Usage: `pilot [epochs] [lr] [train_count] [sources] [batch_size] [lr_schedule] [object_min] [object_max]`

use std::time::Instant;

use autr::metrics::{evaluate, select_masks, MetricConfig};
use autr::objective::TrainOptions;
use autr::synth::{generate_split, DataConfig, Dataset, Split};
use autr::train::{fit, TrainConfig};
use autr::{AutrModel, ModelConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> autr::Result<()> {
    let data = DataConfig {
        train_count: arg(3, 512),
        sources: arg(4, 1),
        object_min: arg(7, 0.15),
        object_max: arg(8, 0.24),
        ..DataConfig::default()
    };
    let train = Dataset::from_scenes(generate_split(Split::Train, &data)?);
    let test = Dataset::from_scenes(generate_split(Split::Test, &data)?);
    let mut model = AutrModel::new(ModelConfig::default())?;
    let cfg = TrainConfig {
        epochs: 1,
        lr: arg(2, 1e-3),
        batch_size: arg(5, 8),
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        negative_supervision: true,
        ..TrainOptions::default()
    };
    let metric = MetricConfig::default();
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: arg(1, 10),
        lr_schedule: autr::train::LrSchedule::parse(&arg(6, "constant".to_string()))?,
        ..cfg
    };
    let test_examples = test.examples();
    fit(&mut model, &train.examples(), &cfg, &opts, |stats, model| {
        let eval = evaluate(model, &test_examples, &metric)?;
        let (mut silent_sum, mut silent_px) = (0.0, 0usize);
        for it in &test.items {
            let pred = model.predict(&it.data.video, &it.data.audio)?;
            let (h, w) = it.data.video.size();
            let sel = select_masks(&pred, h, w)?;
            for (p, s) in sel.mask_prob.data().iter().zip(it.data.silent.data()) {
                if *s > 0.5 {
                    silent_sum += p;
                    silent_px += 1;
                }
            }
        }
        let misses = eval.per_frame.iter().filter(|f| f.iou < 0.5).count();
        let hits: Vec<f64> = eval.per_frame.iter().filter(|f| f.iou >= 0.5).map(|f| f.iou).collect();
        println!(
            "epoch {} loss {:.4} m_j {:.2} m_f {:.3} silent {:.3} misses {misses} hit_iou {:.3} t {:.0}s",
            stats.epoch,
            stats.mean_loss,
            eval.m_j,
            eval.m_f,
            silent_sum / silent_px.max(1) as f64,
            hits.iter().sum::<f64>() / hits.len().max(1) as f64,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
