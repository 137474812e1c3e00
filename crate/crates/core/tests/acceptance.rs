//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit status if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use autr::encoders::{AudioClip, AudioEmbedding, VideoClip, VisualPyramid};
use autr::io::{load_checkpoint, save_checkpoint};
use autr::metrics::{evaluate, select_masks, EvalResult, MetricConfig};
use autr::numeric::{Graph, Tensor, Var};
use autr::objective::{dice_cost, focal_cost, match_query, sounding_cost, CostReport, TrainOptions};
use autr::synth::{generate_split, write_all_splits, DataConfig, Dataset, Split};
use autr::train::{fit, LrSchedule, TrainConfig};
use autr::transformer::{EncodedFeatures, ScaleSpan};
use autr::{AutrModel, ModelConfig};
use common::{bce_ref, dice_ref, focal_ref, gradcheck, op_cases, rng, uniform};
use rand::Rng;

/// Epochs of the single-source recipe shared by the audio-awareness and
/// ablation runs.
const S4_EPOCHS: usize = 6;
/// From-scratch multi-source epochs; fine-tuning gets half.
const MS3_EPOCHS: usize = 8;
const MS3_TRAIN: usize = 256;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        lr_schedule: LrSchedule::Cosine,
        epochs,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn train_options() -> TrainOptions {
    TrainOptions {
        negative_supervision: true,
        ..TrainOptions::default()
    }
}

fn train(model: &mut AutrModel, data: &Dataset, epochs: usize) -> autr::Result<()> {
    fit(model, &data.examples(), &train_config(epochs), &train_options(), |s, _| {
        eprintln!("    epoch {} loss {:.4}", s.epoch, s.mean_loss);
        Ok(())
    })?;
    Ok(())
}

fn eval(model: &AutrModel, data: &Dataset) -> autr::Result<EvalResult> {
    evaluate(model, &data.examples(), &MetricConfig::default())
}

/// Mean selected-mask probability over every pixel of the silent object.
fn silent_probability(model: &AutrModel, data: &Dataset) -> autr::Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for item in &data.items {
        let pred = model.predict(&item.data.video, &item.data.audio)?;
        let (h, w) = item.data.video.size();
        let sel = select_masks(&pred, h, w)?;
        for (p, s) in sel.mask_prob.data().iter().zip(item.data.silent.data()) {
            if *s > 0.5 {
                sum += p;
                count += 1;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// m_j of predicting the whole frame: per-frame IoU is the object's area ratio.
fn full_mask_baseline(data: &Dataset) -> f64 {
    let mut ious = Vec::new();
    for item in &data.items {
        let gt = item.data.gt.mask();
        let (f, px) = (gt.shape()[0], gt.shape()[1] * gt.shape()[2]);
        for t in 0..f {
            let area: f64 = gt.data()[t * px..][..px].iter().sum();
            ious.push(area / px as f64);
        }
    }
    100.0 * ious.iter().sum::<f64>() / ious.len() as f64
}

fn load_split(split: Split, cfg: &DataConfig) -> autr::Result<Dataset> {
    Ok(Dataset::from_scenes(generate_split(split, cfg)?))
}

fn within(start: Instant, limit_secs: f64) -> std::result::Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if secs > limit_secs {
        Err(format!("took {secs:.0}s, limit {limit_secs:.0}s"))
    } else {
        Ok(secs)
    }
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut worst_op = (String::new(), 0.0f64);
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut r = rng(1000 + i as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut r, s, -2.0, 2.0)).collect();
        let err = gradcheck(&inputs, |g: &mut Graph, v: &[Var]| f(g, v));
        ensure!(err < 1e-4, "op {name}: relative error {err:.2e}");
        if err > worst_op.1 {
            worst_op = (name.to_string(), err);
        }
    }
    let cfg = common::tiny_config();
    let mut model = AutrModel::new(cfg.clone()).map_err(|e| e.to_string())?;
    common::open_zero_init(&mut model, 4);
    let sample = common::random_sample(&cfg, 2, 5);
    let grads = common::training_loss_gradients(&model, &sample, &train_options());
    let (a, n): (Vec<f64>, Vec<f64>) = grads
        .iter()
        .flat_map(|(_, a, n)| a.iter().copied().zip(n.iter().copied()))
        .unzip();
    let total = common::rel_error(&a, &n);
    ensure!(total < 1e-3, "end-to-end loss: relative error {total:.2e}");
    let secs = within(start, 120.0)?;
    Ok(format!(
        "worst op {} {:.1e}, end-to-end {total:.1e}, {secs:.0}s",
        worst_op.0, worst_op.1
    ))
}

fn random_clip(frames: usize, seed: u64) -> (VideoClip, AudioClip) {
    let mut r = rng(seed);
    let v = uniform(&mut r, &[frames, 3, 64, 64], 0.0, 1.0);
    let a = uniform(&mut r, &[frames, 32, 32], 0.0, 1.0);
    (VideoClip::new(v).unwrap(), AudioClip::new(a).unwrap())
}

fn structure() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let (n_q, d) = (cfg.n_q, cfg.c_av);
    let model = AutrModel::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (v, a) = random_clip(2, 1);
    let mut g = Graph::no_grad();
    let f = model.forward(&mut g, &v, &a).map_err(|e| e.to_string())?;

    let (mh, mw) = cfg.mask_size();
    ensure!(g.shape(f.masks.logits) == [n_q, 2, mh, mw], "mask shape {:?}", g.shape(f.masks.logits));

    let audio = g.value(f.projected_audio.vectors).clone();
    let content = g.value(f.queries.content).clone();
    for t in 0..2 {
        for i in 0..n_q {
            ensure!(
                content.data()[(t * n_q + i) * d..][..d] == audio.data()[t * d..][..d],
                "query {i} content differs from frame {t} audio"
            );
        }
    }

    let perm: Vec<usize> = (0..n_q).rev().collect();
    let mut permuted = model.clone();
    let id = permuted.queries.pos_param();
    let orig = model.params().get(id).tensor().clone();
    let dst = permuted.params_mut().get_mut(id).tensor_mut().data_mut();
    for (new_row, &old_row) in perm.iter().enumerate() {
        dst[new_row * d..][..d].copy_from_slice(&orig.data()[old_row * d..][..d]);
    }
    let mut gp = Graph::no_grad();
    let fp = permuted.forward(&mut gp, &v, &a).map_err(|e| e.to_string())?;
    let (la, lb) = (g.value(f.masks.logits), gp.value(fp.masks.logits));
    let (sa, sb) = (g.value(f.scores.scores), gp.value(fp.scores.scores));
    for (new_row, &old_row) in perm.iter().enumerate() {
        ensure!(lb.index0(new_row) == la.index0(old_row), "mask of query {old_row} not permuted bit-exactly");
        for t in 0..2 {
            ensure!(sb.at(&[t, new_row]) == sa.at(&[t, old_row]), "score of query {old_row} not permuted bit-exactly");
        }
    }

    let (fused, weights) = model
        .avef
        .fuse_with_weights(&mut g, model.params(), f.projected, f.projected_audio)
        .map_err(|e| e.to_string())?;
    for l in 0..3 {
        ensure!(g.data(weights[l]).iter().all(|&w| w == 1.0), "fusion weights at scale {l} are not 1");
        ensure!(g.data(fused.scales[l]) == g.data(f.projected.scales[l]), "zero-init fusion changed scale {l}");
    }

    let other = AudioEmbedding {
        vectors: g.constant(Tensor::full(&[2, d], 3.0)),
    };
    let feats = model
        .pixel
        .decode(&mut g, model.params(), f.pyramid, other, &f.encoded)
        .map_err(|e| e.to_string())?;
    ensure!(g.data(feats.features) == g.data(f.features.features), "zero-init pixel decoder depends on audio");

    let mut zeroed = model.clone();
    let mut r = rng(14);
    for p in zeroed.params_mut().iter_mut() {
        let name = p.name().to_string();
        if name == "pixel.audio_attn.attn.o.w" {
            p.tensor_mut().data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
        } else if name.starts_with("pixel.") && (name.ends_with(".b") || name.ends_with(".beta")) {
            p.tensor_mut().data_mut().fill(0.0);
        }
    }
    let mut gz = Graph::no_grad();
    let [c0, c1, c2] = cfg.vis_channels;
    let sizes = [(c0, 16), (c1, 8), (c2, 4)];
    let scales = sizes.map(|(c, s)| gz.constant(Tensor::zeros(&[2, c, s, s])));
    let tokens: usize = sizes.iter().map(|(_, s)| s * s).sum();
    let encoded = EncodedFeatures {
        tokens: gz.constant(Tensor::zeros(&[2, tokens, d])),
        spans: [(0, 16), (256, 8), (320, 4)].map(|(offset, s)| ScaleSpan {
            offset,
            height: s,
            width: s,
        }),
    };
    let silent = AudioEmbedding {
        vectors: gz.constant(Tensor::zeros(&[2, d])),
    };
    let zf = zeroed
        .pixel
        .decode(&mut gz, zeroed.params(), VisualPyramid { scales }, silent, &encoded)
        .map_err(|e| e.to_string())?;
    ensure!(gz.data(zf.features).iter().all(|&x| x == 0.0), "pixel decoder does not map zero to zero");

    let secs = within(start, 60.0)?;
    Ok(format!("masks [{n_q}, 2, {mh}, {mw}], permutation bit-exact, {secs:.1}s"))
}

fn objective_oracles() -> Check {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (f, h, w) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
        let x = uniform(&mut r, &[f, h, w], -6.0, 6.0);
        let y = Tensor::from_fn(&[f, h, w], |_| r.random_bool(0.4) as u8 as f64);
        let eps = r.random_range(0.01..2.0);
        let gamma = r.random_range(0.0..4.0);
        let alpha = r.random_range(0.0..1.0);
        let labels: Vec<bool> = (0..f).map(|_| r.random_bool(0.5)).collect();
        let s: Vec<f64> = (0..f).map(|_| r.random_range(-6.0..6.0)).collect();
        let errs = [
            (dice_cost(&x, &y, eps).unwrap() - dice_ref(x.data(), y.data(), eps)).abs(),
            (focal_cost(&x, &y, gamma, alpha).unwrap() - focal_ref(x.data(), y.data(), gamma, alpha)).abs(),
            (sounding_cost(&s, &labels).unwrap() - bce_ref(&s, &labels)).abs(),
        ];
        for e in errs {
            ensure!(e <= 1e-10, "cost differs from brute force by {e:.2e}");
            worst = worst.max(e);
        }
    }
    let report = |costs: &[f64]| CostReport {
        per_query: Tensor::new(&[costs.len()], costs.to_vec()).unwrap(),
        components: vec![],
    };
    for _ in 0..200 {
        let n = r.random_range(1..8);
        let costs: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64 * 0.25).collect();
        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = costs.iter().position(|&c| c == best).unwrap();
        let m = match_query(&report(&costs)).map_err(|e| e.to_string())?;
        ensure!((m.index, m.cost) == (first, best), "matching picked {} for {costs:?}", m.index);
    }
    let tie = match_query(&report(&[0.3, 0.1, 0.1])).map_err(|e| e.to_string())?;
    ensure!(tie.index == 1, "tie resolved to query {}", tie.index);
    let secs = within(start, 60.0)?;
    Ok(format!("max brute-force difference {worst:.1e}, {secs:.2}s"))
}

struct SingleSource {
    model: AutrModel,
    m_j: f64,
    test: Dataset,
}

fn audio_awareness(data: &DataConfig) -> (Check, Option<SingleSource>) {
    let start = Instant::now();
    let run = || -> autr::Result<(AutrModel, Dataset, f64, f64)> {
        let train_set = load_split(Split::Train, data)?;
        let test = load_split(Split::Test, data)?;
        let mut model = AutrModel::new(ModelConfig::default())?;
        train(&mut model, &train_set, S4_EPOCHS)?;
        let m_j = eval(&model, &test)?.m_j;
        let silent = silent_probability(&model, &test)?;
        Ok((model, test, m_j, silent))
    };
    let (model, test, m_j, silent) = match run() {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("m_j {m_j:.2} (>= 85), silent mean prob {silent:.3} (<= 0.2), {secs:.0}s (<= 900)");
    let check = if m_j >= 85.0 && silent <= 0.2 && secs <= 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    };
    (check, Some(SingleSource { model, m_j, test }))
}

fn fine_tuning(data: &DataConfig, pretrained: &AutrModel) -> Check {
    let start = Instant::now();
    let multi = DataConfig {
        sources: 2,
        train_count: MS3_TRAIN,
        ..data.clone()
    };
    let train_set = load_split(Split::Train, &multi).map_err(|e| e.to_string())?;
    let test = load_split(Split::Test, &multi).map_err(|e| e.to_string())?;
    let mut scratch = AutrModel::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    train(&mut scratch, &train_set, MS3_EPOCHS).map_err(|e| e.to_string())?;
    let m_scratch = eval(&scratch, &test).map_err(|e| e.to_string())?.m_j;
    let mut tuned = pretrained.clone();
    train(&mut tuned, &train_set, MS3_EPOCHS / 2).map_err(|e| e.to_string())?;
    let m_tuned = eval(&tuned, &test).map_err(|e| e.to_string())?.m_j;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "fine-tuned {m_tuned:.2} ({} epochs) vs scratch {m_scratch:.2} ({MS3_EPOCHS} epochs), {secs:.0}s (<= 1200)",
        MS3_EPOCHS / 2
    );
    if m_tuned >= m_scratch - 2.0 && secs <= 1200.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Seen classes {0, 2, 3, 4, 5, 7} and held-out {1, 6}: every pair of colour
/// bits takes all four value combinations within the seen pool, and each
/// held-out class is one bit away from seen ones.
fn complementary_split(data: &DataConfig) -> DataConfig {
    DataConfig {
        train_classes: vec![0, 2, 3, 4, 5, 7],
        open_set_classes: vec![1, 6],
        ..data.clone()
    }
}

fn open_set(data: &DataConfig, s4: &SingleSource) -> Check {
    let start = Instant::now();
    let split = complementary_split(data);
    let train_set = load_split(Split::Train, &split).map_err(|e| e.to_string())?;
    let seen = load_split(Split::Test, &split).map_err(|e| e.to_string())?;
    let unseen = load_split(Split::OpenSet, &split).map_err(|e| e.to_string())?;
    let mut model = AutrModel::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    train(&mut model, &train_set, S4_EPOCHS).map_err(|e| e.to_string())?;
    let m_seen = eval(&model, &seen).map_err(|e| e.to_string())?.m_j;
    let m_open = eval(&model, &unseen).map_err(|e| e.to_string())?.m_j;
    let baseline = full_mask_baseline(&unseen);
    let secs = start.elapsed().as_secs_f64();
    let default_open = load_split(Split::OpenSet, data).map_err(|e| e.to_string())?;
    let m_default = eval(&s4.model, &default_open).map_err(|e| e.to_string())?.m_j;
    let detail = format!(
        "pool {:?} -> {:?}: m_j(open) {m_open:.2}, m_j(seen) {m_seen:.2}, full-mask baseline {baseline:.2}, {secs:.0}s (<= 900); \
         for reference pool {:?} -> {:?}: m_j(open) {m_default:.2}",
        split.train_classes, split.open_set_classes, data.train_classes, data.open_set_classes
    );
    if m_open > 0.5 * m_seen && m_open > baseline && secs <= 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_pipeline(dir: &Path) -> autr::Result<(Vec<(String, Vec<u8>)>, EvalResult)> {
    let data = DataConfig {
        image_size: 16,
        audio_bins: 16,
        audio_steps: 8,
        num_classes: 4,
        train_classes: vec![0, 1],
        open_set_classes: vec![2, 3],
        train_count: 8,
        val_count: 2,
        test_count: 3,
        open_set_count: 2,
        ..DataConfig::default()
    };
    let model_cfg = ModelConfig {
        image_size: 16,
        audio_bins: 16,
        audio_steps: 8,
        ..common::tiny_config()
    };
    write_all_splits(dir, &data)?;
    let train_set = Dataset::load(&dir.join("train"))?;
    let test = Dataset::load(&dir.join("test"))?;
    let mut model = AutrModel::new(model_cfg.clone())?;
    fit(&mut model, &train_set.examples(), &TrainConfig { epochs: 2, batch_size: 2, lr: 1e-3, ..TrainConfig::default() }, &train_options(), |_, _| Ok(()))?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let result = eval(&model, &test)?;
    result.write_report(&dir.join("report.txt"))?;
    let loaded = load_checkpoint(&ckpt, &model_cfg)?;
    if eval(&loaded, &test)? != result {
        return Err(autr::Error::Checkpoint("reloaded model evaluates differently".into()));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::from)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).unwrap().display().to_string();
            files.push((rel, std::fs::read(entry.path())?));
        }
    }
    Ok((files, result))
}

fn determinism() -> Check {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (files_a, eval_a) = tiny_pipeline(a.path()).map_err(|e| e.to_string())?;
    let (files_b, _) = tiny_pipeline(b.path()).map_err(|e| e.to_string())?;
    ensure!(files_a.len() == files_b.len(), "runs wrote {} and {} files", files_a.len(), files_b.len());
    for ((na, ba), (nb, bb)) in files_a.iter().zip(&files_b) {
        ensure!(na == nb && ba == bb, "{na} differs between runs");
    }
    let secs = within(start, 300.0)?;
    Ok(format!(
        "{} files byte-identical, checkpoint reload m_j {:.2} exact, {secs:.0}s",
        files_a.len(),
        eval_a.m_j
    ))
}

fn ablation(data: &DataConfig, s4: &SingleSource) -> Check {
    let start = Instant::now();
    let train_set = load_split(Split::Train, data).map_err(|e| e.to_string())?;
    let mut model = AutrModel::new(ModelConfig {
        audio_queries: false,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    train(&mut model, &train_set, S4_EPOCHS).map_err(|e| e.to_string())?;
    let m_j = eval(&model, &s4.test).map_err(|e| e.to_string())?.m_j;
    let drop = s4.m_j - m_j;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("audio-agnostic queries {m_j:.2} vs audio-aware {:.2}, drop {drop:.2} (>= 5), {secs:.0}s", s4.m_j);
    if drop >= 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let data = DataConfig::default();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut record = |name: &'static str, check: Check| {
        let (tag, detail) = match &check {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {name}: {detail}");
        results.push((name, check));
    };
    record("1 gradients", gradients());
    record("2 structure", structure());
    record("3 objective oracles", objective_oracles());
    record("7 determinism and persistence", determinism());
    let (check, s4) = audio_awareness(&data);
    record("4 audio awareness", check);
    match &s4 {
        Some(s4) => {
            record("5 fine-tuning", fine_tuning(&data, &s4.model));
            record("6 open set", open_set(&data, s4));
            record("8 audio-query ablation", ablation(&data, s4));
        }
        None => {
            for name in ["5 fine-tuning", "6 open set", "8 audio-query ablation"] {
                record(name, Err("single-source training failed".into()));
            }
        }
    }
    let failed = results.iter().filter(|(_, c)| c.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
