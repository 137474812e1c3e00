//! Shared test oracles. Nothing here calls `Graph::backward`; the
//! finite-difference checker only evaluates forward passes.
#![allow(dead_code)]

use autr::numeric::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Relative error `|a - n| / max(|a|, |n|)` of two gradient vectors,
/// measured in the L2 norm (0 when both vanish).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds `sum(f(inputs) * probe)` so every output element carries a
/// distinct weight.
fn probed<F>(g: &mut Graph, vars: &[Var], f: &F, probe_seed: u64) -> Var
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let out = f(g, vars);
    if g.shape(out).iter().product::<usize>() == 1 {
        return g.reshape(out, &[]).unwrap();
    }
    let mut r = rng(probe_seed);
    let probe = uniform(&mut r, g.shape(out), -1.0, 1.0);
    let p = g.constant(probe);
    let m = g.mul(out, p).unwrap();
    g.sum_all(m)
}

fn forward_value<F>(inputs: &[Tensor], f: &F, probe_seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = probed(&mut g, &vars, f, probe_seed);
    g.data(out)[0]
}

/// Central finite-difference gradient of the probed scalar.
pub fn numeric_grads<F>(inputs: &[Tensor], f: &F, probe_seed: u64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let d = (forward_value(&plus, f, probe_seed) - forward_value(&minus, f, probe_seed)) / (2.0 * FD_EPS);
            grads.push(d);
        }
        out.push(grads);
    }
    out
}

pub fn analytic_grads<F>(inputs: &[Tensor], f: &F, probe_seed: u64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let out = probed(&mut g, &vars, f, probe_seed);
    g.backward(out).unwrap();
    vars.iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect()
}

/// Worst per-input relative error between backward and finite differences.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let a = analytic_grads(inputs, &f, 99);
    let n = numeric_grads(inputs, &f, 99);
    a.iter().zip(&n).map(|(a, n)| rel_error(a, n)).fold(0.0, f64::max)
}

use autr::encoders::{AudioClip, VideoClip};
use autr::objective::{backprop_example, record_objective, Example, GroundTruth, TrainOptions};
use autr::{AutrModel, ModelConfig};

/// Every channel width at most 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        audio_bins: 8,
        audio_steps: 8,
        c_a: 8,
        c_av: 8,
        vis_channels: [4, 6, 8],
        stem_channels: 4,
        audio_channels: 4,
        audio_depth: 1,
        n_q: 3,
        heads: 2,
        n_enc: 1,
        n_dec: 1,
        ffn_dim: 8,
        c_m: 4,
        audio_queries: true,
        init_seed: 3,
    }
}

pub struct Sample {
    pub video: VideoClip,
    pub audio: AudioClip,
    pub gt: GroundTruth,
}

impl Sample {
    pub fn example(&self) -> Example<'_> {
        Example {
            video: &self.video,
            audio: &self.audio,
            gt: &self.gt,
        }
    }
}

/// Random clip with a rectangular target in the upper-left quadrant.
pub fn random_sample(cfg: &ModelConfig, frames: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let s = cfg.image_size;
    let video = uniform(&mut r, &[frames, 3, s, s], 0.0, 1.0);
    let audio = uniform(&mut r, &[frames, cfg.audio_bins, cfg.audio_steps], 0.0, 1.0);
    let mask = Tensor::from_fn(&[frames, s, s], |i| {
        let (y, x) = ((i / s) % s, i % s);
        if y < s / 2 && x < s / 2 {
            1.0
        } else {
            0.0
        }
    });
    Sample {
        video: VideoClip::new(video).unwrap(),
        audio: AudioClip::new(audio).unwrap(),
        gt: GroundTruth::new(mask, vec![true; frames]).unwrap(),
    }
}

/// Analytic and central-difference gradients of the full training
/// objective with respect to every parameter, as `(name, analytic, numeric)`.
pub fn training_loss_gradients(model: &AutrModel, sample: &Sample, opts: &TrainOptions) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut work = model.clone();
    work.params_mut().clear_grads();
    backprop_example(&mut work, sample.example(), opts).unwrap();
    let eval = |m: &AutrModel| {
        let mut g = Graph::no_grad();
        let (loss, _) = record_objective(&mut g, m, sample.example(), opts).unwrap();
        g.value(loss).item()
    };
    let mut probe = model.clone();
    let mut out = Vec::new();
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name().to_string())).collect();
    for (id, name) in ids {
        let analytic = work
            .params()
            .get(id)
            .tensor()
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.params().get(id).tensor().len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = model.params().get(id).tensor().data()[i];
            probe.params_mut().get_mut(id).tensor_mut().data_mut()[i] = orig + FD_EPS;
            let plus = eval(&probe);
            probe.params_mut().get_mut(id).tensor_mut().data_mut()[i] = orig - FD_EPS;
            let minus = eval(&probe);
            probe.params_mut().get_mut(id).tensor_mut().data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
        }
        out.push((name, analytic, numeric));
    }
    out
}

/// Random values for the zero-initialized output projections so every
/// branch carries gradient.
pub fn open_zero_init(model: &mut AutrModel, seed: u64) {
    let mut r = rng(seed);
    for p in model.params_mut().iter_mut() {
        if p.name().ends_with("attn.o.w") {
            for v in p.tensor_mut().data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap())),
        ("sub_broadcast_mid", vec![vec![2, 3, 4], vec![3, 1]], Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]).unwrap())),
        ("div", vec![vec![3, 4], vec![4]], Box::new(|g: &mut Graph, v: &[Var]| {
            // keep the denominator away from zero
            let d = g.exp(v[1]);
            g.div(v[0], d).unwrap()
        })),
        ("scale_add_scalar", vec![vec![5]], Box::new(|g: &mut Graph, v: &[Var]| {
            let s = g.scale(v[0], -1.7);
            g.add_scalar(s, 0.3)
        })),
        ("exp", vec![vec![6]], Box::new(|g: &mut Graph, v: &[Var]| g.exp(v[0]))),
        ("log", vec![vec![6]], Box::new(|g: &mut Graph, v: &[Var]| {
            let e = g.exp(v[0]);
            let p = g.add_scalar(e, 0.5);
            g.log(p)
        })),
        ("sigmoid", vec![vec![6]], Box::new(|g: &mut Graph, v: &[Var]| g.sigmoid(v[0]))),
        ("log_sigmoid", vec![vec![6]], Box::new(|g: &mut Graph, v: &[Var]| g.log_sigmoid(v[0]))),
        ("relu", vec![vec![8]], Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0]))),
        ("gelu", vec![vec![8]], Box::new(|g: &mut Graph, v: &[Var]| g.gelu(v[0]))),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_broadcast_rhs", vec![vec![2, 3, 4], vec![4, 2]], Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap())),
        ("permute", vec![vec![2, 3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.permute(v[0], &[2, 0, 1]).unwrap())),
        ("reshape", vec![vec![2, 6]], Box::new(|g: &mut Graph, v: &[Var]| g.reshape(v[0], &[3, 4]).unwrap())),
        ("broadcast_to", vec![vec![2, 1, 3]], Box::new(|g: &mut Graph, v: &[Var]| g.broadcast_to(v[0], &[2, 4, 3]).unwrap())),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|g: &mut Graph, v: &[Var]| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("narrow", vec![vec![3, 5]], Box::new(|g: &mut Graph, v: &[Var]| g.narrow(v[0], 1, 1, 3).unwrap())),
        ("gather_rows", vec![vec![2, 3, 2]], Box::new(|g: &mut Graph, v: &[Var]| g.gather_rows(v[0], &[2, 0, 1, 1, 1, 0]).unwrap())),
        ("softmax_last", vec![vec![3, 5]], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0], 1).unwrap())),
        ("softmax_first", vec![vec![4, 3]], Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0], 0).unwrap())),
        ("layer_norm_last", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1, 1e-5).unwrap())),
        ("layer_norm_channel", vec![vec![2, 4, 3, 3], vec![4], vec![4]], Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1, 1e-5).unwrap())),
        ("sum_axis", vec![vec![2, 3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.sum(v[0], 1).unwrap())),
        ("mean_axis", vec![vec![2, 3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0], 2).unwrap())),
        ("sum_all", vec![vec![3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.sum_all(v[0]))),
        ("mean_all", vec![vec![3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.mean_all(v[0]))),
        ("conv3x3_stride1", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], Box::new(|g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap())),
        ("conv3x3_stride2", vec![vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], Box::new(|g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap())),
        ("conv1x1", vec![vec![3, 4, 4], vec![2, 3], vec![2]], Box::new(|g: &mut Graph, v: &[Var]| g.conv2d_1x1(v[0], v[1], v[2]).unwrap())),
        ("bilinear_up", vec![vec![2, 3, 4]], Box::new(|g: &mut Graph, v: &[Var]| g.bilinear_resize(v[0], 7, 8).unwrap())),
        ("bilinear_down", vec![vec![1, 8, 6]], Box::new(|g: &mut Graph, v: &[Var]| g.bilinear_resize(v[0], 3, 4).unwrap())),
        ("max_pool2d", vec![vec![2, 4, 6]], Box::new(|g: &mut Graph, v: &[Var]| g.max_pool2d(v[0]).unwrap())),
        ("composite_chain", vec![vec![2, 4, 3], vec![3, 3], vec![3], vec![3]], Box::new(|g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.layer_norm(h, v[2], v[3], 2, 1e-5).unwrap();
            let h = g.gelu(h);
            let s = g.softmax(h, 1).unwrap();
            let t = g.transpose(s, 1, 2).unwrap();
            g.matmul(t, h).unwrap()
        })),
    ]
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dice_ref(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let p = sig(xi);
        inter += p * yi;
        sp += p;
        sy += yi;
    }
    1.0 - (2.0 * inter + eps) / (sp + sy + eps)
}

pub fn focal_ref(x: &[f64], y: &[f64], gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let p = sig(xi);
        let (pt, at) = if yi == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    total / x.len() as f64
}

pub fn bce_ref(x: &[f64], y: &[bool]) -> f64 {
    let mut total = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let p = sig(xi);
        total -= if yi { p.ln() } else { (1.0 - p).ln() };
    }
    total / x.len() as f64
}
