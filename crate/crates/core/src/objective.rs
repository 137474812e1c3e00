//! Mask and sounding costs, query matching, and the training step.

use crate::encoders::{AudioClip, VideoClip};
use crate::error::{Error, Result};
use crate::mask_head::{MaskLogits, SoundingScores};
use crate::model::AutrModel;
use crate::numeric::{AdamW, Graph, Tensor, Var};

/// Cost weights and shape parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_sound: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            lambda_sound: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_dice, self.lambda_focal, self.lambda_sound];
        if lambdas.iter().any(|l| !(*l >= 0.0)) || lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::Config(format!("cost weights {lambdas:?} must be >= 0 and not all zero")));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!("focal_alpha {} must lie in [0, 1]", self.focal_alpha)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps {} must be > 0", self.dice_eps)));
        }
        Ok(())
    }
}

/// Binary target masks `[T, H0, W0]` and per-frame presence of a sounding object.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    mask: Tensor,
    sounding_present: Vec<bool>,
}

impl GroundTruth {
    pub fn new(mask: Tensor, sounding_present: Vec<bool>) -> Result<Self> {
        if mask.ndim() != 3 || mask.shape()[0] != sounding_present.len() {
            return Err(Error::contract(format!(
                "ground truth mask {:?} does not match {} presence flags",
                mask.shape(),
                sounding_present.len()
            )));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("ground truth mask holds non-binary value {v}")));
        }
        Ok(Self { mask, sounding_present })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn sounding_present(&self) -> &[bool] {
        &self.sounding_present
    }

    pub fn num_frames(&self) -> usize {
        self.sounding_present.len()
    }

    /// Nearest-neighbour resample to `[T, h, w]`, sampling each output cell
    /// at its centre.
    pub fn downsample(&self, h: usize, w: usize) -> Tensor {
        let s = self.mask.shape();
        let (t, sh, sw) = (s[0], s[1], s[2]);
        let pick = |o: usize, n_out: usize, n_in: usize| ((o * n_in * 2 + n_in) / (2 * n_out)).min(n_in - 1);
        Tensor::from_fn(&[t, h, w], |i| {
            let (f, y, x) = (i / (h * w), (i / w) % h, i % w);
            self.mask.data()[(f * sh + pick(y, h, sh)) * sw + pick(x, w, sw)]
        })
    }
}

/// One query's unweighted cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostComponents {
    pub dice: f64,
    pub focal: f64,
    pub sound: f64,
}

impl CostComponents {
    pub fn weighted(&self, w: &CostWeights) -> f64 {
        w.lambda_dice * self.dice + w.lambda_focal * self.focal + w.lambda_sound * self.sound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// `[N_q]` weighted totals.
    pub per_query: Tensor,
    pub components: Vec<CostComponents>,
}

impl CostReport {
    pub fn from_components(components: Vec<CostComponents>, w: &CostWeights) -> Result<Self> {
        let totals: Vec<f64> = components.iter().map(|c| c.weighted(w)).collect();
        Ok(Self {
            per_query: Tensor::new(&[totals.len()], totals)?,
            components,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub cost: f64,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{op}: prediction {a:?} and target {b:?} differ in shape")));
    }
    Ok(())
}

/// `2y - 1`, the sign that turns a logit into the logit of the true class.
fn signs(g: &mut Graph, target: &Tensor) -> Var {
    g.constant(Tensor::from_fn(target.shape(), |i| 2.0 * target.data()[i] - 1.0))
}

/// Soft Dice over all pixels and frames jointly.
pub fn dice_term(g: &mut Graph, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_same("dice_cost", g.shape(logits), target.shape())?;
    let p = g.sigmoid(logits);
    let y = g.constant(target.clone());
    let py = g.mul(p, y)?;
    let inter = g.sum_all(py);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let sp = g.sum_all(p);
    let den = g.add_scalar(sp, target.data().iter().sum::<f64>() + eps);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_scalar(neg, 1.0))
}

/// Binary focal loss averaged over pixels.
pub fn focal_term(g: &mut Graph, logits: Var, target: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    check_same("focal_cost", g.shape(logits), target.shape())?;
    let s = signs(g, target);
    let z = g.mul(logits, s)?;
    let log_pt = g.log_sigmoid(z);
    let nz = g.neg(z);
    let log_miss = g.log_sigmoid(nz);
    let modulating = g.scale(log_miss, gamma);
    let modulating = g.exp(modulating);
    let alpha_t = g.constant(Tensor::from_fn(target.shape(), |i| {
        if target.data()[i] == 1.0 {
            -alpha
        } else {
            alpha - 1.0
        }
    }));
    let weighted = g.mul(modulating, log_pt)?;
    let weighted = g.mul(weighted, alpha_t)?;
    Ok(g.mean_all(weighted))
}

/// Mean binary cross-entropy of logits against 0/1 labels.
pub fn bce_term(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    check_same("sounding_cost", g.shape(logits), labels.shape())?;
    let s = signs(g, labels);
    let z = g.mul(logits, s)?;
    let l = g.log_sigmoid(z);
    let m = g.mean_all(l);
    Ok(g.neg(m))
}

fn eval_scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::no_grad();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

pub fn dice_cost(pred_logits: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    eval_scalar(|g| {
        let x = g.constant(pred_logits.clone());
        dice_term(g, x, gt, eps)
    })
}

pub fn focal_cost(pred_logits: &Tensor, gt: &Tensor, gamma: f64, alpha: f64) -> Result<f64> {
    eval_scalar(|g| {
        let x = g.constant(pred_logits.clone());
        focal_term(g, x, gt, gamma, alpha)
    })
}

pub fn sounding_cost(scores: &[f64], present: &[bool]) -> Result<f64> {
    let n = scores.len();
    let labels = Tensor::new(&[n], present.iter().map(|&p| f64::from(u8::from(p))).collect())
        .map_err(|_| Error::contract(format!("{n} scores but {} presence labels", present.len())))?;
    eval_scalar(|g| {
        let x = g.constant(Tensor::new(&[n], scores.to_vec())?);
        bce_term(g, x, &labels)
    })
}

/// Per-query weighted cost nodes and their components.
#[derive(Clone, Debug)]
pub struct CostGraph {
    pub totals: Vec<Var>,
    pub components: Vec<[Var; 3]>,
}

/// Records every query's weighted cost into `g`.
pub fn total_cost_graph(
    g: &mut Graph,
    masks: MaskLogits,
    scores: SoundingScores,
    gt: &GroundTruth,
    w: &CostWeights,
) -> Result<CostGraph> {
    let ls = g.shape(masks.logits).to_vec();
    let ss = g.shape(scores.scores).to_vec();
    if ls.len() != 4 || ss != [ls[1], ls[0]] || ls[1] != gt.num_frames() {
        return Err(Error::contract(format!(
            "mask logits {ls:?}, scores {ss:?} and {} ground-truth frames disagree",
            gt.num_frames()
        )));
    }
    let (n_q, t) = (ls[0], ls[1]);
    let target = gt.downsample(ls[2], ls[3]);
    let labels = Tensor::from_fn(&[t], |i| f64::from(u8::from(gt.sounding_present[i])));
    let mut out = CostGraph {
        totals: Vec::with_capacity(n_q),
        components: Vec::with_capacity(n_q),
    };
    for i in 0..n_q {
        let m = g.narrow(masks.logits, 0, i, 1)?;
        let m = g.reshape(m, &[t, ls[2], ls[3]])?;
        let s = g.narrow(scores.scores, 1, i, 1)?;
        let s = g.reshape(s, &[t])?;
        let dice = dice_term(g, m, &target, w.dice_eps)?;
        let focal = focal_term(g, m, &target, w.focal_gamma, w.focal_alpha)?;
        let sound = bce_term(g, s, &labels)?;
        let a = g.scale(dice, w.lambda_dice);
        let b = g.scale(focal, w.lambda_focal);
        let c = g.scale(sound, w.lambda_sound);
        let ab = g.add(a, b)?;
        out.totals.push(g.add(ab, c)?);
        out.components.push([dice, focal, sound]);
    }
    Ok(out)
}

impl CostGraph {
    pub fn report(&self, g: &Graph, w: &CostWeights) -> Result<CostReport> {
        let components = self
            .components
            .iter()
            .map(|[d, f, s]| CostComponents {
                dice: g.value(*d).item(),
                focal: g.value(*f).item(),
                sound: g.value(*s).item(),
            })
            .collect();
        CostReport::from_components(components, w)
    }
}

pub fn total_cost(masks: &Tensor, scores: &Tensor, gt: &GroundTruth, w: &CostWeights) -> Result<CostReport> {
    let mut g = Graph::no_grad();
    let m = MaskLogits {
        logits: g.constant(masks.clone()),
    };
    let s = SoundingScores {
        scores: g.constant(scores.clone()),
    };
    total_cost_graph(&mut g, m, s, gt, w)?.report(&g, w)
}

/// Lowest-cost query; ties go to the lowest index.
pub fn match_query(report: &CostReport) -> Result<MatchResult> {
    let mut best: Option<MatchResult> = None;
    for (index, &cost) in report.per_query.data().iter().enumerate() {
        if best.is_none_or(|b| cost < b.cost) {
            best = Some(MatchResult { index, cost });
        }
    }
    best.ok_or_else(|| Error::contract("cannot match an empty query set"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct TrainOptions {
    pub weights: CostWeights,
    /// Also push every unmatched query's sounding score towards "silent".
    pub negative_supervision: bool,
    /// Rescale the averaged batch gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}


/// Borrowed view of one training example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub video: &'a VideoClip,
    pub audio: &'a AudioClip,
    pub gt: &'a GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLoss {
    /// Matched query's weighted cost.
    pub loss: f64,
    pub matched: MatchResult,
    pub report: CostReport,
    /// Negative-supervision term, 0 when disabled.
    pub negative: f64,
}

fn check_finite(g: &Graph, named: &[(&str, Var)]) -> Result<()> {
    for (name, v) in named {
        if !g.value(*v).is_finite() {
            return Err(Error::NonFinite(format!("{name} has non-finite values")));
        }
    }
    Ok(())
}

/// Records the training objective of one example into `g`: the matched
/// query's weighted cost, plus the negative-supervision term when enabled.
pub fn record_objective(g: &mut Graph, model: &AutrModel, ex: Example, opts: &TrainOptions) -> Result<(Var, SceneLoss)> {
    let w = &opts.weights;
    let f = model.forward(g, ex.video, ex.audio)?;
    check_finite(g, &[("mask logits", f.masks.logits), ("sounding scores", f.scores.scores)])?;
    let costs = total_cost_graph(g, f.masks, f.scores, ex.gt, w)?;
    let report = costs.report(g, w)?;
    let matched = match_query(&report)?;
    if !matched.cost.is_finite() {
        return Err(Error::NonFinite(format!("cost of query {} is {}", matched.index, matched.cost)));
    }
    let mut loss = costs.totals[matched.index];
    let mut negative = 0.0;
    let n_q = costs.totals.len();
    if opts.negative_supervision && n_q > 1 {
        let t = ex.gt.num_frames();
        let mut terms = Vec::with_capacity(n_q - 1);
        for i in (0..n_q).filter(|&i| i != matched.index) {
            let s = g.narrow(f.scores.scores, 1, i, 1)?;
            let s = g.reshape(s, &[t])?;
            let bce = bce_term(g, s, &Tensor::zeros(&[t]))?;
            terms.push(g.reshape(bce, &[1])?);
        }
        let stacked = g.concat(&terms, 0)?;
        let mean = g.mean_all(stacked);
        let neg = g.scale(mean, w.lambda_sound);
        negative = g.value(neg).item();
        loss = g.add(loss, neg)?;
    }
    Ok((
        loss,
        SceneLoss {
            loss: matched.cost,
            matched,
            report,
            negative,
        },
    ))
}

/// Forward, match, and backward for one example; the parameter gradients
/// are added to the model's store.
pub fn backprop_example(model: &mut AutrModel, ex: Example, opts: &TrainOptions) -> Result<SceneLoss> {
    let mut g = Graph::new();
    let (loss, out) = record_objective(&mut g, model, ex, opts)?;
    g.backward(loss)?;
    model.params_mut().accumulate_grads(&g);
    Ok(out)
}

fn check_grads(model: &AutrModel) -> Result<()> {
    for (_, p) in model.params().iter() {
        if let Some(grad) = p.tensor().grad() {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} has non-finite values", p.name())));
            }
        }
    }
    Ok(())
}

/// One optimizer update from the mean gradient over `batch`. Returns the
/// per-example results.
pub fn batch_step(
    model: &mut AutrModel,
    optimizer: &mut AdamW,
    batch: &[Example],
    opts: &TrainOptions,
) -> Result<Vec<SceneLoss>> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    model.params_mut().clear_grads();
    let losses = batch
        .iter()
        .map(|ex| backprop_example(model, *ex, opts))
        .collect::<Result<Vec<_>>>()?;
    model.params_mut().scale_grads(1.0 / batch.len() as f64);
    check_grads(model)?;
    if let Some(max) = opts.grad_clip {
        let norm = model.params().grad_norm();
        if norm > max {
            model.params_mut().scale_grads(max / norm);
        }
    }
    optimizer.step(model.params_mut())?;
    Ok(losses)
}

/// Single-example update; returns the matched cost.
pub fn training_step(model: &mut AutrModel, optimizer: &mut AdamW, ex: Example, opts: &TrainOptions) -> Result<f64> {
    Ok(batch_step(model, optimizer, &[ex], opts)?[0].loss)
}
