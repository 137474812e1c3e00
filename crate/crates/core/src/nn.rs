//! Parameterized layers shared by the encoders, the transformer and the mask head.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: self.path(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(path, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound));
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, 1.0))
    }
}

/// How a weight matrix starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// Uniform with variance `1 / fan_in`.
    FanIn,
    Zero,
    /// Identity (requires a square matrix).
    Identity,
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(b, name, d_in, d_out, WeightInit::FanIn, true)
    }

    pub fn with_init(
        b: &mut Builder,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: WeightInit,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let weight = match init {
            WeightInit::FanIn => b.uniform("w", &[d_in, d_out], (3.0 / d_in as f64).sqrt())?,
            WeightInit::Zero => b.zeros("w", &[d_in, d_out])?,
            WeightInit::Identity => {
                assert_eq!(d_in, d_out, "identity init needs a square weight");
                b.tensor(
                    "w",
                    Tensor::from_fn(&[d_in, d_out], |i| if i / d_out == i % d_out { 1.0 } else { 0.0 }),
                )?
            }
        };
        let bias = if bias { Some(b.zeros("b", &[d_out])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(s, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = b.uniform("w", &[c_out, c_in, kernel, kernel], (3.0 / fan_in).sqrt())?;
        let bias = b.zeros("b", &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Pointwise convolution stored as a `[C_out, C_in]` matrix.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let weight = b.uniform("w", &[c_out, c_in], (3.0 / c_in as f64).sqrt())?;
        let bias = b.zeros("b", &[c_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.conv2d_1x1(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            gamma: b.ones("gamma", &[dim])?,
            beta: b.zeros("beta", &[dim])?,
        })
    }

    /// Normalizes along `axis`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta, axis, LN_EPS)
    }

    pub fn last(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        self.forward(g, s, x, axis)
    }
}

/// Two-layer GELU MLP applied over the last axis.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            up: Linear::new(&mut b, "up", dim, hidden)?,
            down: Linear::new(&mut b, "down", hidden, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, h)
    }
}

/// Output of an attention call: the attended values and the softmax
/// weights `[B, heads, N_q, N_k]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention over `[B, N, D]` sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let mut b = b.sub(name);
        let out_init = if zero_out { WeightInit::Zero } else { WeightInit::FanIn };
        Ok(Self {
            q: Linear::new(&mut b, "q", dim, dim)?,
            k: Linear::new(&mut b, "k", dim, dim)?,
            v: Linear::new(&mut b, "v", dim, dim)?,
            o: Linear::with_init(&mut b, "o", dim, dim, out_init, true)?,
            heads,
        })
    }

    /// `[B, N, D] -> [B, heads, N, D / heads]`
    fn split(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, s[2] / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, query: Var, key: Var, value: Var) -> Result<Attended> {
        let shape = g.shape(query).to_vec();
        let (batch, nq, dim) = (shape[0], shape[1], shape[2]);
        let q = self.q.forward(g, s, query)?;
        let q = g.scale(q, 1.0 / ((dim / self.heads) as f64).sqrt());
        let k = self.k.forward(g, s, key)?;
        let v = self.v.forward(g, s, value)?;
        let q = self.split(g, q)?;
        let k = self.split(g, k)?;
        let kt = g.transpose(k, 2, 3)?;
        let v = self.split(g, v)?;
        let scores = g.matmul(q, kt)?;
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, nq, dim])?;
        let out = self.o.forward(g, s, ctx)?;
        Ok(Attended { out, weights })
    }

    /// Attention whose keys are first put into a canonical order that only
    /// depends on their values, so results are bit-identical under any
    /// permutation of the key/value rows.
    pub fn forward_set(&self, g: &mut Graph, s: &ParamStore, query: Var, key: Var, value: Var) -> Result<Attended> {
        let order = canonical_order(g, key, value);
        let key = g.gather_rows(key, &order)?;
        let value = g.gather_rows(value, &order)?;
        self.forward(g, s, query, key, value)
    }
}

/// Per batch, the row order sorting `(key[b, j], value[b, j])` bitwise.
fn canonical_order(g: &Graph, key: Var, value: Var) -> Vec<usize> {
    let shape = g.shape(key);
    let (batch, n, d) = (shape[0], shape[1], shape[2]);
    let dv = g.shape(value)[2];
    let (kd, vd) = (g.data(key), g.data(value));
    let mut order = Vec::with_capacity(batch * n);
    for b in 0..batch {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.sort_by(|&x, &y| {
            let kx = &kd[(b * n + x) * d..][..d];
            let ky = &kd[(b * n + y) * d..][..d];
            let vx = &vd[(b * n + x) * dv..][..dv];
            let vy = &vd[(b * n + y) * dv..][..dv];
            kx.iter()
                .chain(vx)
                .zip(ky.iter().chain(vy))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
        order.extend(rows);
    }
    order
}

/// Fixed 2-D sinusoidal encoding `[H * W, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs = half / 2;
    let mut data = vec![0.0; h * w * dim];
    let tau = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..][..dim];
            let py = (y as f64 + 0.5) / h as f64 * tau;
            let px = (x as f64 + 0.5) / w as f64 * tau;
            for i in 0..freqs {
                let f = 10000f64.powf(-(2.0 * i as f64) / half as f64);
                row[2 * i] = (py * f).sin();
                row[2 * i + 1] = (py * f).cos();
                row[half + 2 * i] = (px * f).sin();
                row[half + 2 * i + 1] = (px * f).cos();
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("pe shape")
}
