//! Raw loops shared by the forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major `m x k` / `k x n`
/// operands; `trans_*` reads the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: lengths are checked above and the strides describe exactly
    // the row-major (or transposed) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over `[C, H, W]` planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one image into `[C*k*k, Ho*Wo]` columns.
pub(crate) fn im2col(img: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for align-corners-false linear resampling of one axis:
/// `(lo, hi, weight_hi)` per output position.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `src` broadcast to it.
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let src_strides = super::tensor::strides(src);
    let mut eff = vec![0usize; n];
    for i in 0..src.len() {
        let o = i + n - src.len();
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// How a broadcast operand maps onto the output, picked so the common
/// cases avoid an index table.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Operand repeats with period `len` (its shape is a suffix of the output).
    Cyclic(usize),
    Table(Vec<usize>),
}

impl Bcast {
    pub fn new(src: &[usize], out: &[usize]) -> Self {
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if src == out || (trimmed.len() == out.len() && trimmed == out) {
            Bcast::Same
        } else if out.ends_with(&trimmed) {
            Bcast::Cyclic(trimmed.iter().product())
        } else {
            Bcast::Table(broadcast_index(src, out))
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cyclic(p) => i % p,
            Bcast::Table(t) => t[i],
        }
    }
}
