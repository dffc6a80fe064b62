//! Dense row-major matrices and the forward/backward kernels the model is
//! assembled from. Every kernel works row by row, so a row computed on its
//! own is bit-identical to the same row computed inside a larger matrix.

use crate::params::{LayerNorm, Linear};

/// Additive score for masked attention positions.
pub const MASK_NEG: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `0..n`.
    pub fn top(&self, n: usize) -> Mat {
        Mat { rows: n, cols: self.cols, data: self.data[..n * self.cols].to_vec() }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable; the order is fixed.
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn linear_row(x: &[f64], lin: &Linear, out: &mut [f64]) {
    let d_in = lin.d_in();
    for (o, y) in out.iter_mut().enumerate() {
        *y = lin.bias.data[o] + dot(&lin.weight.data[o * d_in..(o + 1) * d_in], x);
    }
}

pub fn linear(x: &Mat, lin: &Linear) -> Mat {
    let mut y = Mat::zeros(x.rows, lin.d_out());
    for i in 0..x.rows {
        linear_row(x.row(i), lin, y.row_mut(i));
    }
    y
}

/// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
pub fn linear_backward(x: &Mat, lin: &Linear, dy: &Mat, grad: &mut Linear) -> Mat {
    let d_in = lin.d_in();
    let mut dx = Mat::zeros(x.rows, d_in);
    for i in 0..x.rows {
        let xi = x.row(i);
        let dyi = dy.row(i);
        let dxi = dx.row_mut(i);
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            axpy(g, xi, &mut grad.weight.data[o * d_in..(o + 1) * d_in]);
            axpy(g, &lin.weight.data[o * d_in..(o + 1) * d_in], dxi);
        }
    }
    dx
}

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

pub fn layer_norm_row(x: &[f64], ln: &LayerNorm, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for (k, y) in out.iter_mut().enumerate() {
        *y = (x[k] - mean) * rstd * ln.gamma.data[k] + ln.beta.data[k];
    }
    rstd
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = layer_norm_row(x.row(i), ln, y.row_mut(i));
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        for (h, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(cache: &LnCache, ln: &LayerNorm, dy: &Mat, grad: &mut LayerNorm) -> Mat {
    let (rows, cols) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(rows, cols);
    let n = cols as f64;
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let xh = cache.xhat.row(i);
        let dyi = dy.row(i);
        for k in 0..cols {
            grad.gamma.data[k] += dyi[k] * xh[k];
            grad.beta.data[k] += dyi[k];
            dxhat[k] = dyi[k] * ln.gamma.data[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let r = cache.rstd[i];
        for (k, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = r * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// `true` marks a PAD key.
    KeyPad(&'a [bool]),
}

impl Mask<'_> {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::KeyPad(pad) => !pad[j],
        }
    }
}

/// Softmax of one score row in place.
fn softmax_in_place(s: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in s.iter_mut() {
        *v /= sum;
    }
}

/// Attention of query row `i` over `n_keys` keys, written into `ctx_row`;
/// returns the per-head weights, flattened `[n_head * n_keys]`.
pub fn attend_row(
    q_row: &[f64],
    k: &Mat,
    v: &Mat,
    n_keys: usize,
    n_head: usize,
    mut allowed: impl FnMut(usize) -> bool,
    ctx_row: &mut [f64],
) -> Vec<f64> {
    let d = q_row.len();
    let dh = d / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask: Vec<bool> = (0..n_keys).map(&mut allowed).collect();
    let mut probs = vec![0.0; n_head * n_keys];
    ctx_row.iter_mut().for_each(|c| *c = 0.0);
    for h in 0..n_head {
        let cols = h * dh..(h + 1) * dh;
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for j in 0..n_keys {
            let s = dot(&q_row[cols.clone()], &k.row(j)[cols.clone()]) * scale;
            p[j] = if mask[j] { s } else { s + MASK_NEG };
        }
        softmax_in_place(p);
        let out = &mut ctx_row[cols.clone()];
        for j in 0..n_keys {
            axpy(p[j], &v.row(j)[cols.clone()], out);
        }
    }
    probs
}

/// `softmax(Q Kᵀ / √d_h + mask) V` per head, heads concatenated (no output
/// projection). Returns the context and per-head weight matrices.
pub fn scaled_dot_product(q: &Mat, k: &Mat, v: &Mat, n_head: usize, mask: Mask) -> (Mat, Vec<Mat>) {
    let mut ctx = Mat::zeros(q.rows, v.cols);
    let mut probs = vec![Mat::zeros(q.rows, k.rows); n_head];
    for i in 0..q.rows {
        let p = attend_row(q.row(i), k, v, k.rows, n_head, |j| mask.allowed(i, j), ctx.row_mut(i));
        for (h, ph) in probs.iter_mut().enumerate() {
            ph.row_mut(i).copy_from_slice(&p[h * k.rows..(h + 1) * k.rows]);
        }
    }
    (ctx, probs)
}

/// Gradients of [`scaled_dot_product`] with respect to `q`, `k`, `v`.
pub fn scaled_dot_product_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &[Mat],
    dctx: &Mat,
) -> (Mat, Mat, Mat) {
    let n_head = probs.len();
    let dh = q.cols / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (q.rows, k.rows);
    let mut dq = Mat::zeros(nq, q.cols);
    let mut dk = Mat::zeros(nk, k.cols);
    let mut dv = Mat::zeros(nk, v.cols);
    let mut dp = vec![0.0; nk];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..nq {
            let g = &dctx.row(i)[cols.clone()];
            let pi = p.row(i);
            for j in 0..nk {
                dp[j] = dot(g, &v.row(j)[cols.clone()]);
                if pi[j] != 0.0 {
                    axpy(pi[j], g, &mut dv.row_mut(j)[cols.clone()]);
                }
            }
            let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}
