//! Minimal double-precision layers with hand-written backward passes.
//!
//! Every layer stores its parameters in standard-layout ndarray buffers. Gradients are kept in
//! a second instance of the same type (see [`Parameters::zeros_like`]), so the optimizer, the
//! checkpoint writer and the finite-difference checker can walk parameters and gradients in
//! lockstep through [`Parameters::visit`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Named flat views of every trainable tensor.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, v| v.fill(0.0));
        z
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v| out.extend_from_slice(v));
        out
    }

    /// `self += other` element-wise; both must share a layout.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, v| {
            let n = v.len();
            for (a, b) in v.iter_mut().zip(&flat[off..off + n]) {
                *a += b;
            }
            off += n;
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x *= k));
    }

    fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, v| s += v.iter().map(|x| x * x).sum::<f64>());
        s.sqrt()
    }

    /// Per-tensor L2 norms, for diagnostics.
    fn norms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| {
            out.push((name.to_string(), v.iter().map(|x| x * x).sum::<f64>().sqrt()))
        });
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn uniform_vector(rng: &mut impl Rng, n: usize, bound: f64) -> Array1<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array1::from_shape_simple_fn(n, || dist.sample(rng))
}

/// `y = x W + b` with `W` stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, n_in: usize, n_out: usize) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        Self {
            w: uniform_matrix(rng, n_in, n_out, bound),
            b: uniform_vector(rng, n_out, bound),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn forward_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "w"), slice(&self.w));
        f(&join(prefix, "b"), slice(&self.b));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice_mut(&mut self.w));
        f(&join(prefix, "b"), slice_mut(&mut self.b));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: Array2<f64>,
}

impl Embedding {
    pub fn new(rng: &mut impl Rng, vocab: usize, dim: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            table: Array2::from_shape_simple_fn((vocab, dim), || normal.sample(rng)),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.table.row(id)
    }

    pub fn accumulate(&self, grad: &mut Embedding, id: usize, dy: &ArrayView1<f64>) {
        let mut r = grad.table.row_mut(id);
        r += dy;
    }
}

impl Parameters for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "table"), slice(&self.table));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "table"), slice_mut(&mut self.table));
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated recurrent unit with reset gate applied after the recurrent projection:
///
/// ```text
/// r = σ(x Wr + br + h Ur + cr)      z = σ(x Wz + bz + h Uz + cz)
/// n = tanh(x Wn + bn + r ⊙ (h Un + cn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
///
/// Gate blocks are packed `[r | z | n]` along the output axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
}

/// Activations retained for the backward pass of [`Gru::forward_seq`].
pub struct GruCache {
    h_prev: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    hn: Array2<f64>,
}

impl Gru {
    pub fn new(rng: &mut impl Rng, n_in: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform_matrix(rng, n_in, 3 * hidden, bound),
            w_hh: uniform_matrix(rng, hidden, 3 * hidden, bound),
            b_ih: uniform_vector(rng, 3 * hidden, bound),
            b_hh: uniform_vector(rng, 3 * hidden, bound),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.w_ih.nrows()
    }

    fn cell(&self, xw: ArrayView1<f64>, h: ArrayView1<f64>) -> (Array1<f64>, [Array1<f64>; 4]) {
        let hd = self.hidden();
        let hw = h.dot(&self.w_hh) + &self.b_hh;
        let r = (&xw.slice(s![..hd]) + &hw.slice(s![..hd])).mapv(sigmoid);
        let z = (&xw.slice(s![hd..2 * hd]) + &hw.slice(s![hd..2 * hd])).mapv(sigmoid);
        let hn = hw.slice(s![2 * hd..]).to_owned();
        let n = (&xw.slice(s![2 * hd..]) + &(&r * &hn)).mapv(f64::tanh);
        let h_new = &(1.0 - &z) * &n + &z * &h;
        (h_new, [r, z, n, hn])
    }

    /// One recurrent step.
    pub fn step(&self, x: &ArrayView1<f64>, h: &ArrayView1<f64>) -> Array1<f64> {
        let xw = x.dot(&self.w_ih) + &self.b_ih;
        self.cell(xw.view(), h.view()).0
    }

    /// Runs the sequence `xs` (rows = time) from `h0`; returns every hidden state.
    pub fn forward_seq(&self, xs: &ArrayView2<f64>, h0: &ArrayView1<f64>) -> (Array2<f64>, GruCache) {
        let t_len = xs.nrows();
        let hd = self.hidden();
        let xw = xs.dot(&self.w_ih) + &self.b_ih;
        let mut hs = Array2::zeros((t_len, hd));
        let mut cache = GruCache {
            h_prev: Array2::zeros((t_len, hd)),
            r: Array2::zeros((t_len, hd)),
            z: Array2::zeros((t_len, hd)),
            n: Array2::zeros((t_len, hd)),
            hn: Array2::zeros((t_len, hd)),
        };
        let mut h = h0.to_owned();
        for t in 0..t_len {
            let (h_new, [r, z, n, hn]) = self.cell(xw.row(t), h.view());
            cache.h_prev.row_mut(t).assign(&h);
            cache.r.row_mut(t).assign(&r);
            cache.z.row_mut(t).assign(&z);
            cache.n.row_mut(t).assign(&n);
            cache.hn.row_mut(t).assign(&hn);
            hs.row_mut(t).assign(&h_new);
            h = h_new;
        }
        (hs, cache)
    }

    /// Backpropagates `d_hs` (gradient w.r.t. every output state). Returns `(dL/dxs, dL/dh0)`.
    pub fn backward_seq(
        &self,
        xs: &ArrayView2<f64>,
        cache: &GruCache,
        d_hs: &ArrayView2<f64>,
        grad: &mut Gru,
    ) -> (Array2<f64>, Array1<f64>) {
        let t_len = xs.nrows();
        let hd = self.hidden();
        let mut d_xw = Array2::<f64>::zeros((t_len, 3 * hd));
        let mut d_hw_all = Array2::<f64>::zeros((t_len, 3 * hd));
        let mut dh = Array1::<f64>::zeros(hd);
        for t in (0..t_len).rev() {
            dh += &d_hs.row(t);
            let (r, z, n, hn, hp) = (
                cache.r.row(t),
                cache.z.row(t),
                cache.n.row(t),
                cache.hn.row(t),
                cache.h_prev.row(t),
            );
            let dn = &dh * &(1.0 - &z);
            let dz = &dh * &(&hp - &n);
            let dn_pre = &dn * &(1.0 - &(&n * &n));
            let dr = &dn_pre * &hn;
            let dr_pre = &dr * &(&r * &(1.0 - &r));
            let dz_pre = &dz * &(&z * &(1.0 - &z));
            {
                let mut row = d_xw.row_mut(t);
                row.slice_mut(s![..hd]).assign(&dr_pre);
                row.slice_mut(s![hd..2 * hd]).assign(&dz_pre);
                row.slice_mut(s![2 * hd..]).assign(&dn_pre);
            }
            let mut d_hw = d_hw_all.row_mut(t);
            d_hw.slice_mut(s![..hd]).assign(&dr_pre);
            d_hw.slice_mut(s![hd..2 * hd]).assign(&dz_pre);
            d_hw.slice_mut(s![2 * hd..]).assign(&(&dn_pre * &r));
            dh = d_hw.dot(&self.w_hh.t()) + &dh * &z;
        }
        grad.w_hh += &cache.h_prev.t().dot(&d_hw_all);
        grad.b_hh += &d_hw_all.sum_axis(Axis(0));
        grad.w_ih += &xs.t().dot(&d_xw);
        grad.b_ih += &d_xw.sum_axis(Axis(0));
        (d_xw.dot(&self.w_ih.t()), dh)
    }
}

impl Parameters for Gru {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "w_ih"), slice(&self.w_ih));
        f(&join(prefix, "w_hh"), slice(&self.w_hh));
        f(&join(prefix, "b_ih"), slice(&self.b_ih));
        f(&join(prefix, "b_hh"), slice(&self.b_hh));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w_ih"), slice_mut(&mut self.w_ih));
        f(&join(prefix, "w_hh"), slice_mut(&mut self.w_hh));
        f(&join(prefix, "b_ih"), slice_mut(&mut self.b_ih));
        f(&join(prefix, "b_hh"), slice_mut(&mut self.b_hh));
    }
}

/// Strided 1-D convolution over a single-channel-major signal (`channels × time`), padded so
/// that the output has `floor(len / stride)` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    /// `(in_channels * kernel) × out_channels`, input-channel major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= stride, "kernel must cover the stride");
        let lin = Linear::new(rng, c_in * kernel, c_out);
        Self {
            w: lin.w,
            b: lin.b,
            kernel,
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn left_pad(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn out_len(&self, len: usize) -> usize {
        len / self.stride
    }

    /// im2col of `x` (`time × c_in`) into `out_len × (c_in * kernel)` patches.
    pub fn patches(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (len, c_in) = x.dim();
        let out_len = self.out_len(len);
        let pad = self.left_pad() as isize;
        let k = self.kernel;
        let mut p = Array2::<f64>::zeros((out_len, c_in * k));
        for t in 0..out_len {
            let base = (t * self.stride) as isize - pad;
            let mut row = p.row_mut(t);
            for j in 0..k {
                let src = base + j as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xr = x.row(src as usize);
                for c in 0..c_in {
                    row[c * k + j] = xr[c];
                }
            }
        }
        p
    }

    /// `x` is `time × c_in`; returns `(output time × c_out, patches)`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let p = self.patches(x);
        (p.dot(&self.w) + &self.b, p)
    }

    /// Returns `dL/dx` with the same shape as the forward input.
    pub fn backward(
        &self,
        input_len: usize,
        patches: &Array2<f64>,
        dy: &ArrayView2<f64>,
        grad: &mut Conv1d,
    ) -> Array2<f64> {
        grad.w += &patches.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        let dp = dy.dot(&self.w.t());
        let c_in = self.c_in();
        let k = self.kernel;
        let pad = self.left_pad() as isize;
        let mut dx = Array2::<f64>::zeros((input_len, c_in));
        for t in 0..dp.nrows() {
            let base = (t * self.stride) as isize - pad;
            let row = dp.row(t);
            for j in 0..k {
                let src = base + j as isize;
                if src < 0 || src as usize >= input_len {
                    continue;
                }
                let mut xr = dx.row_mut(src as usize);
                for c in 0..c_in {
                    xr[c] += row[c * k + j];
                }
            }
        }
        dx
    }
}

impl Parameters for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "w"), slice(&self.w));
        f(&join(prefix, "b"), slice(&self.b));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice_mut(&mut self.w));
        f(&join(prefix, "b"), slice_mut(&mut self.b));
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Multiplies `dy` by the ReLU derivative evaluated at the activation output `y`.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn log_softmax_vec(logits: &ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over any [`Parameters`] implementor, with flat moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient layout mismatch");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut("", &mut |_, p| {
            for (i, x) in p.iter_mut().enumerate() {
                let k = off + i;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            off += p.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Central differences of `loss` w.r.t. every entry of `x`.
    fn numeric_grad(x: &mut Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = x[[r, c]];
            x[[r, c]] = orig + h;
            let lp = loss(x);
            x[[r, c]] = orig - h;
            let lm = loss(x);
            x[[r, c]] = orig;
            g[[r, c]] = (lp - lm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale.max(1e-300)
    }

    #[test]
    fn gru_input_and_state_gradients() {
        let mut r = rng();
        let gru = Gru::new(&mut r, 3, 4);
        let mut xs = uniform_matrix(&mut r, 5, 3, 1.0);
        let h0 = uniform_vector(&mut r, 4, 0.5);
        let weights = uniform_matrix(&mut r, 5, 4, 1.0);
        let loss = |xs: &Array2<f64>, h0: &Array1<f64>| -> f64 {
            let (hs, _) = gru.forward_seq(&xs.view(), &h0.view());
            (&hs * &weights).sum()
        };
        let (_, cache) = gru.forward_seq(&xs.view(), &h0.view());
        let mut grad = gru.zeros_like();
        let (dx, dh0) = gru.backward_seq(&xs.view(), &cache, &weights.view(), &mut grad);
        let num_dx = numeric_grad(&mut xs, |x| loss(x, &h0));
        assert!(rel_err(&dx, &num_dx) < 1e-7);
        let mut h0m = h0.clone().insert_axis(Axis(0));
        let num_dh0 = numeric_grad(&mut h0m, |h| loss(&xs, &h.row(0).to_owned()));
        assert!(rel_err(&dh0.insert_axis(Axis(0)), &num_dh0) < 1e-7);
        let mut w_hh = gru.w_hh.clone();
        let num_whh = numeric_grad(&mut w_hh, |w| {
            let g2 = Gru {
                w_hh: w.clone(),
                ..gru.clone()
            };
            let (hs, _) = g2.forward_seq(&xs.view(), &h0.view());
            (&hs * &weights).sum()
        });
        assert!(rel_err(&grad.w_hh, &num_whh) < 1e-7);
    }

    #[test]
    fn gru_step_matches_sequence() {
        let mut r = rng();
        let gru = Gru::new(&mut r, 3, 4);
        let xs = uniform_matrix(&mut r, 6, 3, 1.0);
        let h0 = uniform_vector(&mut r, 4, 0.5);
        let (hs, _) = gru.forward_seq(&xs.view(), &h0.view());
        let mut h = h0.clone();
        for t in 0..6 {
            h = gru.step(&xs.row(t), &h.view());
            for (a, b) in h.iter().zip(hs.row(t)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_output_length_and_gradients() {
        let mut r = rng();
        let conv = Conv1d::new(&mut r, 2, 3, 4, 2);
        let mut x = uniform_matrix(&mut r, 11, 2, 1.0);
        let (y, p) = conv.forward(&x.view());
        assert_eq!(y.dim(), (5, 3));
        let weights = uniform_matrix(&mut r, 5, 3, 1.0);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(11, &p, &weights.view(), &mut grad);
        let num = numeric_grad(&mut x, |x| (&conv.forward(&x.view()).0 * &weights).sum());
        assert!(rel_err(&dx, &num) < 1e-7);
        let mut w = conv.w.clone();
        let num_w = numeric_grad(&mut w, |w| {
            let c2 = Conv1d {
                w: w.clone(),
                ..conv.clone()
            };
            (&c2.forward(&x.view()).0 * &weights).sum()
        });
        assert!(rel_err(&grad.w, &num_w) < 1e-7);
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        let ls = log_softmax(&l);
        for row in ls.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut r = rng();
        let mut lin = Linear::new(&mut r, 2, 1);
        let mut adam = Adam::new(AdamConfig::default(), lin.num_parameters());
        for _ in 0..2000 {
            let mut g = lin.zeros_like();
            g.w.assign(&(&lin.w * 2.0));
            g.b.assign(&(&lin.b * 2.0));
            adam.step(&mut lin, &g, 1e-2);
        }
        assert!(lin.l2_norm() < 1e-3);
    }
}
