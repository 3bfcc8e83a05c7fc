//! Forward and backward kernels for the primitive layer kinds.
//!
//! Convolutions unfold the whole batch into one column matrix so each layer
//! is a single GEMM per direction. All reductions run in a fixed order.

use crate::resize::{axis_taps, resample_plane, Tap};
use crate::tensor::{Real, Tensor4};

/// Geometry of a sliding window over a `(channels, in_h, in_w)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < len).then_some(p)
    }
}

/// `⌊(len + 2·pad − k) / stride⌋ + 1`, or `None` when the window does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// `(len − 1)·stride − 2·pad + k + output_pad`.
pub fn transposed_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    ((len - 1) * stride + kernel + output_pad).checked_sub(2 * pad)
}

/// Unfolds one image into columns `[col0, col0 + positions)` of a row-major
/// matrix with `ld` columns.
fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T], ld: usize, col0: usize) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oh in 0..g.out_h {
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.source(oh, ki, g.in_h) {
                        None => out_row.fill(T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                            for (ow, v) in out_row.iter_mut().enumerate() {
                                *v = match g.source(ow, kj, g.in_w) {
                                    Some(iw) => src[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Real>(cols: &[T], g: &Window, ld: usize, col0: usize, img: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oh in 0..g.out_h {
                    let Some(ih) = g.source(oh, ki, g.in_h) else {
                        continue;
                    };
                    let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        if let Some(iw) = g.source(ow, kj, g.in_w) {
                            dst[iw] = dst[iw] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn unfold_batch<T: Real>(x: &Tensor4<T>, g: &Window) -> Vec<T> {
    let n = x.batch();
    let ld = n * g.positions();
    let mut cols = vec![T::zero(); g.rows() * ld];
    for i in 0..n {
        let item = &x.data()[i * x.item_len()..(i + 1) * x.item_len()];
        im2col(item, g, &mut cols, ld, i * g.positions());
    }
    cols
}

/// `(n, c, p)` → `(c, n·p)`.
fn channels_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..ch * n * p + (i + 1) * p]
                .copy_from_slice(&x[(i * c + ch) * p..(i * c + ch + 1) * p]);
        }
    }
    out
}

/// `(c, n·p)` → `(n, c, p)`.
fn batch_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * p..(i * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + i * p..ch * n * p + (i + 1) * p]);
        }
    }
    out
}

fn add_bias<T: Real>(y: &mut Tensor4<T>, bias: &[T]) {
    let (c, p) = (y.channels(), y.plane_len());
    for (idx, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let b = bias[idx % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Real>(dy: &Tensor4<T>) -> Vec<T> {
    let (c, p) = (dy.channels(), dy.plane_len());
    let mut db = vec![T::zero(); c];
    for (idx, chunk) in dy.data().chunks(p).enumerate() {
        db[idx % c] = db[idx % c] + chunk.iter().copied().sum::<T>();
    }
    db
}

pub struct ParamGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

/// Convolution. `weight` is `(out_c, in_c, k, k)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_c: usize,
    g: &Window,
) -> Tensor4<T> {
    let n = x.batch();
    let ld = n * g.positions();
    let cols = unfold_batch(x, g);
    let mut y_cm = vec![T::zero(); out_c * ld];
    T::gemm(
        out_c,
        g.rows(),
        ld,
        T::one(),
        weight,
        (g.rows(), 1),
        &cols,
        (ld, 1),
        T::zero(),
        &mut y_cm,
        (ld, 1),
    );
    let data = batch_major(&y_cm, n, out_c, g.positions());
    let mut y = Tensor4::from_vec([n, out_c, g.out_h, g.out_w], data).expect("conv output dims");
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    has_bias: bool,
    dy: &Tensor4<T>,
    g: &Window,
) -> ParamGrads<T> {
    let n = x.batch();
    let out_c = dy.channels();
    let ld = n * g.positions();
    let cols = unfold_batch(x, g);
    let dy_cm = channels_major(dy.data(), n, out_c, g.positions());

    let mut dw = vec![T::zero(); out_c * g.rows()];
    T::gemm(
        out_c,
        ld,
        g.rows(),
        T::one(),
        &dy_cm,
        (ld, 1),
        &cols,
        (1, ld),
        T::zero(),
        &mut dw,
        (g.rows(), 1),
    );

    let mut dcols = cols;
    T::gemm(
        g.rows(),
        out_c,
        ld,
        T::one(),
        weight,
        (1, g.rows()),
        &dy_cm,
        (ld, 1),
        T::zero(),
        &mut dcols,
        (ld, 1),
    );
    let mut dx = Tensor4::zeros(x.dims());
    let item = x.item_len();
    for i in 0..n {
        col2im(
            &dcols,
            g,
            ld,
            i * g.positions(),
            &mut dx.data_mut()[i * item..(i + 1) * item],
        );
    }
    ParamGrads {
        input: dx,
        weight: dw,
        bias: has_bias.then(|| bias_grad(dy)),
    }
}

/// Transposed convolution. `weight` is `(in_c, out_c, k, k)`; `g` describes
/// the adjoint convolution, i.e. a window over the *output* image whose
/// positions are the input pixels.
pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &Window,
) -> Tensor4<T> {
    let n = x.batch();
    let in_c = x.channels();
    let ld = n * g.positions();
    let x_cm = channels_major(x.data(), n, in_c, g.positions());
    let mut cols = vec![T::zero(); g.rows() * ld];
    T::gemm(
        g.rows(),
        in_c,
        ld,
        T::one(),
        weight,
        (1, g.rows()),
        &x_cm,
        (ld, 1),
        T::zero(),
        &mut cols,
        (ld, 1),
    );
    let mut y = Tensor4::zeros([n, g.channels, g.in_h, g.in_w]);
    let item = y.item_len();
    for i in 0..n {
        col2im(
            &cols,
            g,
            ld,
            i * g.positions(),
            &mut y.data_mut()[i * item..(i + 1) * item],
        );
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    has_bias: bool,
    dy: &Tensor4<T>,
    g: &Window,
) -> ParamGrads<T> {
    let n = x.batch();
    let in_c = x.channels();
    let ld = n * g.positions();
    let dcols = unfold_batch(dy, g);
    let x_cm = channels_major(x.data(), n, in_c, g.positions());

    let mut dx_cm = vec![T::zero(); in_c * ld];
    T::gemm(
        in_c,
        g.rows(),
        ld,
        T::one(),
        weight,
        (g.rows(), 1),
        &dcols,
        (ld, 1),
        T::zero(),
        &mut dx_cm,
        (ld, 1),
    );
    let mut dw = vec![T::zero(); in_c * g.rows()];
    T::gemm(
        in_c,
        ld,
        g.rows(),
        T::one(),
        &x_cm,
        (ld, 1),
        &dcols,
        (1, ld),
        T::zero(),
        &mut dw,
        (g.rows(), 1),
    );
    ParamGrads {
        input: Tensor4::from_vec(x.dims(), batch_major(&dx_cm, n, in_c, g.positions()))
            .expect("dx dims"),
        weight: dw,
        bias: has_bias.then(|| bias_grad(dy)),
    }
}

/// Per-channel statistics of one batch-norm evaluation.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn channel_planes<T>(x: &Tensor4<T>, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let p = x.plane_len();
    let channels = x.channels();
    (0..x.batch()).map(move |n| {
        let start = (n * channels + c) * p;
        start..start + p
    })
}

pub fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor4<T>, BatchStats<T>) {
    let c_count = x.channels();
    let m = (x.batch() * x.plane_len()) as f64;
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c_count),
        inv_std: Vec::with_capacity(c_count),
        var_unbiased: Vec::with_capacity(c_count),
    };
    let mut y = Tensor4::zeros(x.dims());
    for c in 0..c_count {
        let mut sum = 0.0f64;
        for r in channel_planes(x, c) {
            sum += x.data()[r].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for r in channel_planes(x, c) {
            sq += x.data()[r]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / m;
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        let (mean_t, inv_t) = (T::lit(mean), T::lit(inv_std));
        for r in channel_planes(x, c) {
            for (yv, xv) in y.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
                *yv = gamma[c] * (*xv - mean_t) * inv_t + beta[c];
            }
        }
        stats.mean.push(mean_t);
        stats.inv_std.push(inv_t);
        stats
            .var_unbiased
            .push(T::lit(if m > 1.0 { var * m / (m - 1.0) } else { var }));
    }
    (y, stats)
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor4<T> {
    let mut y = Tensor4::zeros(x.dims());
    for c in 0..x.channels() {
        let inv = T::one() / (running_var[c] + T::lit(BN_EPS)).sqrt();
        let scale = gamma[c] * inv;
        let shift = beta[c] - running_mean[c] * scale;
        for r in channel_planes(x, c) {
            for (yv, xv) in y.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
                *yv = *xv * scale + shift;
            }
        }
    }
    y
}

/// Backward of the affine eval-mode normalization; returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let c_count = x.channels();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dgamma = vec![T::zero(); c_count];
    let mut dbeta = vec![T::zero(); c_count];
    for c in 0..c_count {
        let scale = gamma[c] * inv_std[c];
        for r in channel_planes(x, c) {
            for ((o, d), xv) in dx.data_mut()[r.clone()]
                .iter_mut()
                .zip(&dy.data()[r.clone()])
                .zip(&x.data()[r])
            {
                *o = *d * scale;
                dgamma[c] = dgamma[c] + *d * (*xv - mean[c]) * inv_std[c];
                dbeta[c] = dbeta[c] + *d;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    stats: &BatchStats<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let c_count = x.channels();
    let m = T::lit((x.batch() * x.plane_len()) as f64);
    let mut dx = Tensor4::zeros(x.dims());
    let mut dgamma = vec![T::zero(); c_count];
    let mut dbeta = vec![T::zero(); c_count];
    for c in 0..c_count {
        let (mean, inv) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for r in channel_planes(x, c) {
            for (d, xv) in dy.data()[r.clone()].iter().zip(&x.data()[r]) {
                sum_dy = sum_dy + *d;
                sum_dy_xhat = sum_dy_xhat + *d * (*xv - mean) * inv;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * inv / m;
        for r in channel_planes(x, c) {
            for ((g, d), xv) in dx.data_mut()[r.clone()]
                .iter_mut()
                .zip(&dy.data()[r.clone()])
                .zip(&x.data()[r])
            {
                let xhat = (*xv - mean) * inv;
                *g = k * (m * *d - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()));
    y
}

pub fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(d, yv)| {
            if *yv <= T::zero() {
                *d = T::zero()
            }
        });
    dx
}

/// Logistic sigmoid, kept strictly inside `(0, 1)` even where `f32` would round to an endpoint.
pub fn sigmoid_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        let s = if *v >= T::zero() {
            T::one() / (T::one() + (-*v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        *v = s.max(lo).min(hi);
    });
    y
}

pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(d, s)| *d = *d * *s * (T::one() - *s));
    dx
}

/// Max pooling; also returns the flat input index of each output's maximum.
pub fn max_pool_forward<T: Real>(x: &Tensor4<T>, g: &Window) -> (Tensor4<T>, Vec<u32>) {
    let [n, c, _, _] = x.dims();
    let mut y = Tensor4::zeros([n, c, g.out_h, g.out_w]);
    let mut argmax = vec![0u32; y.len()];
    let plane_in = g.in_h * g.in_w;
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * plane_in;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = base;
                for ki in 0..g.kernel {
                    let Some(ih) = g.source(oh, ki, g.in_h) else {
                        continue;
                    };
                    for kj in 0..g.kernel {
                        let Some(iw) = g.source(ow, kj, g.in_w) else {
                            continue;
                        };
                        let idx = base + ih * g.in_w + iw;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.data_mut()[o] = best;
                argmax[o] = best_idx as u32;
                o += 1;
            }
        }
    }
    (y, argmax)
}

pub fn max_pool_backward<T: Real>(
    input_dims: [usize; 4],
    argmax: &[u32],
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input_dims);
    for (d, &idx) in dy.data().iter().zip(argmax) {
        let slot = &mut dx.data_mut()[idx as usize];
        *slot = *slot + *d;
    }
    dx
}

pub fn add_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let mut y = a.clone();
    y.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(v, w)| *v = *v + *w);
    y
}

pub fn concat_forward<T: Real>(parts: &[&Tensor4<T>]) -> Tensor4<T> {
    let [n, _, h, w] = parts[0].dims();
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(&p.data()[i * p.item_len()..(i + 1) * p.item_len()]);
        }
    }
    Tensor4::from_vec([n, c, h, w], data).expect("concat dims")
}

/// Splits the upstream gradient back into per-input channel ranges.
pub fn concat_backward<T: Real>(part_channels: &[usize], dy: &Tensor4<T>) -> Vec<Tensor4<T>> {
    let [n, _, h, w] = dy.dims();
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = part_channels
        .iter()
        .map(|c| Vec::with_capacity(n * c * plane))
        .collect();
    for i in 0..n {
        let mut offset = i * dy.item_len();
        for (out, c) in outs.iter_mut().zip(part_channels) {
            out.extend_from_slice(&dy.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    outs.into_iter()
        .zip(part_channels)
        .map(|(d, &c)| Tensor4::from_vec([n, c, h, w], d).expect("concat grad dims"))
        .collect()
}

pub struct ResizePlan {
    pub rows: Vec<Tap>,
    pub cols: Vec<Tap>,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }
}

pub fn resize_forward<T: Real>(x: &Tensor4<T>, plan: &ResizePlan) -> Tensor4<T> {
    let [n, c, _, w] = x.dims();
    let (oh, ow) = (plan.rows.len(), plan.cols.len());
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let (pin, pout) = (x.plane_len(), oh * ow);
    for nc in 0..n * c {
        resample_plane(
            &x.data()[nc * pin..(nc + 1) * pin],
            w,
            &plan.rows,
            &plan.cols,
            &mut y.data_mut()[nc * pout..(nc + 1) * pout],
        );
    }
    y
}

pub fn resize_backward<T: Real>(
    input_dims: [usize; 4],
    plan: &ResizePlan,
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let [n, c, _, w] = input_dims;
    let mut dx = Tensor4::zeros(input_dims);
    let pin = dx.plane_len();
    let ow = plan.cols.len();
    let pout = dy.plane_len();
    for nc in 0..n * c {
        let src = &dy.data()[nc * pout..(nc + 1) * pout];
        let dst = &mut dx.data_mut()[nc * pin..(nc + 1) * pin];
        for (i, r) in plan.rows.iter().enumerate() {
            let wr = T::lit(r.w);
            for (j, col) in plan.cols.iter().enumerate() {
                let wc = T::lit(col.w);
                let d = src[i * ow + j];
                let top = d * (T::one() - wr);
                let bottom = d * wr;
                dst[r.lo * w + col.lo] = dst[r.lo * w + col.lo] + top * (T::one() - wc);
                dst[r.lo * w + col.hi] = dst[r.lo * w + col.hi] + top * wc;
                dst[r.hi * w + col.lo] = dst[r.hi * w + col.lo] + bottom * (T::one() - wc);
                dst[r.hi * w + col.hi] = dst[r.hi * w + col.hi] + bottom * wc;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(c: usize, h: usize, k: usize, s: usize, p: usize) -> Window {
        let o = conv_out_len(h, k, s, p).unwrap();
        Window {
            channels: c,
            in_h: h,
            in_w: h,
            kernel: k,
            stride: s,
            pad: p,
            out_h: o,
            out_w: o,
        }
    }

    #[test]
    fn output_length_formulas() {
        assert_eq!(conv_out_len(64, 7, 2, 3), Some(32));
        assert_eq!(conv_out_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(transposed_out_len(16, 3, 2, 1, 0), Some(31));
        assert_eq!(transposed_out_len(16, 3, 2, 1, 1), Some(32));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = window(2, 5, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 2 * 25).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = Tensor4::from_vec([2, 2, 5, 5], x).unwrap();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let y = conv2d_forward(&x, &w, Some(&[0.5, -1.0, 2.0]), 3, &g);
        for n in 0..2 {
            for o in 0..3 {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = [0.5, -1.0, 2.0][o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow * 2 + kj) as isize - 1;
                                    if ih < 0 || iw < 0 || ih >= 5 || iw >= 5 {
                                        continue;
                                    }
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data()[x.index(n, c, ih as usize, iw as usize)];
                                }
                            }
                        }
                        assert_eq!(y.data()[y.index(n, o, oh, ow)], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with the same weights
        let g = window(3, 6, 3, 2, 1);
        let x: Vec<f64> = (0..108).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor4::from_vec([1, 3, 6, 6], x).unwrap();
        let w: Vec<f64> = (0..4 * 27).map(|i| (i as f64 * 0.11).cos()).collect();
        let y = conv2d_forward(&x, &w, None, 4, &g);
        let z: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.23).sin()).collect();
        let z = Tensor4::from_vec(y.dims(), z).unwrap();
        let back = conv_transpose2d_forward(&z, &w, None, &g);
        let lhs: f64 = y.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn concat_backward_splits_exact_channel_ranges() {
        let a = Tensor4::from_vec([2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::from_vec([2, 2, 1, 2], (10..18).map(|v| v as f32).collect()).unwrap();
        let y = concat_forward(&[&a, &b]);
        assert_eq!(y.dims(), [2, 3, 1, 2]);
        let parts = concat_backward(&[1, 2], &y);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let g = window(1, 4, 2, 2, 0);
        let x = Tensor4::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (y, arg) = max_pool_forward(&x, &g);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = max_pool_backward(x.dims(), &arg, &Tensor4::filled(y.dims(), 1.0));
        assert_eq!(dx.data().iter().sum::<f64>(), 4.0);
        assert_eq!(dx.data()[15], 1.0);
    }

    #[test]
    fn sigmoid_stays_open_interval_in_f32() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![-200.0f32, -30.0, 30.0, 200.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
