//! Forward and backward kernels for the layer set used by the CT-DNN and
//! the phone classifier. Every kernel works on a batch of frames laid out
//! as rows of a [`Mat`]; time-indexed kernels take a [`Segments`] map so
//! that neighbours are clamped at segment edges.
//!
//! Feature maps are stored per frame in frequency-major order
//! (`f * channels + c`). The first convolution may instead read a
//! channel-major input, which is what splicing produces.

use super::tensor::{Mat, Real, Segments};
use crate::error::{invalid, Error, Result};

pub fn affine_forward<R: Real>(x: &Mat<R>, w: &Mat<R>, b: &[R]) -> Result<Mat<R>> {
    if x.cols != w.rows || b.len() != w.cols {
        return Err(invalid!(
            "affine: input width {} vs weight {}x{}, bias {}",
            x.cols, w.rows, w.cols, b.len()
        ));
    }
    let mut y = Mat::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(b);
    }
    R::gemm(x.rows, x.cols, w.cols, R::one(), &x.data, x.cols, 1, &w.data, w.cols, 1, R::one(), &mut y.data, w.cols, 1);
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn affine_backward<R: Real>(x: &Mat<R>, w: &Mat<R>, dy: &Mat<R>) -> (Mat<R>, Mat<R>, Vec<R>) {
    let mut dx = Mat::zeros(x.rows, x.cols);
    // dx = dy * w^T
    R::gemm(dy.rows, dy.cols, w.rows, R::one(), &dy.data, dy.cols, 1, &w.data, 1, w.cols, R::zero(), &mut dx.data, x.cols, 1);
    let (dw, db) = weight_grads(x, dy);
    (dx, dw, db)
}

/// `dw = x^T dy`, `db = column sums of dy`.
pub fn weight_grads<R: Real>(x: &Mat<R>, dy: &Mat<R>) -> (Mat<R>, Vec<R>) {
    let mut dw = Mat::zeros(x.cols, dy.cols);
    R::gemm(x.cols, x.rows, dy.cols, R::one(), &x.data, 1, x.cols, &dy.data, dy.cols, 1, R::zero(), &mut dw.data, dy.cols, 1);
    let mut db = vec![R::zero(); dy.cols];
    for r in 0..dy.rows {
        for (acc, &v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    (dw, db)
}

/// Stack the rows at `t + o` for each offset `o` into one wide row.
pub fn gather_offsets<R: Real>(x: &Mat<R>, segs: &Segments, offsets: &[i32]) -> Mat<R> {
    let d = x.cols;
    let mut g = Mat::zeros(x.rows, d * offsets.len());
    for t in 0..x.rows {
        let out = g.row_mut(t);
        for (k, &o) in offsets.iter().enumerate() {
            out[k * d..(k + 1) * d].copy_from_slice(x.row(segs.shift(t, o)));
        }
    }
    g
}

/// Adjoint of [`gather_offsets`].
pub fn scatter_offsets<R: Real>(dg: &Mat<R>, segs: &Segments, offsets: &[i32], d: usize) -> Mat<R> {
    let mut dx = Mat::zeros(dg.rows, d);
    for t in 0..dg.rows {
        for (k, &o) in offsets.iter().enumerate() {
            let src = segs.shift(t, o);
            let row = &dg.data[t * dg.cols + k * d..t * dg.cols + (k + 1) * d];
            for (acc, &v) in dx.data[src * d..(src + 1) * d].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    dx
}

/// Time-delay layer: `y_t = W^T [x_{t+o_1}; ...; x_{t+o_k}] + b`.
/// Returns the output and the gathered input (needed for backward).
pub fn timedelay_forward<R: Real>(
    x: &Mat<R>,
    segs: &Segments,
    offsets: &[i32],
    w: &Mat<R>,
    b: &[R],
) -> Result<(Mat<R>, Mat<R>)> {
    if offsets.is_empty() {
        return Err(invalid!("timedelay: empty offset list"));
    }
    if segs.rows() != x.rows {
        return Err(invalid!("timedelay: {} rows but segment map covers {}", x.rows, segs.rows()));
    }
    let g = gather_offsets(x, segs, offsets);
    let y = affine_forward(&g, w, b)?;
    Ok((y, g))
}

pub fn timedelay_backward<R: Real>(
    gathered: &Mat<R>,
    segs: &Segments,
    offsets: &[i32],
    w: &Mat<R>,
    dy: &Mat<R>,
    in_dim: usize,
) -> (Mat<R>, Mat<R>, Vec<R>) {
    let (dg, dw, db) = affine_backward(gathered, w, dy);
    (scatter_offsets(&dg, segs, offsets, in_dim), dw, db)
}

/// Geometry of a time-frequency convolution. Time taps are given as
/// offsets (edge replicated); the frequency axis is "valid" (no padding).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_freq: usize,
    pub out_channels: usize,
    pub time_offsets: Vec<i32>,
    pub freq_kernel: usize,
    pub freq_stride: usize,
    pub channel_major_input: bool,
}

impl ConvGeom {
    pub fn out_freq(&self) -> Result<usize> {
        if self.freq_stride == 0 || self.freq_kernel == 0 || self.freq_kernel > self.in_freq {
            return Err(invalid!(
                "conv2d: kernel {} / stride {} incompatible with {} frequency bins",
                self.freq_kernel, self.freq_stride, self.in_freq
            ));
        }
        Ok((self.in_freq - self.freq_kernel) / self.freq_stride + 1)
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.in_freq
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.time_offsets.len() * self.freq_kernel
    }

    #[inline]
    fn in_index(&self, c: usize, f: usize) -> usize {
        if self.channel_major_input {
            c * self.in_freq + f
        } else {
            f * self.in_channels + c
        }
    }
}

/// im2col: one row per (frame, output frequency), columns ordered
/// (input channel, time tap, frequency tap).
fn im2col<R: Real>(x: &Mat<R>, segs: &Segments, g: &ConvGeom, fo: usize) -> Mat<R> {
    let kt = g.time_offsets.len();
    let kf = g.freq_kernel;
    let plen = g.patch_len();
    let mut cols = Mat::zeros(x.rows * fo, plen);
    for t in 0..x.rows {
        for (ki, &off) in g.time_offsets.iter().enumerate() {
            let src = x.row(segs.shift(t, off));
            for c in 0..g.in_channels {
                let base = (c * kt + ki) * kf;
                for o in 0..fo {
                    let row = &mut cols.data[(t * fo + o) * plen..(t * fo + o + 1) * plen];
                    let f0 = o * g.freq_stride;
                    for j in 0..kf {
                        row[base + j] = src[g.in_index(c, f0 + j)];
                    }
                }
            }
        }
    }
    cols
}

/// Returns the output (frequency-major, `out_freq * out_channels` wide)
/// and the im2col buffer.
pub fn conv2d_forward<R: Real>(
    x: &Mat<R>,
    segs: &Segments,
    g: &ConvGeom,
    w: &Mat<R>,
    b: &[R],
) -> Result<(Mat<R>, Mat<R>)> {
    let fo = g.out_freq()?;
    if g.time_offsets.is_empty() {
        return Err(invalid!("conv2d: empty time kernel"));
    }
    if x.cols != g.in_dim() {
        return Err(invalid!("conv2d: input width {} but geometry expects {}", x.cols, g.in_dim()));
    }
    if w.rows != g.patch_len() || w.cols != g.out_channels || b.len() != g.out_channels {
        return Err(invalid!("conv2d: kernel tensor {}x{} does not match geometry", w.rows, w.cols));
    }
    let cols = im2col(x, segs, g, fo);
    let y = affine_forward(&cols, w, b)?;
    Ok((Mat::from_vec(x.rows, fo * g.out_channels, y.data), cols))
}

pub fn conv2d_backward<R: Real>(
    cols: &Mat<R>,
    segs: &Segments,
    g: &ConvGeom,
    w: &Mat<R>,
    dy: &Mat<R>,
) -> (Mat<R>, Mat<R>, Vec<R>) {
    let fo = cols.rows / dy.rows.max(1);
    let dy2 = Mat::from_vec(cols.rows, g.out_channels, dy.data.clone());
    let (dcols, dw, db) = affine_backward(cols, w, &dy2);
    let kt = g.time_offsets.len();
    let kf = g.freq_kernel;
    let plen = g.patch_len();
    let mut dx = Mat::zeros(dy.rows, g.in_dim());
    for t in 0..dy.rows {
        for (ki, &off) in g.time_offsets.iter().enumerate() {
            let src = segs.shift(t, off);
            for c in 0..g.in_channels {
                let base = (c * kt + ki) * kf;
                for o in 0..fo {
                    let row = &dcols.data[(t * fo + o) * plen..(t * fo + o + 1) * plen];
                    let f0 = o * g.freq_stride;
                    for j in 0..kf {
                        let idx = g.in_index(c, f0 + j);
                        dx.data[src * g.in_dim() + idx] += row[base + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Plain 2-D max pooling over an `h x w` map ("valid" windows).
/// Returns the pooled map and its shape.
pub fn maxpool2d_forward<R: Real>(
    map: &[R],
    h: usize,
    w: usize,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Vec<R>, usize, usize)> {
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 || wh == 0 || ww == 0 || wh > h || ww > w || map.len() != h * w {
        return Err(invalid!("maxpool: window {window:?} stride {stride:?} on {h}x{w} map"));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut m = R::neg_infinity();
            for a in 0..wh {
                for b in 0..ww {
                    m = m.max(map[(i * sh + a) * w + j * sw + b]);
                }
            }
            out.push(m);
        }
    }
    Ok((out, oh, ow))
}

/// Frequency-only max pooling of a frequency-major map. Returns the output
/// and, per output element, the flat input index that won (first on ties).
pub fn maxpool_freq_forward<R: Real>(
    x: &Mat<R>,
    channels: usize,
    in_freq: usize,
    window: usize,
    stride: usize,
) -> Result<(Mat<R>, Vec<u32>)> {
    if window == 0 || stride == 0 || window > in_freq || x.cols != channels * in_freq {
        return Err(invalid!("maxpool: window {window} stride {stride} on {in_freq} bins x {channels} maps (input width {})", x.cols));
    }
    let fo = (in_freq - window) / stride + 1;
    let mut y = Mat::zeros(x.rows, fo * channels);
    let mut arg = vec![0u32; x.rows * fo * channels];
    for t in 0..x.rows {
        let xr = x.row(t);
        for o in 0..fo {
            for c in 0..channels {
                let mut best = o * stride * channels + c;
                for k in 1..window {
                    let idx = (o * stride + k) * channels + c;
                    if xr[idx] > xr[best] {
                        best = idx;
                    }
                }
                y.data[t * fo * channels + o * channels + c] = xr[best];
                arg[t * fo * channels + o * channels + c] = best as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool_freq_backward<R: Real>(dy: &Mat<R>, arg: &[u32], in_dim: usize) -> Mat<R> {
    let mut dx = Mat::zeros(dy.rows, in_dim);
    for t in 0..dy.rows {
        for j in 0..dy.cols {
            dx.data[t * in_dim + arg[t * dy.cols + j] as usize] += dy.data[t * dy.cols + j];
        }
    }
    dx
}

/// `y_j = (sum_{i in group j} |x_i|^p)^(1/p)` over contiguous groups.
pub fn pnorm_forward<R: Real>(x: &Mat<R>, group: usize, p: f64) -> Result<Mat<R>> {
    if group == 0 || x.cols % group != 0 {
        return Err(invalid!("pnorm: input width {} not divisible by group size {group}", x.cols));
    }
    if p < 1.0 {
        return Err(invalid!("pnorm: p = {p} < 1"));
    }
    let out = x.cols / group;
    let mut y = Mat::zeros(x.rows, out);
    let two = p == 2.0;
    let pr = R::from_f64c(p);
    let inv = R::from_f64c(1.0 / p);
    for t in 0..x.rows {
        let xr = x.row(t);
        for j in 0..out {
            let g = &xr[j * group..(j + 1) * group];
            y.data[t * out + j] = if two {
                g.iter().map(|&v| v * v).sum::<R>().sqrt()
            } else {
                g.iter().map(|&v| v.abs().powf(pr)).sum::<R>().powf(inv)
            };
        }
    }
    Ok(y)
}

/// Gradient is taken as zero wherever the group norm is zero.
pub fn pnorm_backward<R: Real>(x: &Mat<R>, y: &Mat<R>, dy: &Mat<R>, group: usize, p: f64) -> Mat<R> {
    let mut dx = Mat::zeros(x.rows, x.cols);
    let pm1 = R::from_f64c(p - 1.0);
    for t in 0..x.rows {
        for j in 0..y.cols {
            let yn = y.data[t * y.cols + j];
            if yn <= R::zero() {
                continue;
            }
            let g = dy.data[t * y.cols + j];
            let denom = if p == 2.0 { yn } else { yn.powf(pm1) };
            for i in j * group..(j + 1) * group {
                let v = x.data[t * x.cols + i];
                let num = if p == 2.0 { v } else { v.abs().powf(pm1) * v.signum() };
                dx.data[t * x.cols + i] = g * num / denom;
            }
        }
    }
    dx
}

pub const LENGTHNORM_EPS: f64 = 1e-12;

/// Row-wise L2 normalisation. Returns the output and the row norms.
pub fn lengthnorm_forward<R: Real>(x: &Mat<R>) -> Result<(Mat<R>, Vec<R>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let n = x.row(t).iter().map(|&v| v * v).sum::<R>().sqrt();
        if n.to_f64c() <= LENGTHNORM_EPS {
            return Err(Error::Degenerate(format!("lengthnorm: row {t} has norm {}", n.to_f64c())));
        }
        for v in y.row_mut(t) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((y, norms))
}

/// `dx = (I - y y^T) dy / |x|`.
pub fn lengthnorm_backward<R: Real>(y: &Mat<R>, norms: &[R], dy: &Mat<R>) -> Mat<R> {
    let mut dx = Mat::zeros(y.rows, y.cols);
    for t in 0..y.rows {
        let yr = y.row(t);
        let dr = dy.row(t);
        let dot: R = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        let n = norms[t];
        for ((o, &yv), &dv) in dx.row_mut(t).iter_mut().zip(yr).zip(dr) {
            *o = (dv - yv * dot) / n;
        }
    }
    dx
}

/// Cross-entropy of one row of logits against `label`, with the gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_xent<R: Real>(logits: &[R], label: usize) -> Result<(f64, Vec<R>)> {
    if label >= logits.len() {
        return Err(invalid!("softmax_xent: label {label} outside {} classes", logits.len()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64c()));
    let exps: Vec<f64> = logits.iter().map(|&v| (v.to_f64c() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(logits[label].to_f64c() - max - z.ln());
    let mut grad: Vec<R> = exps.iter().map(|&e| R::from_f64c(e / z)).collect();
    grad[label] -= R::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = crate::util::rng(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| crate::util::normal(&mut r)).collect())
    }

    #[test]
    fn affine_identity() {
        let x = rand_mat(4, 3, 1);
        let y = affine_forward(&x, &Mat::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn affine_shape_mismatch_is_rejected() {
        let x = rand_mat(2, 3, 1);
        assert!(matches!(affine_forward(&x, &Mat::identity(4), &[0.0; 4]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rand_mat(5, 7, 2);
        let g = ConvGeom {
            in_channels: 1,
            in_freq: 7,
            out_channels: 1,
            time_offsets: vec![0],
            freq_kernel: 1,
            freq_stride: 1,
            channel_major_input: true,
        };
        let (y, _) = conv2d_forward(&x, &Segments::single(5), &g, &Mat::from_vec(1, 1, vec![1.0]), &[0.0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        // 6x6 single-channel map laid out as 6 frames of 6 bins.
        let x = rand_mat(6, 6, 3);
        let offsets = vec![-1, 0, 1];
        let g = ConvGeom {
            in_channels: 1,
            in_freq: 6,
            out_channels: 2,
            time_offsets: offsets.clone(),
            freq_kernel: 3,
            freq_stride: 1,
            channel_major_input: true,
        };
        let w = rand_mat(3 * 3, 2, 4);
        let b = [0.5, -0.25];
        let segs = Segments::single(6);
        let (y, _) = conv2d_forward(&x, &segs, &g, &w, &b).unwrap();
        for t in 0..6i32 {
            for o in 0..4 {
                for oc in 0..2 {
                    let mut acc = b[oc];
                    for (ki, &dt) in offsets.iter().enumerate() {
                        let src = (t + dt).clamp(0, 5) as usize;
                        for j in 0..3 {
                            acc += w.at(ki * 3 + j, oc) * x.at(src, o + j);
                        }
                    }
                    let got = y.at(t as usize, o * 2 + oc);
                    assert!((got - acc).abs() < 1e-6, "t={t} o={o} oc={oc}: {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool_2x2() {
        let (out, oh, ow) = maxpool2d_forward(&[1.0, 2.0, 3.0, 4.0], 2, 2, (2, 2), (2, 2)).unwrap();
        assert_eq!((out, oh, ow), (vec![4.0], 1, 1));
    }

    #[test]
    fn maxpool_freq_picks_max_per_channel() {
        // two bins, two channels, freq-major: [f0c0, f0c1, f1c0, f1c1]
        let x = m(1, 4, &[1.0, 9.0, 3.0, -2.0]);
        let (y, _) = maxpool_freq_forward(&x, 2, 2, 2, 2).unwrap();
        assert_eq!(y.data, vec![3.0, 9.0]);
    }

    #[test]
    fn timedelay_identity_and_dependency() {
        let x = rand_mat(8, 3, 5);
        let segs = Segments::single(8);
        let (y, _) = timedelay_forward(&x, &segs, &[0], &Mat::identity(3), &[0.0; 3]).unwrap();
        assert_eq!(y, x);

        let w = rand_mat(6, 2, 6);
        let (base, _) = timedelay_forward(&x, &segs, &[-1, 2], &w, &[0.0; 2]).unwrap();
        let t = 3;
        let mut x2 = x.clone();
        x2.data[(t + 2) * 3] += 1.0;
        let (y2, _) = timedelay_forward(&x2, &segs, &[-1, 2], &w, &[0.0; 2]).unwrap();
        assert_ne!(base.row(t), y2.row(t));
        let mut x3 = x.clone();
        x3.data[(t + 3) * 3] += 1.0;
        let (y3, _) = timedelay_forward(&x3, &segs, &[-1, 2], &w, &[0.0; 2]).unwrap();
        assert_eq!(base.row(t), y3.row(t));
    }

    #[test]
    fn timedelay_matches_gather_oracle() {
        let x = rand_mat(7, 4, 7);
        let w = rand_mat(8, 3, 8);
        let b = [0.1, 0.2, 0.3];
        let (y, _) = timedelay_forward(&x, &Segments::single(7), &[-1, 2], &w, &b).unwrap();
        for t in 0..7i32 {
            let mut g = Vec::new();
            for o in [-1, 2] {
                g.extend_from_slice(x.row((t + o).clamp(0, 6) as usize));
            }
            for j in 0..3 {
                let want: f64 = b[j] + (0..8).map(|i| g[i] * w.at(i, j)).sum::<f64>();
                assert!((y.at(t as usize, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pnorm_values() {
        let y = pnorm_forward(&m(1, 2, &[3.0, 4.0]), 2, 2.0).unwrap();
        assert_eq!(y.data, vec![5.0]);
        let y = pnorm_forward(&m(1, 2, &[-3.0, 4.0]), 2, 2.0).unwrap();
        assert_eq!(y.data, vec![5.0]);
        assert!(pnorm_forward(&m(1, 3, &[1.0, 2.0, 3.0]), 2, 2.0).is_err());
    }

    #[test]
    fn pnorm_zero_group_has_zero_gradient() {
        let x = m(1, 2, &[0.0, 0.0]);
        let y = pnorm_forward(&x, 2, 2.0).unwrap();
        let dx = pnorm_backward(&x, &y, &m(1, 1, &[1.0]), 2, 2.0);
        assert_eq!(dx.data, vec![0.0, 0.0]);
    }

    #[test]
    fn lengthnorm_values() {
        let (y, _) = lengthnorm_forward(&m(1, 2, &[3.0, 4.0])).unwrap();
        assert!((y.data[0] - 0.6).abs() < 1e-15 && (y.data[1] - 0.8).abs() < 1e-15);
        let (y2, _) = lengthnorm_forward(&y).unwrap();
        assert!(y2.data.iter().zip(&y.data).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(lengthnorm_forward(&m(1, 2, &[0.0, 0.0])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_xent_values() {
        let (loss, _) = softmax_xent(&[0.0f64; 7], 3).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        let mut l = vec![0.0f64; 5];
        l[2] = 1e6;
        let (loss, _) = softmax_xent(&l, 2).unwrap();
        assert!(loss < 1e-6);
        assert!(softmax_xent(&l, 5).is_err());
    }

    /// Central differences of a scalar function of one matrix.
    fn fd_check(x: &Mat<f64>, analytic: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64, tol: f64) {
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let a = analytic.data[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < tol, "index {i}: analytic {a} vs numeric {num} (rel {rel})");
        }
    }

    #[test]
    fn pnorm_gradient_matches_finite_differences() {
        let x = rand_mat(3, 6, 11);
        let dy = rand_mat(3, 3, 12);
        let y = pnorm_forward(&x, 2, 2.0).unwrap();
        let dx = pnorm_backward(&x, &y, &dy, 2, 2.0);
        fd_check(&x, &dx, |x| {
            let y = pnorm_forward(x, 2, 2.0).unwrap();
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        }, 1e-4);
        // general p
        let y = pnorm_forward(&x, 3, 3.0).unwrap();
        let dy = rand_mat(3, 2, 13);
        let dx = pnorm_backward(&x, &y, &dy, 3, 3.0);
        fd_check(&x, &dx, |x| {
            let y = pnorm_forward(x, 3, 3.0).unwrap();
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        }, 1e-4);
    }

    #[test]
    fn lengthnorm_jvp_matches_finite_differences() {
        let x = rand_mat(2, 5, 14);
        let dy = rand_mat(2, 5, 15);
        let (y, n) = lengthnorm_forward(&x).unwrap();
        let dx = lengthnorm_backward(&y, &n, &dy);
        fd_check(&x, &dx, |x| {
            let (y, _) = lengthnorm_forward(x).unwrap();
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        }, 1e-4);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = rand_mat(1, 6, 16);
        let (_, g) = softmax_xent(&x.data, 4).unwrap();
        fd_check(&x, &Mat::from_vec(1, 6, g), |x| softmax_xent(&x.data, 4).unwrap().0, 1e-4);
    }

    #[test]
    fn conv_and_timedelay_gradients_match_finite_differences() {
        let segs = Segments::from_lengths(&[4, 3]);
        let g = ConvGeom {
            in_channels: 2,
            in_freq: 5,
            out_channels: 3,
            time_offsets: vec![-1, 0, 2],
            freq_kernel: 2,
            freq_stride: 2,
            channel_major_input: true,
        };
        let x = rand_mat(7, 10, 17);
        let w = rand_mat(g.patch_len(), 3, 18);
        let b = vec![0.1, 0.0, -0.1];
        let (y, cols) = conv2d_forward(&x, &segs, &g, &w, &b).unwrap();
        let dy = rand_mat(y.rows, y.cols, 19);
        let (dx, dw, _) = conv2d_backward(&cols, &segs, &g, &w, &dy);
        let obj = |y: &Mat<f64>| -> f64 { y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum() };
        fd_check(&x, &dx, |x| obj(&conv2d_forward(x, &segs, &g, &w, &b).unwrap().0), 1e-6);
        fd_check(&w, &dw, |w| obj(&conv2d_forward(&x, &segs, &g, w, &b).unwrap().0), 1e-6);

        let x = rand_mat(7, 3, 20);
        let w = rand_mat(6, 2, 21);
        let (y, gth) = timedelay_forward(&x, &segs, &[-2, 1], &w, &[0.0, 0.0]).unwrap();
        let dy = rand_mat(y.rows, y.cols, 22);
        let (dx, _, _) = timedelay_backward(&gth, &segs, &[-2, 1], &w, &dy, 3);
        fd_check(&x, &dx, |x| {
            let y = timedelay_forward(x, &segs, &[-2, 1], &w, &[0.0, 0.0]).unwrap().0;
            y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        }, 1e-6);
    }
}
