//! Forward and backward kernels for single samples laid out `C x D x H x W`.
//!
//! Backward kernels accumulate into caller-owned gradient buffers so a batch
//! can be summed in a fixed order.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [c, d, h, w] => Ok([c, d, h, w]),
        ref s => Err(Error::Shape(format!("{what} must be C x D x H x W, got {s:?}"))),
    }
}

fn dims5<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 5]> {
    match *t.shape() {
        [o, c, a, b, g] => Ok([o, c, a, b, g]),
        ref s => Err(Error::Shape(format!("conv weights must be 5-D, got {s:?}"))),
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry shared by the convolution kernels. Both directions work on a
/// zero-padded copy of the input; an output voxel `(z, y, x)` is addressed
/// with the padded strides, so every kernel tap becomes one contiguous run
/// of length `run()` starting at `tap_offset`.
struct ConvGeom {
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    pad: [usize; 3],
    sy: usize,
    sz: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Self> {
        let [ci, d, h, w] = dims4(input, "conv input")?;
        let [co, wci, kd, kh, kw] = dims5(weight)?;
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv input has {ci} channels, weights expect {wci}"
            )));
        }
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "same padding needs odd kernel extents, got {kd}x{kh}x{kw}"
            )));
        }
        let sy = w + kw - 1;
        Ok(ConvGeom {
            ci,
            co,
            d,
            h,
            w,
            k: [kd, kh, kw],
            pad: [kd / 2, kh / 2, kw / 2],
            sy,
            sz: sy * (h + kh - 1),
        })
    }

    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    fn padded_len(&self) -> usize {
        self.sz * (self.d + self.k[0] - 1)
    }

    /// Span from the first to the last output voxel in padded strides.
    fn run(&self) -> usize {
        (self.d - 1) * self.sz + (self.h - 1) * self.sy + self.w
    }

    fn tap_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.taps());
        for a in 0..self.k[0] {
            for b in 0..self.k[1] {
                for e in 0..self.k[2] {
                    offs.push(a * self.sz + b * self.sy + e);
                }
            }
        }
        offs
    }

    /// Copies every channel of a `C x D x H x W` block into the padded
    /// layout; `shift` is the offset of voxel (0, 0, 0).
    fn spread<T: Scalar>(&self, src: &[T], channels: usize, shift: usize, len: usize) -> Vec<T> {
        let vol = self.vol();
        let mut out = vec![T::zero(); channels * len];
        for (c, dst) in out.chunks_exact_mut(len).enumerate() {
            let s = &src[c * vol..(c + 1) * vol];
            for z in 0..self.d {
                for y in 0..self.h {
                    let from = (z * self.h + y) * self.w;
                    let to = shift + z * self.sz + y * self.sy;
                    dst[to..to + self.w].copy_from_slice(&s[from..from + self.w]);
                }
            }
        }
        out
    }

    fn center(&self) -> usize {
        self.pad[0] * self.sz + self.pad[1] * self.sy + self.pad[2]
    }

    /// Adds the voxels of one padded-stride channel (origin at `shift`) into `dst`.
    fn gather_into<T: Scalar>(&self, src: &[T], shift: usize, dst: &mut [T], overwrite: bool) {
        for z in 0..self.d {
            for y in 0..self.h {
                let to = (z * self.h + y) * self.w;
                let from = shift + z * self.sz + y * self.sy;
                for (d, &v) in dst[to..to + self.w].iter_mut().zip(&src[from..from + self.w]) {
                    if overwrite {
                        *d = v;
                    } else {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight)?;
    if bias.len() != g.co {
        return Err(Error::Shape(format!("conv bias has {} values, expected {}", bias.len(), g.co)));
    }
    let vol = g.vol();
    let taps = g.taps();
    let plen = g.padded_len();
    let run = g.run();
    let offs = g.tap_offsets();
    let inp = g.spread(input.data(), g.ci, g.center(), plen);
    let wts = weight.data();
    let mut out = vec![T::zero(); g.co * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(o, out_o)| {
        let mut acc = vec![bias.data()[o]; run];
        for c in 0..g.ci {
            let in_c = &inp[c * plen..(c + 1) * plen];
            let w_oc = &wts[(o * g.ci + c) * taps..(o * g.ci + c + 1) * taps];
            for (&wv, &off) in w_oc.iter().zip(&offs) {
                axpy(&mut acc, wv, &in_c[off..off + run]);
            }
        }
        g.gather_into(&acc, 0, out_o, true);
    });
    Tensor::new(vec![g.co, g.d, g.h, g.w], out)
}

/// Accumulates convolution gradients; `grad_in` is skipped when `None`.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
    grad_in: Option<&mut Tensor<T>>,
) -> Result<()> {
    let g = ConvGeom::new(input, weight)?;
    if grad_out.shape() != [g.co, g.d, g.h, g.w] {
        return Err(Error::Shape(format!(
            "conv upstream gradient shape {:?} does not match output {:?}",
            grad_out.shape(),
            [g.co, g.d, g.h, g.w]
        )));
    }
    if grad_w.shape() != weight.shape() || grad_b.len() != g.co {
        return Err(Error::Shape("conv gradient buffers do not match parameters".into()));
    }
    let vol = g.vol();
    let taps = g.taps();
    let plen = g.padded_len();
    let run = g.run();
    let offs = g.tap_offsets();
    let gout = grad_out.data();
    let wts = weight.data();

    for (o, gb) in grad_b.data_mut().iter_mut().enumerate() {
        *gb += gout[o * vol..(o + 1) * vol].iter().copied().sum::<T>();
    }

    // Upstream gradient in padded strides with zeros between rows, so the
    // junk columns of every run contribute nothing.
    let go = g.spread(gout, g.co, 0, run);
    let inp = g.spread(input.data(), g.ci, g.center(), plen);

    grad_w
        .data_mut()
        .par_chunks_mut(g.ci * taps)
        .enumerate()
        .for_each(|(o, gw_o)| {
            let go_o = &go[o * run..(o + 1) * run];
            for c in 0..g.ci {
                let in_c = &inp[c * plen..(c + 1) * plen];
                for (gw, &off) in gw_o[c * taps..(c + 1) * taps].iter_mut().zip(&offs) {
                    *gw += dot(go_o, &in_c[off..off + run]);
                }
            }
        });

    if let Some(grad_in) = grad_in {
        if grad_in.shape() != input.shape() {
            return Err(Error::Shape("conv input gradient buffer does not match input".into()));
        }
        grad_in
            .data_mut()
            .par_chunks_mut(vol)
            .enumerate()
            .for_each(|(c, gi_c)| {
                let mut acc = vec![T::zero(); plen];
                for o in 0..g.co {
                    let go_o = &go[o * run..(o + 1) * run];
                    let w_oc = &wts[(o * g.ci + c) * taps..(o * g.ci + c + 1) * taps];
                    for (&wv, &off) in w_oc.iter().zip(&offs) {
                        axpy(&mut acc[off..off + run], wv, go_o);
                    }
                }
                g.gather_into(&acc, g.center(), gi_c, false);
            });
    }
    Ok(())
}

/// Non-overlapping max pooling with stride equal to the window; trailing
/// voxels that do not fill a window are dropped. Returns the pooled tensor and,
/// per output element, the flat input index of its maximum (lowest index on ties).
pub fn maxpool3d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: [usize; 3],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [c, d, h, w] = dims4(input, "pool input")?;
    let [wd, wh, ww] = window;
    if wd == 0 || wh == 0 || ww == 0 || wd > d || wh > h || ww > w {
        return Err(Error::Shape(format!(
            "pool window {window:?} does not fit input {:?}",
            input.shape()
        )));
    }
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let data = input.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for a in 0..wd {
                        for b in 0..wh {
                            let row = ((ch * d + z * wd + a) * h + y * wh + b) * w + x * ww;
                            for (e, &v) in data[row..row + ww].iter().enumerate() {
                                if best == usize::MAX || v > best_v {
                                    best_v = v;
                                    best = row + e;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, od, oh, ow], out)?, arg))
}

/// Routes each upstream gradient element to the input position that won the forward max.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape("pool gradient does not match stored argmax".into()));
    }
    let mut gi = Tensor::zeros(input_shape.to_vec());
    let gid = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gid[idx] += g;
    }
    Ok(gi)
}

/// Inverted dropout. In training mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; the per-element scale
/// is returned as the mask. In inference mode the input passes through.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut dyn RngCore,
    training: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), out)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad: &mut [T], mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (g, &m) in grad.iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

/// `W x + b` for a row-major `m x n` weight matrix.
pub fn dense_forward<T: Scalar>(input: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Vec<T>> {
    let (m, n) = match *weight.shape() {
        [m, n] => (m, n),
        ref s => return Err(Error::Shape(format!("dense weights must be 2-D, got {s:?}"))),
    };
    if input.len() != n || bias.len() != m {
        return Err(Error::Shape(format!(
            "dense layer {m}x{n} got input of {} and bias of {}",
            input.len(),
            bias.len()
        )));
    }
    let w = weight.data();
    Ok((0..m)
        .map(|r| bias.data()[r] + dot(&w[r * n..(r + 1) * n], input))
        .collect())
}

/// Accumulates dense gradients and optionally the input gradient.
pub fn dense_backward<T: Scalar>(
    input: &[T],
    weight: &Tensor<T>,
    grad_out: &[T],
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
    grad_in: Option<&mut [T]>,
) -> Result<()> {
    let (m, n) = match *weight.shape() {
        [m, n] => (m, n),
        ref s => return Err(Error::Shape(format!("dense weights must be 2-D, got {s:?}"))),
    };
    if input.len() != n || grad_out.len() != m || grad_w.shape() != weight.shape() || grad_b.len() != m {
        return Err(Error::Shape("dense gradient buffers do not match layer".into()));
    }
    for (gb, &g) in grad_b.data_mut().iter_mut().zip(grad_out) {
        *gb += g;
    }
    grad_w
        .data_mut()
        .par_chunks_mut(n)
        .zip(grad_out.par_iter())
        .for_each(|(row, &g)| axpy(row, g, input));
    if let Some(gi) = grad_in {
        if gi.len() != n {
            return Err(Error::Shape("dense input gradient buffer has wrong length".into()));
        }
        let w = weight.data();
        for (r, &g) in grad_out.iter().enumerate() {
            axpy(gi, g, &w[r * n..(r + 1) * n]);
        }
    }
    Ok(())
}

pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
pub fn relu_backward<T: Scalar>(grad: &mut [T], output: &[T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax probabilities and cross-entropy loss against a one-hot target.
/// The gradient of the loss with respect to the logits is `p - y`.
pub fn softmax_xent<T: Scalar>(logits: &[T], one_hot: &[T]) -> Result<(Vec<T>, T)> {
    if logits.len() != one_hot.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "softmax over {} logits with {} targets",
            logits.len(),
            one_hot.len()
        )));
    }
    let p = softmax(logits);
    let floor = T::lit(1e-12);
    let loss = -p
        .iter()
        .zip(one_hot)
        .map(|(&pi, &yi)| yi * pi.max(floor).ln())
        .sum::<T>();
    Ok((p, loss))
}

pub fn one_hot<T: Scalar>(label: usize, classes: usize) -> Vec<T> {
    (0..classes)
        .map(|i| if i == label { T::one() } else { T::zero() })
        .collect()
}
