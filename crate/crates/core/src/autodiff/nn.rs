//! Neural-network primitives with fused backward rules.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::ops::softmax_in_place;
use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Batch-norm behaviour for one forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running stats.
    Train,
    /// Normalize with batch statistics, leave running stats untouched.
    TrainFrozen,
    /// Normalize with the running statistics.
    Eval,
}

/// Running statistics of one batch-norm layer.
pub struct BnRunning<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: T,
}

impl<T: Real> Tape<T> {
    /// 2-d convolution of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`,
    /// no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_dim(xs[2], ws[2], stride, padding),
            conv_out_dim(xs[3], ws[3], stride, padding),
        ) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} does not fit input {:?} with padding {padding}, stride {stride}",
                &ws[2..],
                &xs[2..]
            )));
        };
        let g = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (k, p) = (g.rows(), g.positions());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); g.n * g.cout * p];
        let mut cols = vec![T::zero(); k * p];
        let in_stride = g.cin * g.h * g.w;
        for n in 0..g.n {
            im2col(&g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm_nn(g.cout, p, k, wt, &cols, &mut out[n * g.cout * p..(n + 1) * g.cout * p]);
        }
        let value = Tensor::new(vec![g.n, g.cout, ho, wo], out)?;
        Ok(self.push(
            value,
            &[input, weight],
            Box::new(move |b: &Backward<'_, T>| {
                let x = b.inputs[0].data();
                let wt = b.inputs[1].data();
                let dy = b.grad.data();
                let mut dx = b.needs[0].then(|| vec![T::zero(); x.len()]);
                let mut dw = b.needs[1].then(|| vec![T::zero(); wt.len()]);
                let mut cols = vec![T::zero(); k * p];
                let mut dcols = vec![T::zero(); k * p];
                for n in 0..g.n {
                    let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
                        gemm_nt(g.cout, k, p, dyn_, &cols, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(k, p, g.cout, wt, dyn_, &mut dcols);
                        col2im(&g, &dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(b.inputs[0].shape().to_vec(), d).expect("shape")),
                    dw.map(|d| Tensor::new(b.inputs[1].shape().to_vec(), d).expect("shape")),
                ]
            }),
        ))
    }

    /// Batch normalization over `[N,C,H,W]` with per-channel `scale` and
    /// `shift`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running: BnRunning<'_, T>,
        mode: BnMode,
        eps: T,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("batchnorm2d expects rank-4 input, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(format!(
                "batchnorm2d: scale/shift must be [{c}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batchnorm2d: running stats length mismatch"));
        }
        let count = n * hw;
        let batch_stats = mode != BnMode::Eval;
        if batch_stats && count < 2 {
            return Err(Error::invalid("batchnorm2d in train mode needs N*H*W >= 2"));
        }
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let cnt = T::lit(count as f64);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if batch_stats {
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    s += x[base..base + hw].iter().copied().sum::<T>();
                }
                let m = s / cnt;
                let mut v = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for &xv in &x[base..base + hw] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / cnt;
            }
            if mode == BnMode::Train {
                let mom = running.momentum;
                let unbias = cnt / (cnt - T::one());
                for ch in 0..c {
                    running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean[ch];
                    running.var[ch] = (T::one() - mom) * running.var[ch] + mom * var[ch] * unbias;
                }
            }
        } else {
            mean.copy_from_slice(running.mean);
            var.copy_from_slice(running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let h = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            &[input, scale, shift],
            Box::new(move |b: &Backward<'_, T>| {
                let dy = b.grad.data();
                let gamma = b.inputs[1].data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_dy[ch] += dy[j];
                            sum_dy_xhat[ch] += dy[j] * xhat[j];
                        }
                    }
                }
                let dx = b.needs[0].then(|| {
                    let mut dx = vec![T::zero(); dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gamma[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if batch_stats {
                                    k * (dy[j] - sum_dy[ch] / cnt - xhat[j] * sum_dy_xhat[ch] / cnt)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    Tensor::new(b.inputs[0].shape().to_vec(), dx).expect("shape")
                });
                vec![dx, Some(Tensor::from_vec(sum_dy_xhat)), Some(Tensor::from_vec(sum_dy))]
            }),
        ))
    }

    /// `input [N,in] * weight[out,in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [dout] {
                return Err(Error::shape(format!("linear: bias must be [{dout}]")));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        gemm_nt(
            n,
            dout,
            din,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Box::new(move |b: &Backward<'_, T>| {
                let dy = b.grad.data();
                let dx = b.needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * din];
                    gemm_nn(n, din, dout, dy, b.inputs[1].data(), &mut dx);
                    Tensor::new(vec![n, din], dx).expect("shape")
                });
                let dw = b.needs[1].then(|| {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm_tn(dout, din, n, dy, b.inputs[0].data(), &mut dw);
                    Tensor::new(vec![dout, din], dw).expect("shape")
                });
                let mut grads = vec![dx, dw];
                if b.inputs.len() == 3 {
                    let mut db = vec![T::zero(); dout];
                    for row in dy.chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    grads.push(Some(Tensor::from_vec(db)));
                }
                grads
            }),
        ))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool expects rank 4, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(
            value,
            &[input],
            Box::new(move |b: &Backward<'_, T>| {
                let mut dx = Vec::with_capacity(b.inputs[0].len());
                for &g in b.grad.data() {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                vec![Some(Tensor::new(b.inputs[0].shape().to_vec(), dx).expect("shape"))]
            }),
        ))
    }

    /// Per-example cross-entropy of `logits [N,C]`, shape `[N]`.
    pub fn softmax_cross_entropy_each(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy: logits {ls:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut losses = Vec::with_capacity(n);
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            losses.push(lse - row[labels[i]]);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::from_vec(losses),
            &[logits],
            Box::new(move |b: &Backward<'_, T>| {
                let mut g = probs.clone();
                for (i, row) in g.chunks_mut(c).enumerate() {
                    row[labels[i]] -= T::one();
                    let gi = b.grad.data()[i];
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                vec![Some(Tensor::new(vec![n, c], g).expect("shape"))]
            }),
        ))
    }

    /// Mean cross-entropy over the batch, as a rank-0 tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let each = self.softmax_cross_entropy_each(logits, labels)?;
        Ok(self.mean(each))
    }

    /// Weighted sum of candidate outputs. `masks` is `[K]` (one weight per
    /// candidate for the whole batch) or `[N,K]` (per example).
    pub fn mix(&mut self, masks: Var, outputs: &[Var]) -> Result<Var> {
        let k = outputs.len();
        if k == 0 {
            return Err(Error::invalid("mix of zero candidates"));
        }
        let shape = self.shape(outputs[0]).to_vec();
        for &o in &outputs[1..] {
            if self.shape(o) != shape.as_slice() {
                return Err(Error::shape(format!(
                    "mix: candidate outputs {:?} and {shape:?} differ",
                    self.shape(o)
                )));
            }
        }
        let ms = self.shape(masks).to_vec();
        let per_example = match ms.as_slice() {
            [kk] if *kk == k => false,
            [n, kk] if *kk == k && shape.first() == Some(n) => true,
            _ => {
                return Err(Error::shape(format!(
                    "mix: masks {ms:?} do not fit {k} candidates of shape {shape:?}"
                )))
            }
        };
        let len = shape.iter().product::<usize>();
        let n = if per_example { shape[0] } else { 1 };
        let chunk = len / n;
        let m = self.value(masks).data().to_vec();
        let mut out = vec![T::zero(); len];
        for (j, &o) in outputs.iter().enumerate() {
            let od = self.value(o).data();
            for e in 0..n {
                let w = m[if per_example { e * k + j } else { j }];
                for (acc, &v) in out[e * chunk..(e + 1) * chunk]
                    .iter_mut()
                    .zip(&od[e * chunk..(e + 1) * chunk])
                {
                    *acc += w * v;
                }
            }
        }
        let mut inputs = vec![masks];
        inputs.extend_from_slice(outputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            &inputs,
            Box::new(move |b: &Backward<'_, T>| {
                let g = b.grad.data();
                let m = b.inputs[0].data();
                let mut grads = Vec::with_capacity(k + 1);
                grads.push(b.needs[0].then(|| {
                    let mut dm = vec![T::zero(); m.len()];
                    for j in 0..k {
                        let od = b.inputs[j + 1].data();
                        for e in 0..n {
                            let s: T = g[e * chunk..(e + 1) * chunk]
                                .iter()
                                .zip(&od[e * chunk..(e + 1) * chunk])
                                .map(|(&a, &c)| a * c)
                                .sum();
                            dm[if per_example { e * k + j } else { j }] += s;
                        }
                    }
                    Tensor::new(b.inputs[0].shape().to_vec(), dm).expect("shape")
                }));
                for j in 0..k {
                    grads.push(b.needs[j + 1].then(|| {
                        let mut d = vec![T::zero(); g.len()];
                        for e in 0..n {
                            let w = m[if per_example { e * k + j } else { j }];
                            for (dv, &gv) in d[e * chunk..(e + 1) * chunk]
                                .iter_mut()
                                .zip(&g[e * chunk..(e + 1) * chunk])
                            {
                                *dv = w * gv;
                            }
                        }
                        Tensor::new(b.grad.shape().to_vec(), d).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// followed by zero-padding the channel axis up to `out_channels`
    /// (padding split evenly before and after).
    pub fn shortcut_pad(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || stride == 0 || out_channels < xs[1] {
            return Err(Error::shape(format!(
                "shortcut: cannot map {xs:?} to {out_channels} channels at stride {stride}"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let front = (out_channels - cin) / 2;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * out_channels * ho * wo];
        let index = move |i: usize, c: usize, oy: usize, ox: usize| {
            (
                ((i * cin + c) * h + oy * stride) * w + ox * stride,
                ((i * out_channels + c + front) * ho + oy) * wo + ox,
            )
        };
        for i in 0..n {
            for c in 0..cin {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (src, dst) = index(i, c, oy, ox);
                        out[dst] = x[src];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, out_channels, ho, wo], out)?;
        Ok(self.push(
            value,
            &[input],
            Box::new(move |b: &Backward<'_, T>| {
                let g = b.grad.data();
                let mut dx = vec![T::zero(); n * cin * h * w];
                for i in 0..n {
                    for c in 0..cin {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let (src, dst) = index(i, c, oy, ox);
                                dx[src] = g[dst];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, cin, h, w], dx).expect("shape"))]
            }),
        ))
    }
}
