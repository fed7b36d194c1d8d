//! Normalisation layers and softmax.

use super::{Backward, Float, Tensor};
use crate::error::{bail_dim, Result};

/// Normalises `groups` contiguous segments of length `seg` each, then applies
/// a per-channel affine map. Shared by group and layer norm.
struct SegmentNorm<T> {
    name: &'static str,
    segs: usize,
    seg: usize,
    /// channel of element `j` within a segment is `(j / chan_stride) % chans`
    chan_stride: usize,
    chans: usize,
    /// channel offset of segment `s` is `(s % segs_per_row) * chans_per_seg`
    segs_per_row: usize,
    chans_per_seg: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Float> SegmentNorm<T> {
    #[inline]
    fn channel(&self, s: usize, j: usize) -> usize {
        (s % self.segs_per_row) * self.chans_per_seg + (j / self.chan_stride) % self.chans
    }
}

fn normalise<T: Float>(x: &[T], segs: usize, seg: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); segs];
    let n = T::of(seg as f64);
    for s in 0..segs {
        let src = &x[s * seg..][..seg];
        let mean = src.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = src.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
        let r = T::one() / (var + T::of(eps)).sqrt();
        rstd[s] = r;
        for (d, &v) in xhat[s * seg..][..seg].iter_mut().zip(src) {
            *d = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

impl<T: Float> Backward<T> for SegmentNorm<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
        let gm = gamma.data();
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gg = gamma.requires_grad().then(|| vec![T::zero(); gamma.numel()]);
        let mut gb = beta.requires_grad().then(|| vec![T::zero(); beta.numel()]);
        let n = T::of(self.seg as f64);
        let mut dxhat = vec![T::zero(); self.seg];
        for s in 0..self.segs {
            let gy = &grad[s * self.seg..][..self.seg];
            let xh = &self.xhat[s * self.seg..][..self.seg];
            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
            for j in 0..self.seg {
                let c = self.channel(s, j);
                if let Some(gg) = gg.as_mut() {
                    gg[c] += gy[j] * xh[j];
                }
                if let Some(gb) = gb.as_mut() {
                    gb[c] += gy[j];
                }
                let d = gy[j] * gm[c];
                dxhat[j] = d;
                sum_d += d;
                sum_dx += d * xh[j];
            }
            if let Some(gx) = gx.as_mut() {
                let (md, mdx) = (sum_d / n, sum_dx / n);
                let r = self.rstd[s];
                for j in 0..self.seg {
                    gx[s * self.seg + j] = r * (dxhat[j] - md - xh[j] * mdx);
                }
            }
        }
        vec![gx, gg, gb]
    }
}

struct Softmax {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Float> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _p: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (len, inner) = (self.len, self.inner);
        let mut g = vec![T::zero(); out.len()];
        for o in 0..self.outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for l in 0..len {
                    dot += out[base + l * inner] * grad[base + l * inner];
                }
                for l in 0..len {
                    let k = base + l * inner;
                    g[k] = out[k] * (grad[k] - dot);
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    /// Group normalisation of an NCHW tensor with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => bail_dim!("group_norm", "input must be NCHW, got {s:?}"),
        };
        if groups == 0 || c % groups != 0 {
            bail_dim!("group_norm", "{c} channels not divisible into {groups} groups");
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            bail_dim!(
                "group_norm",
                "affine params {:?}/{:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            );
        }
        let cpg = c / groups;
        let segs = b * groups;
        let seg = cpg * h * w;
        let (xhat, rstd) = normalise(self.data(), segs, seg, eps);
        let op = SegmentNorm {
            name: "group_norm",
            segs,
            seg,
            chan_stride: h * w,
            chans: cpg,
            segs_per_row: groups,
            chans_per_seg: cpg,
            xhat,
            rstd,
        };
        let (gm, bt) = (gamma.data(), beta.data());
        let mut out = vec![T::zero(); self.numel()];
        for s in 0..segs {
            for j in 0..seg {
                let ch = op.channel(s, j);
                out[s * seg + j] = op.xhat[s * seg + j] * gm[ch] + bt[ch];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            op,
        ))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            bail_dim!(
                "layer_norm",
                "affine params {:?}/{:?} do not match width {d}",
                gamma.shape(),
                beta.shape()
            );
        }
        let segs = self.numel() / d;
        let (xhat, rstd) = normalise(self.data(), segs, d, eps);
        let (gm, bt) = (gamma.data(), beta.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm[i % d] + bt[i % d])
            .collect();
        let op = SegmentNorm {
            name: "layer_norm",
            segs,
            seg: d,
            chan_stride: 1,
            chans: d,
            segs_per_row: 1,
            chans_per_seg: 0,
            xhat,
            rstd,
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            op,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            bail_dim!("softmax", "axis {axis} out of range for {:?}", self.shape());
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(x[base + l * inner]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Softmax { outer, len, inner },
        ))
    }
}
