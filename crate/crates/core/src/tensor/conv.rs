//! Convolution and spatial resampling on NCHW tensors.

use super::{Backward, Float, Tensor};
use crate::error::{bail_dim, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
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
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..][..n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..][..g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..][..n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    g: ConvGeom,
}

impl<T: Float> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.g;
        let (x, w) = (&parents[0], &parents[1]);
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let in_sz = g.cin * g.h * g.w;
        let out_sz = g.cout * ncol;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncol]
        };
        for b in 0..g.batch {
            let gy = &grad[b * out_sz..][..out_sz];
            let xb = &x.data()[b * in_sz..][..in_sz];
            if let Some(gw) = gw.as_mut() {
                let colref: &[T] = if g.pointwise() {
                    xb
                } else {
                    im2col(xb, g, &mut cols);
                    &cols
                };
                // dW[cout, rows] += dY[cout, ncol] · colsᵀ
                T::gemm(
                    g.cout,
                    ncol,
                    rows,
                    gy,
                    ncol as isize,
                    1,
                    colref,
                    1,
                    ncol as isize,
                    T::one(),
                    gw,
                    rows as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * in_sz..][..in_sz];
                if g.pointwise() {
                    T::gemm(
                        rows,
                        g.cout,
                        ncol,
                        w.data(),
                        1,
                        rows as isize,
                        gy,
                        ncol as isize,
                        1,
                        T::zero(),
                        gxb,
                        ncol as isize,
                        1,
                    );
                } else {
                    // dcols[rows, ncol] = Wᵀ · dY
                    T::gemm(
                        rows,
                        g.cout,
                        ncol,
                        w.data(),
                        1,
                        rows as isize,
                        gy,
                        ncol as isize,
                        1,
                        T::zero(),
                        &mut cols,
                        ncol as isize,
                        1,
                    );
                    col2im(&cols, g, gxb);
                }
            }
        }
        let mut res = vec![gx, gw];
        if let Some(bias) = parents.get(2) {
            res.push(bias.requires_grad().then(|| {
                let mut gb = vec![T::zero(); g.cout];
                for b in 0..g.batch {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc += grad[b * out_sz + c * ncol..][..ncol]
                            .iter()
                            .fold(T::zero(), |s, &v| s + v);
                    }
                }
                gb
            }));
        }
        res
    }
}

struct UpsampleNearest {
    bc: usize,
    h: usize,
    w: usize,
    factor: usize,
}

impl<T: Float> Backward<T> for UpsampleNearest {
    fn name(&self) -> &'static str {
        "interpolate_nearest"
    }

    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (h, w, f) = (self.h, self.w, self.factor);
        let (ho, wo) = (h * f, w * f);
        let mut g = vec![T::zero(); self.bc * h * w];
        for p in 0..self.bc {
            for oy in 0..ho {
                for ox in 0..wo {
                    g[p * h * w + (oy / f) * w + ox / f] += grad[p * ho * wo + oy * wo + ox];
                }
            }
        }
        vec![Some(g)]
    }
}

/// Source taps of one output coordinate under half-pixel-centre bilinear
/// resampling: `(i0, i1, weight_of_i1)`.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct ResizeBilinear {
    bc: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl<T: Float> Backward<T> for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let ty = bilinear_taps(self.ho, self.h);
        let tx = bilinear_taps(self.wo, self.w);
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let mut g = vec![T::zero(); self.bc * h * w];
        for p in 0..self.bc {
            let gp = &mut g[p * h * w..][..h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = grad[p * ho * wo + oy * wo + ox];
                    let (fy, fx) = (T::of(fy), T::of(fx));
                    let (gy, gx) = (T::one() - fy, T::one() - fx);
                    gp[y0 * w + x0] += v * gy * gx;
                    gp[y0 * w + x1] += v * gy * fx;
                    gp[y1 * w + x0] += v * fy * gx;
                    gp[y1 * w + x1] += v * fy * fx;
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    /// 2-D cross-correlation. `weight: [cout, cin, kh, kw]`, symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (batch, cin, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => bail_dim!("conv2d", "input must be NCHW, got {s:?}"),
        };
        let (cout, wcin, kh, kw) = match weight.shape() {
            &[o, i, kh, kw] => (o, i, kh, kw),
            s => bail_dim!("conv2d", "weight must be [cout, cin, kh, kw], got {s:?}"),
        };
        if wcin != cin {
            bail_dim!(
                "conv2d",
                "input has {cin} channels but weight {:?} expects {wcin}",
                weight.shape()
            );
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            bail_dim!("conv2d", "kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{w}");
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                bail_dim!("conv2d", "bias {:?} does not match {cout} outputs", b.shape());
            }
        }
        let g = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let in_sz = cin * h * w;
        let out_sz = cout * ncol;
        let mut out = vec![T::zero(); batch * out_sz];
        let mut cols = if g.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncol]
        };
        for b in 0..batch {
            let xb = &self.data()[b * in_sz..][..in_sz];
            let ob = &mut out[b * out_sz..][..out_sz];
            if let Some(bias) = bias {
                for (c, &bv) in bias.data().iter().enumerate() {
                    ob[c * ncol..][..ncol].iter_mut().for_each(|v| *v = bv);
                }
            }
            let colref: &[T] = if g.pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                rows,
                ncol,
                weight.data(),
                rows as isize,
                1,
                colref,
                ncol as isize,
                1,
                if bias.is_some() { T::one() } else { T::zero() },
                ob,
                ncol as isize,
                1,
            );
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![batch, cout, g.ho, g.wo],
            out,
            parents,
            Conv2d { g },
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn interpolate_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => bail_dim!("interpolate_nearest", "input must be NCHW, got {s:?}"),
        };
        if factor == 0 {
            bail_dim!("interpolate_nearest", "factor must be positive");
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * ho * wo];
        let d = self.data();
        for p in 0..b * c {
            for oy in 0..ho {
                let src = &d[p * h * w + (oy / factor) * w..][..w];
                let dst = &mut out[p * ho * wo + oy * wo..][..wo];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, ho, wo],
            out,
            vec![self.clone()],
            UpsampleNearest {
                bc: b * c,
                h,
                w,
                factor,
            },
        ))
    }

    /// Bilinear resampling to `(out_h, out_w)` with half-pixel centres.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => bail_dim!("resize_bilinear", "input must be NCHW, got {s:?}"),
        };
        if out_h == 0 || out_w == 0 {
            bail_dim!("resize_bilinear", "output size must be positive");
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let ty = bilinear_taps(out_h, h);
        let tx = bilinear_taps(out_w, w);
        let d = self.data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &d[p * h * w..][..h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fy, fx) = (T::of(fy), T::of(fx));
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[p * out_h * out_w + oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, out_h, out_w],
            out,
            vec![self.clone()],
            ResizeBilinear {
                bc: b * c,
                h,
                w,
                ho: out_h,
                wo: out_w,
            },
        ))
    }
}
