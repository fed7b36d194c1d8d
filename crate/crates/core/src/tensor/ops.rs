//! Elementwise, reduction and shape operations.

use super::{strides_of, Backward, Float, Tensor};
use crate::error::{bail_dim, Result};

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Exp,
    Log,
    Sqrt,
    SqrtFloor(T),
    Square,
    Silu,
    Relu,
    Sigmoid,
    Tanh,
    Scale(T),
    AddScalar(T),
    Clamp(T, T),
}

impl<T: Float> Unary<T> {
    fn apply(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::SqrtFloor(_) => x.max(T::zero()).sqrt(),
            Unary::Square => x * x,
            Unary::Silu => x / (T::one() + (-x).exp()),
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    /// d(out)/d(x) given input and output.
    fn deriv(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sqrt => T::of(0.5) / y,
            Unary::SqrtFloor(floor) => T::of(0.5) / y.max(floor),
            Unary::Square => x + x,
            Unary::Silu => {
                let s = one / (one + (-x).exp());
                s * (one + x * (one - s))
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => one,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    T::zero()
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::SqrtFloor(_) => "sqrt_floor",
            Unary::Square => "square",
            Unary::Silu => "silu",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Clamp(..) => "clamp",
        }
    }
}

struct UnaryOp<T>(Unary<T>);

impl<T: Float> Backward<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(&self, parents: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let g = x
            .iter()
            .zip(out)
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.0.deriv(x, y))
            .collect();
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    fn unary(&self, u: Unary<T>) -> Tensor<T> {
        let data = self.data().iter().map(|&x| u.apply(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], UnaryOp(u))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Tensor<T> {
        self.unary(Unary::Exp)
    }
    pub fn log(&self) -> Tensor<T> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(Unary::Sqrt)
    }
    /// `sqrt(max(x, 0))` whose derivative is capped at `0.5 / floor`.
    pub fn sqrt_floor(&self, floor: f64) -> Tensor<T> {
        self.unary(Unary::SqrtFloor(T::of(floor)))
    }
    pub fn square(&self) -> Tensor<T> {
        self.unary(Unary::Square)
    }
    pub fn silu(&self) -> Tensor<T> {
        self.unary(Unary::Silu)
    }
    pub fn relu(&self) -> Tensor<T> {
        self.unary(Unary::Relu)
    }
    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(&self) -> Tensor<T> {
        self.unary(Unary::Tanh)
    }
    pub fn scale(&self, c: f64) -> Tensor<T> {
        self.unary(Unary::Scale(T::of(c)))
    }
    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        self.unary(Unary::AddScalar(T::of(c)))
    }
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        self.unary(Unary::Clamp(T::of(lo), T::of(hi)))
    }
}

// ---------------------------------------------------------------------------
// broadcasting binary ops

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// (d/da, d/db)
    #[inline]
    fn partials<T: Float>(self, a: T, b: T) -> (T, T) {
        match self {
            Binary::Add => (T::one(), T::one()),
            Binary::Sub => (T::one(), -T::one()),
            Binary::Mul => (b, a),
            Binary::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

/// Numpy-style right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => bail_dim!(op, "cannot broadcast {a:?} with {b:?}"),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over every output element.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct BinaryOp {
    kind: Binary,
    out_shape: Vec<usize>,
}

impl<T: Float> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut ga = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
        if a.shape() == b.shape() {
            for i in 0..grad.len() {
                let (pa, pb) = self.kind.partials(ad[i], bd[i]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] = grad[i] * pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] = grad[i] * pb;
                }
            }
        } else {
            let sa = broadcast_strides(a.shape(), &self.out_shape);
            let sb = broadcast_strides(b.shape(), &self.out_shape);
            for_each_broadcast(&self.out_shape, &sa, &sb, |i, ia, ib| {
                let (pa, pb) = self.kind.partials(ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += grad[i] * pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += grad[i] * pb;
                }
            });
        }
        vec![ga, gb]
    }
}

impl<T: Float> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(kind.name(), self.shape(), other.shape())?;
        let (ad, bd) = (self.data(), other.data());
        let data = if self.shape() == other.shape() {
            ad.iter().zip(bd).map(|(&a, &b)| kind.apply(a, b)).collect()
        } else {
            let n = out_shape.iter().product();
            let mut data = vec![T::zero(); n];
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                data[i] = kind.apply(ad[ia], bd[ib]);
            });
            data
        };
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            BinaryOp { kind, out_shape },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumAll;

impl<T: Float> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; parents[0].numel()])]
    }
}

struct MeanAll;

impl<T: Float> Backward<T> for MeanAll {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = parents[0].numel();
        vec![Some(vec![grad[0] / T::of(n as f64); n])]
    }
}

struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
    scale: f64,
}

impl<T: Float> Backward<T> for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }
    fn backward(&self, _parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = T::of(self.scale);
        let mut g = vec![T::zero(); self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for l in 0..self.len {
                let dst = &mut g[(o * self.len + l) * self.inner..][..self.inner];
                let src = &grad[o * self.inner..][..self.inner];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v * s);
            }
        }
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], SumAll)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let m = s / T::of(self.numel() as f64);
        Tensor::from_op(vec![1], vec![m], vec![self.clone()], MeanAll)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let op = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= self.rank() {
            bail_dim!(op, "axis {axis} out of range for shape {:?}", self.shape());
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let s = T::of(scale);
        let d = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= s);
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            SumAxis {
                outer,
                len,
                inner,
                scale,
            },
        ))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce_axis(axis, true)
    }
}

// ---------------------------------------------------------------------------
// shape ops

struct Reshape;

impl<T: Float> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Permute {
    in_shape: Vec<usize>,
    perm: Vec<usize>,
}

fn permute_data<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); src.len()];
    for_each_broadcast(&out_shape, &mapped, &zeros, |i, ia, _| out[i] = src[ia]);
    out
}

impl<T: Float> Backward<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        let out_shape: Vec<usize> = self.perm.iter().map(|&p| self.in_shape[p]).collect();
        vec![Some(permute_data(grad, &out_shape, &inv))]
    }
}

struct Concat {
    sizes: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl<T: Float> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut res = Vec::with_capacity(parents.len());
        for (p, &sz) in parents.iter().zip(&self.sizes) {
            if p.requires_grad() {
                let mut g = Vec::with_capacity(p.numel());
                for o in 0..self.outer {
                    let start = (o * total + offset) * self.inner;
                    g.extend_from_slice(&grad[start..start + sz * self.inner]);
                }
                res.push(Some(g));
            } else {
                res.push(None);
            }
            offset += sz;
        }
        res
    }
}

struct Narrow {
    outer: usize,
    len: usize,
    start: usize,
    count: usize,
    inner: usize,
}

impl<T: Float> Backward<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.outer * self.len * self.inner];
        for o in 0..self.outer {
            let dst = (o * self.len + self.start) * self.inner;
            let src = o * self.count * self.inner;
            g[dst..dst + self.count * self.inner]
                .copy_from_slice(&grad[src..src + self.count * self.inner]);
        }
        vec![Some(g)]
    }
}

struct Flip {
    outer: usize,
    len: usize,
    inner: usize,
}

fn flip_data<T: Float>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for l in 0..len {
            let s = (o * len + l) * inner;
            let d = (o * len + (len - 1 - l)) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

impl<T: Float> Backward<T> for Flip {
    fn name(&self) -> &'static str {
        "flip"
    }
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(flip_data(grad, self.outer, self.len, self.inner))]
    }
}

struct IndexSelect {
    indices: Vec<usize>,
    rows: usize,
    row_len: usize,
}

impl<T: Float> Backward<T> for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.rows * self.row_len];
        for (i, &r) in self.indices.iter().enumerate() {
            let dst = &mut g[r * self.row_len..][..self.row_len];
            dst.iter_mut()
                .zip(&grad[i * self.row_len..][..self.row_len])
                .for_each(|(a, &b)| *a += b);
        }
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&d| d == 0) {
            bail_dim!("reshape", "cannot view {:?} as {shape:?}", self.shape());
        }
        Ok(Tensor::from_shared(
            shape.to_vec(),
            self.shared_data(),
            vec![self.clone()],
            Reshape,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            bail_dim!("permute", "{perm:?} is not a permutation of rank {rank}");
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Permute {
                in_shape: self.shape().to_vec(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = tensors.first() else {
            bail_dim!("concat", "no tensors given");
        };
        let rank = first.rank();
        if axis >= rank {
            bail_dim!("concat", "axis {axis} out of range for rank {rank}");
        }
        for t in tensors {
            let ok = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                bail_dim!(
                    "concat",
                    "shapes {:?} and {:?} differ outside axis {axis}",
                    first.shape(),
                    t.shape()
                );
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &sz) in tensors.iter().zip(&sizes) {
                data.extend_from_slice(&t.data()[o * sz * inner..][..sz * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            shape,
            data,
            tensors.to_vec(),
            Concat {
                sizes,
                outer,
                inner,
            },
        ))
    }

    /// Channel-wise concatenation of NCHW tensors.
    pub fn concat_channels(tensors: &[Tensor<T>]) -> Result<Tensor<T>> {
        if tensors.iter().any(|t| t.rank() != 4) {
            bail_dim!("concat_channels", "expects rank-4 NCHW inputs");
        }
        Self::concat(tensors, 1)
    }

    /// Slice `count` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, count: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || count == 0 || start + count > self.shape()[axis] {
            bail_dim!(
                "narrow",
                "range {start}..{} invalid for axis {axis} of {:?}",
                start + count,
                self.shape()
            );
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[(o * len + start) * inner..][..count * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = count;
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Narrow {
                outer,
                len,
                start,
                count,
                inner,
            },
        ))
    }

    /// Reverse the order of entries along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            bail_dim!("flip", "axis {axis} out of range for {:?}", self.shape());
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = flip_data(self.data(), outer, len, inner);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Flip { outer, len, inner },
        ))
    }

    /// Gather rows (entries of axis 0).
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let rows = self.shape()[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            bail_dim!("index_select", "indices {indices:?} invalid for {rows} rows");
        }
        let row_len = self.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * row_len..][..row_len]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            IndexSelect {
                indices: indices.to_vec(),
                rows,
                row_len,
            },
        ))
    }

    /// Materialized broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            bail_dim!("broadcast_to", "{:?} does not broadcast to {shape:?}", self.shape());
        }
        self.add(&Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn broadcast_add_and_grad() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).to_param();
        let b = t(&[10.0, 20.0, 30.0], &[3]).to_param();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn broadcast_mismatch_names_op() {
        let err = t(&[1.0; 6], &[2, 3]).mul(&t(&[1.0; 2], &[2])).unwrap_err();
        assert!(err.to_string().starts_with("mul:"), "{err}");
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_narrow_inverse() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
    }

    #[test]
    fn reductions() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.mean_axis(1).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.mean_all().item().unwrap(), 3.5);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
        assert_eq!(x.flip(2).unwrap().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(x.flip(2).unwrap().flip(2).unwrap().data(), x.data());
    }
}
