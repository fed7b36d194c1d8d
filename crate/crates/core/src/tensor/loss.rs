//! Fused loss kernels.

use super::{Backward, Float, Tensor};
use crate::error::{bail_dim, Result};

struct Mse;

impl<T: Float> Backward<T> for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let k = grad[0] * T::of(2.0 / a.numel() as f64);
        let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * k).collect();
        let gb = b.requires_grad().then(|| diff.iter().map(|&d| -d).collect());
        let ga = a.requires_grad().then_some(diff);
        vec![ga, gb]
    }
}

/// Pixels per class-plane layout: logits are `[B, K, rest...]`.
fn class_layout(op: &'static str, shape: &[usize], labels: usize) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        bail_dim!(op, "logits must be [B, K, ...], got {shape:?}");
    }
    let (b, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    if labels != b * inner {
        bail_dim!(op, "{labels} labels for logits {shape:?} (expected {})", b * inner);
    }
    Ok((b, k, inner))
}

struct CrossEntropy {
    b: usize,
    k: usize,
    inner: usize,
    labels: Vec<u32>,
    ignore: u32,
    count: usize,
}

impl<T: Float> Backward<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let mut g = vec![T::zero(); x.len()];
        if self.count == 0 {
            return vec![Some(g)];
        }
        let scale = grad[0] / T::of(self.count as f64);
        let (k, inner) = (self.k, self.inner);
        for bi in 0..self.b {
            for p in 0..inner {
                let label = self.labels[bi * inner + p];
                if label == self.ignore {
                    continue;
                }
                let base = bi * k * inner + p;
                let m = (0..k).fold(T::neg_infinity(), |m, c| m.max(x[base + c * inner]));
                let z = (0..k).fold(T::zero(), |s, c| s + (x[base + c * inner] - m).exp());
                for c in 0..k {
                    let pr = (x[base + c * inner] - m).exp() / z;
                    let t = if c as u32 == label { T::one() } else { T::zero() };
                    g[base + c * inner] = (pr - t) * scale;
                }
            }
        }
        vec![Some(g)]
    }
}

struct BceLogits {
    targets: Vec<Option<bool>>,
    count: usize,
}

impl<T: Float> Backward<T> for BceLogits {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let mut g = vec![T::zero(); x.len()];
        if self.count == 0 {
            return vec![Some(g)];
        }
        let scale = grad[0] / T::of(self.count as f64);
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(t) = t {
                let s = T::one() / (T::one() + (-x[i]).exp());
                let y = if *t { T::one() } else { T::zero() };
                g[i] = (s - y) * scale;
            }
        }
        vec![Some(g)]
    }
}

impl<T: Float> Tensor<T> {
    /// Mean squared error over all elements.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            bail_dim!("mse", "shapes {:?} and {:?} differ", self.shape(), target.shape());
        }
        let s = self
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let v = s / T::of(self.numel() as f64);
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            vec![self.clone(), target.clone()],
            Mse,
        ))
    }

    /// Multi-class cross-entropy over axis 1, averaged over labels that are
    /// not `ignore`. Returns the loss and the number of scored positions;
    /// with no scored position the loss is 0.
    pub fn cross_entropy(&self, labels: &[u32], ignore: u32) -> Result<(Tensor<T>, usize)> {
        let (b, k, inner) = class_layout("cross_entropy", self.shape(), labels.len())?;
        let x = self.data();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..inner {
                let label = labels[bi * inner + p];
                if label == ignore {
                    continue;
                }
                if label as usize >= k {
                    bail_dim!("cross_entropy", "label {label} out of range for {k} classes");
                }
                let base = bi * k * inner + p;
                let m = (0..k).fold(T::neg_infinity(), |m, c| m.max(x[base + c * inner]));
                let z = (0..k).fold(T::zero(), |s, c| s + (x[base + c * inner] - m).exp());
                let lse = m + z.ln();
                total += (lse - x[base + label as usize * inner]).as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::from_op(
            vec![1],
            vec![T::of(loss)],
            vec![self.clone()],
            CrossEntropy {
                b,
                k,
                inner,
                labels: labels.to_vec(),
                ignore,
                count,
            },
        );
        Ok((t, count))
    }

    /// Binary cross-entropy on raw logits; `targets[i] == None` is ignored.
    pub fn bce_with_logits(&self, targets: &[Option<bool>]) -> Result<(Tensor<T>, usize)> {
        if targets.len() != self.numel() {
            bail_dim!(
                "bce_with_logits",
                "{} targets for logits {:?}",
                targets.len(),
                self.shape()
            );
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (&x, t) in self.data().iter().zip(targets) {
            let Some(t) = t else { continue };
            let x = x.as_f64();
            let y = if *t { 1.0 } else { 0.0 };
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let t = Tensor::from_op(
            vec![1],
            vec![T::of(loss)],
            vec![self.clone()],
            BceLogits {
                targets: targets.to_vec(),
                count,
            },
        );
        Ok((t, count))
    }
}
