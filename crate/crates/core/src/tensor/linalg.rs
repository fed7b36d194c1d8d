use super::{Backward, Float, Tensor};
use crate::error::{bail_dim, Result};

struct Matmul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Float> Backward<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let Matmul { batch, m, k, n } = *self;
        let ga = a.requires_grad().then(|| {
            // dA = dC · Bᵀ
            let mut ga = vec![T::zero(); batch * m * k];
            for i in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    &grad[i * m * n..],
                    n as isize,
                    1,
                    &b.data()[i * k * n..],
                    1,
                    n as isize,
                    T::zero(),
                    &mut ga[i * m * k..],
                    k as isize,
                    1,
                );
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            // dB = Aᵀ · dC
            let mut gb = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    &a.data()[i * m * k..],
                    1,
                    k as isize,
                    &grad[i * m * n..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut gb[i * k * n..],
                    n as isize,
                    1,
                );
            }
            gb
        });
        vec![ga, gb]
    }
}

struct Linear {
    rows: usize,
    inp: usize,
    out: usize,
}

impl<T: Float> Backward<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let Linear { rows, inp, out } = *self;
        let (x, w) = (&parents[0], &parents[1]);
        let gx = x.requires_grad().then(|| {
            // dX[rows, inp] = dY[rows, out] · W[out, inp]
            let mut gx = vec![T::zero(); rows * inp];
            T::gemm(
                rows,
                out,
                inp,
                grad,
                out as isize,
                1,
                w.data(),
                inp as isize,
                1,
                T::zero(),
                &mut gx,
                inp as isize,
                1,
            );
            gx
        });
        let gw = w.requires_grad().then(|| {
            // dW[out, inp] = dYᵀ · X
            let mut gw = vec![T::zero(); out * inp];
            T::gemm(
                out,
                rows,
                inp,
                grad,
                1,
                out as isize,
                x.data(),
                inp as isize,
                1,
                T::zero(),
                &mut gw,
                inp as isize,
                1,
            );
            gw
        });
        let mut res = vec![gx, gw];
        if let Some(b) = parents.get(2) {
            res.push(b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); out];
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&grad[r * out..][..out])
                        .for_each(|(a, &g)| *a += g);
                }
                gb
            }));
        }
        res
    }
}

impl<T: Float> Tensor<T> {
    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, k2, n) = match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) => (1, m, k, k2, n),
            (&[b, m, k], &[b2, k2, n]) if b == b2 => (b, m, k, k2, n),
            (a, b) => bail_dim!("matmul", "incompatible operands {a:?} and {b:?}"),
        };
        if k != k2 {
            bail_dim!(
                "matmul",
                "inner dimensions differ: {:?} · {:?}",
                self.shape(),
                rhs.shape()
            );
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                k as isize,
                1,
                &rhs.data()[i * k * n..],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let shape = if self.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Matmul { batch, m, k, n },
        ))
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (out, inp) = match weight.shape() {
            &[o, i] => (o, i),
            s => bail_dim!("linear", "weight must be rank 2, got {s:?}"),
        };
        let last = *self.shape().last().unwrap_or(&0);
        if last != inp {
            bail_dim!(
                "linear",
                "input width {last} does not match weight {:?}",
                weight.shape()
            );
        }
        if let Some(b) = bias {
            if b.shape() != [out] {
                bail_dim!("linear", "bias {:?} does not match {out} outputs", b.shape());
            }
        }
        let rows = self.numel() / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = bias {
            for r in 0..rows {
                y[r * out..][..out].copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            inp,
            out,
            self.data(),
            inp as isize,
            1,
            weight.data(),
            1,
            inp as isize,
            beta,
            &mut y,
            out as isize,
            1,
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(shape, y, parents, Linear { rows, inp, out }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f32>::new(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let m = Tensor::<f32>::new((1..=9).map(|v| v as f32 * 0.7).collect(), &[3, 3]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_rejects_bad_inner() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1.0, 0.0, 1.0, 1.0, 0.0, 2.0], &[3, 2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[0.5, 0.0, -1.0], &[3]).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0, 3.0, 3.5, 7.0, 7.0]);
    }
}
