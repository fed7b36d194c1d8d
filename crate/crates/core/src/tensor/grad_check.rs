use super::{Float, SeededRng, Tensor};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function with central
/// finite differences at `point`.
///
/// Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    check_coords(&f, point, eps, &all)
}

/// [`grad_check`] restricted to `max_coords` coordinates drawn without
/// replacement; for large parameter tensors.
pub fn grad_check_sampled<T, F>(
    f: F,
    point: &Tensor<T>,
    eps: f64,
    max_coords: usize,
    rng: &mut SeededRng,
) -> Result<f64>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut coords: Vec<usize> = (0..point.numel()).collect();
    if coords.len() > max_coords {
        rng.shuffle(&mut coords);
        coords.truncate(max_coords);
    }
    check_coords(&f, point, eps, &coords)
}

fn check_coords<T, F>(f: &F, point: &Tensor<T>, eps: f64, coords: &[usize]) -> Result<f64>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let x = point.detach().to_param();
    let y = f(&x)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let base = point.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut d = base.clone();
        d[i] += T::of(delta);
        let xp = Tensor::new(d, point.shape())?;
        Ok(f(&xp)?.item()?.as_f64())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let err = (analytic[i].as_f64() - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
