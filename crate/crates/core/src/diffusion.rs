//! Forward noising process and the noise-prediction training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::text::ConditioningFeatures;

/// Per-step signal retention `alphas[t-1] = α_t` and its running product
/// `alpha_bars[t-1] = ᾱ_t`, for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit `α_t` values in `(0, 1]`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1]")));
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    /// `β` linearly spaced from `beta_start` to `beta_end`, `α = 1 - β`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule length must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end {
            return Err(Error::Config(format!(
                "need 0 <= beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps).map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        });
        Self::from_alphas(betas.map(|b| 1.0 - b).collect())
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `α_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 0 { 1.0 } else { self.alphas[t - 1] })
    }

    /// `ᾱ_t`; `t = 0` is the clean signal (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} beyond schedule length {}",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}

/// A latent together with the timestep it was noised to.
#[derive(Clone, Debug)]
pub struct LatentState<T: Float> {
    pub z: Tensor<T>,
    pub t: usize,
}

/// Closed-form draw `z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·eps`.
pub fn q_sample<T: Float>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<LatentState<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::dim(
            "q_sample",
            format!("latent {:?} vs noise {:?}", z0.shape(), eps.shape()),
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    let z = if ab == 1.0 {
        z0.clone()
    } else {
        z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?
    };
    Ok(LatentState { z, t })
}

/// One step of the Markov chain `z_t ~ N(sqrt(α_t)·z_{t-1}, (1-α_t)·I)`.
pub fn q_step<T: Float>(
    z_prev: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::Config("chain steps start at t = 1".into()));
    }
    let a = schedule.alpha(t)?;
    z_prev.scale(a.sqrt()).add(&eps.scale((1.0 - a).sqrt()))
}

/// Anything that predicts the noise added to a latent.
pub trait NoisePredictor<T: Float> {
    fn predict_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &ConditioningFeatures<T>,
    ) -> Result<Tensor<T>>;
}

/// Mean squared error between `eps` and the model's prediction at `z_t`.
pub fn dm_loss<T: Float, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    z0: &Tensor<T>,
    cond: &ConditioningFeatures<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let zt = q_sample(z0, t, eps, schedule)?;
    let pred = model.predict_noise(&zt.z, t, cond)?;
    if pred.shape() != eps.shape() {
        return Err(Error::dim(
            "dm_loss",
            format!("prediction {:?} vs noise {:?}", pred.shape(), eps.shape()),
        ));
    }
    pred.mse(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use crate::text::PromptSet;

    #[test]
    fn single_noiseless_step() {
        let s = NoiseSchedule::linear(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alphas(), &[1.0]);
        assert_eq!(s.alpha_bars(), &[1.0]);
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        // product of (1 - beta_i) for the 1000-step linear schedule, recomputed directly
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        let s = NoiseSchedule::default();
        assert!(prod < 1e-4);
        assert!((s.alpha_bar(1000).unwrap() - prod).abs() <= 1e-6 * prod);
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let z0 = Tensor::<f64>::from_f64(&[1.0, -2.0, 3.0, 0.5], &[1, 1, 2, 2]).unwrap();
        let zt = q_sample(&z0, 7, &Tensor::zeros(&[1, 1, 2, 2]), &s).unwrap();
        let k = s.alpha_bar(7).unwrap().sqrt();
        for (a, b) in zt.z.data().iter().zip(z0.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_timestep_ignores_noise() {
        let s = NoiseSchedule::linear(5, 0.0, 0.0).unwrap();
        let mut rng = SeededRng::new(3);
        let z0: Tensor<f64> = rng.randn(&[1, 4, 2, 2]);
        let eps: Tensor<f64> = rng.randn(&[1, 4, 2, 2]);
        assert_eq!(q_sample(&z0, 3, &eps, &s).unwrap().z.data(), z0.data());
        // t = 0 is the clean latent for any schedule
        let s = NoiseSchedule::default();
        assert_eq!(q_sample(&z0, 0, &eps, &s).unwrap().z.data(), z0.data());
    }

    #[test]
    fn mismatched_noise_is_dimension_error() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        let eps = Tensor::<f32>::zeros(&[1, 4, 2, 3]);
        assert!(matches!(q_sample(&z0, 1, &eps, &s), Err(Error::Dim { .. })));
    }

    struct Oracle;
    impl NoisePredictor<f64> for Oracle {
        fn predict_noise(&self, z: &Tensor<f64>, t: usize, _c: &ConditioningFeatures<f64>) -> Result<Tensor<f64>> {
            // invert q_sample given the known clean latent of zeros
            let ab = NoiseSchedule::default().alpha_bar(t)?;
            Ok(z.scale(1.0 / (1.0 - ab).sqrt()))
        }
    }

    struct Zero;
    impl NoisePredictor<f64> for Zero {
        fn predict_noise(&self, z: &Tensor<f64>, _t: usize, _c: &ConditioningFeatures<f64>) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    fn cond() -> ConditioningFeatures<f64> {
        ConditioningFeatures::new(Tensor::zeros(&[1, 4]), PromptSet::new(vec!["x".into()]).unwrap()).unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = NoiseSchedule::default();
        let mut rng = SeededRng::new(11);
        let eps: Tensor<f64> = rng.randn(&[1, 2, 2, 2]);
        let z0 = Tensor::zeros(&[1, 2, 2, 2]);
        let l = dm_loss(&Oracle, &z0, &cond(), 500, &eps, &s).unwrap();
        assert!(l.item().unwrap().abs() < 1e-20);
    }

    #[test]
    fn zero_predictor_on_unit_noise() {
        let s = NoiseSchedule::default();
        let eps = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let z0 = Tensor::zeros(&[1, 2, 2, 2]);
        let l = dm_loss(&Zero, &z0, &cond(), 10, &eps, &s).unwrap();
        assert_eq!(l.item().unwrap(), 1.0);
    }
}
