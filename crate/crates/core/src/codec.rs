//! Convolutional autoencoder between pixel space and the latent space the
//! denoiser runs in.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param, VarBuilder};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Power of two; one stride-2 stage per factor of two.
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub image_channels: usize,
    /// Width of each encoder stage, outermost first.
    pub hidden: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 8,
            latent_channels: 4,
            image_channels: 3,
            hidden: vec![32, 64, 64],
        }
    }
}

impl CodecConfig {
    fn stages(&self) -> Result<usize> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {f} must be a power of two >= 2"
            )));
        }
        let n = f.trailing_zeros() as usize;
        if self.hidden.len() != n {
            return Err(Error::Config(format!(
                "{} hidden widths for {n} downsampling stages",
                self.hidden.len()
            )));
        }
        Ok(n)
    }
}

#[derive(Debug)]
pub struct LatentCodec<T: Float = f32> {
    cfg: CodecConfig,
    down: Vec<Conv2d<T>>,
    to_latent: Conv2d<T>,
    from_latent: Conv2d<T>,
    up: Vec<Conv2d<T>>,
    /// Multiplier bringing latents to roughly unit variance.
    scale: Arc<Param<T>>,
}

impl<T: Float> LatentCodec<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &CodecConfig) -> Result<Self> {
        let stages = cfg.stages()?;
        let mut down = Vec::with_capacity(stages);
        let mut cin = cfg.image_channels;
        for (i, &w) in cfg.hidden.iter().enumerate() {
            down.push(Conv2d::new(&vb.pp(format!("encoder.down.{i}")), cin, w, 3, 2, 1)?);
            cin = w;
        }
        let to_latent = Conv2d::new(&vb.pp("encoder.to_latent"), cin, cfg.latent_channels, 3, 1, 1)?;
        let from_latent = Conv2d::new(&vb.pp("decoder.from_latent"), cfg.latent_channels, cin, 3, 1, 1)?;
        let mut up = Vec::with_capacity(stages);
        for i in (0..stages).rev() {
            let cout = if i == 0 { cfg.image_channels } else { cfg.hidden[i - 1] };
            up.push(Conv2d::new(&vb.pp(format!("decoder.up.{i}")), cin, cout, 3, 1, 1)?);
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            down,
            to_latent,
            from_latent,
            up,
            scale: vb.constant("latent_scale", &[1], 1.0)?,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn latent_scale(&self) -> &Arc<Param<T>> {
        &self.scale
    }

    /// `[B, 3, H, W] -> [B, Cz, H/f, W/f]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.cfg.downsample_factor;
        match x.shape() {
            &[_, c, h, w] if c == self.cfg.image_channels => {
                if h % f != 0 || w % f != 0 {
                    return Err(Error::dim(
                        "encode",
                        format!("image {h}x{w} not divisible by downsample factor {f}"),
                    ));
                }
            }
            s => {
                return Err(Error::dim(
                    "encode",
                    format!("expected [B, {}, H, W], got {s:?}", self.cfg.image_channels),
                ))
            }
        }
        let mut h = x.scale(2.0).add_scalar(-1.0);
        for conv in &self.down {
            h = conv.forward(&h)?.silu();
        }
        self.to_latent.forward(&h)?.mul(&self.scale.tensor())
    }

    /// `[B, Cz, h, w] -> [B, 3, h·f, w·f]`, pixel values around `[0, 1]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 4 || z.dim(1) != self.cfg.latent_channels {
            return Err(Error::dim(
                "decode",
                format!(
                    "expected [B, {}, h, w], got {:?}",
                    self.cfg.latent_channels,
                    z.shape()
                ),
            ));
        }
        let inv = self.scale.tensor().data()[0].recip();
        let z = z.mul(&Tensor::scalar(inv))?;
        let mut h = self.from_latent.forward(&z)?.silu();
        let last = self.up.len() - 1;
        for (i, conv) in self.up.iter().enumerate() {
            h = conv.forward(&h.interpolate_nearest(2)?)?;
            if i != last {
                h = h.silu();
            }
        }
        Ok(h.scale(0.5).add_scalar(0.5))
    }

    pub fn reconstruction_loss(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)?.mse(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{grad_check, SeededRng};

    fn codec<T: Float>() -> (ParamStore<T>, LatentCodec<T>) {
        let store = ParamStore::new();
        let c = LatentCodec::new(&VarBuilder::new(&store, 9).pp("codec"), &CodecConfig::default()).unwrap();
        (store, c)
    }

    #[test]
    fn shapes_follow_factor_eight() {
        let (_, c) = codec::<f32>();
        let x = Tensor::full(&[1, 3, 64, 64], 0.5);
        let z = c.encode(&x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 8, 8]);
        assert_eq!(c.decode(&z).unwrap().shape(), x.shape());
        let img = c.decode(&Tensor::zeros(&[2, 4, 3, 5])).unwrap();
        assert_eq!(img.shape(), &[2, 3, 24, 40]);
        assert!(img.all_finite());
    }

    #[test]
    fn encode_is_deterministic() {
        let (_, c) = codec::<f32>();
        let x: Tensor<f32> = SeededRng::new(1).uniform_tensor(&[1, 3, 16, 16], 1.0);
        assert_eq!(c.encode(&x).unwrap().data(), c.encode(&x).unwrap().data());
    }

    #[test]
    fn indivisible_sizes_and_bad_channels() {
        let (_, c) = codec::<f32>();
        assert!(matches!(c.encode(&Tensor::zeros(&[1, 3, 60, 64])), Err(Error::Dim { .. })));
        assert!(matches!(c.decode(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Dim { .. })));
    }

    #[test]
    fn input_gradient_flows_through_frozen_codec() {
        let (store, c) = codec::<f64>();
        store.set_frozen("codec.", true);
        let mut rng = SeededRng::new(4);
        let x: Tensor<f64> = rng.uniform_tensor(&[1, 3, 8, 8], 1.0).scale(0.5).add_scalar(0.5);
        let w: Tensor<f64> = rng.randn(&[1, 4, 1, 1]);
        let err = grad_check(|x| Ok(c.encode(x)?.mul(&w)?.sum_all().square()), &x, 1e-5).unwrap();
        assert!(err < 1e-2, "{err}");
        assert!(store.all().iter().all(|p| p.tensor().grad().is_none()));
    }
}
