use std::sync::Arc;

use super::{Param, VarBuilder};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

pub trait Module<T: Float> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone)]
pub struct Linear<T: Float> {
    weight: Arc<Param<T>>,
    bias: Option<Arc<Param<T>>>,
}

impl<T: Float> Linear<T> {
    pub fn new(vb: &VarBuilder<T>, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = vb.uniform("weight", &[out, inp], bound)?;
        let bias = if bias {
            Some(vb.uniform("bias", &[out], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Arc<Param<T>> {
        &self.weight
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.linear(&self.weight.tensor(), b.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Float> {
    weight: Arc<Param<T>>,
    bias: Option<Arc<Param<T>>>,
    stride: usize,
    pad: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        vb: &VarBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: vb.uniform("weight", &[cout, cin, kernel, kernel], bound)?,
            bias: Some(vb.uniform("bias", &[cout], bound)?),
            stride,
            pad,
        })
    }

    /// Conv without a bias term, for use in front of a normalisation layer.
    pub fn no_bias(
        vb: &VarBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: vb.uniform("weight", &[cout, cin, kernel, kernel], bound)?,
            bias: None,
            stride,
            pad,
        })
    }

    /// Conv whose weights and bias start at zero.
    pub fn zeroed(
        vb: &VarBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: vb.constant("weight", &[cout, cin, kernel, kernel], 0.0)?,
            bias: Some(vb.constant("bias", &[cout], 0.0)?),
            stride: 1,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Float> {
    groups: usize,
    gamma: Arc<Param<T>>,
    beta: Arc<Param<T>>,
}

impl<T: Float> GroupNorm<T> {
    pub fn new(vb: &VarBuilder<T>, groups: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            groups,
            gamma: vb.constant("weight", &[channels], 1.0)?,
            beta: vb.constant("bias", &[channels], 0.0)?,
        })
    }
}

impl<T: Float> Module<T> for GroupNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Float> {
    gamma: Arc<Param<T>>,
    beta: Arc<Param<T>>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(vb: &VarBuilder<T>, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.constant("weight", &[width], 1.0)?,
            beta: vb.constant("bias", &[width], 0.0)?,
        })
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}
