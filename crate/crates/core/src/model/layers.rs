//! Layer constructors over the parameter store.

use candle_core::{Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module};

use crate::error::Result;

use super::store::{Init, ParamStore};

pub fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let fan_in = in_c * kernel * kernel;
    let weight = store.var(
        &format!("{name}.weight"),
        &[out_c, in_c, kernel, kernel],
        Init::KaimingNormal { fan_in },
        true,
    )?;
    let bias = if bias {
        Some(store.var(
            &format!("{name}.bias"),
            &[out_c],
            Init::Zeros,
            true,
        )?)
    } else {
        None
    };
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(weight, bias, cfg))
}

pub fn linear(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let weight = store.var(
        &format!("{name}.weight"),
        &[out_dim, in_dim],
        Init::UniformFanIn { fan_in: in_dim },
        true,
    )?;
    let bias = store.var(
        &format!("{name}.bias"),
        &[out_dim],
        Init::UniformFanIn { fan_in: in_dim },
        true,
    )?;
    Ok(Linear::new(weight, Some(bias)))
}

/// Spatial batch normalization with running statistics owned by the store,
/// so checkpoints capture them.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.var(&format!("{name}.weight"), &[channels], Init::Ones, true)?,
            beta: store.var(&format!("{name}.bias"), &[channels], Init::Zeros, true)?,
            running_mean: store.state_var(
                &format!("{name}.running_mean"),
                &[channels],
                Init::Zeros,
            )?,
            running_var: store.state_var(
                &format!("{name}.running_var"),
                &[channels],
                Init::Ones,
            )?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }

    fn forward_train(&self, x: &Tensor) -> Result<Tensor> {
        let xt = x.transpose(0, 1)?;
        let post_t_dims = xt.dims().to_vec();
        let xt = xt.flatten_from(1)?.contiguous()?; // (C, N*H*W)
        let n = xt.dim(1)? as f64;
        let mean = xt.mean_keepdim(1)?;
        let centered = xt.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;

        let new_mean = ((self.running_mean.as_tensor() * (1.0 - self.momentum))?
            + (mean.flatten_all()?.detach() * self.momentum)?)?;
        self.running_mean.set(&new_mean)?;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let new_var = ((self.running_var.as_tensor() * (1.0 - self.momentum))?
            + (var.flatten_all()?.detach() * (self.momentum * unbias))?)?;
        self.running_var.set(&new_var)?;

        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let scaled = normed
            .broadcast_mul(&self.gamma.reshape((self.channels, 1))?)?
            .broadcast_add(&self.beta.reshape((self.channels, 1))?)?;
        Ok(scaled.reshape(post_t_dims)?.transpose(0, 1)?)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let shape = (1, self.channels, 1, 1);
        let mean = self.running_mean.as_tensor().reshape(shape)?;
        let var = self.running_var.as_tensor().reshape(shape)?;
        let gamma = self.gamma.reshape(shape)?;
        let beta = self.beta.reshape(shape)?;
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// 2x2/stride-2 max pooling expressed as reshape + max reductions.
///
/// The library's pooling op has a mis-scaled backward pass (gradients get an
/// extra 1/k^2 factor), while max reductions backpropagate correctly, so the
/// training path goes through this instead.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let x = x.contiguous()?.reshape((n, c, h / 2, 2, w / 2, 2))?;
    Ok(x.max(5)?.max(3)?)
}

pub fn forward_linear(l: &Linear, x: &Tensor) -> Result<Tensor> {
    Ok(l.forward(x)?)
}

pub fn forward_conv(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    Ok(c.forward(x)?)
}
