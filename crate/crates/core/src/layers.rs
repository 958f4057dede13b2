//! Learnable layer definitions. Layers hold hyperparameters plus
//! handles into a [`ParamStore`]; the tensors themselves live in the
//! store so the optimizer and checkpoints can walk them uniformly.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fan-in scaled uniform init: U(-b, b) with b = sqrt(1 / fan_in).
fn init_uniform<E: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// 2D convolution with odd kernel and padding (k-1)/2.
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2dLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = c_in * k * k;
        let kernel = store.add(
            format!("{name}.weight"),
            init_uniform(&[c_out, c_in, k, k], fan_in, rng),
            true,
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            init_uniform(&[c_out], fan_in, rng),
            true,
        ));
        Conv2dLayer {
            kernel,
            bias,
            stride,
            padding: (k - 1) / 2,
            c_in,
            c_out,
            k,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.kernel);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Per-channel affine normalization with running statistics.
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    /// Train mode normalizes by batch statistics, eval by running ones.
    pub training: bool,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], E::one()), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            Tensor::full(&[channels], E::one()),
            false,
        );
        BatchNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training: true,
            channels,
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (rm, rv) = store.pair_mut(self.running_mean, self.running_var);
        tape.batchnorm(x, gamma, beta, rm, rv, self.eps, self.momentum, self.training)
    }
}

/// Dense affine map.
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[d_out, d_in], d_in, rng),
            true,
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), init_uniform(&[d_out], d_in, rng), true));
        LinearLayer {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.linear(x, w, b)
    }
}

/// Conv + batch norm + ReLU, the repeated unit of the fuse block.
pub struct ConvBnRelu {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
}

impl ConvBnRelu {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, rng),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &mut ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }

    pub fn set_training(&mut self, training: bool) {
        self.bn.training = training;
    }
}
