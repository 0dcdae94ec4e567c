//! Parameter bundles for the common layers.

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a weight tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Gaussian with standard deviation `gain / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Fan(gain) => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_tensor(&[d_out, d_in], d_in, init, rng), trainable)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable)?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Convolution with kernel `[c_out, c_in/groups, kh, kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        spec: ConvSpec,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cig = c_in / spec.groups;
        let w = store.add(
            format!("{name}.weight"),
            init_tensor(&[c_out, cig, kh, kw], cig * kh * kw, init, rng),
            trainable,
        )?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), trainable)?) } else { None };
        Ok(Self { w, b, spec })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), trainable)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// `[C, h, w]` feature map to `[h·w, C]` tokens.
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[h·w, C]` tokens to a `[C, h, w]` feature map.
pub fn tokens_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[c, h, w])
}
