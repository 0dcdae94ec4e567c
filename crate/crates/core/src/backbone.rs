//! Frozen transformer branch: patch embedding with fixed sinusoidal positions
//! followed by pre-norm encoder layers grouped into equal-depth blocks.

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{map_to_tokens, Conv, Init, LayerNorm, Linear};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const PATCH: usize = 16;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// 2-D sinusoidal positional table for an `h×w` token grid, `[h·w, D]`.
///
/// The first half of the channels encodes the row and the second half the
/// column, each as interleaved blocks of sines then cosines.
pub fn sinusoidal_positions(h: usize, w: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let freq = |k: usize| 1.0 / 10000f64.powf(k as f64 / quarter.max(1) as f64);
    let mut t = Tensor::zeros(&[h * w, d]);
    for i in 0..h {
        for j in 0..w {
            let row = &mut t.data_mut()[(i * w + j) * d..(i * w + j + 1) * d];
            for k in 0..quarter {
                let (a, b) = (i as f64 * freq(k), j as f64 * freq(k));
                row[k] = a.sin();
                row[quarter + k] = a.cos();
                row[2 * quarter + k] = b.sin();
                row[3 * quarter + k] = b.cos();
            }
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, false)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, Init::Fan(1.0), false, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, Init::Fan(1.0), false, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, false)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, MLP_RATIO * d, Init::Fan(1.0), false, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * d, d, Init::Fan(1.0), false, rng)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: usize,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let mut outs = Vec::with_capacity(heads);
        for k in 0..heads {
            let q = g.slice(qkv, 1, k * dh, dh)?;
            let kk = g.slice(qkv, 1, d + k * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * d + k * dh, dh)?;
            let scores = g.matmul_nt(q, kk)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(g.value(attn).clone());
            }
            outs.push(g.matmul(attn, v)?);
        }
        let cat = g.concat(&outs, 1)?;
        let attn_out = self.proj.forward(g, store, cat)?;
        let x = g.add(x, attn_out)?;

        let h = self.norm2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch: Conv,
    pub layers: Vec<EncoderLayer>,
}

impl Backbone {
    /// Builds a seeded random backbone under `prefix`. Every parameter is frozen.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let BackboneConfig { embed_dim: d, layers, heads } = config;
        if d == 0 || d % 4 != 0 {
            return Err(Error::InvalidArgument(format!("embedding width {d} must be a positive multiple of 4")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {d}")));
        }
        let patch = Conv::new(
            store,
            &format!("{prefix}.patch_embed"),
            3,
            d,
            (PATCH, PATCH),
            ConvSpec::valid(PATCH),
            true,
            Init::Fan(1.0),
            false,
            rng,
        )?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.layer{i}"), d, rng))
            .collect::<Result<Vec<_>>>()?;
        let bb = Self { config, patch, layers };
        bb.freeze_all(store, prefix);
        Ok(bb)
    }

    /// Marks every parameter under `prefix` as frozen.
    pub fn freeze_all(&self, store: &mut ParamStore, prefix: &str) {
        store.set_trainable_prefix(&format!("{prefix}."), false);
    }

    /// `image[3, H, W]` to `f_u¹`, `[H/16 · W/16, D]`.
    pub fn patch_embed(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3
            || s[0] != 3
            || !s[1].is_multiple_of(PATCH)
            || !s[2].is_multiple_of(PATCH)
            || s[1] == 0
            || s[2] == 0
        {
            return shape_err(format!("patch_embed: image {s:?} must be [3, H, W] with H, W divisible by {PATCH}"));
        }
        let grid = self.patch.forward(g, store, image)?;
        let tokens = map_to_tokens(g, grid)?;
        let pe = g.constant(sinusoidal_positions(s[1] / PATCH, s[2] / PATCH, self.config.embed_dim));
        g.add(tokens, pe)
    }

    /// Layer ranges of each block when the stack is split into `blocks` parts.
    pub fn block_ranges(&self, blocks: usize) -> Result<Vec<std::ops::Range<usize>>> {
        let n = self.layers.len();
        if blocks == 0 || !n.is_multiple_of(blocks) {
            return Err(Error::InvalidArgument(format!("{n} layers cannot be split into {blocks} equal blocks")));
        }
        let per = n / blocks;
        Ok((0..blocks).map(|b| b * per..(b + 1) * per).collect())
    }

    /// Runs the layers in `range` on `x[N, D]`, checking the token count.
    ///
    /// Attention probabilities of every head are appended to `probe` when given.
    pub fn run_layers(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        range: std::ops::Range<usize>,
        x: Var,
        tokens: usize,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != tokens || s[1] != self.config.embed_dim {
            return shape_err(format!("backbone block: got {:?}, expected [{tokens}, {}]", s, self.config.embed_dim));
        }
        let mut x = x;
        for layer in &self.layers[range] {
            x = layer.forward(g, store, x, self.config.heads, probe.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Patch embedding followed by every layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let x = self.patch_embed(g, store, image)?;
        let n = g.shape(x)[0];
        self.run_layers(g, store, 0..self.layers.len(), x, n, None)
    }
}
