//! Trainable local-prior branch.
//!
//! Four stages of heterogeneous convolution experts produce the pyramid
//! `f_s¹…f_s⁴` at 1/4, 1/8, 1/16 and 1/32 of the input resolution. Each stage
//! runs four expert families on its input `x` (`C` channels):
//!
//! * a 1×1 base `l₁ = C₁(x)`,
//! * a ladder `l₃, l₅, l₇` with `l_{2k+1} = ZC_{2k+1}(l₁ + l_{2k−1})` (so `l₃`
//!   sees `l₁ + l₁`),
//! * a 1×1 fusion of `[l₁; l₃; l₅; l₇]` into the expert prior `E_n`.
//!
//! A softmax gate over the pooled stage input mixes the experts:
//! `f_s = C₁(x + Σ_n w_n E_n)`.
//!
//! # Parameter count
//!
//! With stage width `C` and embedding width `D` the extractor holds
//!
//! ```text
//! stem        27·C/2 + C/2 + 9·C/2·C + C
//! per stage   4·(C² + C)                      base 1×1 convs
//!           + 83·C + 3·C²                     separable ladder (dw 3/5/7, pw, no bias)
//!           + 27·C                            atrous ladder
//!           + 30·C                            asymmetric ladder
//!           + (27·(a₁ + a₂ + a₃) + 27)·C      wavelet ladder, aₖ = effective level
//!           + 4·(4·C² + C)                    expert fusions
//!           + 4·C + 4                         gate
//!           + C² + C                          output fusion
//! down (×3)   9·C + C² + C
//! projection  3·(C·D + D)
//! ```
//!
//! The wavelet term depends on spatial size through the effective level; at
//! the desk resolution (64×64) stage 4 is 2×2 so its level-2 rung drops to 1.

use rand::Rng;

use crate::autodiff::{asymmetric_conv, wavelet_conv, ConvSpec, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_tensor, map_to_tokens, tokens_to_map, Conv, Init, Linear};
use crate::param::{ParamId, ParamStore};

pub const EXPERTS: usize = 4;
pub const STAGES: usize = 4;
/// Wavelet decomposition depth for ladder rungs k = 1, 2, 3.
pub const WAVELET_LEVELS: [usize; 3] = [1, 1, 2];
/// Dilation of the atrous ladder rungs.
pub const ATROUS_DILATIONS: [usize; 3] = [1, 2, 3];

/// The four convolution families, in expert order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    Separable,
    Atrous,
    Asymmetric,
    Wavelet,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; EXPERTS] = [Self::Separable, Self::Atrous, Self::Asymmetric, Self::Wavelet];

    /// One-based index lookup.
    pub fn from_index(n: usize) -> Result<Self> {
        match n {
            1..=4 => Ok(Self::ALL[n - 1]),
            _ => Err(Error::InvalidArgument(format!("unknown expert type {n} (expected 1..=4)"))),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Separable => "dsc",
            Self::Atrous => "atrous",
            Self::Asymmetric => "asym",
            Self::Wavelet => "wavelet",
        }
    }
}

/// Largest usable Haar depth (capped at `want`) for an `h×w` map.
pub fn effective_wavelet_level(want: usize, h: usize, w: usize) -> usize {
    let mut level = 0;
    while level < want && h.is_multiple_of(1 << (level + 1)) && w.is_multiple_of(1 << (level + 1)) {
        level += 1;
    }
    level
}

/// One rung of a ladder.
#[derive(Clone, Debug)]
pub enum Rung {
    Separable { dw: ParamId, pw: ParamId, k: usize },
    Atrous { dw: ParamId, dilation: usize },
    Asymmetric { vertical: ParamId, horizontal: ParamId },
    Wavelet { level: usize, detail: Vec<ParamId>, approx: ParamId },
}

impl Rung {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        match self {
            Rung::Separable { dw, pw, k } => {
                let dw = g.param(store, *dw);
                let pw = g.param(store, *pw);
                let y = g.conv2d(x, dw, None, ConvSpec::same(*k, *k, 1, 1, c))?;
                g.conv2d(y, pw, None, ConvSpec::valid(1))
            }
            Rung::Atrous { dw, dilation } => {
                let dw = g.param(store, *dw);
                g.conv2d(x, dw, None, ConvSpec::same(3, 3, 1, *dilation, c))
            }
            Rung::Asymmetric { vertical, horizontal } => {
                let v = g.param(store, *vertical);
                let h = g.param(store, *horizontal);
                asymmetric_conv(g, x, v, h, c)
            }
            Rung::Wavelet { level, detail, approx } => {
                // Inputs smaller than the build size may not support the full depth.
                let s = g.shape(x).to_vec();
                let used = effective_wavelet_level(*level, s[1], s[2]);
                let detail: Vec<Var> = detail[..used].iter().map(|&d| g.param(store, d)).collect();
                let approx = g.param(store, *approx);
                wavelet_conv(g, x, used, &detail, approx)
            }
        }
    }
}

/// Base conv, three rungs and the 1×1 fusion of one expert family.
#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    pub base: Conv,
    pub rungs: Vec<Rung>,
    pub fuse: Conv,
}

/// Intermediate outputs of one expert family.
#[derive(Clone, Debug)]
pub struct LadderOutputs {
    /// `[l₁, l₃, l₅, l₇]`.
    pub ladder: [Var; 4],
    pub prior: Var,
}

impl Expert {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: ExpertKind,
        c: usize,
        (h, w): (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("{name}.{}", kind.tag());
        let base =
            Conv::new(store, &format!("{name}.l1"), c, c, (1, 1), ConvSpec::valid(1), true, Init::Fan(1.0), true, rng)?;
        let mut rungs = Vec::with_capacity(3);
        for k in 1..=3 {
            let rn = format!("{name}.zc{}", 2 * k + 1);
            let ks = 2 * k + 1;
            let mut add = |suffix: &str, shape: &[usize], fan: usize, rng: &mut R| {
                store.add(format!("{rn}.{suffix}"), init_tensor(shape, fan, Init::Fan(1.0), rng), true)
            };
            let rung = match kind {
                ExpertKind::Separable => Rung::Separable {
                    dw: add("dw", &[c, 1, ks, ks], ks * ks, rng)?,
                    pw: add("pw", &[c, c, 1, 1], c, rng)?,
                    k: ks,
                },
                ExpertKind::Atrous => {
                    Rung::Atrous { dw: add("dw", &[c, 1, 3, 3], 9, rng)?, dilation: ATROUS_DILATIONS[k - 1] }
                }
                ExpertKind::Asymmetric => Rung::Asymmetric {
                    vertical: add("v", &[c, 1, ks, 1], ks, rng)?,
                    horizontal: add("h", &[c, 1, 1, ks], ks, rng)?,
                },
                ExpertKind::Wavelet => {
                    let level = effective_wavelet_level(WAVELET_LEVELS[k - 1], h, w);
                    let mut detail = Vec::with_capacity(level);
                    for j in 0..level {
                        detail.push(add(&format!("detail{j}"), &[3 * c, 1, 3, 3], 9, rng)?);
                    }
                    Rung::Wavelet { level, detail, approx: add("approx", &[c, 1, 3, 3], 9, rng)? }
                }
            };
            rungs.push(rung);
        }
        let fuse = Conv::new(
            store,
            &format!("{name}.fuse"),
            4 * c,
            c,
            (1, 1),
            ConvSpec::valid(1),
            true,
            Init::Fan(1.0),
            true,
            rng,
        )?;
        Ok(Self { kind, base, rungs, fuse })
    }

    /// Runs the base, the ladder and the fusion on `x[C, h, w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LadderOutputs> {
        let l1 = self.base.forward(g, store, x)?;
        let mut ladder = [l1; 4];
        let mut prev = l1;
        for (k, rung) in self.rungs.iter().enumerate() {
            let input = g.add(l1, prev)?;
            prev = rung.forward(g, store, input)?;
            ladder[k + 1] = prev;
        }
        let cat = g.concat(&ladder, 0)?;
        let prior = self.fuse.forward(g, store, cat)?;
        Ok(LadderOutputs { ladder, prior })
    }
}

/// Softmax gate over experts from the pooled stage input.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub linear: Linear,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, n: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, name, c, n, Init::Fan(1.0), true, rng)? })
    }

    /// `softmax(W_g · GAP(x) + b_g)` for `x[C, h, w]`; returns `[n]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let pooled = g.mean_axis(flat, 1)?;
        let row = g.reshape(pooled, &[1, s[0]])?;
        let logits = self.linear.forward(g, store, row)?;
        let w = g.softmax(logits, 1)?;
        let n = g.shape(w)[1];
        g.reshape(w, &[n])
    }
}

/// `C₁(x + Σ_n w_n · E_n)`.
pub fn fuse_priors(
    g: &mut Graph,
    store: &ParamStore,
    out: &Conv,
    x: Var,
    experts: &[Var],
    weights: Var,
) -> Result<Var> {
    if g.value(weights).numel() != experts.len() {
        return shape_err(format!(
            "fuse_priors: {} gate weights for {} experts",
            g.value(weights).numel(),
            experts.len()
        ));
    }
    let mut acc = x;
    for (n, &e) in experts.iter().enumerate() {
        let weighted = g.mul_scalar_at(e, weights, n)?;
        acc = g.add(acc, weighted)?;
    }
    out.forward(g, store, acc)
}

/// Stride-2 depthwise-separable downsample with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Downsample {
    pub dw: Conv,
    pub pw: Conv,
}

impl Downsample {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            dw: Conv::new(
                store,
                &format!("{name}.dw"),
                c,
                c,
                (3, 3),
                ConvSpec::same(3, 3, 2, 1, c),
                false,
                Init::Fan(1.0),
                true,
                rng,
            )?,
            pw: Conv::new(
                store,
                &format!("{name}.pw"),
                c,
                c,
                (1, 1),
                ConvSpec::valid(1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.dw.forward(g, store, x)?;
        let y = self.pw.forward(g, store, y)?;
        Ok(g.gelu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub experts: Vec<Expert>,
    pub gate: Gate,
    pub out: Conv,
}

/// Everything a stage computed, for inspection.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub input: Var,
    pub experts: Vec<LadderOutputs>,
    pub gate: Var,
    pub output: Var,
}

impl Stage {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<StageOutputs> {
        let input = match &self.down {
            Some(d) => d.forward(g, store, x)?,
            None => x,
        };
        let mut experts = Vec::with_capacity(EXPERTS);
        for e in &self.experts {
            experts.push(e.forward(g, store, input)?);
        }
        let gate = self.gate.forward(g, store, input)?;
        let priors: Vec<Var> = experts.iter().map(|e| e.prior).collect();
        let output = fuse_priors(g, store, &self.out, input, &priors, gate)?;
        Ok(StageOutputs { input, experts, gate, output })
    }
}

/// Two stride-2 3×3 convolutions with GELU: `[3, H, W] → [C, H/4, W/4]`.
#[derive(Clone, Copy, Debug)]
pub struct Stem {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        if c < 2 || !c.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("stem width {c} must be even")));
        }
        let half = c / 2;
        Ok(Self {
            conv1: Conv::new(
                store,
                &format!("{name}.0"),
                3,
                half,
                (3, 3),
                ConvSpec::same(3, 3, 2, 1, 1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?,
            conv2: Conv::new(
                store,
                &format!("{name}.1"),
                half,
                c,
                (3, 3),
                ConvSpec::same(3, 3, 2, 1, 1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, image)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, store, y)?;
        Ok(g.gelu(y))
    }
}

/// Token sequence of the three coarser pyramid levels with its boundaries.
#[derive(Clone, Copy, Debug)]
pub struct Flattened {
    /// `[N, D]`.
    pub tokens: Var,
    pub layout: ScaleLayout,
}

/// Offsets and grid extents of the 1/8, 1/16 and 1/32 segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleLayout {
    /// Segment starts plus the total length, strictly increasing.
    pub offsets: [usize; 4],
    pub grids: [(usize, usize); 3],
}

impl ScaleLayout {
    pub fn for_image(h: usize, w: usize) -> Self {
        let grids = [(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)];
        let mut offsets = [0; 4];
        for (i, (gh, gw)) in grids.iter().enumerate() {
            offsets[i + 1] = offsets[i] + gh * gw;
        }
        Self { offsets, grids }
    }

    pub fn len(&self) -> usize {
        self.offsets[3]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.offsets[i + 1] - self.offsets[i])
    }

    pub fn check(&self, tokens: usize) -> Result<()> {
        let increasing = self.offsets.windows(2).all(|p| p[0] < p[1]);
        let sizes_match = (0..3).all(|i| self.segment(i).1 == self.grids[i].0 * self.grids[i].1);
        if !increasing || !sizes_match || self.len() != tokens {
            return shape_err(format!("scale layout {self:?} does not describe {tokens} tokens"));
        }
        Ok(())
    }
}

/// Outputs of [`Extractor::forward`].
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub stem: Var,
    pub stages: Vec<StageOutputs>,
}

impl Pyramid {
    /// `f_s¹…f_s⁴`.
    pub fn levels(&self) -> Vec<Var> {
        self.stages.iter().map(|s| s.output).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub width: usize,
    pub embed_dim: usize,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    /// 1×1 projections of `f_s²…f_s⁴` to the embedding width.
    pub proj: Vec<Conv>,
}

impl Extractor {
    /// Builds the branch for `image_size × image_size` inputs under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        image_size: usize,
        width: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(32) {
            return Err(Error::InvalidArgument(format!("image size {image_size} must be a positive multiple of 32")));
        }
        let stem = Stem::new(store, &format!("{prefix}.stem"), width, rng)?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let name = format!("{prefix}.stage{}", i + 1);
            let side = image_size >> (i + 2);
            let down = if i == 0 { None } else { Some(Downsample::new(store, &format!("{name}.down"), width, rng)?) };
            let mut experts = Vec::with_capacity(EXPERTS);
            for kind in ExpertKind::ALL {
                experts.push(Expert::new(store, &name, kind, width, (side, side), rng)?);
            }
            let gate = Gate::new(store, &format!("{name}.gate"), width, EXPERTS, rng)?;
            let out = Conv::new(
                store,
                &format!("{name}.out"),
                width,
                width,
                (1, 1),
                ConvSpec::valid(1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?;
            stages.push(Stage { down, experts, gate, out });
        }
        let mut proj = Vec::with_capacity(3);
        for i in 2..=STAGES {
            proj.push(Conv::new(
                store,
                &format!("{prefix}.proj{i}"),
                width,
                embed_dim,
                (1, 1),
                ConvSpec::valid(1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?);
        }
        Ok(Self { width, embed_dim, stem, stages, proj })
    }

    /// Runs the stem and all four stages on `image[3, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Pyramid> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
            return shape_err(format!("extractor: image {s:?} must be [3, H, W] with H, W divisible by 32"));
        }
        let stem = self.stem.forward(g, store, image)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut x = stem;
        for stage in &self.stages {
            let out = stage.forward(g, store, x)?;
            x = out.output;
            stages.push(out);
        }
        Ok(Pyramid { stem, stages })
    }

    /// Projects `f_s²…f_s⁴` to `D` channels and concatenates their tokens.
    pub fn flatten(&self, g: &mut Graph, store: &ParamStore, pyramid: &Pyramid) -> Result<Flattened> {
        let mut maps = Vec::with_capacity(3);
        for (i, conv) in self.proj.iter().enumerate() {
            maps.push(conv.forward(g, store, pyramid.stages[i + 1].output)?);
        }
        flatten_maps(g, &maps)
    }
}

/// Concatenates `[D, h, w]` maps into one `[Σ hw, D]` token sequence.
pub fn flatten_maps(g: &mut Graph, maps: &[Var]) -> Result<Flattened> {
    if maps.len() != 3 {
        return shape_err(format!("flatten_maps: expected 3 maps, got {}", maps.len()));
    }
    let mut parts = Vec::with_capacity(3);
    let mut grids = [(0, 0); 3];
    for (i, &m) in maps.iter().enumerate() {
        let s = g.shape(m).to_vec();
        grids[i] = (s[1], s[2]);
        parts.push(map_to_tokens(g, m)?);
    }
    let tokens = g.concat(&parts, 0)?;
    let mut offsets = [0; 4];
    for i in 0..3 {
        offsets[i + 1] = offsets[i] + grids[i].0 * grids[i].1;
    }
    Ok(Flattened { tokens, layout: ScaleLayout { offsets, grids } })
}

/// Splits a flattened sequence back into its three `[D, h, w]` maps.
pub fn unflatten(g: &mut Graph, flat: &Flattened) -> Result<[Var; 3]> {
    let n = g.shape(flat.tokens)[0];
    flat.layout.check(n)?;
    let mut out = [flat.tokens; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let (start, len) = flat.layout.segment(i);
        let seg = g.slice(flat.tokens, 0, start, len)?;
        let (h, w) = flat.layout.grids[i];
        *slot = tokens_to_map(g, seg, h, w)?;
    }
    Ok(out)
}
