//! Bi-directional interaction between the frozen token stream and the
//! trainable multi-scale stream.
//!
//! Each stage injects the trainable stream into the frozen one with a
//! cosine-aligned deformable attention ([`Cda`]), runs one frozen block,
//! extracts the updated frozen tokens back with a second [`Cda`], and finally
//! reorganizes the trainable stream per scale with [`Case`].

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::backbone::Backbone;
use crate::error::{shape_err, Result};
use crate::extractor::{Flattened, ScaleLayout};
use crate::nn::{map_to_tokens, tokens_to_map, Conv, Init, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One sampled level of the value stream: a token segment laid out as an `h×w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueLevel {
    pub offset: usize,
    pub h: usize,
    pub w: usize,
}

impl ValueLevel {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The three levels of a flattened multi-scale stream.
pub fn layout_levels(layout: &ScaleLayout) -> Vec<ValueLevel> {
    (0..3).map(|i| ValueLevel { offset: layout.offsets[i], h: layout.grids[i].0, w: layout.grids[i].1 }).collect()
}

/// Normalized pixel-center coordinates `(x, y)` of every cell of each grid,
/// concatenated in order.
pub fn reference_points(grids: &[(usize, usize)]) -> Tensor {
    let n: usize = grids.iter().map(|(h, w)| h * w).sum();
    let mut data = Vec::with_capacity(2 * n);
    for &(h, w) in grids {
        for i in 0..h {
            for j in 0..w {
                data.push((j as f64 + 0.5) / w as f64);
                data.push((i as f64 + 0.5) / h as f64);
            }
        }
    }
    Tensor::new(vec![n, 2], data).expect("consistent length")
}

/// Cosine of each query against its sampled vectors, regrouped per head and
/// turned into a softmax modulation over the head's `L·K` samples.
///
/// `query` is `[N, D]`, `samples` `[N, P, D]`; returns `[N, P]`.
pub fn cosine_alignment(
    g: &mut Graph,
    store: &ParamStore,
    phi: &Linear,
    query: Var,
    samples: Var,
    heads: usize,
) -> Result<Var> {
    let cos = g.cosine(query, samples)?;
    let (n, p) = (g.shape(cos)[0], g.shape(cos)[1]);
    if heads == 0 || p % heads != 0 {
        return shape_err(format!("cosine_alignment: {p} samples over {heads} heads"));
    }
    let grouped = g.reshape(cos, &[n * heads, p / heads])?;
    let logits = phi.forward(g, store, grouped)?;
    let m = g.softmax(logits, 1)?;
    g.reshape(m, &[n, p])
}

/// Cosine-aligned deformable attention.
#[derive(Clone, Debug)]
pub struct Cda {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub norm_q: LayerNorm,
    pub norm_v: LayerNorm,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub attn: Linear,
    pub phi: Linear,
    pub out: Linear,
    /// Zero-initialized output gate `Ψ_o`, `[D]`.
    pub psi: ParamId,
}

/// Intermediate values of one [`Cda`] call.
#[derive(Clone, Debug)]
pub struct CdaOutputs {
    pub out: Var,
    /// Predicted attention, `[N_q, P]`, normalized per head.
    pub attn: Var,
    /// Cosine modulation, `[N_q, P]`, normalized per head.
    pub modulation: Var,
    /// Sampling locations per level, rows ordered `(query, head, point)`.
    pub locations: Vec<Var>,
    /// Sampled normalized values, `[N_q, P, D]`, with `P` ordered `(head, level, point)`.
    pub samples: Var,
}

impl Cda {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return shape_err(format!("cda: {heads} heads do not divide width {dim}"));
        }
        let p = heads * levels * points;
        let lk = levels * points;
        let phi = Linear::new(store, &format!("{name}.phi"), lk, lk, Init::Zeros, true, rng)?;
        let eye = Tensor::from_fn(&[lk, lk], |k| if k / lk == k % lk { 1.0 } else { 0.0 });
        store.get_mut(phi.w).value = eye;
        Ok(Self {
            dim,
            heads,
            levels,
            points,
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim, true)?,
            norm_v: LayerNorm::new(store, &format!("{name}.norm_v"), dim, true)?,
            value_proj: Linear::new(store, &format!("{name}.w_v"), dim, dim, Init::Fan(1.0), true, rng)?,
            offsets: Linear::new(store, &format!("{name}.offsets"), dim, 2 * p, Init::Zeros, true, rng)?,
            attn: Linear::new(store, &format!("{name}.attn"), dim, p, Init::Zeros, true, rng)?,
            phi,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, Init::Fan(1.0), true, rng)?,
            psi: store.add(format!("{name}.psi"), Tensor::zeros(&[dim]), true)?,
        })
    }

    /// Updates `query[N_q, D]` with samples of `value[N_v, D]`.
    ///
    /// `refs` holds one normalized reference point per query; `levels` lays
    /// out the value tokens as grids. Offsets are predicted in pixels of each
    /// level and divided by its extent.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        refs: &Tensor,
        value: Var,
        levels: &[ValueLevel],
    ) -> Result<CdaOutputs> {
        let (nq, d) = (g.shape(query)[0], self.dim);
        let nv = g.shape(value)[0];
        if levels.len() != self.levels {
            return shape_err(format!("cda: {} value levels, expected {}", levels.len(), self.levels));
        }
        if levels.iter().map(|l| l.offset + l.len()).max().unwrap_or(0) > nv
            || levels.iter().map(ValueLevel::len).sum::<usize>() != nv
        {
            return shape_err(format!("cda: value levels {levels:?} do not describe {nv} tokens"));
        }
        if refs.shape() != [nq, 2] {
            return shape_err(format!("cda: reference points {:?} for {nq} queries", refs.shape()));
        }
        let (h, l, k) = (self.heads, self.levels, self.points);
        let p = h * l * k;

        let qn = self.norm_q.forward(g, store, query)?;
        let vn = self.norm_v.forward(g, store, value)?;
        let vp = self.value_proj.forward(g, store, vn)?;
        let both = g.concat(&[vn, vp], 1)?; // [N_v, 2D]

        let off = self.offsets.forward(g, store, qn)?; // [N_q, P·2], ordered (head, level, point, xy)
        let off = g.reshape(off, &[nq * p, 2])?;

        let mut sampled = Vec::with_capacity(l);
        let mut locations = Vec::with_capacity(l);
        for (li, lvl) in levels.iter().enumerate() {
            let rows: Vec<usize> = (0..nq)
                .flat_map(|q| (0..h).flat_map(move |hh| (0..k).map(move |kk| ((q * h + hh) * l + li) * k + kk)))
                .collect();
            let lo = g.gather_rows(off, &rows)?;
            let inv = g.constant(Tensor::from_vec(vec![1.0 / lvl.w as f64, 1.0 / lvl.h as f64]));
            let lo = g.mul_row(lo, inv)?;
            let base = Tensor::from_fn(&[nq * h * k, 2], |idx| refs.data()[(idx / 2) / (h * k) * 2 + idx % 2]);
            let base = g.constant(base);
            let loc = g.add(base, lo)?;
            let seg = g.slice(both, 0, lvl.offset, lvl.len())?;
            let grid = tokens_to_map(g, seg, lvl.h, lvl.w)?;
            sampled.push(g.bilinear_sample(grid, loc)?);
            locations.push(loc);
        }
        // Reorder from (level, query, head, point) to (query, head, level, point).
        let all = g.concat(&sampled, 0)?;
        let order: Vec<usize> = (0..nq)
            .flat_map(|q| {
                (0..h).flat_map(move |hh| {
                    (0..l).flat_map(move |li| (0..k).map(move |kk| ((li * nq + q) * h + hh) * k + kk))
                })
            })
            .collect();
        let all = g.gather_rows(all, &order)?;
        let all = g.reshape(all, &[nq, p, 2 * d])?;
        let samples = g.slice(all, 2, 0, d)?;
        let projected = g.slice(all, 2, d, d)?;

        let modulation = cosine_alignment(g, store, &self.phi, qn, samples, h)?;
        let logits = self.attn.forward(g, store, qn)?;
        let logits = g.reshape(logits, &[nq * h, l * k])?;
        let attn = g.softmax(logits, 1)?;
        let attn = g.reshape(attn, &[nq, p])?;
        let weights = g.mul(attn, modulation)?;

        let agg = g.head_sum(weights, projected, h)?;
        let upd = self.out.forward(g, store, agg)?;
        let psi = g.param(store, self.psi);
        let upd = g.mul_row(upd, psi)?;
        let out = g.add(query, upd)?;
        Ok(CdaOutputs { out, attn, modulation, locations, samples })
    }
}

/// Two-layer bottleneck producing per-channel excitation logits.
#[derive(Clone, Copy, Debug)]
pub struct Excitation {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Excitation {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let hidden = (c / 4).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, Init::Fan(1.0), true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, Init::Fan(1.0), true, rng)?,
        })
    }

    /// Logits `[C]` from the spatial mean of `x[C, h, w]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let pooled = g.mean_axis(flat, 1)?;
        let row = g.reshape(pooled, &[1, s[0]])?;
        let hdn = self.fc1.forward(g, store, row)?;
        let hdn = g.gelu(hdn);
        let out = self.fc2.forward(g, store, hdn)?;
        g.reshape(out, &[s[0]])
    }
}

/// `x ⊗ σ(MLP(GAP(x)))`.
pub fn channel_attention(g: &mut Graph, store: &ParamStore, mlp: &Excitation, x: Var) -> Result<Var> {
    let z = mlp.logits(g, store, x)?;
    let gate = g.sigmoid(z);
    g.mul_channel(x, gate)
}

/// `x ⊗ (1 − σ(MLP(GAP(x))))`.
pub fn reverse_attention(g: &mut Graph, store: &ParamStore, mlp: &Excitation, x: Var) -> Result<Var> {
    let z = mlp.logits(g, store, x)?;
    let gate = g.sigmoid(z);
    let gate = g.affine(gate, -1.0, 1.0);
    g.mul_channel(x, gate)
}

/// Channel-oriented scale enhancement of the multi-scale stream.
#[derive(Clone, Copy, Debug)]
pub struct Case {
    pub norm: LayerNorm,
    pub dw: Conv,
    pub pw: Conv,
    pub ca: Excitation,
    pub ra: Excitation,
    pub gate: Linear,
}

#[derive(Clone, Debug)]
pub struct CaseOutputs {
    pub out: Var,
    /// Mixing weights `[2]` of the channel and reverse experts.
    pub weights: Var,
}

impl Case {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, true)?,
            dw: Conv::new(
                store,
                &format!("{name}.dc.dw"),
                d,
                d,
                (3, 3),
                ConvSpec::same(3, 3, 1, 1, d),
                false,
                Init::Fan(1.0),
                true,
                rng,
            )?,
            pw: Conv::new(
                store,
                &format!("{name}.dc.pw"),
                d,
                d,
                (1, 1),
                ConvSpec::valid(1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )?,
            ca: Excitation::new(store, &format!("{name}.ca"), d, rng)?,
            ra: Excitation::new(store, &format!("{name}.ra"), d, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), d, 2, Init::Fan(1.0), true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &Flattened) -> Result<CaseOutputs> {
        self.forward_with(g, store, x, None)
    }

    /// As [`Case::forward`], optionally replacing the learned mixing weights.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Flattened,
        weights: Option<Var>,
    ) -> Result<CaseOutputs> {
        let n = g.shape(x.tokens)[0];
        x.layout.check(n)?;
        let normed = self.norm.forward(g, store, x.tokens)?;
        let weights = match weights {
            Some(w) => w,
            None => {
                let d = g.shape(normed)[1];
                let pooled = g.mean_axis(normed, 0)?;
                let row = g.reshape(pooled, &[1, d])?;
                let logits = self.gate.forward(g, store, row)?;
                let w = g.softmax(logits, 1)?;
                g.reshape(w, &[2])?
            }
        };
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let (start, len) = x.layout.segment(i);
            let (h, w) = x.layout.grids[i];
            let seg = g.slice(normed, 0, start, len)?;
            let m = tokens_to_map(g, seg, h, w)?;
            let m = self.dw.forward(g, store, m)?;
            let m = self.pw.forward(g, store, m)?;
            let ca = channel_attention(g, store, &self.ca, m)?;
            let ra = reverse_attention(g, store, &self.ra, m)?;
            let ca = g.mul_scalar_at(ca, weights, 0)?;
            let ra = g.mul_scalar_at(ra, weights, 1)?;
            let mixed = g.add(ca, ra)?;
            parts.push(map_to_tokens(g, mixed)?);
        }
        let enhanced = g.concat(&parts, 0)?;
        let out = g.add(x.tokens, enhanced)?;
        Ok(CaseOutputs { out, weights })
    }
}

/// Parameters of one interaction stage. Missing parts are skipped.
#[derive(Clone, Debug)]
pub struct AdapterStage {
    pub inject: Option<Cda>,
    pub extract: Option<Cda>,
    pub case: Option<Case>,
}

/// Which parts of a stage run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSwitches {
    pub cda: bool,
    pub case: bool,
}

/// The two streams threaded through the stages.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    /// Frozen-branch tokens `[N_u, D]` on an `h×w` grid.
    pub universal: Var,
    pub universal_grid: (usize, usize),
    pub specific: Flattened,
}

impl AdapterStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        with_cda: bool,
        with_case: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (inject, extract) = if with_cda {
            (
                Some(Cda::new(store, &format!("{name}.cda_in"), d, heads, 3, points, rng)?),
                Some(Cda::new(store, &format!("{name}.cda_out"), d, heads, 1, points, rng)?),
            )
        } else {
            (None, None)
        };
        let case = if with_case { Some(Case::new(store, &format!("{name}.case"), d, rng)?) } else { None };
        Ok(Self { inject, extract, case })
    }

    /// Inject, run the frozen layers in `block`, extract, enhance.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        backbone: &Backbone,
        block: std::ops::Range<usize>,
        state: Streams,
        switches: StageSwitches,
        probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Streams> {
        let Streams { mut universal, universal_grid, mut specific } = state;
        let n_u = g.shape(universal)[0];
        let n_s = g.shape(specific.tokens)[0];
        specific.layout.check(n_s)?;
        let u_level = [ValueLevel { offset: 0, h: universal_grid.0, w: universal_grid.1 }];

        if let (Some(cda), true) = (&self.inject, switches.cda) {
            let refs = reference_points(&[universal_grid]);
            universal = cda.forward(g, store, universal, &refs, specific.tokens, &layout_levels(&specific.layout))?.out;
        }
        universal = backbone.run_layers(g, store, block, universal, n_u, probe)?;
        if let (Some(cda), true) = (&self.extract, switches.cda) {
            let refs = reference_points(&specific.layout.grids);
            specific.tokens = cda.forward(g, store, specific.tokens, &refs, universal, &u_level)?.out;
        }
        if let (Some(case), true) = (&self.case, switches.case) {
            specific.tokens = case.forward(g, store, &specific)?.out;
        }
        Ok(Streams { universal, universal_grid, specific })
    }
}
