//! Full segmentation model: trainable extractor, frozen backbone, interaction
//! stages and decoder.
//!
//! # Parameter count
//!
//! Embedding width `D`, adapter heads `H`, points `K`, decoder width `W`,
//! extractor width `C`. The extractor term is documented in
//! [`crate::extractor`].
//!
//! ```text
//! cda, L levels    2·D² + 7·D + 3·P·(D + 1) + (L·K)² + L·K,   P = H·L·K
//! case             D² + 16·D + 4·h·D + 2·h + 2,               h = max(D/4, 1)
//! stage            cda(L=3) + cda(L=1) + case
//! decoder          3·(D·W + W) + (C·W + W) + (D·W + W) + 3·(9·W² + W) + W + 1
//! frozen backbone  768·D + D + layers·(12·D² + 13·D)
//! ```
//!
//! Without the extractor the decoder keeps only the frozen lateral, the
//! smoothing convs and the head. The desk profile (`C = 32`, `D = 64`,
//! `H = K = 4`, `W = 32`, four stages, eight layers) has 149 776 extractor,
//! 4 × 39 186 stage and 37 153 decoder parameters, 343 673 trainable in
//! total, against 449 088 frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{AdapterStage, StageSwitches, Streams};
use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, PATCH};
use crate::decoder::{Decoder, DecoderInputs};
use crate::error::{shape_err, Error, Result};
use crate::extractor::{Extractor, Flattened, Pyramid};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const ALLOWED_STAGES: [usize; 4] = [0, 2, 4, 6];

/// Components removed from the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Ablation {
    /// Frozen backbone and decoder only.
    pub no_dmlp: bool,
    pub no_cda: bool,
    pub no_case: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 3] = ["no-dmlp", "no-cda", "no-case"];

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for n in names {
            match n.as_ref() {
                "no-dmlp" => a.no_dmlp = true,
                "no-cda" => a.no_cda = true,
                "no-case" => a.no_case = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown ablation `{other}` (expected one of {:?})",
                        Self::NAMES
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn union(self, other: Self) -> Self {
        Self {
            no_dmlp: self.no_dmlp || other.no_dmlp,
            no_cda: self.no_cda || other.no_cda,
            no_case: self.no_case || other.no_case,
        }
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = Self::NAMES
            .iter()
            .zip([self.no_dmlp, self.no_cda, self.no_case])
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub extractor_width: usize,
    pub adapter_heads: usize,
    pub adapter_points: usize,
    pub stages: usize,
    pub decoder_width: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            embed_dim: 64,
            layers: 8,
            heads: 4,
            extractor_width: 32,
            adapter_heads: 4,
            adapter_points: 4,
            stages: 4,
            decoder_width: 32,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |keys: &str, msg: String| Err(Error::ConfigInvariant { keys: keys.into(), msg });
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad("image_size", format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if !ALLOWED_STAGES.contains(&self.stages) {
            return bad("stages", format!("stages {} must be one of {ALLOWED_STAGES:?}", self.stages));
        }
        if self.layers == 0 || (self.stages > 0 && !self.layers.is_multiple_of(self.stages)) {
            return bad(
                "layers, stages",
                format!("layers {} must be divisible by stages {}", self.layers, self.stages),
            );
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return bad("embed_dim", format!("embed_dim {} must be a positive multiple of 4", self.embed_dim));
        }
        for (name, h) in [("heads", self.heads), ("adapter_heads", self.adapter_heads)] {
            if h == 0 || !self.embed_dim.is_multiple_of(h) {
                return bad(
                    &format!("{name}, embed_dim"),
                    format!("{name} {h} must divide embed_dim {}", self.embed_dim),
                );
            }
        }
        if self.extractor_width < 2 || !self.extractor_width.is_multiple_of(2) {
            return bad("extractor_width", format!("extractor_width {} must be even", self.extractor_width));
        }
        if self.adapter_points == 0 || self.decoder_width == 0 {
            return bad("adapter_points, decoder_width", "adapter_points and decoder_width must be positive".into());
        }
        Ok(())
    }

    /// Whether interaction stages exist.
    pub fn has_adapters(&self) -> bool {
        !self.ablation.no_dmlp && self.stages > 0 && !(self.ablation.no_cda && self.ablation.no_case)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub extractor: Option<Extractor>,
    pub stages: Vec<AdapterStage>,
    pub decoder: Decoder,
}

/// Everything [`Model::forward`] exposes.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `[1, H, W]`.
    pub logits: Var,
    /// Final frozen-stream tokens `f_u⁵`.
    pub universal: Var,
    pub specific: Option<Flattened>,
    pub pyramid: Option<Pyramid>,
}

impl Model {
    /// Builds the model and its parameters. The backbone draws from its own
    /// random stream so its weights depend on `seed` only.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut bb_rng = ChaCha8Rng::seed_from_u64(seed);
        bb_rng.set_stream(1);
        let backbone = Backbone::new(
            &mut store,
            "backbone",
            BackboneConfig { embed_dim: config.embed_dim, layers: config.layers, heads: config.heads },
            &mut bb_rng,
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = config.ablation;
        let extractor = if a.no_dmlp {
            None
        } else {
            Some(Extractor::new(
                &mut store,
                "dmlp",
                config.image_size,
                config.extractor_width,
                config.embed_dim,
                &mut rng,
            )?)
        };
        let mut stages = Vec::new();
        if config.has_adapters() {
            for i in 1..=config.stages {
                stages.push(AdapterStage::new(
                    &mut store,
                    &format!("adapter.{i}"),
                    config.embed_dim,
                    config.adapter_heads,
                    config.adapter_points,
                    !a.no_cda,
                    !a.no_case,
                    &mut rng,
                )?);
            }
        }
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            config.embed_dim,
            extractor.as_ref().map(|e| e.width),
            config.decoder_width,
            &mut rng,
        )?;
        Ok((Self { config, backbone, extractor, stages, decoder }, store))
    }

    /// Predicts logits for `image[3, H, W]`.
    ///
    /// `disable` switches off adapter parts at run time; removing the
    /// extractor this way is not possible because the decoder depends on it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        disable: Ablation,
        probe: Option<&mut Vec<Tensor>>,
    ) -> Result<ForwardOutputs> {
        if disable.no_dmlp && self.extractor.is_some() {
            return Err(Error::InvalidArgument(
                "no-dmlp cannot be applied to a model trained with the extractor".into(),
            ));
        }
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) || s[1] == 0 || s[2] == 0 {
            return shape_err(format!("model: image {s:?} must be [3, H, W] with H, W multiples of 32"));
        }
        let grid = (s[1] / PATCH, s[2] / PATCH);
        let mut universal = self.backbone.patch_embed(g, store, image)?;
        let n_u = grid.0 * grid.1;

        let (pyramid, mut specific) = match &self.extractor {
            Some(e) => {
                let p = e.forward(g, store, image)?;
                let f = e.flatten(g, store, &p)?;
                (Some(p), Some(f))
            }
            None => (None, None),
        };

        let switches = StageSwitches { cda: !disable.no_cda, case: !disable.no_case };
        match (&specific, self.stages.is_empty()) {
            (Some(flat), false) => {
                let ranges = self.backbone.block_ranges(self.stages.len())?;
                let mut state = Streams { universal, universal_grid: grid, specific: *flat };
                let mut probe = probe;
                for (stage, range) in self.stages.iter().zip(ranges) {
                    state = stage.run(g, store, &self.backbone, range, state, switches, probe.as_deref_mut())?;
                }
                universal = state.universal;
                specific = Some(state.specific);
            }
            _ => {
                universal = self.backbone.run_layers(g, store, 0..self.backbone.layers.len(), universal, n_u, probe)?;
            }
        }

        let logits = self.decoder.forward(
            g,
            store,
            &DecoderInputs {
                specific,
                fine: pyramid.as_ref().map(|p| p.stages[0].output),
                universal,
                universal_grid: grid,
                out_size: (s[1], s[2]),
            },
        )?;
        Ok(ForwardOutputs { logits, universal, specific, pyramid })
    }
}

/// Parameter accounting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub ratio: f64,
    /// `(trainable, frozen)` per top-level component (adapter stages kept apart).
    pub by_prefix: BTreeMap<String, (usize, usize)>,
}

pub fn count_params(store: &ParamStore) -> ParamReport {
    let trainable = store.count(Some(true));
    let frozen = store.count(Some(false));
    let mut by_prefix: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (_, p) in store.iter() {
        let mut parts = p.name.split('.');
        let head = parts.next().unwrap_or_default();
        let key =
            if head == "adapter" { format!("{head}.{}", parts.next().unwrap_or_default()) } else { head.to_string() };
        let e = by_prefix.entry(key).or_default();
        if p.trainable {
            e.0 += p.value.numel();
        } else {
            e.1 += p.value.numel();
        }
    }
    let total = trainable + frozen;
    ParamReport {
        trainable,
        frozen,
        total,
        ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        by_prefix,
    }
}

impl ParamReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>12}", "component", "trainable", "frozen");
        for (k, (t, f)) in &self.by_prefix {
            let _ = writeln!(s, "{k:<16} {t:>12} {f:>12}");
        }
        let _ = writeln!(s, "{:<16} {:>12} {:>12}", "total", self.trainable, self.frozen);
        let _ = writeln!(s, "parameters: {}", self.total);
        let _ = writeln!(s, "trainable ratio: {:.6}", self.ratio);
        s
    }
}
