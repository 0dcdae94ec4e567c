//! Lightweight top-down mask decoder.
//!
//! Lateral 1×1 convolutions bring every input to a common width. The path
//! runs 1/32 → 1/16 → 1/8 → 1/4 with bilinear upsampling, 3×3 smoothing and
//! GELU at each step, then a 1×1 head and a final upsample to full size. The
//! frozen tokens join at 1/16. Without the trainable branch only the frozen
//! tokens feed the path.

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{shape_err, Result};
use crate::extractor::{unflatten, Flattened};
use crate::nn::{tokens_to_map, Conv, Init};
use crate::param::ParamStore;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub width: usize,
    /// Laterals of the 1/8, 1/16 and 1/32 specific maps, absent without the extractor.
    pub lateral_specific: Option<[Conv; 3]>,
    /// Lateral of `f_s¹` at 1/4, absent without the extractor.
    pub lateral_fine: Option<Conv>,
    pub lateral_universal: Conv,
    /// 3×3 smoothing at 1/16, 1/8 and 1/4.
    pub smooth: [Conv; 3],
    pub head: Conv,
}

/// Inputs to [`Decoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs {
    pub specific: Option<Flattened>,
    pub fine: Option<Var>,
    /// `[N_u, D]` tokens on `universal_grid`.
    pub universal: Var,
    pub universal_grid: (usize, usize),
    pub out_size: (usize, usize),
}

impl Decoder {
    /// `fine_width` is the channel count of `f_s¹`; `None` builds the frozen-only variant.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        embed_dim: usize,
        fine_width: Option<usize>,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let one = |store: &mut ParamStore, name: &str, c_in: usize, rng: &mut R| {
            Conv::new(
                store,
                &format!("{prefix}.{name}"),
                c_in,
                width,
                (1, 1),
                ConvSpec::valid(1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )
        };
        let (lateral_specific, lateral_fine) = match fine_width {
            Some(c) => (
                Some([
                    one(store, "lat8", embed_dim, rng)?,
                    one(store, "lat16", embed_dim, rng)?,
                    one(store, "lat32", embed_dim, rng)?,
                ]),
                Some(one(store, "lat4", c, rng)?),
            ),
            None => (None, None),
        };
        let lateral_universal = one(store, "lat_u", embed_dim, rng)?;
        let sm = |store: &mut ParamStore, name: &str, rng: &mut R| {
            Conv::new(
                store,
                &format!("{prefix}.{name}"),
                width,
                width,
                (3, 3),
                ConvSpec::same(3, 3, 1, 1, 1),
                true,
                Init::Fan(1.0),
                true,
                rng,
            )
        };
        let smooth = [sm(store, "smooth16", rng)?, sm(store, "smooth8", rng)?, sm(store, "smooth4", rng)?];
        let head = Conv::new(
            store,
            &format!("{prefix}.head"),
            width,
            1,
            (1, 1),
            ConvSpec::valid(1),
            true,
            Init::Fan(1.0),
            true,
            rng,
        )?;
        Ok(Self { width, lateral_specific, lateral_fine, lateral_universal, smooth, head })
    }

    fn merge(g: &mut Graph, lateral: Option<Var>, coarse: Var, h: usize, w: usize) -> Result<Var> {
        let up = g.resize(coarse, h, w)?;
        match lateral {
            Some(l) => g.add(l, up),
            None => Ok(up),
        }
    }

    /// Logits `[1, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &DecoderInputs) -> Result<Var> {
        let (uh, uw) = inputs.universal_grid;
        let u_map = tokens_to_map(g, inputs.universal, uh, uw)?;
        let u_lat = self.lateral_universal.forward(g, store, u_map)?;

        let (maps, fine) = match (&self.lateral_specific, inputs.specific, &self.lateral_fine, inputs.fine) {
            (Some(lats), Some(flat), Some(lf), Some(fine)) => {
                let maps = unflatten(g, &flat)?;
                let mut out = [maps[0]; 3];
                for i in 0..3 {
                    out[i] = lats[i].forward(g, store, maps[i])?;
                }
                if g.shape(out[1])[1..] != [uh, uw] {
                    return shape_err(format!(
                        "decoder: 1/16 specific grid {:?} vs frozen grid {:?}",
                        &g.shape(out[1])[1..],
                        (uh, uw)
                    ));
                }
                (Some(out), Some(lf.forward(g, store, fine)?))
            }
            (None, _, None, _) => (None, None),
            _ => return shape_err("decoder: specific inputs do not match the decoder variant"),
        };

        let p16 = match maps {
            Some(m) => {
                let top = Self::merge(g, Some(m[1]), m[2], uh, uw)?;
                g.add(top, u_lat)?
            }
            None => u_lat,
        };
        let p16 = self.smooth[0].forward(g, store, p16)?;
        let p16 = g.gelu(p16);

        let p8 = Self::merge(g, maps.map(|m| m[0]), p16, 2 * uh, 2 * uw)?;
        let p8 = self.smooth[1].forward(g, store, p8)?;
        let p8 = g.gelu(p8);

        let p4 = Self::merge(g, fine, p8, 4 * uh, 4 * uw)?;
        let p4 = self.smooth[2].forward(g, store, p4)?;
        let p4 = g.gelu(p4);

        let logits = self.head.forward(g, store, p4)?;
        g.resize(logits, inputs.out_size.0, inputs.out_size.1)
    }
}
