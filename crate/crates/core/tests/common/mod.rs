//! Reference implementations used as test oracles. Each one is written
//! directly from the definition, sharing no code with the library.
#![allow(dead_code)]

use lpmoe_core::extractor::effective_wavelet_level;
use lpmoe_core::model::ModelConfig;
use lpmoe_core::Tensor;
use rand::Rng;

/// Random continuous prediction and binary mask of shape `[h, w]`. About one
/// prediction in eight sits exactly on the threshold.
pub fn random_pair<R: Rng>(h: usize, w: usize, rng: &mut R) -> (Tensor, Tensor) {
    let pred = Tensor::from_fn(&[h, w], |_| if rng.random_bool(0.125) { 0.5 } else { rng.random::<f64>() });
    let p_fg = rng.random::<f64>();
    let gt = Tensor::from_fn(&[h, w], |_| rng.random_bool(p_fg) as u8 as f64);
    (pred, gt)
}

/// Pixel counts (tp, fp, fn) with the prediction binarized at `>= 0.5`.
pub fn counts(pred: &Tensor, gt: &Tensor) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for k in 0..pred.numel() {
        let p = pred.data()[k] >= 0.5;
        let g = gt.data()[k] == 1.0;
        if p && g {
            tp += 1;
        } else if p {
            fp += 1;
        } else if g {
            fneg += 1;
        }
    }
    (tp, fp, fneg)
}

/// Two empty masks agree perfectly.
pub fn oracle_iou(pred: &Tensor, gt: &Tensor) -> f64 {
    let (tp, fp, fneg) = counts(pred, gt);
    if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fneg) as f64
    }
}

pub fn oracle_dice(pred: &Tensor, gt: &Tensor) -> f64 {
    let (tp, fp, fneg) = counts(pred, gt);
    if tp + fp + fneg == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
    }
}

pub fn oracle_mae(pred: &Tensor, gt: &Tensor) -> f64 {
    let mut s = 0.0;
    for k in 0..pred.numel() {
        s += (pred.data()[k] - gt.data()[k]).abs();
    }
    s / pred.numel() as f64
}

/// Weighted F-measure transcribed line by line from its definition:
///
/// ```text
/// E      = |G − D|
/// Dst, I = distance transform of G (nearest foreground, first in raster order on ties)
/// Et     = E;  Et(¬G) = Et(I(¬G))
/// EA     = Et filtered by a 7×7 Gaussian, σ = 5, zero outside the image
/// MIN    = E;  MIN(G ∧ EA < E) = EA(G ∧ EA < E)
/// B      = 1;  B(¬G) = 2 − exp(ln(0.5)/5 · Dst(¬G))
/// Ew     = MIN · B
/// TPw    = ΣG − ΣEw(G);  FPw = ΣEw(¬G)
/// R      = 1 − mean(Ew(G));  P = TPw / (eps + TPw + FPw)
/// Q      = 2·R·P / (eps + R + P)
/// ```
///
/// Returns `None` for an empty mask.
pub fn oracle_wfm(pred: &Tensor, gt: &Tensor, h: usize, w: usize) -> Option<f64> {
    let eps = f64::EPSILON;
    let at = |i: usize, j: usize| i * w + j;
    let g: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
    if !g.contains(&true) {
        return None;
    }
    let e: Vec<f64> = (0..h * w).map(|k| (g[k] as u8 as f64 - pred.data()[k]).abs()).collect();

    // Brute-force distance transform.
    let mut dst = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best = f64::INFINITY;
            for a in 0..h {
                for b in 0..w {
                    if g[at(a, b)] {
                        let d = (((a as f64) - i as f64).powi(2) + ((b as f64) - j as f64).powi(2)).sqrt();
                        if d < best {
                            best = d;
                            idx[at(i, j)] = at(a, b);
                        }
                    }
                }
            }
            dst[at(i, j)] = best;
        }
    }

    let mut et = e.clone();
    for k in 0..h * w {
        if !g[k] {
            et[k] = e[idx[k]];
        }
    }

    let mut kernel = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (y, row) in kernel.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 3.0, x as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 25.0)).exp();
            total += *v;
        }
    }
    let mut ea = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (y, row) in kernel.iter().enumerate() {
                for (x, kv) in row.iter().enumerate() {
                    let (ii, jj) = (i as isize + y as isize - 3, j as isize + x as isize - 3);
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += kv / total * et[at(ii as usize, jj as usize)];
                    }
                }
            }
            ea[at(i, j)] = acc;
        }
    }

    let mut min_e_ea = e.clone();
    for k in 0..h * w {
        if g[k] && ea[k] < e[k] {
            min_e_ea[k] = ea[k];
        }
    }
    let mut b = vec![1.0; h * w];
    for k in 0..h * w {
        if !g[k] {
            b[k] = 2.0 - ((0.5f64).ln() / 5.0 * dst[k]).exp();
        }
    }
    let ew: Vec<f64> = (0..h * w).map(|k| min_e_ea[k] * b[k]).collect();

    let n_g = g.iter().filter(|&&v| v).count() as f64;
    let ew_g: f64 = (0..h * w).filter(|&k| g[k]).map(|k| ew[k]).sum();
    let ew_bg: f64 = (0..h * w).filter(|&k| !g[k]).map(|k| ew[k]).sum();
    let tpw = n_g - ew_g;
    let fpw = ew_bg;
    let r = 1.0 - ew_g / n_g;
    let p = tpw / (eps + tpw + fpw);
    Some(2.0 * r * p / (eps + r + p))
}

/// Mean binary cross-entropy of `sigmoid(logits)` written with logarithms of
/// probabilities.
pub fn oracle_bce(logits: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in logits.iter().zip(gt) {
        let p = 1.0 / (1.0 + (-x).exp());
        s += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    s / logits.len() as f64
}

/// Soft Dice loss with smoothing 1.
pub fn oracle_dice_loss(logits: &[f64], gt: &[f64]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = gt.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Trainable count from the documented closed forms.
pub fn hand_trainable(cfg: &ModelConfig) -> usize {
    let (s, c, d, hh, k, w) =
        (cfg.image_size, cfg.extractor_width, cfg.embed_dim, cfg.adapter_heads, cfg.adapter_points, cfg.decoder_width);
    let a = cfg.ablation;
    let extractor = {
        let stem = 27 * c / 2 + c / 2 + 9 * (c / 2) * c + c;
        let stages: usize = (0..4)
            .map(|i| {
                let side = s >> (i + 2);
                let lv: usize = [1, 1, 2].iter().map(|&l| effective_wavelet_level(l, side, side)).sum();
                4 * (c * c + c)
                    + 83 * c
                    + 3 * c * c
                    + 57 * c
                    + (27 * lv + 27) * c
                    + 4 * (4 * c * c + c)
                    + 4 * c
                    + 4
                    + c * c
                    + c
            })
            .sum();
        stem + stages + 3 * (9 * c + c * c + c) + 3 * (c * d + d)
    };
    let cda = |l: usize| {
        let p = hh * l * k;
        2 * d * d + 7 * d + 3 * p * (d + 1) + (l * k) * (l * k) + l * k
    };
    let h = (d / 4).max(1);
    let case = d * d + 16 * d + 4 * h * d + 2 * h + 2;
    let stage = if a.no_cda { 0 } else { cda(3) + cda(1) } + if a.no_case { 0 } else { case };
    let common = (d * w + w) + 3 * (9 * w * w + w) + w + 1;
    if a.no_dmlp {
        return common;
    }
    let decoder = common + 3 * (d * w + w) + (c * w + w);
    let stages = if a.no_cda && a.no_case { 0 } else { cfg.stages * stage };
    extractor + stages + decoder
}
