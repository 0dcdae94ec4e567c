//! Mask quality measures: IoU, Dice, weighted F-measure and MAE.
//!
//! Predictions are continuous maps in `[0, 1]`; ground truth is binary.
//! IoU and Dice binarize the prediction at [`THRESHOLD`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::imageio::read_image;
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;
/// Side of the Gaussian window in the weighted F-measure.
pub const FW_WINDOW: usize = 7;
pub const FW_SIGMA: f64 = 5.0;
pub const FW_BETA2: f64 = 1.0;
/// Guard added to denominators of the weighted F-measure (double-precision epsilon).
pub const FW_EPS: f64 = f64::EPSILON;

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("metric: prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    Ok(())
}

/// (|P ∩ G|, |P|, |G|) after thresholding the prediction.
fn overlap(pred: &Tensor, gt: &Tensor) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= THRESHOLD, g >= 0.5);
        counts.0 += (p && g) as usize;
        counts.1 += p as usize;
        counts.2 += g as usize;
    }
    counts
}

pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

pub fn dice_coeff(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => shape_err(format!("metric: expected a single-channel map, got {s:?}")),
    }
}

/// Euclidean distance to the nearest foreground pixel and that pixel's flat
/// index. Among equally near pixels the one earliest in row-major order wins.
/// Foreground pixels map to themselves at distance 0. Returns `None` for an
/// empty foreground.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    if !fg.iter().any(|&b| b) {
        return None;
    }
    // Per column, nearest foreground row (upper one on ties).
    let mut col_best: Vec<Option<usize>> = vec![None; h * w];
    for j in 0..w {
        let mut last: Option<usize> = None;
        for i in 0..h {
            if fg[i * w + j] {
                last = Some(i);
            }
            col_best[i * w + j] = last;
        }
        let mut next: Option<usize> = None;
        for i in (0..h).rev() {
            if fg[i * w + j] {
                next = Some(i);
            }
            let up = col_best[i * w + j];
            col_best[i * w + j] = match (up, next) {
                (Some(u), Some(d)) => Some(if d - i < i - u { d } else { u }),
                (u, d) => u.or(d),
            };
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best: Option<(usize, usize, usize)> = None; // (d², row, col)
            for jj in 0..w {
                if let Some(r) = col_best[i * w + jj] {
                    let d2 = (r as isize - i as isize).pow(2) as usize + (jj as isize - j as isize).pow(2) as usize;
                    let cand = (d2, r, jj);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (d2, r, c) = best.expect("non-empty foreground");
            dist[i * w + j] = (d2 as f64).sqrt();
            idx[i * w + j] = r * w + c;
        }
    }
    Some((dist, idx))
}

/// Normalized `FW_WINDOW × FW_WINDOW` Gaussian with deviation `FW_SIGMA`.
pub fn gaussian_window() -> Vec<f64> {
    let r = (FW_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * FW_SIGMA * FW_SIGMA)).exp()))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure with `β² = 1`. Errors spread from each background pixel's
/// nearest foreground pixel, are smoothed by a Gaussian (zero outside the
/// image), and background errors are scaled up with distance from the object.
///
/// Returns `None` when the ground truth is empty.
pub fn weighted_fmeasure(pred: &Tensor, gt: &Tensor) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    let (h, w) = plane(gt)?;
    let fg: Vec<bool> = gt.data().iter().map(|&g| g >= 0.5).collect();
    let Some((dist, nearest)) = nearest_foreground(&fg, h, w) else {
        return Ok(None);
    };
    let g: Vec<f64> = fg.iter().map(|&b| b as u8 as f64).collect();
    let err: Vec<f64> = pred.data().iter().zip(&g).map(|(p, g)| (p - g).abs()).collect();
    let spread: Vec<f64> = (0..h * w).map(|k| if fg[k] { err[k] } else { err[nearest[k]] }).collect();

    let kernel = gaussian_window();
    let r = (FW_WINDOW / 2) as isize;
    let mut smoothed = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (i + dy, j + dx);
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        acc += kernel[((dy + r) * FW_WINDOW as isize + dx + r) as usize]
                            * spread[(y * w as isize + x) as usize];
                    }
                }
            }
            smoothed[(i * w as isize + j) as usize] = acc;
        }
    }

    let mut tp_err = 0.0;
    let mut fp = 0.0;
    let n_fg = g.iter().sum::<f64>();
    for k in 0..h * w {
        if fg[k] {
            let e = if smoothed[k] < err[k] { smoothed[k] } else { err[k] };
            tp_err += e;
        } else {
            let importance = 2.0 - (0.5f64.ln() / 5.0 * dist[k]).exp();
            fp += err[k] * importance;
        }
    }
    let tp = n_fg - tp_err;
    let recall = 1.0 - tp_err / n_fg;
    let precision = tp / (FW_EPS + tp + fp);
    Ok(Some((1.0 + FW_BETA2) * recall * precision / (FW_EPS + recall + FW_BETA2 * precision)))
}

/// Metrics of one prediction/ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub iou: f64,
    pub dice: f64,
    pub f_w: f64,
    pub mae: f64,
    /// Ground truth had no foreground; `f_w` is reported as 0.
    pub empty_gt: bool,
}

pub fn image_metrics(name: &str, pred: &Tensor, gt: &Tensor) -> Result<ImageMetrics> {
    let fw = weighted_fmeasure(pred, gt)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        iou: iou(pred, gt)?,
        dice: dice_coeff(pred, gt)?,
        f_w: fw.unwrap_or(0.0),
        mae: mae(pred, gt)?,
        empty_gt: fw.is_none(),
    })
}

/// Unweighted means over images plus the per-image rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub n_images: usize,
    pub iou: f64,
    pub dice: f64,
    pub f_w: f64,
    pub mae: f64,
    pub images: Vec<ImageMetrics>,
    /// Stems present in only one of the two directories.
    pub unmatched: Vec<String>,
}

impl MetricReport {
    /// Aggregates rows in the given order.
    pub fn from_images(images: Vec<ImageMetrics>, unmatched: Vec<String>) -> Self {
        let n = images.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            n_images: n,
            iou: mean(|m| m.iou),
            dice: mean(|m| m.dice),
            f_w: mean(|m| m.f_w),
            mae: mean(|m| m.mae),
            images,
            unmatched,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8}", "image", "iou", "dice", "f_w", "mae");
        for m in &self.images {
            let flag = if m.empty_gt { " (empty gt)" } else { "" };
            let _ = writeln!(s, "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}{flag}", m.name, m.iou, m.dice, m.f_w, m.mae);
        }
        let _ = writeln!(
            s,
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            format!("mean ({} images)", self.n_images),
            self.iou,
            self.dice,
            self.f_w,
            self.mae
        );
        for u in &self.unmatched {
            let _ = writeln!(s, "unmatched: {u}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "pgm" | "ppm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the mask with the same stem
/// in `gt_dir`, in lexicographic stem order.
///
/// Stems found in only one directory are listed in the report's `unmatched`
/// field. If no stem matches at all the call fails with the full list.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = stems(pred_dir)?;
    let gts = stems(gt_dir)?;
    let mut unmatched: Vec<String> =
        preds.keys().filter(|k| !gts.contains_key(*k)).map(|k| format!("{k} (prediction only)")).collect();
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("{k} (ground truth only)")));
    unmatched.sort();
    let mut rows = Vec::new();
    for (stem, pp) in &preds {
        let Some(gp) = gts.get(stem) else { continue };
        let pred = read_image(pp)?.to_gray_tensor();
        let gt = read_image(gp)?.to_mask_tensor();
        rows.push(image_metrics(stem, &pred, &gt)?);
    }
    if rows.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    Ok(MetricReport::from_images(rows, unmatched))
}
