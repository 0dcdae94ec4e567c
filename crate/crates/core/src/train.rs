//! Training loop, evaluation and single-image inference.
//!
//! Training is single-threaded. Each iteration draws `batch_size` indices with
//! replacement from a dedicated random stream, builds one tape per image, and
//! adds each image's gradients scaled by `1/batch_size` in draw order before a
//! single AdamW step. The loss, gradients and optimizer state therefore depend
//! only on the seed, the config and the dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Graph};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imageio::{quantize, Image};
use crate::loss::{segmentation_loss, LossBreakdown};
use crate::metrics::{image_metrics, MetricReport};
use crate::model::{count_params, Ablation, Model};
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Random stream used for batch sampling; the model uses streams 0 and 1.
const SAMPLING_STREAM: u64 = 2;

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LogEntry {
    /// Shortest round-trip formatting, so equal lines mean bitwise-equal losses.
    pub fn to_line(&self) -> String {
        format!("iter {} bce {:?} dice {:?} total {:?}", self.iteration, self.bce, self.dice, self.total)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::build(config.model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Self { config, model, store, opt: AdamW::new(config.optim), rng, iteration: 0 })
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self, data: &Dataset) -> Result<LogEntry> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let b = self.config.batch_size;
        let (alpha, beta) = (self.config.alpha, self.config.beta);
        let indices: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..data.len())).collect();
        let iteration = self.iteration + 1;
        self.store.zero_grads();
        let mut sums = [0.0; 3];
        for &i in &indices {
            let sample = &data.samples[i];
            let mut g = Graph::new();
            let image = g.constant(sample.image.clone());
            let out = self.model.forward(&mut g, &self.store, image, Ablation::default(), None)?;
            let loss = segmentation_loss(&mut g, out.logits, &sample.mask, alpha, beta)?;
            let LossBreakdown { bce, dice, total, .. } = loss.breakdown(&g, alpha, beta);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            sums[0] += bce;
            sums[1] += dice;
            sums[2] += total;
            let grads = g.backward(loss.total)?;
            for (id, grad) in grads.param_grads() {
                let mut scaled = grad.clone();
                scaled.scale_assign(1.0 / b as f64);
                self.store.accumulate_grad(id, &scaled);
            }
        }
        // Parameters outside the active path still take a (decay-only) step.
        let missing: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| p.trainable && p.grad.is_none())
            .map(|(id, p)| (id, p.value.shape().to_vec()))
            .collect();
        for (id, shape) in missing {
            self.store.get_mut(id).grad = Some(Tensor::zeros(&shape));
        }
        self.opt.step(&mut self.store)?;
        self.store.zero_grads();
        self.iteration = iteration;
        let n = b as f64;
        Ok(LogEntry { iteration, bce: sums[0] / n, dice: sums[1] / n, total: sums[2] / n })
    }

    /// Runs until `self.iteration == until`, calling `after` after every step.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: u64,
        mut after: impl FnMut(&Self, &LogEntry) -> Result<()>,
    ) -> Result<Vec<LogEntry>> {
        let mut log = Vec::new();
        while self.iteration < until {
            let entry = self.step(data)?;
            after(self, &entry)?;
            log.push(entry);
        }
        Ok(log)
    }

    pub fn backbone_hash(&self) -> String {
        backbone_hash(&self.store)
    }
}

/// SHA-256 over the names, shapes and little-endian payloads of all
/// `backbone.` parameters, in registration order.
pub fn backbone_hash(store: &ParamStore) -> String {
    prefix_hash(store, "backbone.")
}

pub fn prefix_hash(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(p.value.to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Confidence map `[1, H, W]` quantized to 8-bit levels, exactly what a
/// written prediction file holds.
pub fn predict(model: &Model, store: &ParamStore, image: &Tensor, disable: Ablation) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, store, x, disable, None)?;
    Ok(g.value(out.logits).map(|v| quantize(sigmoid(v)) as f64 / 255.0))
}

/// Predictions and metrics for every sample, in dataset order.
pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    disable: Ablation,
) -> Result<(MetricReport, Vec<Tensor>)> {
    let mut rows = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    for s in &data.samples {
        let p = predict(model, store, &s.image, disable)?;
        rows.push(image_metrics(&s.name, &p, &s.mask)?);
        preds.push(p);
    }
    Ok((MetricReport::from_images(rows, Vec::new()), preds))
}

/// Writes `<name>.pgm` prediction maps into `dir`.
pub fn write_predictions(dir: &Path, data: &Dataset, preds: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (s, p) in data.samples.iter().zip(preds) {
        crate::imageio::write_image(&dir.join(format!("{}.pgm", s.name)), &Image::from_gray_tensor(p)?)?;
    }
    Ok(())
}

/// Reflection padding applied before inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

/// Mirrors `image[3, H, W]` at its bottom and right edges up to multiples of 32.
pub fn reflect_pad(image: &Tensor) -> Result<(Tensor, Padding)> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::InvalidArgument(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let up = |n: usize| n.div_ceil(32) * 32;
    let (ph, pw) = (up(h), up(w));
    if ph - h >= h || pw - w >= w {
        return Err(Error::InvalidArgument(format!("image {h}x{w} is too small to reflect-pad to {ph}x{pw}")));
    }
    // Reflection without repeating the edge sample.
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let src = image.data();
    let out = Tensor::from_fn(&[c, ph, pw], |k| {
        let (ch, r) = (k / (ph * pw), k % (ph * pw));
        let (i, j) = (mirror(r / pw, h), mirror(r % pw, w));
        src[(ch * h + i) * w + j]
    });
    Ok((out, Padding { bottom: ph - h, right: pw - w }))
}

/// Result of [`infer_image`].
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[1, H, W]` at the input size.
    pub confidence: Tensor,
    pub padding: Padding,
}

/// Runs the model on an arbitrary-size image, padding by reflection and
/// cropping the confidence map back to the input size.
pub fn infer_image(model: &Model, store: &ParamStore, image: &Tensor, disable: Ablation) -> Result<Inference> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (padded, padding) = reflect_pad(image)?;
    let full = predict(model, store, &padded, disable)?;
    let pw = padded.shape()[2];
    let confidence = Tensor::from_fn(&[1, h, w], |k| full.data()[(k / w) * pw + k % w]);
    Ok(Inference { confidence, padding })
}

/// Header printed at the start of training.
pub fn summary(trainer: &Trainer, data: &Dataset) -> String {
    let r = count_params(&trainer.store);
    format!(
        "ablation {} | stages {} | images {} | trainable {} | frozen {} | ratio {:.6}\n",
        trainer.config.model.ablation.label(),
        trainer.model.stages.len(),
        data.len(),
        r.trainable,
        r.frozen,
        r.ratio
    )
}
