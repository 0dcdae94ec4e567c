//! Finite-difference checks of every differentiable operation and of the
//! composed model, shared by the `gradcheck` subcommand and the test suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    asymmetric_conv, grad_check, grad_check_params, wavelet_conv, ConvSpec, Graph, Var, GRADCHECK_STEP,
};
use crate::error::Result;
use crate::loss::segmentation_loss;
use crate::model::{Ablation, Model, ModelConfig};
use crate::param::ParamId;
use crate::tensor::Tensor;

/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct adjoint.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("conv2d", vec![vec![2, 32, 32], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same(3, 3, 1, 1, 1))?;
            probe(g, y, 1)
        }),
        ("conv2d strided", vec![vec![2, 32, 32], vec![2, 2, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3, 3, 2, 1, 1))?;
            probe(g, y, 2)
        }),
        ("conv2d dilated depthwise", vec![vec![2, 32, 32], vec![2, 1, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3, 3, 1, 3, 2))?;
            probe(g, y, 3)
        }),
        ("asymmetric conv", vec![vec![2, 32, 32], vec![2, 1, 5, 1], vec![2, 1, 1, 5]], |g, v| {
            let y = asymmetric_conv(g, v[0], v[1], v[2], 2)?;
            probe(g, y, 4)
        }),
        ("wavelet conv", vec![vec![1, 32, 32], vec![3, 1, 3, 3], vec![3, 1, 3, 3], vec![1, 1, 3, 3]], |g, v| {
            let y = wavelet_conv(g, v[0], 2, &[v[1], v[2]], v[3])?;
            probe(g, y, 5)
        }),
        ("haar transform", vec![vec![1, 32, 32]], |g, v| {
            let b = g.haar_dwt(v[0])?;
            let sq = g.mul(b, b)?;
            let r = g.haar_idwt(sq)?;
            probe(g, r, 6)
        }),
        ("bilinear resize", vec![vec![1, 32, 32]], |g, v| {
            let d = g.resize(v[0], 8, 12)?;
            let u = g.resize(d, 32, 32)?;
            probe(g, u, 7)
        }),
        ("bilinear sampling", vec![vec![2, 32, 32], vec![16, 2]], |g, v| {
            let p = g.sigmoid(v[1]);
            let y = g.bilinear_sample(v[0], p)?;
            probe(g, y, 8)
        }),
        ("softmax", vec![vec![4, 8]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y, 9)
        }),
        ("layernorm", vec![vec![6, 8], vec![8], vec![8]], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2])?;
            probe(g, y, 10)
        }),
        ("pointwise nonlinearities", vec![vec![5, 7]], |g, v| {
            let a = g.gelu(v[0]);
            let b = g.sigmoid(v[0]);
            let c = g.softplus(v[0]);
            let ab = g.mul(a, b)?;
            let y = g.add(ab, c)?;
            probe(g, y, 11)
        }),
        ("arithmetic", vec![vec![3, 4], vec![3, 4], vec![4]], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let den = g.mul(v[1], v[1])?;
            let den = g.affine(den, 1.0, 1.0);
            let q = g.div(s, den)?;
            let m = g.mul(q, d)?;
            let r = g.add_row(m, v[2])?;
            let r = g.mul_row(r, v[2])?;
            let r = g.scale(r, 0.5);
            probe(g, r, 12)
        }),
        ("matrix products", vec![vec![3, 4], vec![5, 4], vec![5]], |g, v| {
            let l = g.linear(v[0], v[1], Some(v[2]))?;
            let t = g.transpose(l)?;
            let nt = g.matmul_nt(v[0], v[0])?;
            let y = g.matmul(nt, l)?;
            let z = g.matmul(t, y)?;
            probe(g, z, 13)
        }),
        ("reductions", vec![vec![3, 4, 5]], |g, v| {
            let m = g.mean_axis(v[0], 1)?;
            let sq = g.mul(m, m)?;
            let a = g.mean(sq);
            let b = g.sum(v[0]);
            let bb = g.mul(b, b)?;
            g.add(a, bb)
        }),
        ("structural", vec![vec![4, 3, 2], vec![4], vec![3]], |g, v| {
            let a = g.slice(v[0], 1, 1, 2)?;
            let r = g.reshape(v[0], &[4, 6])?;
            let r = g.slice(r, 1, 0, 2)?;
            let r = g.reshape(r, &[4, 2, 1])?;
            let c = g.concat(&[a, r], 2)?;
            let c = g.mul_channel(c, v[1])?;
            let c = g.gather_rows(c, &[3, 0, 3])?;
            let c = g.mul_scalar_at(c, v[2], 1)?;
            probe(g, c, 14)
        }),
        ("cosine and head sum", vec![vec![3, 4], vec![3, 6, 4], vec![3, 6]], |g, v| {
            let c = g.cosine(v[0], v[1])?;
            let w = g.mul(c, v[2])?;
            let o = g.head_sum(w, v[1], 2)?;
            probe(g, o, 15)
        }),
        ("segmentation loss", vec![vec![1, 32, 32]], |g, v| {
            let gt = Tensor::from_fn(&[1, 32, 32], |k| ((k / 32) % 7 < 3) as u8 as f64);
            Ok(segmentation_loss(g, v[0], &gt, 5.0, 2.0)?.total)
        }),
    ]
}

/// The composed model used by the model-level check: a 32×32 input and
/// narrow widths so the check runs in seconds.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        extractor_width: 4,
        adapter_heads: 2,
        adapter_points: 2,
        stages: 2,
        decoder_width: 4,
        ablation: Ablation::default(),
    }
}

/// Checks `coords_per_param` coordinates of every trainable parameter of the
/// tiny model. All trainable values are first jittered so that zero-initialized
/// gates do not hide the paths behind them.
pub fn check_model(seed: u64, coords_per_param: usize) -> Result<f64> {
    let (model, mut store) = Model::build(tiny_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            *v += 0.1 * rng.random::<f64>() - 0.05;
        }
        let n = p.value.numel();
        for _ in 0..coords_per_param.min(n) {
            coords.push((id, rng.random_range(0..n)));
        }
    }
    let image = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let gt = Tensor::from_fn(&[1, 32, 32], |k| {
        let (i, j) = ((k / 32) as f64 - 15.5, (k % 32) as f64 - 15.5);
        (i * i + j * j < 100.0) as u8 as f64
    });
    grad_check_params(&mut store, &coords, GRADCHECK_STEP, |g, store| {
        let x = g.constant(image.clone());
        let out = model.forward(g, store, x, Ablation::default(), None)?;
        Ok(segmentation_loss(g, out.logits, &gt, 5.0, 2.0)?.total)
    })
}

/// Runs every case with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let t0 = Instant::now();
        let err = grad_check(&inputs, GRADCHECK_STEP, f)?;
        out.push(CaseResult { name, max_rel_err: err, seconds: t0.elapsed().as_secs_f64() });
    }
    let t0 = Instant::now();
    let err = check_model(seed, 3)?;
    out.push(CaseResult { name: "composed model (32x32)", max_rel_err: err, seconds: t0.elapsed().as_secs_f64() });
    Ok(out)
}
