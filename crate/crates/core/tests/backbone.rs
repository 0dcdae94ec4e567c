use lpmoe_core::autodiff::{grad_check, Graph, GRADCHECK_STEP};
use lpmoe_core::backbone::{sinusoidal_positions, Backbone, BackboneConfig, PATCH};
use lpmoe_core::optim::{AdamW, AdamWConfig};
use lpmoe_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(d: usize, layers: usize, heads: usize, seed: u64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(&mut store, "backbone", BackboneConfig { embed_dim: d, layers, heads }, &mut rng).unwrap();
    (bb, store)
}

fn bytes(store: &ParamStore) -> Vec<Vec<u8>> {
    store.iter().map(|(_, p)| p.value.to_le_bytes()).collect()
}

#[test]
fn patch_token_counts() {
    let (bb, store) = build(64, 2, 4, 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 64, 64]));
    let t = bb.patch_embed(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(t), &[16, 64]);

    let (bb, store) = build(8, 1, 2, 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 512, 512]));
    let t = bb.patch_embed(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(t), &[1024, 8]);

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 40, 32]));
    assert!(bb.patch_embed(&mut g, &store, x).is_err());
}

#[test]
fn zero_image_gives_positional_table() {
    let (bb, mut store) = build(16, 1, 2, 2);
    let b = bb.patch.b.unwrap();
    store.get_mut(b).value = Tensor::zeros(&[16]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 48, 32]));
    let t = bb.patch_embed(&mut g, &store, x).unwrap();
    assert!(g.value(t).bit_eq(&sinusoidal_positions(48 / PATCH, 32 / PATCH, 16)));
}

#[test]
fn positional_table_values() {
    let (h, w, d) = (3, 4, 8);
    let pe = sinusoidal_positions(h, w, d);
    let q = d / 4;
    for i in 0..h {
        for j in 0..w {
            for k in 0..q {
                let f = 10000f64.powf(-(k as f64) / q as f64);
                let row = i * w + j;
                assert!((pe.at(&[row, k]) - (i as f64 * f).sin()).abs() < 1e-15);
                assert!((pe.at(&[row, q + k]) - (i as f64 * f).cos()).abs() < 1e-15);
                assert!((pe.at(&[row, 2 * q + k]) - (j as f64 * f).sin()).abs() < 1e-15);
                assert!((pe.at(&[row, 3 * q + k]) - (j as f64 * f).cos()).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn layers_keep_tokens_and_attention_is_stochastic() {
    let (bb, store) = build(16, 3, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[6, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut probe = Vec::new();
    let y = bb.run_layers(&mut g, &store, 0..3, xv, 6, Some(&mut probe)).unwrap();
    assert_eq!(g.shape(y), &[6, 16]);
    assert_eq!(probe.len(), 3 * 4);
    for a in &probe {
        assert_eq!(a.shape(), &[6, 6]);
        for r in 0..6 {
            let s: f64 = (0..6).map(|c| a.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    assert!(bb.run_layers(&mut g, &store, 0..3, xv, 5, None).is_err());
}

#[test]
fn gradient_crosses_frozen_layers() {
    let (bb, store) = build(8, 2, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let f = |g: &mut Graph, v: &[lpmoe_core::autodiff::Var]| {
        let y = bb.run_layers(g, &store, 0..2, v[0], 4, None)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    };
    let err = grad_check(std::slice::from_ref(&x), GRADCHECK_STEP, f).unwrap();
    assert!(err < 1e-4, "{err}");

    let mut g = Graph::new();
    let xv = g.input(x);
    let out = f(&mut g, &[xv]).unwrap();
    let grads = g.backward(out).unwrap();
    let dx = grads.wrt(xv).unwrap();
    assert!(dx.data().iter().any(|&v| v.abs() > 1e-6));
}

#[test]
fn optimizer_leaves_frozen_backbone_untouched() {
    let (bb, mut store) = build(8, 2, 2, 7);
    bb.freeze_all(&mut store, "backbone");
    assert_eq!(store.count(Some(true)), 0);
    let before = bytes(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.accumulate_grad(id, &Tensor::randn(&shape, 1.0, &mut rng));
    }
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..3 {
        opt.step(&mut store).unwrap();
    }
    assert_eq!(bytes(&store), before);
}

#[test]
fn seeded_construction_is_reproducible() {
    let (_, a) = build(16, 2, 2, 9);
    let (_, b) = build(16, 2, 2, 9);
    let (_, c) = build(16, 2, 2, 10);
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn frozen_count_formula() {
    for (d, layers) in [(64, 8), (16, 2), (32, 3)] {
        let (_, store) = build(d, layers, 4, 0);
        assert_eq!(store.count(Some(false)), 768 * d + d + layers * (12 * d * d + 13 * d));
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (d, heads) in [(10, 2), (16, 3), (16, 0), (0, 1)] {
        let cfg = BackboneConfig { embed_dim: d, layers: 1, heads };
        assert!(Backbone::new(&mut store, "b", cfg, &mut rng).is_err(), "D {d} heads {heads}");
    }
}
