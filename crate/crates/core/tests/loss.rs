mod common;

use common::{oracle_bce, oracle_dice_loss};
use lpmoe_core::autodiff::{grad_check, Graph, GRADCHECK_STEP};
use lpmoe_core::loss::{bce_loss, dice_loss, segmentation_loss, total_loss, DICE_EPS};
use lpmoe_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval(logits: &Tensor, gt: &Tensor) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = segmentation_loss(&mut g, x, gt, 5.0, 2.0).unwrap();
    let b = l.breakdown(&g, 5.0, 2.0);
    (b.bce, b.dice, b.total)
}

#[test]
fn zero_logits_give_ln2() {
    for gt in [Tensor::zeros(&[1, 3, 3]), Tensor::ones(&[1, 3, 3]), Tensor::from_fn(&[1, 3, 3], |k| (k % 2) as f64)] {
        let (bce, _, _) = eval(&Tensor::zeros(&[1, 3, 3]), &gt);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn saturated_logits_drive_loss_to_zero() {
    let gt = Tensor::from_fn(&[1, 4, 4], |k| (k % 3 == 0) as u8 as f64);
    let logits = gt.map(|y| if y == 1.0 { 40.0 } else { -40.0 });
    let (bce, dice, _) = eval(&logits, &gt);
    assert!(bce < 1e-15);
    let bound = DICE_EPS / (2.0 * gt.sum() + DICE_EPS);
    assert!(dice < bound, "{dice} vs bound {bound}");
    assert!(dice.abs() < 1e-12);
}

#[test]
fn empty_masks_have_zero_dice() {
    let gt = Tensor::zeros(&[1, 3, 3]);
    let (_, dice, _) = eval(&Tensor::full(&[1, 3, 3], -60.0), &gt);
    assert!(dice.abs() < 1e-12);
}

#[test]
fn two_by_two_per_pixel_sum() {
    let logits = [0.3, -1.2, 2.5, 0.0];
    let gt = [1.0, 0.0, 1.0, 1.0];
    // Per-pixel −[y ln σ(x) + (1−y) ln(1−σ(x))].
    let by_hand = [
        (1.0 + (-0.3f64).exp()).ln(),
        (1.0 + (-1.2f64).exp()).ln(),
        (1.0 + (-2.5f64).exp()).ln(),
        std::f64::consts::LN_2,
    ];
    let want: f64 = by_hand.iter().sum::<f64>() / 4.0;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 2], logits.to_vec()).unwrap());
    let b = bce_loss(&mut g, x, &Tensor::new(vec![1, 2, 2], gt.to_vec()).unwrap()).unwrap();
    assert!((g.value(b).item() - want).abs() < 1e-14);
    assert!((g.value(b).item() - oracle_bce(&logits, &gt)).abs() < 1e-14);
}

#[test]
fn random_cases_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gt: Vec<f64> = (0..4).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let lt = Tensor::new(vec![1, 2, 2], logits.clone()).unwrap();
        let gt_t = Tensor::new(vec![1, 2, 2], gt.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(lt);
        let d = dice_loss(&mut g, x, &gt_t).unwrap();
        assert!((g.value(d).item() - oracle_dice_loss(&logits, &gt)).abs() < 1e-14);
        let b = bce_loss(&mut g, x, &gt_t).unwrap();
        assert!((g.value(b).item() - oracle_bce(&logits, &gt)).abs() < 1e-13);
    }
}

#[test]
fn weighted_sum_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let logits = Tensor::randn(&[1, 8, 8], 3.0, &mut rng);
        let gt = Tensor::from_fn(&[1, 8, 8], |_| rng.random_bool(0.4) as u8 as f64);
        let (bce, dice, total) = eval(&logits, &gt);
        assert!((total - (5.0 * bce + 2.0 * dice)).abs() <= 4.0 * f64::EPSILON * total.abs().max(1.0));
    }
    assert!((total_loss(0.3, 0.1, 5.0, 2.0).total - 1.7).abs() < 1e-15);
    assert_eq!(total_loss(0.0, 0.0, 5.0, 2.0).total, 0.0);
    let o = total_loss(0.3, 0.1, 1.5, 4.0);
    assert_eq!((o.alpha, o.beta), (1.5, 4.0));
    assert!((o.total - 0.85).abs() < 1e-15);
}

#[test]
fn loss_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[1, 6, 6], 2.0, &mut rng);
    let gt = Tensor::from_fn(&[1, 6, 6], |_| rng.random_bool(0.5) as u8 as f64);
    let err = grad_check(&[x], GRADCHECK_STEP, |g, v| Ok(segmentation_loss(g, v[0], &gt, 5.0, 2.0)?.total)).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn shape_mismatch_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(segmentation_loss(&mut g, x, &Tensor::zeros(&[1, 2, 3]), 5.0, 2.0).is_err());
}
