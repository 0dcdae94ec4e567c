mod common;

use common::{oracle_dice, oracle_iou, oracle_mae, oracle_wfm, random_pair};
use lpmoe_core::imageio::{write_image, Image};
use lpmoe_core::metrics::{dice_coeff, evaluate_dataset, image_metrics, iou, mae, weighted_fmeasure};
use lpmoe_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn counting_oracles_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 0..200 {
        let (p, g) = random_pair(4, 4, &mut rng);
        let (i, d) = (iou(&p, &g).unwrap(), dice_coeff(&p, &g).unwrap());
        assert!((i - oracle_iou(&p, &g)).abs() < 1e-12, "case {n}");
        assert!((d - oracle_dice(&p, &g)).abs() < 1e-12, "case {n}");
        assert!((mae(&p, &g).unwrap() - oracle_mae(&p, &g)).abs() < 1e-12, "case {n}");
        assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12, "case {n}");
    }
}

#[test]
fn weighted_fmeasure_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 20 {
        let (p, g) = random_pair(8, 8, &mut rng);
        let want = oracle_wfm(&p, &g, 8, 8);
        let got = weighted_fmeasure(&p, &g).unwrap();
        match (got, want) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                checked += 1;
            }
            (None, None) => {}
            other => panic!("empty-mask disagreement: {other:?}"),
        }
    }
}

#[test]
fn weighted_fmeasure_hand_case() {
    #[rustfmt::skip]
    let gt = [
        0., 0., 0., 0.,
        0., 1., 1., 0.,
        0., 1., 1., 1.,
        0., 0., 0., 0.,
    ];
    #[rustfmt::skip]
    let pred = [
        0.1, 0.0, 0.2, 0.0,
        0.0, 0.9, 0.7, 0.3,
        0.4, 1.0, 0.6, 0.2,
        0.0, 0.1, 0.0, 0.5,
    ];
    let g = Tensor::new(vec![4, 4], gt.to_vec()).unwrap();
    let p = Tensor::new(vec![4, 4], pred.to_vec()).unwrap();
    let got = weighted_fmeasure(&p, &g).unwrap().unwrap();
    let want = oracle_wfm(&p, &g, 4, 4).unwrap();
    assert!((got - want).abs() < 1e-9);
    assert!(got > 0.0 && got < 1.0);
}

#[test]
fn weighted_fmeasure_extremes() {
    let gt = Tensor::from_fn(&[12, 12], |k| ((3..9).contains(&(k / 12)) && (3..9).contains(&(k % 12))) as u8 as f64);
    assert!((weighted_fmeasure(&gt, &gt).unwrap().unwrap() - 1.0).abs() < 1e-12);
    let inv = gt.map(|v| 1.0 - v);
    assert!(weighted_fmeasure(&inv, &gt).unwrap().unwrap() < 1e-12);
    assert_eq!(weighted_fmeasure(&gt, &Tensor::zeros(&[12, 12])).unwrap(), None);
}

#[test]
fn simple_closed_forms() {
    let p = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(iou(&p, &g).unwrap(), 0.5);
    assert!((dice_coeff(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(mae(&p, &g).unwrap(), 0.25);
    assert_eq!(iou(&g, &g).unwrap(), 1.0);
    assert_eq!(dice_coeff(&g, &g).unwrap(), 1.0);
    assert_eq!(mae(&g, &g).unwrap(), 0.0);
    for gt in [g.clone(), Tensor::ones(&[2, 2]), Tensor::zeros(&[2, 2])] {
        assert_eq!(mae(&Tensor::full(&[2, 2], 0.5), &gt).unwrap(), 0.5);
    }
    assert!(iou(&p, &Tensor::zeros(&[4])).is_err());
}

fn write_gray(path: &std::path::Path, values: &[u8], side: usize) {
    write_image(path, &Image::new(side, side, 1, values.to_vec()).unwrap()).unwrap();
}

fn to_tensor(values: &[u8], side: usize, mask: bool) -> Tensor {
    Tensor::from_fn(&[1, side, side], |k| if mask { (values[k] >= 128) as u8 as f64 } else { values[k] as f64 / 255.0 })
}

#[test]
fn dataset_of_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let masks = [[0u8, 255, 255, 0, 0, 255, 0, 0, 0], [255, 255, 255, 255, 0, 0, 0, 0, 0]];
    for (k, m) in masks.iter().enumerate() {
        write_gray(&dir.path().join(format!("m{k}.pgm")), m, 3);
    }
    let r = evaluate_dataset(dir.path(), dir.path()).unwrap();
    assert_eq!((r.n_images, r.iou, r.dice, r.mae), (2, 1.0, 1.0, 0.0));
    assert!((r.f_w - 1.0).abs() < 1e-12);
    assert!(r.unmatched.is_empty());
}

#[test]
fn dataset_without_common_stems_fails_listing_all() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_gray(&a.path().join("x.pgm"), &[0; 4], 2);
    write_gray(&a.path().join("y.png"), &[0; 4], 2);
    write_gray(&b.path().join("z.pgm"), &[0; 4], 2);
    match evaluate_dataset(a.path(), b.path()) {
        Err(Error::Unmatched(list)) => {
            assert_eq!(list.len(), 3);
            for s in ["x", "y", "z"] {
                assert!(list.iter().any(|l| l.starts_with(s)), "{s} missing from {list:?}");
            }
        }
        other => panic!("expected an unmatched error, got {other:?}"),
    }
}

#[test]
fn dataset_means_equal_per_image_oracles() {
    let (pd, gd) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let side = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sums = [0.0; 4];
    for k in 0..3 {
        let (p, g) = random_pair(side, side, &mut rng);
        let pv: Vec<u8> = p.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        let gv: Vec<u8> = g.data().iter().map(|v| (v * 255.0) as u8).collect();
        write_gray(&pd.path().join(format!("s{k}.pgm")), &pv, side);
        write_gray(&gd.path().join(format!("s{k}.png")), &gv, side);
        let (pt, gt) = (to_tensor(&pv, side, false), to_tensor(&gv, side, true));
        let (p2, g2) = (pt.clone().reshape(&[side, side]).unwrap(), gt.clone().reshape(&[side, side]).unwrap());
        sums[0] += oracle_iou(&p2, &g2);
        sums[1] += oracle_dice(&p2, &g2);
        sums[2] += oracle_wfm(&p2, &g2, side, side).unwrap_or(0.0);
        sums[3] += oracle_mae(&p2, &g2);
    }
    write_gray(&pd.path().join("extra.pgm"), &[0; 36], side);
    let r = evaluate_dataset(pd.path(), gd.path()).unwrap();
    assert_eq!(r.n_images, 3);
    for (got, sum) in [r.iou, r.dice, r.f_w, r.mae].iter().zip(sums) {
        assert!((got - sum / 3.0).abs() < 1e-9, "{got} vs {}", sum / 3.0);
    }
    assert_eq!(r.unmatched, vec!["extra (prediction only)".to_string()]);
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["n_images"], 3);
    assert!(r.to_text().contains("unmatched: extra"));
}

#[test]
fn empty_ground_truth_is_flagged() {
    let m = image_metrics("e", &Tensor::zeros(&[1, 3, 3]), &Tensor::zeros(&[1, 3, 3])).unwrap();
    assert!(m.empty_gt);
    assert_eq!((m.iou, m.dice, m.f_w, m.mae), (1.0, 1.0, 0.0, 0.0));
}
