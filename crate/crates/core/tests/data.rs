use std::collections::BTreeMap;
use std::path::Path;

use lpmoe_core::data::{generate_dataset, render, Dataset, DatasetSpec, FileFormat, Shape, ShapeFamily, Texture};

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["images", "masks"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
        }
    }
    out.insert("manifest.json".into(), std::fs::read(dir.join("manifest.json")).unwrap());
    out
}

fn small(count: usize) -> DatasetSpec {
    DatasetSpec { count, image_size: 32, ..Default::default() }
}

#[test]
fn same_spec_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small(6);
    generate_dataset(&spec, a.path()).unwrap();
    generate_dataset(&spec, b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 13);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&DatasetSpec { texture_seed: 8, ..spec }, c.path()).unwrap();
    assert_ne!(files(c.path()), fa);
}

#[test]
fn in_memory_matches_files_for_both_formats() {
    for format in [FileFormat::Pnm, FileFormat::Png] {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { format, ..small(4) };
        generate_dataset(&spec, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        let memory = Dataset::generate(&spec).unwrap();
        assert_eq!(loaded.len(), 4);
        for (l, m) in loaded.samples.iter().zip(&memory.samples) {
            assert_eq!(l.name, m.name);
            assert!(l.image.bit_eq(&m.image) && l.mask.bit_eq(&m.mask), "{format:?} {}", l.name);
        }
    }
}

#[test]
fn mask_area_within_rasterization_band() {
    let spec = DatasetSpec { count: 60, ..Default::default() };
    let texture = Texture::new(spec.texture_seed, spec.image_size);
    let mut seen = (0, 0);
    for index in 0..spec.count as u64 {
        let r = render(&spec, &texture, index);
        let count = r.mask.data.iter().filter(|&&v| v > 0).count() as f64;
        let (area, perimeter) = (r.shape.area(), r.shape.perimeter());
        // Pixels whose centers fall on the wrong side lie within half a
        // diagonal of the boundary; a band of width 1 on each side bounds them.
        assert!((count - area).abs() <= perimeter, "{}: count {count} area {area} perimeter {perimeter}", r.name);
        match r.shape {
            Shape::Ellipse { a, b, .. } => {
                seen.0 += 1;
                let pi = std::f64::consts::PI;
                assert!(pi * (a - 1.0) * (b - 1.0) <= count && count <= pi * (a + 1.0) * (b + 1.0), "{}", r.name);
            }
            Shape::Polygon { .. } => seen.1 += 1,
        }
        assert!(count > 0.0 && count < (spec.image_size * spec.image_size) as f64);
    }
    assert!(seen.0 > 0 && seen.1 > 0, "mixed family should produce both shapes: {seen:?}");
}

#[test]
fn shape_families_are_respected() {
    for (family, ellipse) in [(ShapeFamily::Ellipse, true), (ShapeFamily::Polygon, false)] {
        let spec = DatasetSpec { shape: family, ..small(8) };
        let texture = Texture::new(spec.texture_seed, spec.image_size);
        for i in 0..8 {
            assert_eq!(matches!(render(&spec, &texture, i).shape, Shape::Ellipse { .. }), ellipse);
        }
    }
}

#[test]
fn held_out_split_is_disjoint_and_stable() {
    let train = small(5);
    let held = train.following(3);
    assert_eq!(held.start_index, 5);
    let a = Dataset::generate(&train).unwrap();
    let b = Dataset::generate(&held).unwrap();
    let names: Vec<_> = b.samples.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["00005", "00006", "00007"]);
    assert!(a.samples.iter().all(|s| !names.contains(&s.name.as_str())));

    // Image k does not depend on how many images precede it in a spec.
    let longer = Dataset::generate(&small(8)).unwrap();
    assert!(longer.samples[6].image.bit_eq(&b.samples[1].image));
}

#[test]
fn camouflage_zero_leaves_no_visible_object() {
    let hidden = DatasetSpec { camouflage: 0.0, ..small(3) };
    let texture = Texture::new(hidden.texture_seed, hidden.image_size);
    for i in 0..3 {
        let r = render(&hidden, &texture, i);
        let n = hidden.image_size;
        // The foreground phase shift is a whole period at both ends of the
        // strength range, so strength 0 and strength 1 render the same pixels.
        let mut differ = 0;
        let other = render(&DatasetSpec { camouflage: 1.0, ..hidden }, &texture, i);
        for k in 0..n * n {
            differ += (0..3).filter(|&c| r.image.data[3 * k + c].abs_diff(other.image.data[3 * k + c]) > 1).count();
        }
        assert_eq!(differ, 0);
        assert!(r.mask.data.iter().any(|&v| v > 0));
    }
}

#[test]
fn invalid_specs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for spec in [
        DatasetSpec { count: 0, ..Default::default() },
        DatasetSpec { camouflage: 1.5, ..Default::default() },
        DatasetSpec { image_size: 4, ..Default::default() },
    ] {
        assert!(generate_dataset(&spec, dir.path()).is_err());
        assert!(Dataset::generate(&spec).is_err());
    }
    assert!(Dataset::load(dir.path()).is_err());
}
