//! Synthetic camouflage dataset.
//!
//! The background is a sum of oriented sinusoids whose frequencies,
//! orientations, base phases and colour weights come from the texture seed
//! and are shared by every image of a dataset. Each image translates that
//! texture and places one shape filled with the same texture after shifting
//! every component's phase by `2π·(1 − camouflage)`. Strength 0 (and 1)
//! therefore makes the object invisible, while 0.5 gives a half-period shift.
//! Because all components move by the same phase, the object cannot be
//! explained by a translation of the background, so it is locally detectable.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_image, write_image, Image};
use crate::tensor::Tensor;

/// Number of sinusoidal components in the texture.
pub const COMPONENTS: usize = 4;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    /// Either family, chosen per image.
    Mixed,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "polygon" => Ok(Self::Polygon),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::InvalidArgument(format!("unknown shape family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Pnm,
    Png,
}

impl FileFormat {
    fn extensions(self) -> (&'static str, &'static str) {
        match self {
            Self::Pnm => ("ppm", "pgm"),
            Self::Png => ("png", "png"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub image_size: usize,
    pub texture_seed: u64,
    pub shape: ShapeFamily,
    pub camouflage: f64,
    /// Index of the first image; disjoint ranges give disjoint splits of one family.
    pub start_index: u64,
    pub format: FileFormat,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 64,
            texture_seed: 7,
            shape: ShapeFamily::Mixed,
            camouflage: 0.5,
            start_index: 0,
            format: FileFormat::Pnm,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset count must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.camouflage) {
            return Err(Error::InvalidArgument(format!("camouflage {} must lie in [0, 1]", self.camouflage)));
        }
        Ok(())
    }

    /// Held-out split of the same family, starting after this one.
    pub fn following(&self, count: usize) -> Self {
        Self { count, start_index: self.start_index + self.count as u64, ..*self }
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    /// Wave vector in radians per pixel.
    kx: f64,
    ky: f64,
    phase: f64,
    colour: [f64; 3],
}

/// Dataset-wide texture.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: [Wave; COMPONENTS],
    norm: [f64; 3],
}

impl Texture {
    pub fn new(seed: u64, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = image_size as f64;
        let waves = std::array::from_fn(|_| {
            let period = rng.random_range(0.09..0.22) * s;
            let angle = rng.random_range(0.0..PI);
            let k = TAU / period;
            Wave {
                kx: k * angle.cos(),
                ky: k * angle.sin(),
                phase: rng.random_range(0.0..TAU),
                colour: std::array::from_fn(|_| rng.random_range(0.2..1.0)),
            }
        });
        let norm = std::array::from_fn(|c| waves.iter().map(|w: &Wave| w.colour[c]).sum());
        Self { waves, norm }
    }

    /// RGB value in `[0.1, 0.9]` at continuous position `(x, y)` with an extra phase.
    pub fn sample(&self, x: f64, y: f64, shift: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for w in &self.waves {
            let v = (w.kx * x + w.ky * y + w.phase + shift).sin();
            for (o, c) in out.iter_mut().zip(w.colour) {
                *o += c * v;
            }
        }
        std::array::from_fn(|c| 0.5 + 0.4 * out[c] / self.norm[c])
    }
}

/// Analytic description of a foreground shape, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, angle: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                // Even-odd ray casting.
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (x1, y1) = vertices[i];
                    let (x2, y2) = vertices[(i + 1) % n];
                    if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Ellipse { a, b, .. } => PI * a * b,
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                let twice: f64 = (0..n)
                    .map(|i| {
                        let (x1, y1) = vertices[i];
                        let (x2, y2) = vertices[(i + 1) % n];
                        x1 * y2 - x2 * y1
                    })
                    .sum();
                twice.abs() / 2.0
            }
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self {
            // Ramanujan's approximation.
            Shape::Ellipse { a, b, .. } => PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt()),
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let (x1, y1) = vertices[i];
                        let (x2, y2) = vertices[(i + 1) % n];
                        (x2 - x1).hypot(y2 - y1)
                    })
                    .sum()
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, size: f64) -> Shape {
    let family = match family {
        ShapeFamily::Mixed if rng.random_bool(0.5) => ShapeFamily::Ellipse,
        ShapeFamily::Mixed => ShapeFamily::Polygon,
        f => f,
    };
    let cx = rng.random_range(0.35..0.65) * size;
    let cy = rng.random_range(0.35..0.65) * size;
    match family {
        ShapeFamily::Ellipse => Shape::Ellipse {
            cx,
            cy,
            a: rng.random_range(0.14..0.3) * size,
            b: rng.random_range(0.14..0.3) * size,
            angle: rng.random_range(0.0..PI),
        },
        _ => {
            // Star-shaped around the centre, so the outline never self-intersects.
            let n = rng.random_range(5..=8);
            let step = TAU / n as f64;
            let start = rng.random_range(0.0..TAU);
            let vertices = (0..n)
                .map(|i| {
                    let t = start + step * (i as f64 + rng.random_range(-0.3..0.3));
                    let r = rng.random_range(0.15..0.3) * size;
                    (cx + r * t.cos(), cy + r * t.sin())
                })
                .collect();
            Shape::Polygon { vertices }
        }
    }
}

/// One generated pair before quantization to files.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub name: String,
    pub image: Image,
    pub mask: Image,
    pub shape: Shape,
}

/// Image name for a global index.
pub fn sample_name(index: u64) -> String {
    format!("{index:05}")
}

/// Renders image `index` of the family described by `spec`. Pure in its inputs.
pub fn render(spec: &DatasetSpec, texture: &Texture, index: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    rng.set_stream(index + 1);
    let n = spec.image_size;
    let s = n as f64;
    let tx = rng.random_range(0.0..s);
    let ty = rng.random_range(0.0..s);
    let shape = random_shape(&mut rng, spec.shape, s);
    let shift = TAU * (1.0 - spec.camouflage);
    let mut rgb = vec![0u8; 3 * n * n];
    let mut mask = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let inside = shape.contains(x, y);
            let v = texture.sample(x + tx, y + ty, if inside { shift } else { 0.0 });
            let k = i * n + j;
            for c in 0..3 {
                rgb[3 * k + c] = crate::imageio::quantize(v[c]);
            }
            mask[k] = if inside { 255 } else { 0 };
        }
    }
    Rendered {
        name: sample_name(index),
        image: Image::new(n, n, 3, rgb).expect("sized buffer"),
        mask: Image::new(n, n, 1, mask).expect("sized buffer"),
        shape,
    }
}

/// Manifest entry for one generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub image: String,
    pub mask: String,
    pub shape: Shape,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `images/`, `masks/` and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let texture = Texture::new(spec.texture_seed, spec.image_size);
    let (img_ext, mask_ext) = spec.format.extensions();
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut entries = Vec::with_capacity(spec.count);
    for index in spec.start_index..spec.start_index + spec.count as u64 {
        let r = render(spec, &texture, index);
        let image = format!("images/{}.{img_ext}", r.name);
        let mask = format!("masks/{}.{mask_ext}", r.name);
        write_image(&out_dir.join(&image), &r.image)?;
        write_image(&out_dir.join(&mask), &r.mask)?;
        entries.push(ManifestEntry {
            mask_pixels: r.mask.data.iter().filter(|&&v| v > 0).count(),
            name: r.name,
            image,
            mask,
            shape: r.shape,
        });
    }
    let manifest = Manifest { spec: *spec, entries };
    fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// An image and its binary mask as tensors.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Directory the samples were read from, if any.
    pub root: Option<PathBuf>,
}

impl Dataset {
    /// Renders a dataset in memory, identical to loading the files
    /// [`generate_dataset`] would write.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let texture = Texture::new(spec.texture_seed, spec.image_size);
        let samples = (spec.start_index..spec.start_index + spec.count as u64)
            .map(|i| {
                let r = render(spec, &texture, i);
                Sample { name: r.name, image: r.image.to_rgb_tensor(), mask: r.mask.to_mask_tensor() }
            })
            .collect();
        Ok(Self { samples, root: None })
    }

    /// Loads the pairs listed in `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read dataset manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    name: e.name.clone(),
                    image: read_image(&dir.join(&e.image))?.to_rgb_tensor(),
                    mask: read_image(&dir.join(&e.mask))?.to_mask_tensor(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset {} is empty", dir.display())));
        }
        Ok(Self { samples, root: Some(dir.to_path_buf()) })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_hides_the_object() {
        let spec = DatasetSpec { camouflage: 0.0, count: 1, ..Default::default() };
        let tex = Texture::new(spec.texture_seed, spec.image_size);
        let r = render(&spec, &tex, 0);
        let plain = render(&DatasetSpec { camouflage: 1.0, ..spec }, &tex, 0);
        assert!(r.mask.data.contains(&255));
        assert_eq!(r.image.data, plain.image.data);
    }

    #[test]
    fn half_strength_changes_interior() {
        let spec = DatasetSpec::default();
        let tex = Texture::new(spec.texture_seed, spec.image_size);
        let r = render(&spec, &tex, 3);
        let hidden = render(&DatasetSpec { camouflage: 0.0, ..spec }, &tex, 3);
        let differ = (0..64 * 64).filter(|&k| r.image.data[3 * k] != hidden.image.data[3 * k]).count();
        let fg = r.mask.data.iter().filter(|&&v| v > 0).count();
        assert!(differ > fg / 2 && differ <= fg, "{differ} vs {fg}");
    }

    #[test]
    fn polygon_area_of_square() {
        let s = Shape::Polygon { vertices: vec![(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)] };
        assert_eq!(s.area(), 4.0);
        assert_eq!(s.perimeter(), 8.0);
        assert!(s.contains(1.0, 1.0) && !s.contains(3.0, 1.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(DatasetSpec { count: 0, ..Default::default() }.validate().is_err());
        assert!(DatasetSpec { camouflage: 1.5, ..Default::default() }.validate().is_err());
    }
}
