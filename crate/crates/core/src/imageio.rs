//! 8-bit image files: binary and ASCII PPM/PGM, and PNG.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit pixels with one (gray) or three (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn img_err<T>(path: &Path, msg: impl Into<String>) -> Result<T> {
    Err(Error::Image { path: path.to_path_buf(), msg: msg.into() })
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "image buffer of {} bytes does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Single-channel image from `[H, W]` or `[1, H, W]` values in `[0, 1]`.
    pub fn from_gray_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::InvalidArgument(format!("gray tensor must be [H,W] or [1,H,W], got {s:?}"))),
        };
        let data = t.data().iter().map(|&v| quantize(v)).collect();
        Self::new(w, h, 1, data)
    }

    /// RGB image from `[3, H, W]` values in `[0, 1]`.
    pub fn from_rgb_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape() else {
            return Err(Error::InvalidArgument(format!("rgb tensor must be [3,H,W], got {:?}", t.shape())));
        };
        let (h, w) = (*h, *w);
        let mut data = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for k in 0..h * w {
                data[k * 3 + c] = quantize(t.data()[c * h * w + k]);
            }
        }
        Self::new(w, h, 3, data)
    }

    /// Planar `[3, H, W]` tensor scaled to `[0, 1]`; gray images are replicated.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |idx| {
            let (c, k) = (idx / hw, idx % hw);
            let src = if self.channels == 3 { k * 3 + c } else { k };
            self.data[src] as f64 / 255.0
        })
    }

    /// `[1, H, W]` luminance-free view: the first channel scaled to `[0, 1]`.
    pub fn to_gray_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |k| self.data[k * self.channels] as f64 / 255.0)
    }

    /// `[1, H, W]` binary mask: 1 where the first channel is at least 128.
    pub fn to_mask_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |k| if self.data[k * self.channels] >= 128 { 1.0 } else { 0.0 })
    }
}

/// Rounds `v ∈ [0, 1]` to the nearest 8-bit level, clamping outside values.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a PNG, PPM or PGM file (chosen by content, not extension).
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        return read_png(path, &bytes);
    }
    if bytes.len() >= 2 && bytes[0] == b'P' {
        return read_pnm(path, &bytes);
    }
    img_err(path, "unrecognized image format")
}

fn read_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = match decoder.read_info() {
        Ok(r) => r,
        Err(e) => return img_err(path, e.to_string()),
    };
    let Some(size) = reader.output_buffer_size() else {
        return img_err(path, "image too large");
    };
    let mut buf = vec![0; size];
    let info = match reader.next_frame(&mut buf) {
        Ok(i) => i,
        Err(e) => return img_err(path, e.to_string()),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.bit_depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        d => return img_err(path, format!("unsupported bit depth {d:?}")),
    };
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return img_err(path, "indexed PNG is not supported"),
    };
    let out_channels = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(w * h * out_channels);
    for px in 0..w * h {
        for c in 0..out_channels {
            // Most significant byte of each sample.
            data.push(buf[(px * src_channels + c) * step]);
        }
    }
    Image::new(w, h, out_channels, data)
}

fn read_pnm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let magic = &bytes[..2];
    let (channels, ascii) = match magic {
        b"P5" => (1, false),
        b"P6" => (3, false),
        b"P2" => (1, true),
        b"P3" => (3, true),
        _ => return img_err(path, "unsupported PNM variant"),
    };
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in &mut header {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let Some(v) = std::str::from_utf8(&bytes[start..pos]).ok().and_then(|s| s.parse().ok()) else {
            return img_err(path, "malformed PNM header");
        };
        *slot = v;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return img_err(path, format!("unsupported maxval {maxval} (8-bit only)"));
    }
    let n = w * h * channels;
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let data = if ascii {
        let text = std::str::from_utf8(&bytes[pos..]).unwrap_or("");
        let vals: Vec<usize> = text
            .split(|c: char| c.is_ascii_whitespace())
            .filter(|s| !s.is_empty())
            .take(n)
            .map(|s| s.parse().unwrap_or(usize::MAX))
            .collect();
        if vals.len() != n || vals.iter().any(|&v| v > maxval) {
            return img_err(path, "truncated or invalid PNM samples");
        }
        vals.into_iter().map(scale).collect()
    } else {
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + n {
            return img_err(path, "truncated PNM payload");
        }
        bytes[pos..pos + n].iter().map(|&v| scale(v as usize)).collect()
    };
    Image::new(w, h, channels, data)
}

/// Writes PNG when the extension is `.png`, otherwise binary PGM/PPM.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if is_png(path) {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let res = enc.write_header().and_then(|mut w| w.write_image_data(&img.data));
        if let Err(e) = res {
            return img_err(path, e.to_string());
        }
        return Ok(());
    }
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (ch, name) in [(1, "a.pgm"), (3, "b.ppm"), (1, "c.png"), (3, "d.png")] {
            let data: Vec<u8> = (0..5 * 3 * ch).map(|v| (v * 17 % 256) as u8).collect();
            let img = Image::new(5, 3, ch, data).unwrap();
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img, "{name}");
        }
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, "P2\n# note\n2 2\n15\n0 15\n5 10\n").unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.data, vec![0, 255, 85, 170]);
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, "hello").unwrap();
        assert!(read_image(&p).is_err());
        fs::write(&p, "P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(read_image(&p).is_err());
    }

    #[test]
    fn tensor_conversions() {
        let t = Tensor::from_fn(&[3, 2, 2], |k| k as f64 / 11.0);
        let img = Image::from_rgb_tensor(&t).unwrap();
        assert!(img.to_rgb_tensor().max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
        let m = Image::new(2, 1, 1, vec![127, 128]).unwrap().to_mask_tensor();
        assert_eq!(m.data(), &[0.0, 1.0]);
    }
}
