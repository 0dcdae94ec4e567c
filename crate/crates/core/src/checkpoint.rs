//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LPMOECKP"
//! version    u32
//! manifest   u64 length + UTF-8 text
//! payload    raw tensor bytes, offsets relative to the payload start
//! ```
//!
//! The manifest is line-oriented. It records the iteration counter, the
//! optimizer step, the sampling RNG state, the storage precision, the full
//! config text, and one line per tensor:
//! `param <name> <trainable> <dims> <offset> <bytes>` and
//! `moment <name> <m offset> <v offset> <bytes>`. Dims are comma separated,
//! `-` for a scalar.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"LPMOECKP";
pub const VERSION: u32 = 1;

/// Storage precision of tensor payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Bit-exact.
    F64,
    /// Half the size; values are rounded on save.
    F32,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
        }
    }

    fn encode(self, data: &[f64], out: &mut Vec<u8>) {
        for &v in data {
            match self {
                Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Self::F64 => {
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
            }
            Self::F32 => {
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64).collect()
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

/// Serializes the full training state.
pub fn to_bytes(t: &Trainer, precision: Precision) -> Vec<u8> {
    let mut manifest = String::new();
    let mut payload = Vec::new();
    let _ = writeln!(manifest, "iteration {}", t.iteration);
    let _ = writeln!(manifest, "opt_step {}", t.opt.step);
    let _ = writeln!(manifest, "rng_seed {}", hex(&t.rng.get_seed()));
    let _ = writeln!(manifest, "rng_stream {}", t.rng.get_stream());
    let _ = writeln!(manifest, "rng_word_pos {}", t.rng.get_word_pos());
    let _ = writeln!(manifest, "dtype {}", precision.name());
    manifest.push_str("config_begin\n");
    manifest.push_str(&t.config.to_text());
    manifest.push_str("config_end\n");
    for (id, p) in t.store.iter() {
        let dims = if p.value.shape().is_empty() {
            "-".to_string()
        } else {
            p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        let off = payload.len();
        precision.encode(p.value.data(), &mut payload);
        let _ = writeln!(manifest, "param {} {} {dims} {off} {}", p.name, u8::from(p.trainable), payload.len() - off);
        if let Some(m) = t.opt.state.get(&id) {
            let m_off = payload.len();
            precision.encode(&m.m, &mut payload);
            let v_off = payload.len();
            precision.encode(&m.v, &mut payload);
            let _ = writeln!(manifest, "moment {} {m_off} {v_off} {}", p.name, v_off - m_off);
        }
    }
    let mut out = Vec::with_capacity(24 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save(t: &Trainer, path: &Path, precision: Precision) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(t, precision))?;
    Ok(())
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn num<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    match field.and_then(|f| f.parse().ok()) {
        Some(v) => Ok(v),
        None => bad(format!("bad or missing {what}")),
    }
}

/// Restores a trainer. The model is rebuilt from the stored config and every
/// stored tensor replaces its freshly initialized counterpart.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return bad("not a checkpoint file (bad magic)");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let Some(mbytes) = bytes.get(20..20 + mlen) else {
        return bad("truncated manifest");
    };
    let Ok(manifest) = std::str::from_utf8(mbytes) else {
        return bad("manifest is not UTF-8");
    };
    let payload = &bytes[20 + mlen..];
    let slice = |off: usize, len: usize| -> Result<&[u8]> {
        match payload.get(off..off + len) {
            Some(s) => Ok(s),
            None => bad(format!("payload range {off}+{len} out of bounds")),
        }
    };

    let mut lines = manifest.lines();
    let mut scalars = std::collections::HashMap::new();
    let mut config_text = String::new();
    for line in lines.by_ref() {
        if line == "config_begin" {
            break;
        }
        if let Some((k, v)) = line.split_once(' ') {
            scalars.insert(k, v);
        }
    }
    for line in lines.by_ref() {
        if line == "config_end" {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let precision = match scalars.get("dtype").copied() {
        Some("f64") => Precision::F64,
        Some("f32") => Precision::F32,
        other => return bad(format!("unknown dtype {other:?}")),
    };
    let config = TrainConfig::parse(&config_text)?;
    let mut t = Trainer::new(config)?;
    t.iteration = num(scalars.get("iteration").copied(), "iteration")?;
    t.opt.step = num(scalars.get("opt_step").copied(), "opt_step")?;
    let seed: [u8; 32] = match scalars.get("rng_seed").and_then(|s| unhex(s)).map(|v| v.try_into()) {
        Some(Ok(s)) => s,
        _ => return bad("bad rng_seed"),
    };
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num(scalars.get("rng_stream").copied(), "rng_stream")?);
    rng.set_word_pos(num(scalars.get("rng_word_pos").copied(), "rng_word_pos")?);
    t.rng = rng;

    let mut restored = vec![false; t.store.len()];
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        match f.first().copied() {
            Some("param") if f.len() == 6 => {
                let Some(id) = t.store.id(f[1]) else {
                    return Err(Error::UnknownParam(f[1].to_string()));
                };
                let dims: Vec<usize> = if f[3] == "-" {
                    Vec::new()
                } else {
                    f[3].split(',').map(|d| num(Some(d), "dimension")).collect::<Result<_>>()?
                };
                let p = t.store.get_mut(id);
                if dims != p.value.shape() {
                    return bad(format!("`{}` has shape {dims:?}, model expects {:?}", f[1], p.value.shape()));
                }
                let data = precision.decode(slice(num(Some(f[4]), "offset")?, num(Some(f[5]), "length")?)?);
                p.value = Tensor::new(dims, data)?;
                p.trainable = f[2] == "1";
                restored[id.index()] = true;
            }
            Some("moment") if f.len() == 5 => {
                let Some(id) = t.store.id(f[1]) else {
                    return Err(Error::UnknownParam(f[1].to_string()));
                };
                let len = num(Some(f[4]), "length")?;
                let m = precision.decode(slice(num(Some(f[2]), "offset")?, len)?);
                let v = precision.decode(slice(num(Some(f[3]), "offset")?, len)?);
                if m.len() != t.store.get(id).value.numel() {
                    return bad(format!("moment size mismatch for `{}`", f[1]));
                }
                t.opt.state.insert(id, Moments { m, v });
            }
            Some("") | None => {}
            _ => return bad(format!("unrecognized manifest line `{line}`")),
        }
    }
    if let Some(i) = restored.iter().position(|r| !r) {
        let (_, p) = t.store.iter().nth(i).expect("index in range");
        return bad(format!("parameter `{}` missing from checkpoint", p.name));
    }
    Ok(t)
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}
