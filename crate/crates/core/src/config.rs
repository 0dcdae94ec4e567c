//! Training configuration read from flat `key = value` files.
//!
//! The accepted syntax is a subset of TOML: one assignment per line, `#`
//! comments, bare or double-quoted values, and no tables. Every key has a
//! default taken from the desk profile, so an empty file is a valid config.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::model::{Ablation, ModelConfig};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(skip)]
    pub optim: AdamWConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamWConfig::default(),
            iterations: 2000,
            batch_size: 4,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seed: 7,
            checkpoint_every: 500,
        }
    }
}

/// Every recognised key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: [&str; 23] = [
    "image_size",
    "embed_dim",
    "layers",
    "heads",
    "extractor_width",
    "adapter_heads",
    "adapter_points",
    "stages",
    "decoder_width",
    "no_dmlp",
    "no_cda",
    "no_case",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "iterations",
    "batch_size",
    "alpha",
    "beta",
    "seed",
    "checkpoint_every",
];

fn unquote(raw: &str) -> &str {
    raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(raw)
}

/// Drops a trailing `#` comment that is not inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Config { line: self.line, key: self.key.to_string(), msg: msg.into() })
    }

    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T> {
        match unquote(self.value).parse() {
            Ok(v) => Ok(v),
            Err(_) => self.err(format!("expected {what}, found `{}`", self.value)),
        }
    }

    fn usize(&self) -> Result<usize> {
        self.parse("a non-negative integer")
    }

    fn u64(&self) -> Result<u64> {
        self.parse("a non-negative integer")
    }

    fn f64(&self) -> Result<f64> {
        let v: f64 = self.parse("a number")?;
        if !v.is_finite() {
            return self.err("value must be finite");
        }
        Ok(v)
    }

    fn bool(&self) -> Result<bool> {
        self.parse("`true` or `false`")
    }
}

impl TrainConfig {
    /// Parses config text. Keys not mentioned keep their desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config { line, key: body.to_string(), msg: "expected `key = value`".into() });
            };
            let e = Entry { line, key: key.trim(), value: value.trim() };
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == e.key) {
                return e.err(format!("duplicate key (first set on line {first})"));
            }
            seen.push((e.key, line));
            cfg.apply(&e)?;
        }
        match cfg.validate() {
            // Blame the last line that set one of the offending keys. An
            // invariant broken only by defaults keeps its line-free form.
            Err(Error::ConfigInvariant { keys, msg }) => {
                let blamed = seen.iter().rev().find(|(k, _)| keys.split(", ").any(|x| x == *k));
                Err(match blamed {
                    Some(&(key, line)) => Error::Config { line, key: key.to_string(), msg },
                    None => Error::ConfigInvariant { keys, msg },
                })
            }
            other => other.map(|()| cfg),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match e.key {
            "image_size" => m.image_size = e.usize()?,
            "embed_dim" => m.embed_dim = e.usize()?,
            "layers" => m.layers = e.usize()?,
            "heads" => m.heads = e.usize()?,
            "extractor_width" => m.extractor_width = e.usize()?,
            "adapter_heads" => m.adapter_heads = e.usize()?,
            "adapter_points" => m.adapter_points = e.usize()?,
            "stages" => m.stages = e.usize()?,
            "decoder_width" => m.decoder_width = e.usize()?,
            "no_dmlp" => m.ablation.no_dmlp = e.bool()?,
            "no_cda" => m.ablation.no_cda = e.bool()?,
            "no_case" => m.ablation.no_case = e.bool()?,
            "lr" => o.lr = e.f64()?,
            "beta1" => o.beta1 = e.f64()?,
            "beta2" => o.beta2 = e.f64()?,
            "adam_eps" => o.eps = e.f64()?,
            "weight_decay" => o.weight_decay = e.f64()?,
            "iterations" => self.iterations = e.u64()?,
            "batch_size" => self.batch_size = e.usize()?,
            "alpha" => self.alpha = e.f64()?,
            "beta" => self.beta = e.f64()?,
            "seed" => self.seed = e.u64()?,
            "checkpoint_every" => self.checkpoint_every = e.u64()?,
            _ => return e.err("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |keys: &str, msg: &str| Err(Error::ConfigInvariant { keys: keys.into(), msg: msg.into() });
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha, beta", "alpha and beta must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "batch_size must be positive");
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("lr, adam_eps, weight_decay", "lr and adam_eps must be positive, weight_decay non-negative");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("beta1, beta2", "beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }

    /// Applies command-line overrides and re-checks the invariants.
    pub fn with_overrides(mut self, seed: Option<u64>, ablate: Ablation, stages: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.model.ablation = self.model.ablation.union(ablate);
        if let Some(s) = stages {
            self.model.stages = s;
        }
        self.validate()?;
        Ok(self)
    }

    /// Serializes every key; floats use their shortest round-trip form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let vals: [String; 23] = [
            m.image_size.to_string(),
            m.embed_dim.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.extractor_width.to_string(),
            m.adapter_heads.to_string(),
            m.adapter_points.to_string(),
            m.stages.to_string(),
            m.decoder_width.to_string(),
            m.ablation.no_dmlp.to_string(),
            m.ablation.no_cda.to_string(),
            m.ablation.no_case.to_string(),
            format!("{:?}", o.lr),
            format!("{:?}", o.beta1),
            format!("{:?}", o.beta2),
            format!("{:?}", o.eps),
            format!("{:?}", o.weight_decay),
            self.iterations.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.alpha),
            format!("{:?}", self.beta),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::parse("# only a comment\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.optim.lr = 3.7e-4;
        c.model.ablation.no_case = true;
        c.alpha = 0.1 + 0.2;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_and_key() {
        let e = TrainConfig::parse("seed = 3\n\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("bogus"), "{e}");
        let e = TrainConfig::parse("lr = fast").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("lr"), "{e}");
        let e = TrainConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        let e = TrainConfig::parse("seed = 1\nimage_size = 100").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("image_size") && e.contains("multiple of 32"), "{e}");
        let e = TrainConfig::parse("stages = 3").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("stages"), "{e}");
        assert!(TrainConfig::parse("alpha = 0").is_err());
    }

    #[test]
    fn quotes_and_inline_comments() {
        let c = TrainConfig::parse("seed = \"11\"  # note\nno_cda = true").unwrap();
        assert_eq!(c.seed, 11);
        assert!(c.model.ablation.no_cda);
    }
}
