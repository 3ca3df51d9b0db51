//! Flat `key = value` settings with dotted namespaces.
//!
//! `train.*` (or a bare key) goes to [`TrainConfig::set`], `data.*` to the
//! synthetic dataset spec and `arch.*` to the architecture's loss settings.

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::trainer::{ArchitectureSpec, TrainConfig};

/// Parses a config file: one `key = value` per line, `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let pair = parse_assignment(line)
            .map_err(|_| Error::InvalidOverride(format!("line {}: `{line}`", i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

/// Splits `key=value`, trimming both sides.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() && !v.trim().is_empty() => {
            Ok((k.trim().to_string(), v.trim().to_string()))
        }
        _ => Err(Error::InvalidOverride(format!(
            "expected key=value, got `{s}`"
        ))),
    }
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidOverride(format!("{key}={v}: not a valid number")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::InvalidOverride(format!(
            "{key}={v}: expected a boolean"
        ))),
    }
}

/// The three things a run is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub arch: ArchitectureSpec,
    pub config: TrainConfig,
    pub data: SyntheticSpec,
}

impl RunSettings {
    /// Applies one setting. Unknown keys and unparsable values are
    /// `InvalidOverride`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let (ns, name) = key.split_once('.').unwrap_or(("train", key));
        match ns {
            "train" => self.config.set(name, value),
            "data" => self.apply_data(name, value),
            "arch" => self.apply_arch(name, value),
            _ => Err(Error::InvalidOverride(format!(
                "unknown namespace `{ns}` in `{key}`"
            ))),
        }
    }

    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        self.check()
    }

    fn apply_data(&mut self, name: &str, v: &str) -> Result<()> {
        let key = format!("data.{name}");
        let d = &mut self.data;
        match name {
            "num_classes" => d.num_classes = number(&key, v)?,
            "per_class" => d.per_class = number(&key, v)?,
            "dim" => d.dim = number(&key, v)?,
            "separation" => d.separation = number(&key, v)?,
            "spread" => d.spread = number(&key, v)?,
            "sigma" => d.augment.sigma = number(&key, v)?,
            "scale_jitter" => d.augment.scale_jitter = number(&key, v)?,
            "mask_prob" => d.augment.mask_prob = number(&key, v)?,
            _ => return Err(Error::InvalidOverride(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn apply_arch(&mut self, name: &str, v: &str) -> Result<()> {
        let key = format!("arch.{name}");
        let a = &mut self.arch;
        match name {
            "tau" => a.loss.temperature = number(&key, v)?,
            "keep_o_e" => a.loss.surgery.keep_o_e = flag(&key, v)?,
            "keep_r_e" => a.loss.surgery.keep_r_e = flag(&key, v)?,
            "symmetric" => a.loss.symmetric = flag(&key, v)?,
            "n_views" => a.n_views = number(&key, v)?,
            "decorrelation_weight" => a.decorrelation_weight = number(&key, v)?,
            _ => return Err(Error::InvalidOverride(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Cross-field consistency after overrides.
    pub fn check(&self) -> Result<()> {
        if self.config.encoder.input != self.data.dim {
            return Err(Error::InvalidOverride(format!(
                "train.input_dim {} differs from data.dim {}",
                self.config.encoder.input, self.data.dim
            )));
        }
        self.arch
            .validate()
            .map_err(|e| Error::InvalidOverride(e.to_string()))?;
        self.config
            .validate()
            .map_err(|e| Error::InvalidOverride(e.to_string()))?;
        self.data
            .validate()
            .map_err(|e| Error::InvalidOverride(e.to_string()))
    }

    /// Points every seeded component at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.data.seed = seed;
    }
}
