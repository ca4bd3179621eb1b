//! Run configuration files.
//!
//! Plain text, one `key = value` per line under `[section]` headers; `#`
//! starts a comment. Every key belongs to exactly one section:
//!
//! | section    | keys |
//! |------------|------|
//! | `[run]`    | `dataset`, `arch`, `seed` |
//! | `[data]`   | `data_dir`, `train_limit`, `test_limit` |
//! | `[train]`  | `epsilon`, `alpha`, `vae_lr`, `cls_lr`, `gen_lr`, `vae_epochs`, `gen_epochs`, `cls_epochs`, `global_epochs`, `batch_size`, `latent_dim` |
//! | `[attack]` | `pgd_steps`, `pgd_step_size`, `pgd_rand_init`, `transfer_eps` |
//! | `[sweep]`  | `sweep_param`, `sweep_values`, `sweep_parallel` |
//! | `[output]` | `out_dir`, `samples` |
//!
//! Lists are comma-separated; `none` clears an optional value. Overrides
//! (`key=value` or `section.key=value`) apply after the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use avic_core::pipeline::RunConfig;

const SECTIONS: &[(&str, &[&str])] = &[
    ("run", &["dataset", "arch", "seed"]),
    ("data", &["data_dir", "train_limit", "test_limit"]),
    (
        "train",
        &[
            "epsilon",
            "alpha",
            "vae_lr",
            "cls_lr",
            "gen_lr",
            "vae_epochs",
            "gen_epochs",
            "cls_epochs",
            "global_epochs",
            "batch_size",
            "latent_dim",
        ],
    ),
    (
        "attack",
        &["pgd_steps", "pgd_step_size", "pgd_rand_init", "transfer_eps"],
    ),
    ("sweep", &["sweep_param", "sweep_values", "sweep_parallel"]),
    ("output", &["out_dir", "samples"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    Alpha,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Alpha => "alpha",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::Epsilon => cfg.epsilon = value,
            SweepParam::Alpha => cfg.alpha = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub parallel: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            param: SweepParam::Epsilon,
            values: Vec::new(),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    /// Falls back to `$AVIC_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sweep: SweepSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs/avic"),
            sweep: SweepSpec::default(),
        }
    }
}

impl Settings {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("AVIC_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("`{key}`: expected a boolean, got `{value}`"),
    }
}

impl Settings {
    /// Sets one key. `section`, when given, must be the key's section.
    pub fn set(&mut self, section: Option<&str>, key: &str, value: &str) -> Result<()> {
        let Some(home) = section_of(key) else {
            bail!("unknown key `{key}`");
        };
        if let Some(s) = section {
            if s != home {
                bail!("key `{key}` belongs in [{home}], not [{s}]");
            }
        }
        let r = &mut self.run;
        match key {
            "dataset" => r.dataset = parse(key, value)?,
            "arch" => r.arch = parse(key, value)?,
            "seed" => r.seed = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_limit" => r.train_limit = optional(key, value)?,
            "test_limit" => r.test_limit = optional(key, value)?,
            "epsilon" => r.epsilon = parse(key, value)?,
            "alpha" => r.alpha = parse(key, value)?,
            "vae_lr" => r.vae_lr = parse(key, value)?,
            "cls_lr" => r.cls_lr = parse(key, value)?,
            "gen_lr" => r.gen_lr = parse(key, value)?,
            "vae_epochs" => r.epochs.vae = parse(key, value)?,
            "gen_epochs" => r.epochs.gen = parse(key, value)?,
            "cls_epochs" => r.epochs.cls = parse(key, value)?,
            "global_epochs" => r.epochs.global = parse(key, value)?,
            "batch_size" => r.batch_size = parse(key, value)?,
            "latent_dim" => r.latent_dim = optional(key, value)?,
            "pgd_steps" => r.pgd_steps = parse(key, value)?,
            "pgd_step_size" => r.pgd_step_size = optional(key, value)?,
            "pgd_rand_init" => r.pgd_rand_init = boolean(key, value)?,
            "transfer_eps" => r.transfer_eps = list(key, value)?,
            "sweep_param" => {
                self.sweep.param = match value {
                    "epsilon" => SweepParam::Epsilon,
                    "alpha" => SweepParam::Alpha,
                    _ => bail!("`sweep_param`: expected epsilon or alpha, got `{value}`"),
                }
            }
            "sweep_values" => self.sweep.values = list(key, value)?,
            "sweep_parallel" => self.sweep.parallel = boolean(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "samples" => r.samples = parse(key, value)?,
            _ => unreachable!("every sectioned key is handled"),
        }
        Ok(())
    }

    /// Applies `key=value` or `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (lhs, value) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
        let lhs = lhs.trim();
        let (section, key) = match lhs.split_once('.') {
            Some((s, k)) => (Some(s), k),
            None => (None, lhs),
        };
        self.set(section, key, value.trim())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut s = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("line {}", i + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}: expected key = value, got `{line}`", at()))?;
            s.set(section.as_deref(), key.trim(), value.trim()).with_context(at)?;
        }
        Ok(s)
    }
}

/// File values, then overrides, then validation. Without a file, the
/// documented defaults apply.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let mut s = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Settings::parse_str(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Settings::default(),
    };
    for o in overrides {
        s.apply_override(o)?;
    }
    s.run.validate()?;
    Ok(s)
}
