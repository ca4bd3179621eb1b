//! Run reports: canonical JSON, CSV tables and PPM sample grids.
//!
//! Canonical JSON has object keys in byte order, two-space indentation,
//! and every non-integer number rounded to 6 significant digits and
//! printed in shortest round-trip form (`-0` prints as `0`). Parsing a
//! canonical document and writing it again reproduces it byte for byte.
//! Wall times live in a separate `timing.json`.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::TransferCell;
use crate::pipeline::RunConfig;
use crate::train::StageResult;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub stages: Vec<StageResult>,
    /// Clean-trained baseline on the clean test split.
    pub clean_accuracy: f64,
    /// Pipeline classifier after separate training, before fine-tuning.
    pub separate_accuracy: f64,
    /// Pipeline classifier after fine-tuning.
    pub avic_accuracy: f64,
    /// Pipeline classifier on generator outputs of the test split.
    pub avic_adv_accuracy: f64,
    pub vae_clean_loss: f64,
    pub vae_adv_loss: f64,
    /// Absent when the clean VAE loss is 0.
    pub increase_rate: Option<f64>,
    pub transfer: Vec<TransferCell>,
}

/// Wall-clock seconds per stage, kept out of the canonical report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: IndexMap<String, f64>,
}

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn format_number(n: &serde_json::Number) -> Result<String> {
    if n.is_u64() || n.is_i64() {
        return Ok(n.to_string());
    }
    let x = n.as_f64().expect("number is representable as f64");
    if !x.is_finite() {
        return Err(Error::Report(format!("non-finite number {x}")));
    }
    Ok(format_float(x))
}

/// Formats a float the way canonical documents do: six significant digits,
/// positional between 1e-7 and 1e21, exponent form outside.
pub fn format_float(x: f64) -> String {
    let r = round6(x);
    let mag = r.abs();
    if mag != 0.0 && !(1e-7..1e21).contains(&mag) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) -> Result<()> {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&format_number(n)?),
        Value::String(s) => out.push_str(&serde_json::to_string(s).map_err(|e| Error::Report(e.to_string()))?),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else {
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    write_value(out, item, indent + 1)?;
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
            } else {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push_str("{\n");
                for (i, k) in keys.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    out.push_str(&serde_json::to_string(k).map_err(|e| Error::Report(e.to_string()))?);
                    out.push_str(": ");
                    write_value(out, &map[k.as_str()], indent + 1)?;
                    out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push('}');
            }
        }
    }
    Ok(())
}

pub fn canonical_json_value(v: &Value) -> Result<String> {
    let mut out = String::new();
    write_value(&mut out, v, 0)?;
    out.push('\n');
    Ok(out)
}

pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Report(e.to_string()))?;
    canonical_json_value(&v)
}

/// Re-emits a JSON document in canonical form.
pub fn recanonicalize(text: &str) -> Result<String> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
    canonical_json_value(&v)
}

pub const TRANSFER_HEADER: &str = "epsilon,target,method,accuracy,vae_clean_loss,vae_adv_loss,increase_rate";

/// One header line plus one row per cell.
pub fn transfer_csv(cells: &[TransferCell]) -> String {
    let mut s = String::from(TRANSFER_HEADER);
    s.push('\n');
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            format_float(c.epsilon),
            c.target,
            c.method,
            format_float(c.accuracy),
            format_float(c.vae_clean_loss),
            format_float(c.vae_adv_loss),
            format_float(c.increase_rate)
        );
    }
    s
}

/// `stage,epoch,loss`, one row per curve point.
pub fn stages_csv(stages: &[StageResult]) -> String {
    let mut s = String::from("stage,epoch,loss\n");
    for st in stages {
        for (e, l) in st.curve.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", st.stage, e + 1, format_float(*l));
        }
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `transfer.csv`, `stages.csv` and `timing.json`.
pub fn emit_report(report: &RunReport, timing: &Timing, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("report.json"), to_canonical_json(report)?.as_bytes())?;
    write(&out_dir.join("transfer.csv"), transfer_csv(&report.transfer).as_bytes())?;
    write(&out_dir.join("stages.csv"), stages_csv(&report.stages).as_bytes())?;
    let t = serde_json::to_string_pretty(timing).map_err(|e| Error::Report(e.to_string()))?;
    write(&out_dir.join("timing.json"), t.as_bytes())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

/// An RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Ppm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }
}

pub const SEPARATOR: usize = 2;
pub const SEPARATOR_GRAY: u8 = 128;

/// Grid with one row per image and one column per tensor of `columns`
/// (each `[N, C, H, W]` with `C` = 1 or 3), separated by 2-pixel gray
/// lines. The first `rows` images are drawn.
pub fn sample_grid(columns: &[&avic_tensor::Tensor<f32>], rows: usize) -> Result<Ppm> {
    let first = columns
        .first()
        .ok_or_else(|| Error::InvalidArgument("sample grid needs at least one column".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 || !(shape[1] == 1 || shape[1] == 3) {
        return Err(Error::InvalidArgument(format!(
            "sample images must be [N, 1|3, H, W], got {shape:?}"
        )));
    }
    if let Some(c) = columns.iter().find(|c| c.shape() != shape.as_slice()) {
        return Err(Error::InvalidArgument(format!(
            "column shapes differ: {:?} vs {shape:?}",
            c.shape()
        )));
    }
    let rows = rows.min(shape[0]);
    if rows == 0 {
        return Err(Error::InvalidArgument("sample grid needs at least one image".into()));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let cols = columns.len();
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut rgb = vec![SEPARATOR_GRAY; width * height * 3];
    for (ci, col) in columns.iter().enumerate() {
        let data = col.data();
        for r in 0..rows {
            let base = r * c * h * w;
            for y in 0..h {
                for x in 0..w {
                    let py = r * (h + SEPARATOR) + y;
                    let px = ci * (w + SEPARATOR) + x;
                    for ch in 0..3 {
                        let src = if c == 1 { 0 } else { ch };
                        let v = data[base + src * h * w + y * w + x];
                        rgb[(py * width + px) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(Ppm { width, height, rgb })
}
