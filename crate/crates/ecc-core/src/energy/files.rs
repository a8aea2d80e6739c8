//! Text formats for energy artifacts: the measurement profile table, the
//! fitted model file, and the exchange payload handed to external
//! measurement commands.
//!
//! All floats are written with Rust's shortest round-trip formatting, so
//! files regenerate byte-identically from identical inputs and re-parse to
//! the exact same values.

use super::{BilinearEnergyModel, EnergyError, EnergySample, SparsityVector};
use std::fmt::Write as _;
use std::path::Path;

pub const PROFILE_FORMAT_VERSION: u32 = 1;

/// A persisted set of `(s, energy)` measurements plus the provenance needed
/// to reproduce or resume the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub layer_names: Vec<String>,
    pub output_dim: usize,
    pub seed: u64,
    pub trials: u32,
    pub config_hash: String,
    pub samples: Vec<EnergySample>,
}

impl Profile {
    pub fn header_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# ecc profile v{PROFILE_FORMAT_VERSION}").unwrap();
        writeln!(out, "# config {}", self.config_hash).unwrap();
        writeln!(out, "# seed {}", self.seed).unwrap();
        writeln!(out, "# trials {}", self.trials).unwrap();
        writeln!(out, "# output_dim {}", self.output_dim).unwrap();
        for name in &self.layer_names {
            write!(out, "s[{name}] ").unwrap();
        }
        writeln!(out, "s_out energy trials stdev").unwrap();
        out
    }

    pub fn row_text(sample: &EnergySample) -> String {
        let mut out = String::new();
        for v in sample.s.layers() {
            write!(out, "{v} ").unwrap();
        }
        writeln!(
            out,
            "{} {} {} {}",
            sample.s.output_dim(),
            sample.energy,
            sample.trials,
            sample.stdev
        )
        .unwrap();
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_text();
        for sample in &self.samples {
            out.push_str(&Self::row_text(sample));
        }
        out
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> EnergyError {
    EnergyError::Parse {
        line,
        message: message.into(),
    }
}

fn io_err(context: &str, source: std::io::Error) -> EnergyError {
    EnergyError::Io {
        context: context.to_string(),
        source,
    }
}

pub fn write_profile(path: &Path, profile: &Profile) -> Result<(), EnergyError> {
    std::fs::write(path, profile.to_text())
        .map_err(|e| io_err(&format!("writing profile {}", path.display()), e))
}

pub fn read_profile(path: &Path) -> Result<Profile, EnergyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_err(&format!("reading profile {}", path.display()), e))?;
    parse_profile(&text)
}

pub fn parse_profile(text: &str) -> Result<Profile, EnergyError> {
    let mut layer_names: Vec<String> = Vec::new();
    let mut output_dim = 0usize;
    let mut seed = 0u64;
    let mut trials = 0u32;
    let mut config_hash = String::new();
    let mut samples = Vec::new();
    let mut saw_header_row = false;

    for (lineno, raw) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("config ") {
                config_hash = v.trim().to_string();
            } else if let Some(v) = rest.strip_prefix("seed ") {
                seed = v.trim().parse().map_err(|_| parse_err(n, "bad seed"))?;
            } else if let Some(v) = rest.strip_prefix("trials ") {
                trials = v.trim().parse().map_err(|_| parse_err(n, "bad trials"))?;
            } else if let Some(v) = rest.strip_prefix("output_dim ") {
                output_dim = v.trim().parse().map_err(|_| parse_err(n, "bad output_dim"))?;
            }
            continue;
        }
        if !saw_header_row {
            // column header: s[name]... s_out energy trials stdev
            for tok in line.split_whitespace() {
                if let Some(name) = tok.strip_prefix("s[").and_then(|t| t.strip_suffix(']')) {
                    layer_names.push(name.to_string());
                }
            }
            if layer_names.is_empty() {
                return Err(parse_err(n, "expected column header naming layers"));
            }
            saw_header_row = true;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let expected = layer_names.len() + 4;
        if fields.len() != expected {
            return Err(parse_err(
                n,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let mut layers = Vec::with_capacity(layer_names.len());
        for f in &fields[..layer_names.len()] {
            layers.push(f.parse().map_err(|_| parse_err(n, "bad sparsity value"))?);
        }
        let out: usize = fields[layer_names.len()]
            .parse()
            .map_err(|_| parse_err(n, "bad s_out"))?;
        let energy: f64 = fields[layer_names.len() + 1]
            .parse()
            .map_err(|_| parse_err(n, "bad energy"))?;
        let row_trials: u32 = fields[layer_names.len() + 2]
            .parse()
            .map_err(|_| parse_err(n, "bad trials"))?;
        let stdev: f64 = fields[layer_names.len() + 3]
            .parse()
            .map_err(|_| parse_err(n, "bad stdev"))?;
        if energy <= 0.0 {
            return Err(EnergyError::NonPositiveEnergy(energy));
        }
        samples.push(EnergySample {
            s: SparsityVector::new(layers, out),
            energy,
            trials: row_trials,
            stdev,
        });
    }
    if !saw_header_row {
        return Err(parse_err(0, "missing column header"));
    }
    Ok(Profile {
        layer_names,
        output_dim,
        seed,
        trials,
        config_hash,
        samples,
    })
}

/// Fitted model plus the constants and provenance required to reproduce the
/// fit and to interpret the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModelFile {
    pub model: BilinearEnergyModel,
    pub output_dim: usize,
    pub feature_means: Vec<f64>,
    pub energy_scale: f64,
    pub seed: u64,
    pub iterations: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub config_hash: String,
}

impl EnergyModelFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# ecc energy-model v1").unwrap();
        writeln!(out, "# config {}", self.config_hash).unwrap();
        writeln!(out, "layers {}", self.model.num_layers()).unwrap();
        writeln!(out, "output_dim {}", self.output_dim).unwrap();
        writeln!(out, "a0 {}", self.model.a0()).unwrap();
        write!(out, "a").unwrap();
        for v in self.model.coefficients() {
            write!(out, " {v}").unwrap();
        }
        writeln!(out).unwrap();
        write!(out, "feature_means").unwrap();
        for v in &self.feature_means {
            write!(out, " {v}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "energy_scale {}", self.energy_scale).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "iterations {}", self.iterations).unwrap();
        writeln!(out, "train_error {}", self.train_error).unwrap();
        writeln!(out, "test_error {}", self.test_error).unwrap();
        out
    }
}

pub fn write_model_file(path: &Path, file: &EnergyModelFile) -> Result<(), EnergyError> {
    std::fs::write(path, file.to_text())
        .map_err(|e| io_err(&format!("writing model file {}", path.display()), e))
}

pub fn read_model_file(path: &Path) -> Result<EnergyModelFile, EnergyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_err(&format!("reading model file {}", path.display()), e))?;
    parse_model_file(&text)
}

fn parse_model_file(text: &str) -> Result<EnergyModelFile, EnergyError> {
    let mut layers = None;
    let mut output_dim = 0usize;
    let mut a0 = None;
    let mut a: Option<Vec<f64>> = None;
    let mut feature_means = Vec::new();
    let mut energy_scale = 1.0;
    let mut seed = 0u64;
    let mut iterations = 0usize;
    let mut train_error = 0.0;
    let mut test_error = 0.0;
    let mut config_hash = String::new();

    for (lineno, raw) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("config ") {
                config_hash = v.trim().to_string();
            }
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parse_f64s = |s: &str| -> Result<Vec<f64>, EnergyError> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| parse_err(n, "bad float")))
                .collect()
        };
        match key {
            "layers" => layers = Some(rest.trim().parse().map_err(|_| parse_err(n, "bad layers"))?),
            "output_dim" => {
                output_dim = rest.trim().parse().map_err(|_| parse_err(n, "bad output_dim"))?
            }
            "a0" => a0 = Some(rest.trim().parse().map_err(|_| parse_err(n, "bad a0"))?),
            "a" => a = Some(parse_f64s(rest)?),
            "feature_means" => feature_means = parse_f64s(rest)?,
            "energy_scale" => {
                energy_scale = rest.trim().parse().map_err(|_| parse_err(n, "bad scale"))?
            }
            "seed" => seed = rest.trim().parse().map_err(|_| parse_err(n, "bad seed"))?,
            "iterations" => {
                iterations = rest.trim().parse().map_err(|_| parse_err(n, "bad iterations"))?
            }
            "train_error" => {
                train_error = rest.trim().parse().map_err(|_| parse_err(n, "bad train_error"))?
            }
            "test_error" => {
                test_error = rest.trim().parse().map_err(|_| parse_err(n, "bad test_error"))?
            }
            other => return Err(parse_err(n, format!("unknown key {other:?}"))),
        }
    }
    let layers: usize = layers.ok_or_else(|| parse_err(0, "missing layers"))?;
    let a0 = a0.ok_or_else(|| parse_err(0, "missing a0"))?;
    let a = a.ok_or_else(|| parse_err(0, "missing a"))?;
    if a.len() != layers {
        return Err(parse_err(0, "coefficient count does not match layers"));
    }
    Ok(EnergyModelFile {
        model: BilinearEnergyModel::new(a0, a),
        output_dim,
        feature_means,
        energy_scale,
        seed,
        iterations,
        train_error,
        test_error,
        config_hash,
    })
}

/// Renders the payload sent to an external measurement command: the
/// architecture description followed by the integer sparsity assignment.
pub fn render_exchange(arch_text: &str, s: &SparsityVector) -> String {
    let mut out = String::from("ecc-exchange v1\n");
    out.push_str(arch_text);
    if !arch_text.ends_with('\n') {
        out.push('\n');
    }
    out.push('s');
    for v in s.layers() {
        write!(out, " {}", v.floor() as i64).unwrap();
    }
    out.push('\n');
    writeln!(out, "s_out {}", s.output_dim()).unwrap();
    out
}

/// Parses an exchange payload back into its architecture text and sparsity
/// vector (the inverse of [`render_exchange`]).
pub fn parse_exchange(text: &str) -> Result<(String, SparsityVector), EnergyError> {
    let mut arch = String::new();
    let mut layers: Option<Vec<f64>> = None;
    let mut output_dim: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = raw.trim_end();
        if n == 1 {
            if line != "ecc-exchange v1" {
                return Err(parse_err(n, "missing exchange magic"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("s_out ") {
            output_dim = Some(rest.trim().parse().map_err(|_| parse_err(n, "bad s_out"))?);
        } else if let Some(rest) = line.strip_prefix("s ") {
            let vals = rest
                .split_whitespace()
                .map(|t| t.parse::<i64>().map(|v| v as f64))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| parse_err(n, "bad sparsity entry"))?;
            layers = Some(vals);
        } else {
            arch.push_str(line);
            arch.push('\n');
        }
    }
    let layers = layers.ok_or_else(|| parse_err(0, "missing s line"))?;
    let output_dim = output_dim.ok_or_else(|| parse_err(0, "missing s_out line"))?;
    Ok((arch, SparsityVector::new(layers, output_dim)))
}
