//! Trace storage: one CSV per chain plus a run manifest.
//!
//! Trace columns are `iteration`, the named coefficients of every disease,
//! the initial-distribution components, and one accept flag per disease
//! block. Floats are written in shortest round-trip form so identical runs
//! produce identical bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::ModelSpec;
use crate::error::{Error, Result};

/// Retained samples of every coefficient block and initial distribution for
/// one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain_index: usize,
    pub seed: u64,
    /// Column names: all beta coefficients (disease-prefixed), then pi
    /// components.
    pub param_names: Vec<String>,
    pub disease_names: Vec<String>,
    pub iterations: Vec<u64>,
    /// Row-major retained samples, one row per retained iteration.
    pub samples: Vec<Vec<f64>>,
    /// Per retained iteration, per disease block: was the proposal accepted.
    pub accepted: Vec<Vec<bool>>,
    /// Final acceptance rate per disease block over the whole run.
    pub acceptance_rates: Vec<f64>,
    /// Proposals rejected because the posterior was minus infinity.
    pub infinite_rejections: Vec<u64>,
}

impl ChainTrace {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[idx]).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Full trace column order for a model: beta blocks then pi blocks.
pub fn trace_param_names(model: &ModelSpec) -> Vec<String> {
    let mut names = Vec::new();
    for (d, spec) in model.diseases().iter().enumerate() {
        for coef in model.layout(d).names() {
            names.push(format!("{}.{coef}", spec.name()));
        }
    }
    for spec in model.diseases() {
        for state in 1..=spec.n_states() {
            names.push(format!("{}.pi{state}", spec.name()));
        }
    }
    names
}

pub(crate) struct TraceWriter {
    out: std::io::BufWriter<std::fs::File>,
    n_diseases: usize,
}

impl TraceWriter {
    pub fn create(path: &Path, param_names: &[String], disease_names: &[String]) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "iteration")?;
        for name in param_names {
            write!(out, ",{name}")?;
        }
        for d in disease_names {
            write!(out, ",accept.{d}")?;
        }
        writeln!(out)?;
        Ok(Self {
            out,
            n_diseases: disease_names.len(),
        })
    }

    pub fn row(&mut self, iteration: u64, values: &[f64], accepted: &[bool]) -> Result<()> {
        debug_assert_eq!(accepted.len(), self.n_diseases);
        write!(self.out, "{iteration}")?;
        for v in values {
            write!(self.out, ",{v}")?;
        }
        for &a in accepted {
            write!(self.out, ",{}", u8::from(a))?;
        }
        writeln!(self.out)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a trace written by `TraceWriter`.
pub fn read_trace(path: &Path) -> Result<ChainTrace> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty trace", path.display())))?
        .map_err(Error::Io)?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"iteration") {
        return Err(Error::Schema("trace must start with an iteration column".into()));
    }
    let accept_start = columns
        .iter()
        .position(|c| c.starts_with("accept."))
        .unwrap_or(columns.len());
    let param_names: Vec<String> = columns[1..accept_start].iter().map(|s| s.to_string()).collect();
    let disease_names: Vec<String> = columns[accept_start..]
        .iter()
        .map(|c| c.trim_start_matches("accept.").to_string())
        .collect();

    let mut iterations = Vec::new();
    let mut samples = Vec::new();
    let mut accepted = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                columns.len()
            )));
        }
        let iter: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Schema(format!("bad iteration at row {}", i + 2)))?;
        let values: std::result::Result<Vec<f64>, _> =
            fields[1..accept_start].iter().map(|f| f.parse()).collect();
        let flags: std::result::Result<Vec<u8>, _> =
            fields[accept_start..].iter().map(|f| f.parse()).collect();
        iterations.push(iter);
        samples.push(values.map_err(|_| Error::Schema(format!("bad value at row {}", i + 2)))?);
        accepted.push(
            flags
                .map_err(|_| Error::Schema(format!("bad accept flag at row {}", i + 2)))?
                .into_iter()
                .map(|f| f != 0)
                .collect(),
        );
    }
    Ok(ChainTrace {
        chain_index: 0,
        seed: 0,
        param_names,
        disease_names,
        iterations,
        samples,
        accepted,
        acceptance_rates: Vec::new(),
        infinite_rejections: Vec::new(),
    })
}

/// Run metadata persisted next to the traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub wall_time_secs: f64,
    pub chains: Vec<ChainManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainManifest {
    pub index: usize,
    pub seed: u64,
    pub file: Option<PathBuf>,
    pub acceptance_rates: BTreeMap<String, f64>,
    pub infinite_rejections: BTreeMap<String, u64>,
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}
