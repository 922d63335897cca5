//! Immutable n x d sample matrices with provenance, and their CSV form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Where a sample set came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub source: String,
    pub map_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
}

impl SampleSet {
    /// Wrap row-major data. Panics if `data.len()` is not a multiple of `dim`.
    pub fn new(dim: usize, data: Vec<f64>, provenance: Provenance) -> Self {
        assert!(
            dim > 0 && data.len() % dim == 0,
            "sample data is not n x {dim}"
        );
        Self {
            dim,
            data,
            provenance,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Self {
        let dim = rows.first().map_or(1, Vec::len);
        Self::new(dim, rows.concat(), provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, a: usize) -> Vec<f64> {
        self.rows().map(|r| r[a]).collect()
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> SampleSet {
        let n = n.min(self.len());
        SampleSet::new(
            self.dim,
            self.data[..n * self.dim].to_vec(),
            self.provenance.clone(),
        )
    }

    /// CSV text with header `x1,...,xd`; values use the shortest round-trip
    /// decimal form, so parsing the text back is bit-exact.
    pub fn to_csv_string(&self) -> String {
        let mut s = (1..=self.dim)
            .map(|a| format!("x{a}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for r in self.rows() {
            for (a, v) in r.iter().enumerate() {
                if a > 0 {
                    s.push(',');
                }
                write!(s, "{v:?}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    /// Sidecar path for a CSV file: `samples.csv` -> `samples.csv.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Write the CSV plus a JSON sidecar `{seed, source, map_hash}`.
    pub fn write_csv(&self, path: &Path) -> Result<(), SampleIoError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| SampleIoError::Write {
            path: path.to_owned(),
            source,
        })?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.provenance).expect("provenance serialises");
        std::fs::write(&side, json).map_err(|source| SampleIoError::Write { path: side, source })
    }

    /// Read a CSV written by [`SampleSet::write_csv`]; the sidecar is optional.
    pub fn read_csv(path: &Path) -> Result<SampleSet, SampleIoError> {
        let text = std::fs::read_to_string(path).map_err(|source| SampleIoError::Read {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |line: usize, message: String| SampleIoError::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let dim = header.split(',').count();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| parse_err(i + 2, e.to_string()))?;
            if vals.len() != dim {
                return Err(parse_err(
                    i + 2,
                    format!("expected {dim} fields, got {}", vals.len()),
                ));
            }
            data.extend(vals);
        }
        let provenance = std::fs::read_to_string(Self::sidecar_path(path))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        Ok(SampleSet::new(dim, data, provenance))
    }
}
