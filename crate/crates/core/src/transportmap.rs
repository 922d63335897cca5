//! Polynomial transport maps `S_W(x) = W Phi(x)`.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg;
use crate::models::PriorModel;
use crate::polybasis::{BasisError, BasisSpec};
use crate::samples::{Provenance, SampleSet};
use crate::scalar::Scalar;

pub const MAP_FORMAT: &str = "bayesmap-transport-map";
pub const MAP_FORMAT_VERSION: u32 = 1;

/// Fraction of infeasible rows tolerated by [`TransportMap::push_samples`].
pub const PUSH_VIOLATION_LIMIT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("coefficient matrix must be {rows} x {cols}")]
    Shape { rows: usize, cols: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("map is infeasible on {violations} of {checked} rows")]
    InfeasibleRegion {
        violations: usize,
        checked: usize,
        pushed: Box<SampleSet>,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt map file: {0}")]
    CorruptFile(String),
    #[error("map file format mismatch: {0}")]
    FormatVersionMismatch(String),
}

/// What a fitted map was built for; lets a stored map regenerate its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFor {
    /// Source distribution the map expects its inputs from.
    pub source: Option<PriorModel>,
    /// Free-form description of the target.
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub n_checked: usize,
    pub n_violations: usize,
    pub min_det: f64,
    pub min_sym_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap<T = f64> {
    spec: BasisSpec<T>,
    w: Vec<T>,
    pub fitted_for: Option<FittedFor>,
}

impl<T: Scalar> TransportMap<T> {
    /// `w` is d x K row-major.
    pub fn new(spec: BasisSpec<T>, w: Vec<T>) -> Result<Self, MapError> {
        if w.len() != spec.dim * spec.len() {
            return Err(MapError::Shape {
                rows: spec.dim,
                cols: spec.len(),
            });
        }
        Ok(Self {
            spec,
            w,
            fitted_for: None,
        })
    }

    /// The map `S(x) = x`.
    pub fn identity(spec: BasisSpec<T>) -> Result<Self, MapError> {
        let w = spec.coordinate_expansion()?;
        Self::new(spec, w)
    }

    /// The same map in another scalar type, e.g. a fitted `f64` map
    /// evaluated in `f32`.
    pub fn cast<U: Scalar>(&self) -> TransportMap<U> {
        TransportMap {
            spec: self.spec.cast(),
            w: self.w.iter().map(|v| U::of(v.as_f64())).collect(),
            fitted_for: self.fitted_for.clone(),
        }
    }

    pub fn spec(&self) -> &BasisSpec<T> {
        &self.spec
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Number of basis functions K.
    pub fn n_basis(&self) -> usize {
        self.spec.len()
    }

    pub fn with_w(&self, w: Vec<T>) -> Result<Self, MapError> {
        let mut m = Self::new(self.spec.clone(), w)?;
        m.fitted_for = self.fitted_for.clone();
        Ok(m)
    }

    /// `S(x)` and `J_S(x)` (d x d row-major).
    pub fn apply_with_jacobian(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>), MapError> {
        let ev = self.spec.eval(x)?;
        let (d, k) = (self.dim(), self.n_basis());
        let y = linalg::matmul(&self.w, &ev.phi, d, k, 1);
        let j = linalg::matmul(&self.w, &ev.jac, d, k, d);
        Ok((y, j))
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>, MapError> {
        let ev = self.spec.eval(x)?;
        Ok(linalg::matmul(
            &self.w,
            &ev.phi,
            self.dim(),
            self.n_basis(),
            1,
        ))
    }

    pub fn jacobian(&self, x: &[T]) -> Result<Vec<T>, MapError> {
        Ok(self.apply_with_jacobian(x)?.1)
    }

    /// `det J > 0` and the symmetric part of `J` is positive definite.
    pub fn feasible_at(&self, x: &[T]) -> bool {
        match self.jacobian(x) {
            Ok(j) => jacobian_feasible(&j, self.dim()),
            Err(_) => false,
        }
    }

    pub fn feasibility_report(&self, samples: &SampleSet) -> FeasibilityReport {
        let d = self.dim();
        let stats: Vec<(bool, f64, f64)> = samples
            .data()
            .par_chunks_exact(d)
            .map(|row| {
                let x: Vec<T> = row.iter().map(|v| T::of(*v)).collect();
                match self.jacobian(&x) {
                    Ok(j) => {
                        let det = linalg::det(&j, d).as_f64();
                        let eig = linalg::min_sym_part_eigenvalue(&j, d).as_f64();
                        (det > 0.0 && eig > 0.0, det, eig)
                    }
                    Err(_) => (false, f64::NAN, f64::NAN),
                }
            })
            .collect();
        FeasibilityReport {
            n_checked: stats.len(),
            n_violations: stats.iter().filter(|s| !s.0).count(),
            min_det: stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min),
            min_sym_eig: stats.iter().map(|s| s.2).fold(f64::INFINITY, f64::min),
        }
    }

    /// Apply the map to every row. Rows are always pushed; if more than
    /// 0.1% of them are infeasible the pushed set is returned inside
    /// [`MapError::InfeasibleRegion`].
    pub fn push_samples(&self, samples: &SampleSet) -> Result<SampleSet, MapError> {
        let d = self.dim();
        if samples.dim() != d {
            return Err(BasisError::DimensionMismatch {
                expected: d,
                got: samples.dim(),
            }
            .into());
        }
        let rows: Vec<(Vec<f64>, bool)> = samples
            .data()
            .par_chunks_exact(d)
            .map(|row| {
                let x: Vec<T> = row.iter().map(|v| T::of(*v)).collect();
                match self.apply_with_jacobian(&x) {
                    Ok((y, j)) => (
                        y.iter().map(|v| v.as_f64()).collect(),
                        jacobian_feasible(&j, d),
                    ),
                    Err(_) => (vec![f64::NAN; d], false),
                }
            })
            .collect();
        let violations = rows.iter().filter(|r| !r.1).count();
        let data: Vec<f64> = rows.into_iter().flat_map(|r| r.0).collect();
        let pushed = SampleSet::new(
            d,
            data,
            Provenance {
                seed: samples.provenance.seed,
                source: format!("pushforward({})", samples.provenance.source),
                map_hash: Some(self.hash()),
            },
        );
        let checked = samples.len();
        if violations as f64 > PUSH_VIOLATION_LIMIT * checked as f64 {
            return Err(MapError::InfeasibleRegion {
                violations,
                checked,
                pushed: Box::new(pushed),
            });
        }
        Ok(pushed)
    }

    fn w_bytes(&self) -> Vec<u8> {
        self.w
            .iter()
            .flat_map(|v| v.as_f64().to_le_bytes())
            .collect()
    }

    /// Hex SHA-256 over the basis description and coefficients.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("basis serialises"));
        h.update(self.w_bytes());
        hex::encode(h.finalize())
    }

    /// Versioned, checksummed JSON form.
    pub fn to_json(&self) -> String {
        let w = B64.encode(self.w_bytes());
        let checksum =
            envelope_checksum(&self.spec, self.dim(), self.n_basis(), &w, &self.fitted_for);
        let env = Envelope {
            format: MAP_FORMAT.to_owned(),
            version: MAP_FORMAT_VERSION,
            spec: self.spec.clone(),
            rows: self.dim(),
            cols: self.n_basis(),
            w,
            fitted_for: self.fitted_for.clone(),
            checksum,
        };
        serde_json::to_string_pretty(&env).expect("map serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let env: Envelope<T> =
            serde_json::from_str(text).map_err(|e| MapError::CorruptFile(e.to_string()))?;
        if env.format != MAP_FORMAT || env.version != MAP_FORMAT_VERSION {
            return Err(MapError::FormatVersionMismatch(format!(
                "expected {MAP_FORMAT} v{MAP_FORMAT_VERSION}, found {} v{}",
                env.format, env.version
            )));
        }
        if env.spec.indices.len()
            != crate::polybasis::binomial(env.spec.max_total_degree + env.spec.dim, env.spec.dim)
            || env.spec.families.len() != env.spec.dim
        {
            return Err(MapError::FormatVersionMismatch(
                "basis description is inconsistent".into(),
            ));
        }
        if env.rows != env.spec.dim || env.cols != env.spec.len() {
            return Err(MapError::FormatVersionMismatch(format!(
                "coefficients are {} x {} but the basis needs {} x {}",
                env.rows,
                env.cols,
                env.spec.dim,
                env.spec.len()
            )));
        }
        let expected = envelope_checksum(&env.spec, env.rows, env.cols, &env.w, &env.fitted_for);
        if expected != env.checksum {
            return Err(MapError::CorruptFile("checksum mismatch".into()));
        }
        let bytes = B64
            .decode(&env.w)
            .map_err(|e| MapError::CorruptFile(e.to_string()))?;
        if bytes.len() != 8 * env.rows * env.cols {
            return Err(MapError::CorruptFile(
                "coefficient payload has the wrong length".into(),
            ));
        }
        let w = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let mut map = Self::new(env.spec, w)?;
        map.fitted_for = env.fitted_for;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json()).map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub(crate) fn jacobian_feasible<T: Scalar>(j: &[T], d: usize) -> bool {
    linalg::det(j, d) > T::zero() && linalg::min_sym_part_eigenvalue(j, d) > T::zero()
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Envelope<T> {
    format: String,
    version: u32,
    spec: BasisSpec<T>,
    rows: usize,
    cols: usize,
    w: String,
    #[serde(default)]
    fitted_for: Option<FittedFor>,
    checksum: String,
}

fn envelope_checksum<T: Serialize>(
    spec: &BasisSpec<T>,
    rows: usize,
    cols: usize,
    w: &str,
    fitted_for: &Option<FittedFor>,
) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("basis serialises"));
    h.update(format!("{rows}x{cols}:"));
    h.update(w.as_bytes());
    h.update(serde_json::to_vec(fitted_for).expect("descriptor serialises"));
    hex::encode(h.finalize())
}
