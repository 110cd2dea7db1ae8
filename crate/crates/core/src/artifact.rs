//! Versioned JSON form of a fitted [`FactorModel`].
//!
//! Matrices are stored row-major as `{rows, cols, data}`. Readers accept any
//! artifact whose major version is not newer than [`ARTIFACT_VERSION`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::error::{Error, Result};
use crate::factors::RankChoice;
use crate::mar::{Mar1Model, MarDiagnostics};
use crate::model::{FactorModel, FitConfig, Spectra};
use crate::scalar::{lit, to_f64, Real};
use crate::sieve::{SieveConfig, SieveFit};

pub const ARTIFACT_VERSION: &str = "1.0.0";
const FORMAT_TAG: &str = "stfactor-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixRecord {
    pub fn from_matrix<T: Real>(m: &DMatrix<T>) -> Self {
        let data = m.transpose().iter().map(|&x| to_f64(x)).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix<T: Real>(&self, what: &str) -> Result<DMatrix<T>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "{what}: {} values for a {}x{} matrix",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("{what}: non-finite entry")));
        }
        Ok(DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&x| lit(x))))
    }

    fn expect_shape<T: Real>(&self, what: &str, rows: usize, cols: usize) -> Result<DMatrix<T>> {
        if (self.rows, self.cols) != (rows, cols) {
            return Err(Error::Parse(format!("{what}: expected {rows}x{cols}, found {}x{}", self.rows, self.cols)));
        }
        self.to_matrix(what)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraRecord {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveRecord {
    pub config: SieveConfig,
    /// `J × d` coefficients.
    pub beta: MatrixRecord,
    pub residual_rms: Vec<f64>,
    pub ridge_used: bool,
    /// `None` when the design was numerically singular.
    pub condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarRecord {
    pub phi_r: MatrixRecord,
    pub phi_c: MatrixRecord,
    pub sigma_u: MatrixRecord,
    pub diagnostics: MarDiagnostics,
}

/// Serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: String,
    pub config: FitConfig,
    pub ranks: RankChoice,
    pub partition: Partition,
    pub coords: Vec<[f64; 2]>,
    pub variables: Vec<String>,
    pub times: Vec<i64>,
    pub a1_hat: MatrixRecord,
    pub a2_hat: MatrixRecord,
    pub a_hat: MatrixRecord,
    pub b_hat: MatrixRecord,
    pub w_hat: MatrixRecord,
    pub x_series: Vec<MatrixRecord>,
    pub spectra: SpectraRecord,
    pub means: Option<MatrixRecord>,
    pub x_mean: MatrixRecord,
    pub sieve: Option<SieveRecord>,
    pub mar: Option<MarRecord>,
}

fn vec_f64<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|&x| to_f64(x)).collect()
}

fn dvec<T: Real>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| lit(x)))
}

fn major(version: &str) -> Result<u64> {
    version
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| Error::Parse(format!("malformed artifact version {version:?}")))
}

impl ModelArtifact {
    pub fn from_model<T: Real>(m: &FactorModel<T>) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: ARTIFACT_VERSION.into(),
            config: m.config.clone(),
            ranks: m.ranks,
            partition: m.partition.clone(),
            coords: m.coords.iter().map(|c| [to_f64(c[0]), to_f64(c[1])]).collect(),
            variables: m.variables.clone(),
            times: m.times.clone(),
            a1_hat: MatrixRecord::from_matrix(&m.a1_hat),
            a2_hat: MatrixRecord::from_matrix(&m.a2_hat),
            a_hat: MatrixRecord::from_matrix(&m.a_hat),
            b_hat: MatrixRecord::from_matrix(&m.b_hat),
            w_hat: MatrixRecord::from_matrix(&m.w_hat),
            x_series: m.x_series.iter().map(MatrixRecord::from_matrix).collect(),
            spectra: SpectraRecord {
                a1: vec_f64(&m.spectra.a1),
                a2: vec_f64(&m.spectra.a2),
                b: vec_f64(&m.spectra.b),
                psi: vec_f64(&m.spectra.psi),
            },
            means: m.means.as_ref().map(MatrixRecord::from_matrix),
            x_mean: MatrixRecord::from_matrix(&m.x_mean),
            sieve: m.sieve.as_ref().map(|s| SieveRecord {
                config: s.config.clone(),
                beta: MatrixRecord::from_matrix(&s.beta),
                residual_rms: s.residual_rms.iter().map(|&x| to_f64(x)).collect(),
                ridge_used: s.ridge_used,
                condition: s.condition.is_finite().then_some(s.condition),
            }),
            mar: m.mar.as_ref().map(|mar| MarRecord {
                phi_r: MatrixRecord::from_matrix(&mar.phi_r),
                phi_c: MatrixRecord::from_matrix(&mar.phi_c),
                sigma_u: MatrixRecord::from_matrix(&mar.sigma_u),
                diagnostics: mar.diagnostics.clone(),
            }),
        }
    }

    /// Rebuilds the model, checking the version and every shape.
    pub fn into_model<T: Real>(self) -> Result<FactorModel<T>> {
        if self.format != FORMAT_TAG {
            return Err(Error::Parse(format!("not a model artifact (format {:?})", self.format)));
        }
        if major(&self.version)? > major(ARTIFACT_VERSION)? {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let n = self.coords.len();
        let p = self.variables.len();
        let t = self.times.len();
        let (d, r) = (self.ranks.d, self.ranks.r);
        self.partition.validate(n).map_err(|e| Error::Parse(e.to_string()))?;
        if self.x_series.len() != t {
            return Err(Error::Parse(format!("{} factor matrices for {t} times", self.x_series.len())));
        }
        let x_series = self
            .x_series
            .iter()
            .map(|x| x.expect_shape("factor", d, r))
            .collect::<Result<Vec<_>>>()?;
        let sieve = match self.sieve {
            Some(s) => {
                let j = s.config.n_basis();
                Some(SieveFit {
                    beta: s.beta.expect_shape("sieve coefficients", j, d)?,
                    residual_rms: s.residual_rms.iter().map(|&x| lit(x)).collect(),
                    ridge_used: s.ridge_used,
                    condition: s.condition.unwrap_or(f64::INFINITY),
                    config: s.config,
                })
            }
            None => None,
        };
        let mar = match self.mar {
            Some(m) => Some(Mar1Model {
                phi_r: m.phi_r.expect_shape("row coefficient", d, d)?,
                phi_c: m.phi_c.expect_shape("column coefficient", r, r)?,
                sigma_u: m.sigma_u.expect_shape("innovation covariance", d * r, d * r)?,
                diagnostics: m.diagnostics,
            }),
            None => None,
        };
        Ok(FactorModel {
            config: self.config,
            ranks: self.ranks,
            coords: self.coords.iter().map(|c| [lit(c[0]), lit(c[1])]).collect(),
            a1_hat: self.a1_hat.expect_shape("first set loadings", self.partition.n1(), d)?,
            a2_hat: self.a2_hat.expect_shape("second set loadings", self.partition.n2(), d)?,
            partition: self.partition,
            variables: self.variables,
            times: self.times,
            a_hat: self.a_hat.expect_shape("spatial loadings", n, d)?,
            b_hat: self.b_hat.expect_shape("variable loadings", p, r)?,
            w_hat: self.w_hat.expect_shape("factor block", d, r * t)?,
            x_series,
            spectra: Spectra {
                a1: dvec(&self.spectra.a1),
                a2: dvec(&self.spectra.a2),
                b: dvec(&self.spectra.b),
                psi: dvec(&self.spectra.psi),
            },
            means: self.means.map(|m| m.expect_shape("means", n, p)).transpose()?,
            x_mean: self.x_mean.expect_shape("mean factor", d, r)?,
            sieve,
            mar,
        })
    }
}

pub fn write_model<T: Real, W: Write>(model: &FactorModel<T>, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, &ModelArtifact::from_model(model))?;
    Ok(())
}

pub fn read_model<T: Real, R: Read>(r: R) -> Result<FactorModel<T>> {
    let art: ModelArtifact = serde_json::from_reader(r)?;
    art.into_model()
}

pub fn save_model<T: Real>(model: &FactorModel<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<FactorModel<T>> {
    read_model(BufReader::new(File::open(path)?))
}
