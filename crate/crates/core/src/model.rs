//! The fitted model and the end-to-end estimation pipeline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{partition_locations, Partition, PartitionStrategy, StDataset};
use crate::error::{Error, Result};
use crate::factors::{
    estimate_factors, estimate_loadings, estimate_signals, reestimate_unified, LoadingEstimates, RankChoice, RankSpec,
};
use crate::linalg::left_pinv;
use crate::mar::{fit_mar1, Mar1Model, MarConfig};
use crate::moments::{spatial_moments, temporal_moments};
use crate::sieve::{default_knots, fit_loading_functions, Rect, SieveConfig, SieveFit};
use crate::scalar::Real;

/// Which optional sieve settings to use; unset fields take data-driven defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveOptions {
    pub degree: usize,
    pub knots_per_dim: Option<usize>,
    pub domain: Option<Rect>,
    pub allow_ridge: bool,
}

impl Default for SieveOptions {
    fn default() -> Self {
        Self { degree: 3, knots_per_dim: None, domain: None, allow_ridge: true }
    }
}

impl SieveOptions {
    pub fn resolve<T: Real>(&self, coords: &[[T; 2]]) -> Result<SieveConfig> {
        let domain = match self.domain {
            Some(d) => d,
            None => Rect::bounding(coords, 0.01)?,
        };
        let knots = self.knots_per_dim.unwrap_or_else(|| default_knots(coords.len(), self.degree));
        let mut cfg = SieveConfig::new(self.degree, knots, domain)?;
        cfg.allow_ridge = self.allow_ridge;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub d: RankSpec,
    pub r: RankSpec,
    /// Largest lag in the variable moment.
    pub h0: usize,
    /// Seed of the random location split.
    pub seed: u64,
    /// User-supplied split; replaces the random one.
    pub partition: Option<Partition>,
    /// `None` skips the loading-function fit.
    pub sieve: Option<SieveOptions>,
    /// `None` skips the factor dynamics fit.
    pub mar: Option<MarConfig>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            d: RankSpec::Auto,
            r: RankSpec::Auto,
            h0: 2,
            seed: 0,
            partition: None,
            sieve: Some(SieveOptions::default()),
            mar: Some(MarConfig::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Spectra<T: Real> {
    pub a1: DVector<T>,
    pub a2: DVector<T>,
    pub b: DVector<T>,
    /// Leading spectrum of the normalized Gram matrix of `Ψ`.
    pub psi: DVector<T>,
}

/// Output of [`fit`]: loadings, factors and the optional dynamics and
/// loading-function fits.
#[derive(Debug, Clone)]
pub struct FactorModel<T: Real> {
    pub config: FitConfig,
    pub ranks: RankChoice,
    pub partition: Partition,
    pub coords: Vec<[T; 2]>,
    pub variables: Vec<String>,
    pub times: Vec<i64>,
    /// First-stage loadings of the two location sets.
    pub a1_hat: DMatrix<T>,
    pub a2_hat: DMatrix<T>,
    /// `n × d` unified spatial loadings.
    pub a_hat: DMatrix<T>,
    /// `p × r` variable loadings with orthonormal columns.
    pub b_hat: DMatrix<T>,
    /// `d × rT` factor block matrix.
    pub w_hat: DMatrix<T>,
    pub x_series: Vec<DMatrix<T>>,
    pub spectra: Spectra<T>,
    /// Temporal means removed before fitting (`n × p`), if the input was raw.
    pub means: Option<DMatrix<T>>,
    /// Factor-space representation of the temporal mean, `d × r`.
    pub x_mean: DMatrix<T>,
    pub sieve: Option<SieveFit<T>>,
    pub mar: Option<Mar1Model<T>>,
}

impl<T: Real> FactorModel<T> {
    pub fn d(&self) -> usize {
        self.ranks.d
    }

    pub fn r(&self) -> usize {
        self.ranks.r
    }

    pub fn n_locations(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn n_variables(&self) -> usize {
        self.b_hat.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.x_series.len()
    }

    /// Re-estimated centered signal `Â X̂_t B̂'`.
    pub fn signal(&self, t: usize) -> DMatrix<T> {
        &self.a_hat * &self.x_series[t] * self.b_hat.transpose()
    }

    pub fn signals(&self) -> Vec<DMatrix<T>> {
        (0..self.n_times()).map(|t| self.signal(t)).collect()
    }

    /// Low-rank estimate of the temporal mean, `Â X̄ B̂'`.
    pub fn mean_signal(&self) -> DMatrix<T> {
        &self.a_hat * &self.x_mean * self.b_hat.transpose()
    }
}

/// A fitted model plus the first-stage signal estimates it was built from.
#[derive(Debug, Clone)]
pub struct FitOutput<T: Real> {
    pub model: FactorModel<T>,
    pub loadings: LoadingEstimates<T>,
    /// First-stage centered signals, rows in location order.
    pub first_stage: Vec<DMatrix<T>>,
}

/// Fits the full pipeline on raw or centered data.
pub fn fit<T: Real>(ds: &StDataset<T>, cfg: &FitConfig) -> Result<FactorModel<T>> {
    fit_detailed(ds, cfg).map(|o| o.model)
}

pub fn fit_detailed<T: Real>(ds: &StDataset<T>, cfg: &FitConfig) -> Result<FitOutput<T>> {
    let centered = if ds.is_centered() { ds.clone() } else { ds.center()? };
    let strategy = match &cfg.partition {
        Some(p) => PartitionStrategy::Provided(p.clone()),
        None => PartitionStrategy::RandomBalanced,
    };
    let partition = partition_locations(&centered, &strategy, cfg.seed)?;
    let moments = spatial_moments(&centered, &partition)?;
    let tmom = temporal_moments(&centered, cfg.h0)?;
    let loadings = estimate_loadings(&moments, &tmom, cfg.d, cfg.r)?;
    partition.check_rank(loadings.d())?;

    let factors = estimate_factors(&centered, &loadings)?;
    let first_stage = estimate_signals(&centered, &loadings, &factors)?;
    let unified = reestimate_unified(&first_stage, &loadings.b_hat, loadings.d())?;

    let coords = centered.coords();
    let x_mean = match centered.means() {
        Some(m) => left_pinv(&unified.a_hat)? * m * &loadings.b_hat,
        None => DMatrix::zeros(loadings.d(), loadings.r()),
    };
    let sieve = match &cfg.sieve {
        Some(opts) => Some(fit_loading_functions(&unified.a_hat, &coords, &opts.resolve(&coords)?)?),
        None => None,
    };
    let mar = match &cfg.mar {
        Some(mc) => Some(fit_mar1(&unified.x_series, mc)?),
        None => None,
    };

    let model = FactorModel {
        config: cfg.clone(),
        ranks: loadings.ranks,
        partition,
        coords,
        variables: centered.variables().to_vec(),
        times: centered.times().to_vec(),
        a1_hat: loadings.a1_hat.clone(),
        a2_hat: loadings.a2_hat.clone(),
        a_hat: unified.a_hat,
        b_hat: loadings.b_hat.clone(),
        w_hat: unified.w_hat,
        x_series: unified.x_series,
        spectra: Spectra {
            a1: loadings.eigvals_a1.clone(),
            a2: loadings.eigvals_a2.clone(),
            b: loadings.eigvals_b.clone(),
            psi: unified.eigvals,
        },
        means: centered.means().cloned(),
        x_mean,
        sieve,
        mar,
    };
    Ok(FitOutput { model, loadings, first_stage })
}

/// Checks that a dataset matches the model's location and variable layout.
pub fn check_compatible<T: Real>(model: &FactorModel<T>, ds: &StDataset<T>) -> Result<()> {
    if ds.n_locations() != model.n_locations() || ds.n_variables() != model.n_variables() {
        return Err(Error::ShapeMismatch(format!(
            "dataset is {}x{}, model expects {}x{}",
            ds.n_locations(),
            ds.n_variables(),
            model.n_locations(),
            model.n_variables()
        )));
    }
    Ok(())
}
