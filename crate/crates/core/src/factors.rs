//! Loading and factor estimation from the moment matrices, followed by the
//! unified re-estimation of the full spatial loading matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Partition, StDataset};
use crate::error::{Error, Result};
use crate::linalg::{fix_sign, select_rows, symmetric_eigen_desc, transpose_mul};
use crate::moments::{SpatialMomentPair, TemporalMoment};
use crate::scalar::{from_usize, lit, Real};

/// Relative floor applied to eigenvalue-ratio denominators.
pub const RATIO_FLOOR: f64 = 1e-12;

/// How a rank is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    #[default]
    Auto,
    Fixed(usize),
}

/// Eigenvalue-ratio rank: `argmin_{1<=i<=kmax} λ_{i+1}/λ_i`, ties toward the
/// smaller index.
pub fn select_rank<T: Real>(spectrum: &[T], kmax: usize) -> Result<usize> {
    let lead = spectrum.first().copied().unwrap_or_else(T::zero);
    if lead <= T::zero() {
        return Err(Error::AllZeroSpectrum);
    }
    let kmax = kmax.clamp(1, spectrum.len().saturating_sub(1).max(1));
    if spectrum.len() < 2 {
        return Ok(1);
    }
    let floor = lead * lit(RATIO_FLOOR);
    // both ends floored: eigenvalues at rounding level (or slightly negative)
    // must not produce spurious zero ratios past the true rank
    let clip = |v: T| v.max(floor);
    let mut best = (1, T::max_value().unwrap_or_else(|| lit(f64::MAX)));
    for i in 1..=kmax {
        let ratio = clip(spectrum[i]) / clip(spectrum[i - 1]);
        if ratio < best.1 {
            best = (i, ratio);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankChoice {
    /// Rank used for the spatial loadings.
    pub d: usize,
    pub r: usize,
    /// Ranks suggested by each location set and by the variable moment when
    /// selection was automatic.
    pub d_set1: Option<usize>,
    pub d_set2: Option<usize>,
    pub r_auto: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LoadingEstimates<T: Real> {
    pub a1_hat: DMatrix<T>,
    pub a2_hat: DMatrix<T>,
    pub b_hat: DMatrix<T>,
    pub eigvals_a1: DVector<T>,
    pub eigvals_a2: DVector<T>,
    pub eigvals_b: DVector<T>,
    pub ranks: RankChoice,
    pub partition: Partition,
}

impl<T: Real> LoadingEstimates<T> {
    pub fn d(&self) -> usize {
        self.ranks.d
    }

    pub fn r(&self) -> usize {
        self.ranks.r
    }
}

pub fn estimate_loadings<T: Real>(
    mom: &SpatialMomentPair<T>,
    tmom: &TemporalMoment<T>,
    d: RankSpec,
    r: RankSpec,
) -> Result<LoadingEstimates<T>> {
    let e1 = symmetric_eigen_desc(&mom.m_a1);
    let e2 = symmetric_eigen_desc(&mom.m_a2);
    let eb = symmetric_eigen_desc(&tmom.m_b);
    let dim_a = mom.m_a1.nrows().min(mom.m_a2.nrows());
    let p = tmom.m_b.nrows();

    let (d, d_set1, d_set2) = match d {
        RankSpec::Fixed(k) => (k, None, None),
        RankSpec::Auto => {
            let kmax = (dim_a / 2).max(1);
            let k1 = select_rank(e1.values.as_slice(), kmax)?;
            let k2 = select_rank(e2.values.as_slice(), kmax)?;
            if k1 != k2 {
                log::warn!("location sets suggest different spatial ranks ({k1} vs {k2}); using {}", k1.max(k2));
            }
            (k1.max(k2), Some(k1), Some(k2))
        }
    };
    let (r, r_auto) = match r {
        RankSpec::Fixed(k) => (k, None),
        RankSpec::Auto => {
            let k = select_rank(eb.values.as_slice(), (p / 2).max(1))?;
            (k, Some(k))
        }
    };
    if d == 0 || d > dim_a {
        return Err(Error::RankExceedsDim { rank: d, dim: dim_a });
    }
    if r == 0 || r > p {
        return Err(Error::RankExceedsDim { rank: r, dim: p });
    }

    Ok(LoadingEstimates {
        a1_hat: e1.vectors.columns(0, d).into_owned(),
        a2_hat: e2.vectors.columns(0, d).into_owned(),
        b_hat: eb.vectors.columns(0, r).into_owned(),
        eigvals_a1: e1.values,
        eigvals_a2: e2.values,
        eigvals_b: eb.values,
        ranks: RankChoice { d, r, d_set1, d_set2, r_auto },
        partition: mom.partition.clone(),
    })
}

/// Factor matrices seen through each location set.
#[derive(Debug, Clone)]
pub struct FactorSeries<T: Real> {
    pub x_hat: Vec<DMatrix<T>>,
    pub x_star_hat: Vec<DMatrix<T>>,
}

fn check_shapes<T: Real>(ds: &StDataset<T>, le: &LoadingEstimates<T>) -> Result<()> {
    let part = &le.partition;
    if part.set1.len() + part.set2.len() != ds.n_locations() {
        return Err(Error::ShapeMismatch(format!(
            "partition covers {} locations, dataset has {}",
            part.set1.len() + part.set2.len(),
            ds.n_locations()
        )));
    }
    if le.a1_hat.nrows() != part.n1() || le.a2_hat.nrows() != part.n2() {
        return Err(Error::ShapeMismatch("loading rows do not match partition sizes".into()));
    }
    if le.b_hat.nrows() != ds.n_variables() {
        return Err(Error::ShapeMismatch(format!(
            "variable loading has {} rows, dataset has {} variables",
            le.b_hat.nrows(),
            ds.n_variables()
        )));
    }
    Ok(())
}

pub fn estimate_factors<T: Real>(ds: &StDataset<T>, le: &LoadingEstimates<T>) -> Result<FactorSeries<T>> {
    check_shapes(ds, le)?;
    let part = &le.partition;
    let mut x_hat = Vec::with_capacity(ds.n_times());
    let mut x_star_hat = Vec::with_capacity(ds.n_times());
    for y in ds.values() {
        x_hat.push(transpose_mul(&le.a1_hat, &select_rows(y, &part.set1)) * &le.b_hat);
        x_star_hat.push(transpose_mul(&le.a2_hat, &select_rows(y, &part.set2)) * &le.b_hat);
    }
    Ok(FactorSeries { x_hat, x_star_hat })
}

/// Low-rank signal estimates, rows back in original location order.
///
/// Also valid on uncentered data, where it projects the raw observations.
pub fn estimate_signals<T: Real>(
    ds: &StDataset<T>,
    le: &LoadingEstimates<T>,
    fs: &FactorSeries<T>,
) -> Result<Vec<DMatrix<T>>> {
    check_shapes(ds, le)?;
    if fs.x_hat.len() != ds.n_times() || fs.x_star_hat.len() != ds.n_times() {
        return Err(Error::ShapeMismatch("factor series length differs from dataset".into()));
    }
    let part = &le.partition;
    let n = ds.n_locations();
    let p = ds.n_variables();
    let mut out = Vec::with_capacity(ds.n_times());
    for (x1, x2) in fs.x_hat.iter().zip(&fs.x_star_hat) {
        let s1 = &le.a1_hat * x1 * le.b_hat.transpose();
        let s2 = &le.a2_hat * x2 * le.b_hat.transpose();
        let mut xi = DMatrix::zeros(n, p);
        for (k, &loc) in part.set1.iter().enumerate() {
            xi.row_mut(loc).copy_from(&s1.row(k));
        }
        for (k, &loc) in part.set2.iter().enumerate() {
            xi.row_mut(loc).copy_from(&s2.row(k));
        }
        out.push(xi);
    }
    Ok(out)
}

/// Output of the unified re-estimation.
#[derive(Debug, Clone)]
pub struct UnifiedLoadings<T: Real> {
    /// `n × d`, columns span the estimated spatial loading space.
    pub a_hat: DMatrix<T>,
    /// `d × rT`, normalized so that `W W' / (rT) = I`.
    pub w_hat: DMatrix<T>,
    /// `X_t`, the `t`-th `d × r` block of `w_hat`.
    pub x_series: Vec<DMatrix<T>>,
    /// Leading spectrum of the normalized `Ψ` Gram matrix.
    pub eigvals: DVector<T>,
}

/// Threshold below which a `Ψ` eigenvalue counts as zero, relative to the largest.
const PSI_RANK_TOL: f64 = 1e-10;

pub fn reestimate_unified<T: Real>(
    signals: &[DMatrix<T>],
    b_hat: &DMatrix<T>,
    d: usize,
) -> Result<UnifiedLoadings<T>> {
    let t = signals.len();
    if t == 0 {
        return Err(Error::DegenerateTime(0));
    }
    let (n, p) = signals[0].shape();
    let r = b_hat.ncols();
    if b_hat.nrows() != p || signals.iter().any(|s| s.shape() != (n, p)) {
        return Err(Error::ShapeMismatch("signals and variable loading are not conformable".into()));
    }
    let rt = r * t;
    let mut psi = DMatrix::zeros(n, rt);
    for (k, s) in signals.iter().enumerate() {
        psi.columns_mut(k * r, r).copy_from(&(s * b_hat));
    }
    let norm = from_usize::<T>(n * p * rt);

    // top-d right singular directions of Ψ, via whichever Gram matrix is smaller
    let (eigvals, v) = if rt > n {
        let eig = symmetric_eigen_desc(&(psi.clone() * psi.transpose() / norm));
        check_psi_rank(&eig.values, d)?;
        let u = eig.vectors.columns(0, d).into_owned();
        let mut v = transpose_mul(&psi, &u);
        for mut col in v.column_iter_mut() {
            let len = col.norm();
            col /= len;
        }
        (eig.values, v)
    } else {
        let eig = symmetric_eigen_desc(&(transpose_mul(&psi, &psi) / norm));
        check_psi_rank(&eig.values, d)?;
        (eig.values, eig.vectors.columns(0, d).into_owned())
    };

    let rt_t = from_usize::<T>(rt);
    let mut w_hat = v.transpose() * rt_t.sqrt();
    let mut a_hat = &psi * w_hat.transpose() / rt_t;
    for k in 0..d {
        let mut col: DVector<T> = a_hat.column(k).into_owned();
        let before = col.clone();
        fix_sign(&mut col);
        if col != before {
            a_hat.column_mut(k).neg_mut();
            w_hat.row_mut(k).neg_mut();
        }
    }
    let x_series = (0..t).map(|k| w_hat.columns(k * r, r).into_owned()).collect();
    Ok(UnifiedLoadings { a_hat, w_hat, x_series, eigvals })
}

fn check_psi_rank<T: Real>(values: &DVector<T>, d: usize) -> Result<()> {
    let lead = values.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let above = values.iter().filter(|&&v| lead > T::zero() && v > lead * lit(PSI_RANK_TOL)).count();
    if above < d {
        return Err(Error::RankDeficientPsi(above));
    }
    Ok(())
}
