//! Tensor-product B-spline approximation of the spatial loading functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::transpose_mul;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Condition number above which the least-squares design counts as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Axis-aligned rectangle `[lo0, hi0] × [lo1, hi1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        if !(lo[0] < hi[0] && lo[1] < hi[1]) || lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("invalid domain {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Bounding box of `coords`, each side widened by `inflate` of its length.
    pub fn bounding<T: Real>(coords: &[[T; 2]], inflate: f64) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::TooFewLocations("no locations to bound".into()));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in coords {
            for k in 0..2 {
                let v = to_f64(c[k]);
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        for k in 0..2 {
            let pad = ((hi[k] - lo[k]) * inflate).max(1e-9 * (1.0 + hi[k].abs().max(lo[k].abs())));
            lo[k] -= pad;
            hi[k] += pad;
        }
        Self::new(lo, hi)
    }

    pub fn contains(&self, s: [f64; 2]) -> bool {
        (0..2).all(|k| s[k] >= self.lo[k] && s[k] <= self.hi[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveConfig {
    pub degree: usize,
    /// Interior knots per coordinate, uniformly spaced.
    pub knots_per_dim: usize,
    pub domain: Rect,
    /// Fall back to a small ridge penalty when the design is ill-conditioned.
    pub allow_ridge: bool,
}

impl SieveConfig {
    pub fn new(degree: usize, knots_per_dim: usize, domain: Rect) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        Ok(Self { degree, knots_per_dim, domain, allow_ridge: true })
    }

    /// Cubic basis over the 1%-inflated bounding box with
    /// [`default_knots`] interior knots.
    pub fn for_locations<T: Real>(coords: &[[T; 2]]) -> Result<Self> {
        Self::new(3, default_knots(coords.len(), 3), Rect::bounding(coords, 0.01)?)
    }

    pub fn basis_per_dim(&self) -> usize {
        self.knots_per_dim + self.degree + 1
    }

    /// Total number of tensor-product basis functions.
    pub fn n_basis(&self) -> usize {
        self.basis_per_dim().pow(2)
    }

    fn knot_vector(&self, axis: usize) -> Vec<f64> {
        let (lo, hi) = (self.domain.lo[axis], self.domain.hi[axis]);
        let k = self.knots_per_dim;
        let mut knots = vec![lo; self.degree + 1];
        knots.extend((1..=k).map(|i| lo + (hi - lo) * i as f64 / (k + 1) as f64));
        knots.extend(std::iter::repeat_n(hi, self.degree + 1));
        knots
    }
}

/// `ceil(n^{1/4})` interior knots, reduced until the basis holds at most
/// `n / 3` functions so the least-squares fit stays well determined.
pub fn default_knots(n: usize, degree: usize) -> usize {
    let mut k = (n as f64).powf(0.25).ceil() as usize;
    while k > 0 && (k + degree + 1).pow(2) * 3 > n {
        k -= 1;
    }
    k
}

/// Values of the `degree + 1` non-zero B-splines at `x` and the index of the
/// first one.
fn nonzero_basis(knots: &[f64], degree: usize, x: f64) -> (usize, Vec<f64>) {
    let nb = knots.len() - degree - 1;
    // knot span with knots[span] <= x < knots[span + 1]; the right end belongs to the last span
    let span = if x >= knots[nb] {
        nb - 1
    } else {
        let upper = knots[degree + 1..=nb].partition_point(|&k| k <= x);
        degree + upper
    };
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        vals[j] = saved;
    }
    (span - degree, vals)
}

fn basis_row(cfg: &SieveConfig, knots: &[Vec<f64>; 2], s: [f64; 2]) -> Result<Vec<(usize, f64)>> {
    if !cfg.domain.contains(s) {
        return Err(Error::LocationOutsideDomain(s[0], s[1]));
    }
    let nb = cfg.basis_per_dim();
    let (f0, v0) = nonzero_basis(&knots[0], cfg.degree, s[0]);
    let (f1, v1) = nonzero_basis(&knots[1], cfg.degree, s[1]);
    let mut out = Vec::with_capacity(v0.len() * v1.len());
    for (a, x) in v0.iter().enumerate() {
        for (b, y) in v1.iter().enumerate() {
            out.push(((f0 + a) * nb + f1 + b, x * y));
        }
    }
    Ok(out)
}

/// `n × J` matrix of basis values, column `i0 · nb + i1` holding the product
/// of the `i0`-th and `i1`-th univariate B-splines.
pub fn design_matrix<T: Real>(locs: &[[T; 2]], cfg: &SieveConfig) -> Result<DMatrix<T>> {
    let knots = [cfg.knot_vector(0), cfg.knot_vector(1)];
    let mut u = DMatrix::zeros(locs.len(), cfg.n_basis());
    for (row, s) in locs.iter().enumerate() {
        for (col, v) in basis_row(cfg, &knots, [to_f64(s[0]), to_f64(s[1])])? {
            u[(row, col)] = lit(v);
        }
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieveFit<T: Real> {
    pub config: SieveConfig,
    /// `J × d` coefficients.
    pub beta: DMatrix<T>,
    pub residual_rms: Vec<T>,
    pub ridge_used: bool,
    /// 2-norm condition number of the design matrix.
    pub condition: f64,
}

impl<T: Real> SieveFit<T> {
    pub fn n_loadings(&self) -> usize {
        self.beta.ncols()
    }
}

/// Least-squares coefficients of each loading column on the basis.
pub fn fit_loading_functions<T: Real>(a_hat: &DMatrix<T>, locs: &[[T; 2]], cfg: &SieveConfig) -> Result<SieveFit<T>> {
    if a_hat.nrows() != locs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} loading rows for {} locations",
            a_hat.nrows(),
            locs.len()
        )));
    }
    let u = design_matrix(locs, cfg)?;
    let (n, j) = u.shape();
    let condition = if n < j {
        f64::INFINITY
    } else {
        let sv = u.clone().singular_values();
        let smax = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
        let smin = sv.iter().copied().fold(smax, |a, b| a.min(b));
        if smin > T::zero() { to_f64(smax / smin) } else { f64::INFINITY }
    };

    let (beta, ridge_used) = if condition <= MAX_CONDITION {
        let qr = u.clone().qr();
        let qtb = transpose_mul(&qr.q(), a_hat);
        let beta = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or(Error::IllConditionedDesign(condition))?;
        (beta, false)
    } else if cfg.allow_ridge {
        log::warn!("sieve design condition number {condition:.3e}; using ridge fallback");
        let mut gram = transpose_mul(&u, &u);
        let lambda = gram.trace() * lit(1e-8) / from_usize::<T>(j);
        for k in 0..j {
            gram[(k, k)] += lambda;
        }
        let beta = gram
            .cholesky()
            .ok_or(Error::IllConditionedDesign(condition))?
            .solve(&transpose_mul(&u, a_hat));
        (beta, true)
    } else {
        return Err(Error::IllConditionedDesign(condition));
    };

    let resid = &u * &beta - a_hat;
    let residual_rms = resid
        .column_iter()
        .map(|c| (c.norm_squared() / from_usize::<T>(n.max(1))).sqrt())
        .collect();
    Ok(SieveFit { config: cfg.clone(), beta, residual_rms, ridge_used, condition })
}

/// `â(s0) = U(s0)' β`.
pub fn evaluate_loadings<T: Real>(fit: &SieveFit<T>, s0: [T; 2]) -> Result<DVector<T>> {
    let knots = [fit.config.knot_vector(0), fit.config.knot_vector(1)];
    let mut out = DVector::zeros(fit.beta.ncols());
    for (col, v) in basis_row(&fit.config, &knots, [to_f64(s0[0]), to_f64(s0[1])])? {
        out += fit.beta.row(col).transpose() * lit::<T>(v);
    }
    Ok(out)
}

/// Loading rows at many locations, `m × d`.
pub fn evaluate_loadings_at<T: Real>(fit: &SieveFit<T>, locs: &[[T; 2]]) -> Result<DMatrix<T>> {
    Ok(design_matrix(locs, &fit.config)? * &fit.beta)
}
