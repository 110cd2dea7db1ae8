//! First-order matrix autoregression `X_t = Φ_R X_{t-1} Φ_C + U_t`, fitted by
//! alternating least squares, and the vectorized VAR(1) baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, matrix_power, spd_solve};
use crate::scalar::{from_usize, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarInit {
    /// Start the column coefficient at the identity.
    #[default]
    Identity,
    /// Start from the nearest Kronecker factorization of the unrestricted
    /// VAR(1) coefficient.
    NearestKronecker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarConfig {
    /// Stop once the relative change of `Φ_C' ⊗ Φ_R` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub init: MarInit,
}

impl Default for MarConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, init: MarInit::Identity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    /// Objective after each full sweep, starting with the first.
    pub objective_trace: Vec<f64>,
    /// Largest relative normal-equation residual of the two blocks at exit.
    pub gradient: f64,
}

#[derive(Debug, Clone)]
pub struct Mar1Model<T: Real> {
    /// `d × d`, normalized to Frobenius norm `sqrt(d)`.
    pub phi_r: DMatrix<T>,
    /// `r × r`.
    pub phi_c: DMatrix<T>,
    /// Covariance of `vec(U_t)` (column-major), `dr × dr`.
    pub sigma_u: DMatrix<T>,
    pub diagnostics: MarDiagnostics,
}

impl<T: Real> Mar1Model<T> {
    /// Coefficient of the equivalent VAR(1) on `vec(X_t)`: `Φ_C' ⊗ Φ_R`.
    pub fn kronecker(&self) -> DMatrix<T> {
        self.phi_c.transpose().kronecker(&self.phi_r)
    }
}

fn check_series<T: Real>(xs: &[DMatrix<T>]) -> Result<(usize, usize)> {
    if xs.len() < 3 {
        return Err(Error::DegenerateTime(xs.len()));
    }
    let shape = xs[0].shape();
    if xs.iter().any(|x| x.shape() != shape) {
        return Err(Error::ShapeMismatch("factor matrices differ in shape".into()));
    }
    Ok(shape)
}

fn objective<T: Real>(xs: &[DMatrix<T>], phi_r: &DMatrix<T>, phi_c: &DMatrix<T>) -> T {
    xs.windows(2).fold(T::zero(), |acc, w| acc + frobenius_sq(&(&w[1] - phi_r * &w[0] * phi_c)))
}

/// Least-squares row coefficient given the column coefficient.
fn update_row<T: Real>(xs: &[DMatrix<T>], phi_c: &DMatrix<T>) -> Result<DMatrix<T>> {
    let d = xs[0].nrows();
    let mut cross = DMatrix::zeros(d, d);
    let mut gram = DMatrix::zeros(d, d);
    for w in xs.windows(2) {
        let z = &w[0] * phi_c;
        cross += &w[1] * z.transpose();
        gram += &z * z.transpose();
    }
    Ok(spd_solve(&gram, &cross.transpose())?.transpose())
}

/// Least-squares column coefficient given the row coefficient.
fn update_col<T: Real>(xs: &[DMatrix<T>], phi_r: &DMatrix<T>) -> Result<DMatrix<T>> {
    let r = xs[0].ncols();
    let mut cross = DMatrix::zeros(r, r);
    let mut gram = DMatrix::zeros(r, r);
    for w in xs.windows(2) {
        let z = phi_r * &w[0];
        cross += z.tr_mul(&w[1]);
        gram += z.tr_mul(&z);
    }
    spd_solve(&gram, &cross)
}

fn gradient_norm<T: Real>(xs: &[DMatrix<T>], phi_r: &DMatrix<T>, phi_c: &DMatrix<T>) -> f64 {
    let (d, r) = xs[0].shape();
    let mut g_r = DMatrix::<T>::zeros(d, d);
    let mut g_c = DMatrix::<T>::zeros(r, r);
    let mut scale_r = T::zero();
    let mut scale_c = T::zero();
    for w in xs.windows(2) {
        let resid = &w[1] - phi_r * &w[0] * phi_c;
        let zr = &w[0] * phi_c;
        let zc = phi_r * &w[0];
        g_r += &resid * zr.transpose();
        g_c += zc.tr_mul(&resid);
        scale_r += w[1].norm() * zr.norm();
        scale_c += w[1].norm() * zc.norm();
    }
    let rel = |g: &DMatrix<T>, s: T| if s > T::zero() { to_f64(g.norm() / s) } else { 0.0 };
    rel(&g_r, scale_r).max(rel(&g_c, scale_c))
}

/// Van Loan rearrangement: best `Φ_C` (up to scale) with
/// `coef ≈ Φ_C' ⊗ Φ_R`.
fn nearest_kronecker_col<T: Real>(coef: &DMatrix<T>, d: usize, r: usize) -> DMatrix<T> {
    let mut rearranged = DMatrix::zeros(r * r, d * d);
    for j in 0..r {
        for i in 0..r {
            let block = coef.view((i * d, j * d), (d, d));
            rearranged.row_mut(i + j * r).copy_from_slice(block.clone_owned().as_slice());
        }
    }
    let svd = rearranged.svd(true, false);
    let k = svd.singular_values.imax();
    let u = svd.u.expect("u requested").column(k) * svd.singular_values[k].sqrt();
    // u holds vec(Φ_C') in column-major order
    DMatrix::from_column_slice(r, r, u.as_slice()).transpose()
}

pub fn fit_mar1<T: Real>(xs: &[DMatrix<T>], cfg: &MarConfig) -> Result<Mar1Model<T>> {
    let (d, r) = check_series(xs)?;
    let mut phi_c = match cfg.init {
        MarInit::Identity => DMatrix::identity(r, r),
        MarInit::NearestKronecker => nearest_kronecker_col(&fit_var1(xs)?.coef, d, r),
    };
    let scale = xs.iter().fold(T::zero(), |acc, x| acc + frobenius_sq(x));
    let floor = to_f64(scale) * f64::EPSILON * f64::EPSILON;

    let mut phi_r = update_row(xs, &phi_c)?;
    phi_c = update_col(xs, &phi_r)?;
    let mut obj = to_f64(objective(xs, &phi_r, &phi_c));
    let mut trace = vec![obj];
    let mut converged = obj <= floor;
    let mut iterations = 1;
    while !converged && iterations < cfg.max_iter {
        let next_r = update_row(xs, &phi_c)?;
        let next_c = update_col(xs, &next_r)?;
        let next = to_f64(objective(xs, &next_r, &next_c));
        iterations += 1;
        trace.push(next);
        // the Kronecker product is free of the scale ambiguity between factors
        let before = phi_c.transpose().kronecker(&phi_r);
        let change = to_f64((next_c.transpose().kronecker(&next_r) - &before).norm() / before.norm());
        phi_r = next_r;
        phi_c = next_c;
        converged = next <= floor || change < cfg.tol;
        obj = next;
    }
    if !converged {
        log::warn!("matrix autoregression stopped after {iterations} sweeps without converging");
    }

    // identifiability: ||Φ_R||_F = sqrt(d), largest-magnitude entry of Φ_R positive
    let norm = phi_r.norm();
    if norm > T::zero() {
        let c = norm / from_usize::<T>(d).sqrt();
        phi_r /= c;
        phi_c *= c;
    }
    let pivot = phi_r.iter().copied().fold(T::zero(), |best, v| if v.abs() > best.abs() { v } else { best });
    if pivot < T::zero() {
        phi_r.neg_mut();
        phi_c.neg_mut();
    }

    let sigma_u = residual_covariance(xs, |x| &phi_r * x * &phi_c);
    let gradient = gradient_norm(xs, &phi_r, &phi_c);
    Ok(Mar1Model {
        phi_r,
        phi_c,
        sigma_u,
        diagnostics: MarDiagnostics { iterations, objective: obj, converged, objective_trace: trace, gradient },
    })
}

fn residual_covariance<T: Real>(xs: &[DMatrix<T>], predict: impl Fn(&DMatrix<T>) -> DMatrix<T>) -> DMatrix<T> {
    let k = xs[0].len();
    let mut cov = DMatrix::zeros(k, k);
    for w in xs.windows(2) {
        let resid = &w[1] - predict(&w[0]);
        let v = nalgebra::DVector::from_column_slice(resid.as_slice());
        cov += &v * v.transpose();
    }
    cov / from_usize::<T>(xs.len() - 1)
}

/// `Φ_R^h X Φ_C^h`.
pub fn forecast_factors<T: Real>(model: &Mar1Model<T>, x_last: &DMatrix<T>, h: usize) -> Result<DMatrix<T>> {
    if h == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if x_last.shape() != (model.phi_r.nrows(), model.phi_c.nrows()) {
        return Err(Error::ShapeMismatch(format!("factor state is {:?}", x_last.shape())));
    }
    Ok(matrix_power(&model.phi_r, h) * x_last * matrix_power(&model.phi_c, h))
}

/// Unrestricted VAR(1) on `vec(X_t)` without intercept.
#[derive(Debug, Clone)]
pub struct Var1Model<T: Real> {
    pub coef: DMatrix<T>,
    pub sigma_u: DMatrix<T>,
    pub rows: usize,
    pub cols: usize,
}

pub fn fit_var1<T: Real>(xs: &[DMatrix<T>]) -> Result<Var1Model<T>> {
    let (d, r) = check_series(xs)?;
    let k = d * r;
    let mut cross = DMatrix::zeros(k, k);
    let mut gram = DMatrix::zeros(k, k);
    for w in xs.windows(2) {
        let prev = DMatrix::from_column_slice(k, 1, w[0].as_slice());
        let next = DMatrix::from_column_slice(k, 1, w[1].as_slice());
        cross += &next * prev.transpose();
        gram += &prev * prev.transpose();
    }
    let coef = spd_solve(&gram, &cross.transpose())?.transpose();
    let sigma_u = residual_covariance(xs, |x| {
        DMatrix::from_column_slice(d, r, (&coef * DMatrix::from_column_slice(k, 1, x.as_slice())).as_slice())
    });
    Ok(Var1Model { coef, sigma_u, rows: d, cols: r })
}

pub fn forecast_var1<T: Real>(model: &Var1Model<T>, x_last: &DMatrix<T>, h: usize) -> Result<DMatrix<T>> {
    if h == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if x_last.shape() != (model.rows, model.cols) {
        return Err(Error::ShapeMismatch(format!("factor state is {:?}", x_last.shape())));
    }
    let v = matrix_power(&model.coef, h) * DMatrix::from_column_slice(x_last.len(), 1, x_last.as_slice());
    Ok(DMatrix::from_column_slice(model.rows, model.cols, v.as_slice()))
}

/// Spectral radius bound used by simulation code to keep the recursion stable.
pub fn is_stable<T: Real>(phi_r: &DMatrix<T>, phi_c: &DMatrix<T>) -> bool {
    let rho = |m: &DMatrix<T>| {
        m.clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| to_f64(z.re).hypot(to_f64(z.im)))
            .fold(0.0, f64::max)
    };
    rho(phi_r) * rho(phi_c) < 1.0 - 1e-12
}
