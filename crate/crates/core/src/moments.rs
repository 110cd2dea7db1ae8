//! Aggregated cross-covariance moment matrices whose leading eigenvectors
//! span the spatial and variable loading spaces.
//!
//! Both estimators reduce the double sum over variable (or location) pairs
//! to a Gram-weighted sum over time pairs:
//!
//! `Σ_ij Ω_ij Ω_ij' = T⁻² Σ_{t,u} <Y2_t, Y2_u>_F · Y1_t Y1_u'`
//!
//! which costs two matrix products instead of `p²` outer products.

use nalgebra::{DMatrix, DMatrixView};

use crate::data::{Partition, StDataset};
use crate::error::{Error, Result};
use crate::linalg::{select_rows, symmetrize, transpose_mul};
use crate::scalar::{from_usize, Real};

/// Moment matrices of the two location sets.
#[derive(Debug, Clone)]
pub struct SpatialMomentPair<T: Real> {
    /// `n1 × n1`, spans the loading space of the first set.
    pub m_a1: DMatrix<T>,
    /// `n2 × n2`, spans the loading space of the second set.
    pub m_a2: DMatrix<T>,
    pub partition: Partition,
}

#[derive(Debug, Clone)]
pub struct TemporalMoment<T: Real> {
    /// `p × p`, spans the variable loading space.
    pub m_b: DMatrix<T>,
    pub h0: usize,
}

/// Stacks `vec(Y_t)` (column-major) as the columns of one matrix.
fn stack_vec<T: Real>(mats: &[DMatrix<T>]) -> DMatrix<T> {
    let len = mats.first().map_or(0, |m| m.len());
    let mut out = DMatrix::zeros(len, mats.len());
    for (t, m) in mats.iter().enumerate() {
        out.column_mut(t).copy_from_slice(m.as_slice());
    }
    out
}

/// `Σ_{t,u} w[t,u] · S_t S_u'` for equally shaped `S_t` (rows × cols), given
/// the stacked `vec(S_t)` columns.
fn gram_weighted_outer<T: Real>(stacked: &DMatrix<T>, weights: &DMatrix<T>, rows: usize) -> DMatrix<T> {
    let mixed = stacked * weights;
    let wide = stacked.ncols() * stacked.nrows() / rows;
    // column-major reinterpretation: [S_1 | S_2 | ...] as rows × (cols·T)
    let left = DMatrixView::from_slice(mixed.as_slice(), rows, wide);
    let right = DMatrixView::from_slice(stacked.as_slice(), rows, wide);
    left * right.transpose()
}

pub fn spatial_moments<T: Real>(ds: &StDataset<T>, part: &Partition) -> Result<SpatialMomentPair<T>> {
    if !ds.is_centered() {
        return Err(Error::NotCentered);
    }
    let t = ds.n_times();
    if t < 2 {
        return Err(Error::DegenerateTime(t));
    }
    part.validate(ds.n_locations()).map_err(|e| Error::InvalidProvidedPartition(e.to_string()))?;

    let y1: Vec<_> = ds.values().iter().map(|y| select_rows(y, &part.set1)).collect();
    let y2: Vec<_> = ds.values().iter().map(|y| select_rows(y, &part.set2)).collect();
    let r1 = stack_vec(&y1);
    let r2 = stack_vec(&y2);
    let g1 = transpose_mul(&r1, &r1);
    let g2 = transpose_mul(&r2, &r2);
    let scale = from_usize::<T>(t).powi(2);

    let m_a1 = gram_weighted_outer(&r1, &g2, part.n1()) / scale;
    let m_a2 = gram_weighted_outer(&r2, &g1, part.n2()) / scale;
    Ok(SpatialMomentPair { m_a1: symmetrize(&m_a1), m_a2: symmetrize(&m_a2), partition: part.clone() })
}

pub fn temporal_moments<T: Real>(ds: &StDataset<T>, h0: usize) -> Result<TemporalMoment<T>> {
    if !ds.is_centered() {
        return Err(Error::NotCentered);
    }
    let t = ds.n_times();
    if h0 == 0 || h0 >= t {
        return Err(Error::LagTooLarge { h0, t });
    }
    let p = ds.n_variables();
    let transposed: Vec<_> = ds.values().iter().map(|y| y.transpose()).collect();
    let stacked = stack_vec(&transposed);
    let gram = transpose_mul(&stacked, &stacked);

    let mut m_b = DMatrix::zeros(p, p);
    for h in 1..=h0 {
        let len = t - h;
        let lead = gram.view((h, h), (len, len)).into_owned();
        let lagged = stacked.columns(0, len).into_owned();
        m_b += gram_weighted_outer(&lagged, &lead, p) / from_usize::<T>(len).powi(2);
    }
    Ok(TemporalMoment { m_b: symmetrize(&m_b), h0 })
}
