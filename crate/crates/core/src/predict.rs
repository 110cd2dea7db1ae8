//! Kriging, forecasting, held-out evaluation and the accuracy metrics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StDataset;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, orthonormal_basis, select_rows};
use crate::mar::{forecast_factors, forecast_var1, Mar1Model, Var1Model};
use crate::model::{fit, FactorModel, FitConfig, SieveOptions};
use crate::scalar::{from_usize, to_f64, Real};
use crate::sieve::{evaluate_loadings_at, Rect, SieveFit};

/// Output scale of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Deviations from the temporal mean, the scale the model is fitted on.
    #[default]
    Centered,
    /// Temporal means added back: the stored means at sampled locations and
    /// their low-rank representation at new ones.
    Observation,
}

fn sieve_of<T: Real>(model: &FactorModel<T>) -> Result<&SieveFit<T>> {
    model
        .sieve
        .as_ref()
        .ok_or_else(|| Error::Config("model has no loading-function fit".into()))
}

/// Predicted signal at many new locations, one `m × p` matrix per time point.
pub fn krige_many<T: Real>(
    model: &FactorModel<T>,
    sieve: &SieveFit<T>,
    targets: &[[T; 2]],
    scale: Scale,
) -> Result<Vec<DMatrix<T>>> {
    if sieve.n_loadings() != model.d() {
        return Err(Error::ShapeMismatch(format!(
            "sieve fit has {} loading columns, model rank is {}",
            sieve.n_loadings(),
            model.d()
        )));
    }
    let loads = evaluate_loadings_at(sieve, targets)?;
    let bt = model.b_hat.transpose();
    let offset = match scale {
        Scale::Centered => None,
        Scale::Observation => Some(&loads * &model.x_mean * &bt),
    };
    Ok(model
        .x_series
        .iter()
        .map(|x| {
            let pred = &loads * x * &bt;
            match &offset {
                Some(o) => pred + o,
                None => pred,
            }
        })
        .collect())
}

/// `ξ̂_t(s0) = B̂ X̂_t' â(s0)` for every time point.
pub fn krige<T: Real>(model: &FactorModel<T>, sieve: &SieveFit<T>, s0: [T; 2], scale: Scale) -> Result<Vec<DVector<T>>> {
    Ok(krige_many(model, sieve, &[s0], scale)?
        .into_iter()
        .map(|m| m.row(0).transpose())
        .collect())
}

/// Kriging with the model's own loading-function fit.
pub fn krige_model<T: Real>(model: &FactorModel<T>, targets: &[[T; 2]], scale: Scale) -> Result<Vec<DMatrix<T>>> {
    krige_many(model, sieve_of(model)?, targets, scale)
}

fn at_sampled<T: Real>(model: &FactorModel<T>, x: &DMatrix<T>, scale: Scale) -> DMatrix<T> {
    let pred = &model.a_hat * x * model.b_hat.transpose();
    match (scale, &model.means) {
        (Scale::Observation, Some(m)) => pred + m,
        (Scale::Observation, None) => pred + model.mean_signal(),
        (Scale::Centered, _) => pred,
    }
}

fn last_state<T: Real>(model: &FactorModel<T>) -> Result<&DMatrix<T>> {
    model.x_series.last().ok_or(Error::DegenerateTime(0))
}

/// `h`-step forecast `Â Φ_R^h X̂_T Φ_C^h B̂'` at the sampled locations.
pub fn forecast<T: Real>(model: &FactorModel<T>, mar: &Mar1Model<T>, h: usize, scale: Scale) -> Result<DMatrix<T>> {
    let x = forecast_factors(mar, last_state(model)?, h)?;
    Ok(at_sampled(model, &x, scale))
}

/// Forecast with the model's own dynamics fit.
pub fn forecast_model<T: Real>(model: &FactorModel<T>, h: usize, scale: Scale) -> Result<DMatrix<T>> {
    let mar = model
        .mar
        .as_ref()
        .ok_or_else(|| Error::Config("model has no dynamics fit".into()))?;
    forecast(model, mar, h, scale)
}

/// Forecast through the unrestricted VAR(1) on the vectorized factors.
pub fn forecast_with_var<T: Real>(model: &FactorModel<T>, var: &Var1Model<T>, h: usize, scale: Scale) -> Result<DMatrix<T>> {
    let x = forecast_var1(var, last_state(model)?, h)?;
    Ok(at_sampled(model, &x, scale))
}

/// `sqrt(1 - tr(P_a P_b) / max(k_a, k_b))`, the distance between the column
/// spaces of `a` and `b`.
pub fn subspace_distance<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<T> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!("{} vs {} rows", a.nrows(), b.nrows())));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let k = from_usize::<T>(a.ncols().max(b.ncols()));
    // tr(P_a P_b) = ||Q_a' Q_b||_F^2
    let overlap = frobenius_sq(&qa.tr_mul(&qb)) / k;
    let v = (T::one() - overlap).max(T::zero()).min(T::one());
    Ok(v.sqrt())
}

fn mean_sq_diff<T: Real>(est: &[DMatrix<T>], truth: &[DMatrix<T>]) -> Result<T> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} estimates vs {} truths", est.len(), truth.len())));
    }
    let mut acc = T::zero();
    let mut count = 0usize;
    for (e, t) in est.iter().zip(truth) {
        if e.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", e.shape(), t.shape())));
        }
        acc += frobenius_sq(&(e - t));
        count += e.len();
    }
    Ok(acc / from_usize::<T>(count.max(1)))
}

/// `(1/npT) Σ_t ||Ξ̂_t - Ξ_t||_F²`.
pub fn mse_signal<T: Real>(est: &[DMatrix<T>], truth: &[DMatrix<T>]) -> Result<T> {
    mean_sq_diff(est, truth)
}

/// Mean squared error of kriged signals over all new locations, variables and times.
pub fn mspe_spatial<T: Real>(preds: &[DMatrix<T>], truth: &[DMatrix<T>]) -> Result<T> {
    mean_sq_diff(preds, truth)
}

/// `(1/np) ||Ŷ_{T+h} - Ξ_{T+h}||_F²`.
pub fn mspe_temporal<T: Real>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<T> {
    mean_sq_diff(std::slice::from_ref(pred), std::slice::from_ref(truth))
}

/// Ratio of the domain averages of two trace integrands, by Monte Carlo over
/// `points` uniform draws in `domain`.
pub fn snr(
    signal_trace: impl Fn([f64; 2]) -> f64,
    noise_trace: impl Fn([f64; 2]) -> f64,
    domain: Rect,
    points: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sig, mut noise) = (0.0, 0.0);
    for _ in 0..points {
        let s = [
            rng.random_range(domain.lo[0]..=domain.hi[0]),
            rng.random_range(domain.lo[1]..=domain.hi[1]),
        ];
        sig += signal_trace(s);
        noise += noise_trace(s);
    }
    sig / noise
}

/// Per-replication metrics. Fields left `None` were not computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_a1: Option<f64>,
    pub d_a2: Option<f64>,
    pub d_a_avg: Option<f64>,
    pub d_a_unified: Option<f64>,
    pub d_b: Option<f64>,
    pub mse_signal: Option<f64>,
    pub mse_signal_reestimated: Option<f64>,
    pub mspe_spatial: Option<f64>,
    pub mspe_temporal_h1: Option<f64>,
    pub mspe_temporal_h2: Option<f64>,
    pub mspe_temporal_var_h1: Option<f64>,
    pub mspe_temporal_var_h2: Option<f64>,
    pub snr: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 13] = [
        "d_a1",
        "d_a2",
        "d_a_avg",
        "d_a_unified",
        "d_b",
        "mse_signal",
        "mse_signal_reestimated",
        "mspe_spatial",
        "mspe_temporal_h1",
        "mspe_temporal_h2",
        "mspe_temporal_var_h1",
        "mspe_temporal_var_h2",
        "snr",
    ];

    pub fn values(&self) -> [Option<f64>; 13] {
        [
            self.d_a1,
            self.d_a2,
            self.d_a_avg,
            self.d_a_unified,
            self.d_b,
            self.mse_signal,
            self.mse_signal_reestimated,
            self.mspe_spatial,
            self.mspe_temporal_h1,
            self.mspe_temporal_h2,
            self.mspe_temporal_var_h1,
            self.mspe_temporal_var_h2,
            self.snr,
        ]
    }

    /// Flat CSV row matching [`MetricReport::CSV_HEADER`]; missing values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        self.values().iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Self::CSV_HEADER)?;
        wtr.write_record(self.csv_row())?;
        wtr.flush()?;
        Ok(())
    }
}

/// What held-out predictions are scored against.
#[derive(Debug, Clone, Copy)]
pub enum CvTarget<'a, T: Real> {
    /// The held-out observations themselves.
    Observations,
    /// Known signals at every location (one `n × p` matrix per time point).
    Signals(&'a [DMatrix<T>]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub held_out: usize,
    pub mspe: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Repeatedly holds out `frac` of the locations, fits on the rest and scores
/// kriged predictions at the held-out ones.
pub fn holdout_spatial_cv<T: Real>(
    ds: &StDataset<T>,
    frac: f64,
    reps: usize,
    seed: u64,
    cfg: &FitConfig,
    target: CvTarget<'_, T>,
) -> Result<CvReport> {
    if !(frac > 0.0 && frac < 0.5) {
        return Err(Error::Config(format!("held-out fraction {frac} must lie in (0, 0.5)")));
    }
    if reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if ds.is_centered() {
        return Err(Error::Config("cross-validation needs the raw (uncentered) dataset".into()));
    }
    let n = ds.n_locations();
    let held = (n as f64 * frac).round() as usize;
    if held == 0 || n - held < 4 {
        return Err(Error::TooFewLocations(format!("cannot hold out {frac} of {n} locations")));
    }
    if let CvTarget::Signals(sig) = target {
        if sig.len() != ds.n_times() || sig.iter().any(|s| s.shape() != (n, ds.n_variables())) {
            return Err(Error::ShapeMismatch("target signals do not match the dataset".into()));
        }
    }
    // the whole study region, so held-out points are never outside the basis domain
    let domain = Rect::bounding(&ds.coords(), 0.01)?;
    let mut mspe = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let (test, train) = ids.split_at(held);
        let mut train = train.to_vec();
        train.sort_unstable();
        let mut test = test.to_vec();
        test.sort_unstable();

        let mut rep_cfg = cfg.clone();
        rep_cfg.partition = None;
        rep_cfg.mar = None;
        let mut sieve = rep_cfg.sieve.clone().unwrap_or_default();
        sieve.domain.get_or_insert(domain);
        rep_cfg.sieve = Some(SieveOptions { ..sieve });
        let model = fit(&ds.subset_locations(&train)?, &rep_cfg)?;
        let coords = ds.coords();
        let targets: Vec<[T; 2]> = test.iter().map(|&i| coords[i]).collect();
        let preds = krige_model(&model, &targets, Scale::Observation)?;
        let truth: Vec<DMatrix<T>> = match target {
            CvTarget::Observations => ds.values().iter().map(|y| select_rows(y, &test)).collect(),
            CvTarget::Signals(sig) => sig.iter().map(|y| select_rows(y, &test)).collect(),
        };
        mspe.push(to_f64(mspe_spatial(&preds, &truth)?));
    }
    let mean = mspe.iter().sum::<f64>() / reps as f64;
    let sd = if reps > 1 {
        (mspe.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(CvReport { held_out: held, mspe, mean, sd })
}
