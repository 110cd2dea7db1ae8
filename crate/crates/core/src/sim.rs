//! Synthetic data from known loading functions and matrix-autoregressive
//! factors, and a Monte-Carlo runner that scores the estimators over a grid
//! of problem sizes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Location, StDataset};
use crate::error::{Error, Result};
use crate::linalg::select_rows;
use crate::mar::{fit_var1, is_stable};
use crate::model::{fit_detailed, FitConfig, SieveOptions};
use crate::predict::{
    forecast_model, forecast_with_var, krige_model, mse_signal, mspe_spatial, mspe_temporal, snr, subspace_distance,
    MetricReport, Scale,
};
use crate::sieve::Rect;

/// Innovation covariance of the factor recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseModel {
    /// Identity.
    #[default]
    I,
    /// Kronecker product of equicorrelated row and column covariances.
    II,
    /// Unstructured, drawn once per cell.
    III,
}

/// How the nugget variance `(1 + |s|²)` is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuggetScale {
    /// `(1 + |s|²) / (2√3)`.
    #[default]
    OverTwoRootThree,
    /// `(1 + |s|²) / 2 · √3`.
    HalfTimesRootThree,
}

impl NuggetScale {
    pub fn variance(self, s: [f64; 2]) -> f64 {
        let base = 1.0 + s[0] * s[0] + s[1] * s[1];
        match self {
            NuggetScale::OverTwoRootThree => base / (2.0 * 3f64.sqrt()),
            NuggetScale::HalfTimesRootThree => base / 2.0 * 3f64.sqrt(),
        }
    }
}

fn default_rank_d() -> usize {
    3
}
fn default_rank_r() -> usize {
    2
}
fn one() -> f64 {
    1.0
}
fn default_burn_in() -> usize {
    50
}
fn default_new_locations() -> usize {
    50
}
fn default_horizon() -> usize {
    2
}
fn default_cross() -> f64 {
    0.2
}

/// One simulation design. Missing fields in JSON take the study defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n: usize,
    pub p: usize,
    pub t: usize,
    #[serde(default = "default_rank_d")]
    pub d: usize,
    #[serde(default = "default_rank_r")]
    pub r: usize,
    /// Variable factor strength; loadings shrink like `p^{-γ/2}`.
    pub gamma: f64,
    /// Spatial factor strength; loadings shrink like `n^{-δ/2}`.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub noise_model: NoiseModel,
    /// Row coefficient, row-major; defaults to a diagonal from 0.7 to 0.9.
    #[serde(default)]
    pub phi_r: Option<Vec<Vec<f64>>>,
    /// Column coefficient, row-major; defaults to a diagonal from 0.8 to 0.6.
    #[serde(default)]
    pub phi_c: Option<Vec<Vec<f64>>>,
    /// Off-diagonal entry of the Kronecker covariance factors.
    #[serde(default = "default_cross")]
    pub kronecker_cross: f64,
    /// Multiplies the nugget standard deviation; 0 gives noiseless data.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub nugget: NuggetScale,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_new_locations")]
    pub new_locations: usize,
    /// Future steps whose truth is retained.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

fn linspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![a];
    }
    (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config("ragged coefficient matrix".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Loading function `j` at `s`. The first three are the study's; further
/// ones are smooth products of sines and cosines.
pub fn loading_function(j: usize, s: [f64; 2]) -> f64 {
    let [x, y] = s;
    match j {
        0 => (x - y) / 2.0,
        1 => (PI * (2.0 * (x * x + y * y)).sqrt()).cos(),
        2 => 1.5 * x * y,
        k => (PI * (k - 2) as f64 * x / 2.0).sin() * (PI * y / 2.0).cos(),
    }
}

impl GeneratorSpec {
    /// Study defaults for a `(T, p, n, γ)` cell.
    pub fn study(t: usize, p: usize, n: usize, gamma: f64, noise_model: NoiseModel) -> Self {
        Self {
            n,
            p,
            t,
            d: 3,
            r: 2,
            gamma,
            delta: 0.0,
            noise_model,
            phi_r: None,
            phi_c: None,
            kronecker_cross: 0.2,
            noise_scale: 1.0,
            nugget: NuggetScale::default(),
            burn_in: 50,
            new_locations: 50,
            horizon: 2,
            seed: 0,
        }
    }

    pub fn phi_r(&self) -> Result<DMatrix<f64>> {
        match &self.phi_r {
            Some(rows) => from_rows(rows),
            None => Ok(DMatrix::from_diagonal(&DVector::from_vec(linspace(0.7, 0.9, self.d)))),
        }
    }

    pub fn phi_c(&self) -> Result<DMatrix<f64>> {
        match &self.phi_c {
            Some(rows) => from_rows(rows),
            None => Ok(DMatrix::from_diagonal(&DVector::from_vec(linspace(0.8, 0.6, self.r)))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.r == 0 {
            return bad("ranks must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("strengths must lie in [0, 1], got gamma={} delta={}", self.gamma, self.delta));
        }
        if self.n < 4 || self.p == 0 || self.t < 3 {
            return bad(format!("design too small: n={} p={} T={}", self.n, self.p, self.t));
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise scale must be non-negative".into());
        }
        let (pr, pc) = (self.phi_r()?, self.phi_c()?);
        if pr.shape() != (self.d, self.d) || pc.shape() != (self.r, self.r) {
            return bad("coefficient matrices do not match the ranks".into());
        }
        if !is_stable(&pr, &pc) {
            return bad("factor recursion is not stable".into());
        }
        if !(self.kronecker_cross.abs() < 1.0) {
            return bad("Kronecker off-diagonal must lie in (-1, 1)".into());
        }
        Ok(())
    }

    /// Covariance of `vec(U_t)`; `None` for the identity.
    fn innovation_covariance(&self) -> Result<Option<DMatrix<f64>>> {
        let k = self.d * self.r;
        match self.noise_model {
            NoiseModel::I => Ok(None),
            NoiseModel::II => {
                let equi = |m: usize| {
                    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { self.kronecker_cross })
                };
                Ok(Some(equi(self.r).kronecker(&equi(self.d))))
            }
            NoiseModel::III => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(u64::MAX);
                let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let cov = &g * g.transpose();
                let avg = cov.trace() / k as f64;
                Ok(Some(cov / avg))
            }
        }
    }

    /// Stationary covariance of `vec(X_t)`.
    pub fn factor_covariance(&self) -> Result<DMatrix<f64>> {
        let k = self.d * self.r;
        let phi = self.phi_c()?.transpose().kronecker(&self.phi_r()?);
        let sigma = self.innovation_covariance()?.unwrap_or_else(|| DMatrix::identity(k, k));
        let mut gamma = sigma.clone();
        for _ in 0..10_000 {
            let next = &phi * &gamma * phi.transpose() + &sigma;
            let done = (&next - &gamma).amax() <= 1e-14 * next.amax();
            gamma = next;
            if done {
                break;
            }
        }
        Ok(gamma)
    }

    /// Signal-to-noise ratio of the `p`-variate observation, averaging the
    /// signal over the loading draws and both traces over the square.
    pub fn snr(&self, points: usize, seed: u64) -> Result<f64> {
        let gamma = self.factor_covariance()?;
        let (d, r, p) = (self.d, self.r, self.p as f64);
        // E[B'B] = p^{1-γ}/3 · I for U(-1,1)·p^{-γ/2} entries
        let b_scale = p.powf(1.0 - self.gamma) / 3.0;
        let a_scale = (self.n as f64).powf(-self.delta / 2.0);
        let signal = |s: [f64; 2]| {
            let a = DVector::from_fn(d, |j, _| loading_function(j, s) * a_scale);
            let mut acc = 0.0;
            for col in 0..r {
                let block = gamma.view((col * d, col * d), (d, d));
                acc += a.dot(&(block * &a));
            }
            acc * b_scale
        };
        let noise = |s: [f64; 2]| p * self.noise_scale.powi(2) * self.nugget.variance(s);
        Ok(snr(signal, noise, study_domain(), points, seed))
    }
}

/// The square `[-1, 1]²` locations are drawn from.
pub fn study_domain() -> Rect {
    Rect { lo: [-1.0, -1.0], hi: [1.0, 1.0] }
}

/// A generated dataset together with everything that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub dataset: StDataset<f64>,
    pub a_true: DMatrix<f64>,
    pub b_true: DMatrix<f64>,
    pub x_true: Vec<DMatrix<f64>>,
    pub xi_true: Vec<DMatrix<f64>>,
    pub new_coords: Vec<[f64; 2]>,
    /// Loadings at the new locations.
    pub a_new: DMatrix<f64>,
    /// Signals at the new locations over the observed times.
    pub xi_new: Vec<DMatrix<f64>>,
    /// `X_{T+h}` for `h = 1..=horizon`.
    pub x_future: Vec<DMatrix<f64>>,
    pub xi_future: Vec<DMatrix<f64>>,
}

pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticTruth> {
    generate_rep(spec, 0)
}

/// Replication `rep` of a design; each replication uses its own stream of
/// the design's seed.
pub fn generate_rep(spec: &GeneratorSpec, rep: u64) -> Result<SyntheticTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(rep);
    let (n, p, t, d, r, m) = (spec.n, spec.p, spec.t, spec.d, spec.r, spec.new_locations);

    let draw_point = |rng: &mut ChaCha8Rng| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let coords: Vec<[f64; 2]> = (0..n).map(|_| draw_point(&mut rng)).collect();
    let new_coords: Vec<[f64; 2]> = (0..m).map(|_| draw_point(&mut rng)).collect();
    let a_scale = (n as f64).powf(-spec.delta / 2.0);
    let loadings = |pts: &[[f64; 2]]| DMatrix::from_fn(pts.len(), d, |i, j| loading_function(j, pts[i]) * a_scale);
    let a_true = loadings(&coords);
    let a_new = loadings(&new_coords);
    let b_scale = (p as f64).powf(-spec.gamma / 2.0);
    let b_true = DMatrix::from_fn(p, r, |_, _| rng.random_range(-1.0..1.0) * b_scale);

    let (phi_r, phi_c) = (spec.phi_r()?, spec.phi_c()?);
    let chol = match spec.innovation_covariance()? {
        Some(cov) => Some(
            cov.cholesky()
                .ok_or_else(|| Error::Config("innovation covariance is not positive definite".into()))?
                .l(),
        ),
        None => None,
    };
    let mut x = DMatrix::zeros(d, r);
    let mut path = Vec::with_capacity(t + spec.horizon);
    for step in 0..spec.burn_in + t + spec.horizon {
        let z = DVector::from_fn(d * r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = match &chol {
            Some(l) => l * z,
            None => z,
        };
        x = &phi_r * &x * &phi_c + DMatrix::from_column_slice(d, r, u.as_slice());
        if step >= spec.burn_in {
            path.push(x.clone());
        }
    }
    let x_future = path.split_off(t);
    let x_true = path;

    let bt = b_true.transpose();
    let xi_true: Vec<DMatrix<f64>> = x_true.iter().map(|x| &a_true * x * &bt).collect();
    let xi_new = x_true.iter().map(|x| &a_new * x * &bt).collect();
    let xi_future = x_future.iter().map(|x| &a_true * x * &bt).collect();
    let sd: Vec<f64> = coords.iter().map(|s| spec.noise_scale * spec.nugget.variance(*s).sqrt()).collect();
    let values = xi_true
        .iter()
        .map(|xi| {
            let mut y = xi.clone();
            if spec.noise_scale > 0.0 {
                for j in 0..p {
                    for i in 0..n {
                        y[(i, j)] += sd[i] * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            y
        })
        .collect();

    let locations = coords.iter().enumerate().map(|(id, c)| Location { id, coords: *c }).collect();
    let variables = (1..=p).map(|j| format!("var{j}")).collect();
    let dataset = StDataset::new(locations, variables, (1..=t as i64).collect(), values)?;
    Ok(SyntheticTruth { dataset, a_true, b_true, x_true, xi_true, new_coords, a_new, xi_new, x_future, xi_future })
}

/// One replication's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub cell: usize,
    pub rep: usize,
    pub d_hat: Option<usize>,
    pub r_hat: Option<usize>,
    pub metrics: MetricReport,
    pub error: Option<String>,
}

/// Options shared by every replication of a grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub reps: usize,
    pub workers: usize,
    pub master_seed: u64,
    /// Fit with the true ranks instead of selecting them.
    pub true_ranks: bool,
    /// Skip kriging and forecasting (loading accuracy only).
    pub skip_prediction: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { reps: 1, workers: 1, master_seed: 0, true_ranks: false, skip_prediction: false }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of cell `index` under `master`.
pub fn cell_seed(master: u64, index: usize) -> u64 {
    splitmix(master ^ splitmix(index as u64))
}

/// Generates, fits and scores one replication.
pub fn run_replication(spec: &GeneratorSpec, rep: usize, opts: &GridOptions) -> Result<(usize, usize, MetricReport)> {
    let truth = generate_rep(spec, rep as u64)?;
    let cfg = FitConfig {
        d: if opts.true_ranks { crate::factors::RankSpec::Fixed(spec.d) } else { crate::factors::RankSpec::Auto },
        r: if opts.true_ranks { crate::factors::RankSpec::Fixed(spec.r) } else { crate::factors::RankSpec::Auto },
        seed: splitmix(spec.seed ^ (rep as u64).rotate_left(17)),
        sieve: if opts.skip_prediction {
            None
        } else {
            Some(SieveOptions { domain: Some(study_domain()), ..SieveOptions::default() })
        },
        mar: if opts.skip_prediction { None } else { FitConfig::default().mar },
        ..FitConfig::default()
    };
    let out = fit_detailed(&truth.dataset, &cfg)?;
    let model = &out.model;
    let part = &model.partition;

    let mut m = MetricReport::default();
    let d_a1 = subspace_distance(&model.a1_hat, &select_rows(&truth.a_true, &part.set1))?;
    let d_a2 = subspace_distance(&model.a2_hat, &select_rows(&truth.a_true, &part.set2))?;
    m.d_a1 = Some(d_a1);
    m.d_a2 = Some(d_a2);
    m.d_a_avg = Some((d_a1 + d_a2) / 2.0);
    m.d_a_unified = Some(subspace_distance(&model.a_hat, &truth.a_true)?);
    m.d_b = Some(subspace_distance(&model.b_hat, &truth.b_true)?);

    // signals are estimated as deviations from the temporal mean
    let mean = truth.xi_true.iter().fold(DMatrix::zeros(spec.n, spec.p), |acc, x| acc + x) / spec.t as f64;
    let centered_truth: Vec<_> = truth.xi_true.iter().map(|x| x - &mean).collect();
    m.mse_signal = Some(mse_signal(&out.first_stage, &centered_truth)?);
    m.mse_signal_reestimated = Some(mse_signal(&model.signals(), &centered_truth)?);

    if !opts.skip_prediction {
        let kriged = krige_model(model, &truth.new_coords, Scale::Observation)?;
        m.mspe_spatial = Some(mspe_spatial(&kriged, &truth.xi_new)?);
        let var = fit_var1(&model.x_series)?;
        for h in 1..=spec.horizon.min(2) {
            let mar = mspe_temporal(&forecast_model(model, h, Scale::Observation)?, &truth.xi_future[h - 1])?;
            let vec = mspe_temporal(&forecast_with_var(model, &var, h, Scale::Observation)?, &truth.xi_future[h - 1])?;
            if h == 1 {
                m.mspe_temporal_h1 = Some(mar);
                m.mspe_temporal_var_h1 = Some(vec);
            } else {
                m.mspe_temporal_h2 = Some(mar);
                m.mspe_temporal_var_h2 = Some(vec);
            }
        }
    }
    Ok((model.d(), model.r(), m))
}

/// Runs every replication of every cell. Cell seeds are derived from the
/// master seed and the cell's position, so results do not depend on the
/// worker count.
pub fn run_grid(grid: &[GeneratorSpec], opts: &GridOptions) -> Result<ExperimentReport> {
    if opts.reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let cells: Vec<GeneratorSpec> = grid
        .iter()
        .enumerate()
        .map(|(i, s)| GeneratorSpec { seed: cell_seed(opts.master_seed, i), ..s.clone() })
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..opts.reps).map(move |r| (c, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let records: Vec<RepRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, rep)| match run_replication(&cells[cell], rep, opts) {
                Ok((d, r, metrics)) => RepRecord { cell, rep, d_hat: Some(d), r_hat: Some(r), metrics, error: None },
                Err(e) => {
                    log::warn!("cell {cell} replication {rep} failed: {e}");
                    RepRecord { cell, rep, d_hat: None, r_hat: None, metrics: MetricReport::default(), error: Some(e.to_string()) }
                }
            })
            .collect()
    });
    Ok(ExperimentReport { cells, records })
}

/// Mean and sample standard deviation of the present values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

pub fn summarize(values: impl IntoIterator<Item = f64>) -> Summary {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    let count = v.len();
    if count == 0 {
        return Summary { mean: f64::NAN, sd: f64::NAN, count };
    }
    let mean = v.iter().sum::<f64>() / count as f64;
    let sd = if count > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt() } else { 0.0 };
    Summary { mean, sd, count }
}

/// Which summary table to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    RankFrequency,
    LoadingDistance,
    PredictionError,
}

impl Table {
    pub fn file_name(self) -> &'static str {
        match self {
            Table::RankFrequency => "table1_rank_freq.csv",
            Table::LoadingDistance => "table3_loading_dist.csv",
            Table::PredictionError => "table4_mspe.csv",
        }
    }
}

/// All replication records of a grid run.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<GeneratorSpec>,
    pub records: Vec<RepRecord>,
}

const CELL_COLUMNS: [&str; 7] = ["model", "gamma", "T", "p", "n", "reps", "failures"];

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

impl ExperimentReport {
    pub fn cell_records(&self, cell: usize) -> impl Iterator<Item = &RepRecord> {
        self.records.iter().filter(move |r| r.cell == cell)
    }

    fn ok_records(&self, cell: usize) -> impl Iterator<Item = &RepRecord> {
        self.cell_records(cell).filter(|r| r.error.is_none())
    }

    /// Share of successful replications that selected ranks `(d, r)`.
    pub fn rank_frequency(&self, cell: usize, d: usize, r: usize) -> f64 {
        let (hits, total) = self
            .ok_records(cell)
            .fold((0usize, 0usize), |(h, t), rec| (h + usize::from(rec.d_hat == Some(d) && rec.r_hat == Some(r)), t + 1));
        if total == 0 { f64::NAN } else { hits as f64 / total as f64 }
    }

    /// Summary of one metric over the successful replications of a cell.
    pub fn metric(&self, cell: usize, pick: impl Fn(&MetricReport) -> Option<f64>) -> Summary {
        summarize(self.ok_records(cell).filter_map(|r| pick(&r.metrics)))
    }

    pub fn failures(&self, cell: usize) -> usize {
        self.cell_records(cell).filter(|r| r.error.is_some()).count()
    }

    fn cell_prefix(&self, cell: usize) -> Vec<String> {
        let c = &self.cells[cell];
        vec![
            format!("{:?}", c.noise_model),
            format!("{}", c.gamma),
            c.t.to_string(),
            c.p.to_string(),
            c.n.to_string(),
            self.cell_records(cell).count().to_string(),
            self.failures(cell).to_string(),
        ]
    }

    pub fn write_table<W: Write>(&self, table: Table, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        match table {
            Table::RankFrequency => {
                let mut header: Vec<String> = CELL_COLUMNS.iter().map(|s| s.to_string()).collect();
                header.extend(["d_true", "r_true", "freq_true_pair", "freq_d_correct", "freq_r_correct", "pair_counts"].map(String::from));
                wtr.write_record(&header)?;
                for cell in 0..self.cells.len() {
                    let spec = &self.cells[cell];
                    let ok: Vec<&RepRecord> = self.ok_records(cell).collect();
                    let share = |f: &dyn Fn(&RepRecord) -> bool| {
                        if ok.is_empty() { f64::NAN } else { ok.iter().filter(|r| f(r)).count() as f64 / ok.len() as f64 }
                    };
                    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
                    for r in &ok {
                        *pairs.entry((r.d_hat.unwrap_or(0), r.r_hat.unwrap_or(0))).or_default() += 1;
                    }
                    let counts = pairs.iter().map(|((d, r), c)| format!("({d};{r}):{c}")).collect::<Vec<_>>().join(" ");
                    let mut row = self.cell_prefix(cell);
                    row.extend([
                        spec.d.to_string(),
                        spec.r.to_string(),
                        fmt(self.rank_frequency(cell, spec.d, spec.r)),
                        fmt(share(&|r| r.d_hat == Some(spec.d))),
                        fmt(share(&|r| r.r_hat == Some(spec.r))),
                        counts,
                    ]);
                    wtr.write_record(&row)?;
                }
            }
            Table::LoadingDistance | Table::PredictionError => {
                let cols: Vec<(&str, fn(&MetricReport) -> Option<f64>)> = if table == Table::LoadingDistance {
                    vec![
                        ("d_a1", |m| m.d_a1),
                        ("d_a2", |m| m.d_a2),
                        ("d_a_avg", |m| m.d_a_avg),
                        ("d_a_unified", |m| m.d_a_unified),
                        ("d_b", |m| m.d_b),
                    ]
                } else {
                    vec![
                        ("spatial", |m| m.mspe_spatial),
                        ("mar_h1", |m| m.mspe_temporal_h1),
                        ("mar_h2", |m| m.mspe_temporal_h2),
                        ("var_h1", |m| m.mspe_temporal_var_h1),
                        ("var_h2", |m| m.mspe_temporal_var_h2),
                    ]
                };
                let mut header: Vec<String> = CELL_COLUMNS.iter().map(|s| s.to_string()).collect();
                for (name, _) in &cols {
                    header.push(format!("{name}_mean"));
                    header.push(format!("{name}_sd"));
                }
                wtr.write_record(&header)?;
                for cell in 0..self.cells.len() {
                    let mut row = self.cell_prefix(cell);
                    for (_, pick) in &cols {
                        let s = self.metric(cell, pick);
                        row.push(fmt(s.mean));
                        row.push(fmt(s.sd));
                    }
                    wtr.write_record(&row)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// One row per replication with every metric.
    pub fn write_raw<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = CELL_COLUMNS[..5].iter().map(|s| s.to_string()).collect();
        header.extend(["cell", "rep", "d_hat", "r_hat"].map(String::from));
        header.extend(MetricReport::CSV_HEADER.iter().map(|s| s.to_string()));
        header.push("error".into());
        wtr.write_record(&header)?;
        for rec in &self.records {
            let mut row: Vec<String> = self.cell_prefix(rec.cell)[..5].to_vec();
            row.extend([
                rec.cell.to_string(),
                rec.rep.to_string(),
                rec.d_hat.map(|v| v.to_string()).unwrap_or_default(),
                rec.r_hat.map(|v| v.to_string()).unwrap_or_default(),
            ]);
            row.extend(rec.metrics.csv_row());
            row.push(rec.error.clone().unwrap_or_default());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes the requested tables plus `raw_metrics.csv` into `dir`,
    /// returning the written paths.
    pub fn write_dir(&self, dir: &Path, tables: &[Table]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for &t in tables {
            let path = dir.join(t.file_name());
            let mut f = BufWriter::new(File::create(&path)?);
            self.write_table(t, &mut f)?;
            f.flush()?;
            written.push(path);
        }
        let path = dir.join("raw_metrics.csv");
        let mut f = BufWriter::new(File::create(&path)?);
        self.write_raw(&mut f)?;
        f.flush()?;
        written.push(path);
        Ok(written)
    }
}

/// Size of a reproduction run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunScale {
    /// One replication of two small cells.
    Smoke,
    /// 50 replications of a reduced grid.
    Desk,
    /// 200 replications of the full grid.
    Full,
}

/// Cells and replication count for reproducing `table` at `scale`.
pub fn reproduction_grid(table: Table, scale: RunScale) -> (Vec<GeneratorSpec>, usize) {
    let cell = |t, p, n, g| GeneratorSpec::study(t, p, n, g, NoiseModel::I);
    match scale {
        RunScale::Smoke => (vec![cell(60, 10, 50, 0.0), cell(60, 10, 100, 0.5)], 1),
        RunScale::Desk => {
            let cells = match table {
                Table::RankFrequency => vec![
                    cell(240, 20, 200, 0.0),
                    cell(60, 10, 50, 0.5),
                    cell(60, 10, 50, 0.0),
                    cell(240, 20, 200, 0.5),
                    cell(120, 20, 100, 0.0),
                ],
                Table::LoadingDistance => vec![
                    cell(240, 40, 400, 0.0),
                    cell(60, 20, 100, 0.0),
                    cell(120, 20, 100, 0.0),
                    cell(240, 20, 100, 0.0),
                ],
                Table::PredictionError => vec![
                    cell(60, 40, 400, 0.0),
                    cell(120, 40, 400, 0.0),
                    cell(240, 40, 400, 0.0),
                    cell(240, 10, 50, 0.0),
                ],
            };
            (cells, 50)
        }
        RunScale::Full => {
            let gammas: &[f64] = match table {
                Table::PredictionError => &[0.0],
                _ => &[0.0, 0.5],
            };
            let mut cells = Vec::new();
            for &g in gammas {
                for n in [50, 100, 200, 400] {
                    for p in [10, 20, 40] {
                        for t in [60, 120, 240] {
                            cells.push(cell(t, p, n, g));
                        }
                    }
                }
            }
            (cells, 200)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorSpec {
        GeneratorSpec { seed, ..GeneratorSpec::study(40, 6, 30, 0.0, NoiseModel::I) }
    }

    #[test]
    fn noiseless_spec_gives_exact_signal() {
        let spec = GeneratorSpec { noise_scale: 0.0, ..small(1) };
        let truth = generate(&spec).unwrap();
        for (y, xi) in truth.dataset.values().iter().zip(&truth.xi_true) {
            assert_eq!(y, xi);
        }
        for (t, x) in truth.x_true.iter().enumerate() {
            assert!((&truth.a_true * x * truth.b_true.transpose() - &truth.xi_true[t]).amax() == 0.0);
        }
        assert_eq!(truth.x_future.len(), 2);
        assert_eq!(truth.xi_new.len(), 40);
    }

    #[test]
    fn locations_lie_in_square() {
        let spec = GeneratorSpec { n: 400, ..small(2) };
        let truth = generate(&spec).unwrap();
        assert!(truth.dataset.coords().iter().chain(&truth.new_coords).all(|s| study_domain().contains(*s)));
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let spec = small(3);
        let a = generate_rep(&spec, 4).unwrap();
        let b = generate_rep(&spec, 4).unwrap();
        let c = generate_rep(&spec, 5).unwrap();
        assert_eq!(a.dataset.values(), b.dataset.values());
        assert_ne!(a.dataset.values(), c.dataset.values());
    }

    #[test]
    fn innovation_models() {
        for model in [NoiseModel::II, NoiseModel::III] {
            let spec = GeneratorSpec { noise_model: model, ..small(4) };
            let cov = spec.innovation_covariance().unwrap().unwrap();
            assert!((cov.trace() / 6.0 - 1.0).abs() < 1e-12);
            assert!(cov.clone().cholesky().is_some());
            generate(&spec).unwrap();
        }
        let two = GeneratorSpec { noise_model: NoiseModel::II, ..small(4) }.innovation_covariance().unwrap().unwrap();
        assert!((two[(0, 1)] - 0.2).abs() < 1e-15 && (two[(0, 4)] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn stationary_covariance_solves_lyapunov() {
        let spec = small(5);
        let g = spec.factor_covariance().unwrap();
        let phi = spec.phi_c().unwrap().transpose().kronecker(&spec.phi_r().unwrap());
        assert!((&phi * &g * phi.transpose() + DMatrix::identity(6, 6) - &g).amax() < 1e-10);
        // diagonal recursion: var = 1 / (1 - φ_r² φ_c²)
        assert!((g[(0, 0)] - 1.0 / (1.0 - 0.49 * 0.64)).abs() < 1e-10);
    }

    #[test]
    fn snr_scales_with_noise() {
        let spec = small(6);
        let base = spec.snr(20_000, 1).unwrap();
        let half = GeneratorSpec { noise_scale: 0.5, ..spec.clone() }.snr(20_000, 1).unwrap();
        assert!((half - 4.0 * base).abs() < 1e-9 * half);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GeneratorSpec { gamma: 1.5, ..small(0) }.validate().is_err());
        assert!(GeneratorSpec { phi_r: Some(vec![vec![1.5]]), d: 1, ..small(0) }.validate().is_err());
        assert!(GeneratorSpec { d: 2, phi_r: Some(vec![vec![0.5, 0.0, 0.0]; 3]), ..small(0) }.validate().is_err());
    }

    #[test]
    fn grid_runs_and_is_worker_independent() {
        let grid = vec![GeneratorSpec::study(40, 6, 30, 0.0, NoiseModel::I), GeneratorSpec::study(40, 6, 40, 0.5, NoiseModel::II)];
        let one = run_grid(&grid, &GridOptions { reps: 2, workers: 1, master_seed: 9, ..Default::default() }).unwrap();
        let two = run_grid(&grid, &GridOptions { reps: 2, workers: 2, master_seed: 9, ..Default::default() }).unwrap();
        assert_eq!(one.records, two.records);
        assert_eq!(one.records.len(), 4);
        let mut a = Vec::new();
        one.write_table(Table::PredictionError, &mut a).unwrap();
        let mut b = Vec::new();
        two.write_table(Table::PredictionError, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("model,gamma,T,p,n,reps,failures,spatial_mean"));
    }

    #[test]
    fn failed_replications_are_counted() {
        // three factors cannot be fitted on location sets of two
        let grid = vec![GeneratorSpec::study(20, 4, 4, 0.0, NoiseModel::I)];
        let rep = run_grid(&grid, &GridOptions { reps: 2, true_ranks: true, ..Default::default() }).unwrap();
        assert_eq!(rep.failures(0), 2);
        let mut out = Vec::new();
        rep.write_table(Table::RankFrequency, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().lines().nth(1).unwrap().contains(",2,2,"));
    }

    #[test]
    fn summaries() {
        let s = summarize([1.0, 2.0, 3.0, f64::NAN]);
        assert_eq!(s.count, 3);
        assert!((s.mean - 2.0).abs() < 1e-15 && (s.sd - 1.0).abs() < 1e-15);
        assert!(summarize(std::iter::empty()).mean.is_nan());
    }
}
