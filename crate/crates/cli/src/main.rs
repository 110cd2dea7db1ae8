//! `stfactor` command-line front end.
//!
//! Exit codes: 0 success, 2 unreadable or malformed input, 3 numerical
//! failure, 4 invalid configuration.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use stfactor::artifact::MatrixRecord;
use stfactor::linalg::select_rows;
use stfactor::predict::{holdout_spatial_cv, mse_signal, CvTarget};
use stfactor::sim::{
    generate_rep, reproduction_grid, run_grid, GeneratorSpec, GridOptions, NoiseModel, NuggetScale, RunScale, Table,
};
use stfactor::{
    fit_detailed, fit_var1, forecast_model, forecast_with_var, krige_model, load_dataset, load_model, save_dataset,
    save_model, subspace_distance, DataFormat, Dataset, Error, ErrorClass, FitConfig, MarInit, MetricReport, Model,
    Partition, RankSpec, Rect, Result, Scale,
};

#[derive(Parser, Debug)]
#[command(name = "stfactor", version, about = "Matrix-factor modelling, kriging and forecasting of spatio-temporal data")]
struct Cli {
    /// More log output (repeat for debug level).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from the simulation design.
    Simulate(SimulateArgs),
    /// Fit the factor model to a dataset and write a model artifact.
    Fit(FitArgs),
    /// Predict signals at new locations from a fitted model.
    Krige(KrigeArgs),
    /// Forecast future signals at the sampled locations.
    Forecast(ForecastArgs),
    /// Score a model against known truth, or run hold-out cross-validation.
    Evaluate(EvaluateArgs),
    /// Run a Monte-Carlo grid and write the summary tables.
    Reproduce(ReproduceArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl FormatArg {
    fn resolve(arg: Option<Self>, path: &Path) -> DataFormat {
        match arg {
            Some(FormatArg::Csv) => DataFormat::LongCsv,
            Some(FormatArg::Json) => DataFormat::DenseJson,
            None => DataFormat::from_path(path),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    I,
    Ii,
    Iii,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NuggetArg {
    OverTwoRootThree,
    HalfTimesRootThree,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum ScaleArg {
    /// Deviations from the temporal mean.
    #[default]
    Centered,
    /// Original units, temporal mean added back.
    Observation,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Centered => Scale::Centered,
            ScaleArg::Observation => Scale::Observation,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Dataset format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Generator settings as JSON; replaces the design flags below.
    #[arg(long, conflicts_with_all = ["t", "p", "n", "gamma", "model", "noise_scale", "nugget"])]
    config: Option<PathBuf>,
    /// Number of time points.
    #[arg(long, default_value_t = 60)]
    t: usize,
    /// Number of variables.
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Number of locations.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Variable factor strength in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Innovation covariance model.
    #[arg(long, value_enum, default_value = "i")]
    model: ModelArg,
    /// Multiplier on the nugget standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    /// Scaling of the nugget variance.
    #[arg(long, value_enum, default_value = "over-two-root-three")]
    nugget: NuggetArg,
    /// Seed of the design.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replication index within the design.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Also write the true loadings and signals (JSON) for `evaluate`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input dataset (long CSV or dense JSON).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Where to write the model artifact.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the text report; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Fit settings as JSON; individual flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of spatial factors, or `auto`.
    #[arg(long)]
    d: Option<String>,
    /// Number of variable factors, or `auto`.
    #[arg(long)]
    r: Option<String>,
    /// Largest lag of the variable moment.
    #[arg(long)]
    h0: Option<usize>,
    /// Seed of the random location split.
    #[arg(long)]
    seed: Option<u64>,
    /// Location split as JSON (`{"set1": [...], "set2": [...], "seed": 0}`).
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Spline degree of the loading-function fit.
    #[arg(long)]
    degree: Option<usize>,
    /// Interior knots per coordinate.
    #[arg(long)]
    knots: Option<usize>,
    /// Sieve domain as `lo1,lo2,hi1,hi2`; the padded bounding box by default.
    #[arg(long)]
    domain: Option<String>,
    /// Refuse to fall back to a ridge fit on an ill-conditioned design.
    #[arg(long)]
    no_ridge: bool,
    /// Skip the loading-function fit (no kriging afterwards).
    #[arg(long)]
    no_sieve: bool,
    /// Skip the factor dynamics fit (no forecasting afterwards).
    #[arg(long)]
    no_mar: bool,
    /// Convergence tolerance of the dynamics fit.
    #[arg(long)]
    mar_tol: Option<f64>,
    /// Iteration cap of the dynamics fit.
    #[arg(long)]
    mar_iters: Option<usize>,
    /// Warm-start the dynamics fit from the nearest Kronecker product.
    #[arg(long)]
    mar_warm_start: bool,
    /// Truth file from `simulate --truth`; adds distances to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KrigeArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with columns `s1,s2`.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "centered")]
    scale: ScaleArg,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    /// Forecast steps 1..=horizon.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "centered")]
    scale: ScaleArg,
    /// Use an unrestricted VAR(1) on the vectorized factors instead.
    #[arg(long)]
    var: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Fitted model to score against `--truth`.
    #[arg(long, requires = "truth")]
    model: Option<PathBuf>,
    /// Truth file from `simulate --truth`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Dataset for hold-out cross-validation.
    #[arg(long, conflicts_with = "model")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Share of locations held out per repetition.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Cross-validation repetitions.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableArg {
    #[value(name = "1")]
    One,
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RunScaleArg {
    Smoke,
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[arg(long, value_enum, default_value = "all")]
    table: TableArg,
    #[arg(long, value_enum, default_value = "smoke")]
    scale: RunScaleArg,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Master seed of the grid.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override the replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Cell list as JSON (array of generator settings); replaces the built-in grid.
    #[arg(long)]
    grid: Option<PathBuf>,
}

/// True loadings and signals of a simulated dataset.
#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    a: MatrixRecord,
    b: MatrixRecord,
    /// Noise-free signals, one per time point.
    signals: Vec<MatrixRecord>,
}

impl TruthFile {
    fn load(path: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let tf: TruthFile = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        let signals = tf.signals.iter().map(|s| s.to_matrix("signal")).collect::<Result<Vec<_>>>()?;
        Ok((tf.a.to_matrix("a")?, tf.b.to_matrix("b")?, signals))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_rank(s: &str) -> Result<RankSpec> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(RankSpec::Auto);
    }
    match s.parse::<usize>() {
        Ok(k) if k > 0 => Ok(RankSpec::Fixed(k)),
        _ => Err(Error::Config(format!("rank must be a positive integer or `auto`, got {s:?}"))),
    }
}

fn parse_domain(s: &str) -> Result<Rect> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("domain {s:?}: {e}")))?;
    if v.len() != 4 {
        return Err(Error::Config(format!("domain needs four numbers, got {}", v.len())));
    }
    Rect::new([v[0], v[1]], [v[2], v[3]]).map_err(|e| Error::Config(e.to_string()))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let spec = match &args.config {
        Some(path) => read_json::<GeneratorSpec>(path)?,
        None => GeneratorSpec {
            noise_scale: args.noise_scale,
            nugget: match args.nugget {
                NuggetArg::OverTwoRootThree => NuggetScale::OverTwoRootThree,
                NuggetArg::HalfTimesRootThree => NuggetScale::HalfTimesRootThree,
            },
            seed: args.seed,
            ..GeneratorSpec::study(
                args.t,
                args.p,
                args.n,
                args.gamma,
                match args.model {
                    ModelArg::I => NoiseModel::I,
                    ModelArg::Ii => NoiseModel::II,
                    ModelArg::Iii => NoiseModel::III,
                },
            )
        },
    };
    let truth = generate_rep(&spec, args.rep)?;
    save_dataset(&truth.dataset, &args.out, FormatArg::resolve(args.format, &args.out))?;
    if let Some(path) = &args.truth {
        let tf = TruthFile {
            a: MatrixRecord::from_matrix(&truth.a_true),
            b: MatrixRecord::from_matrix(&truth.b_true),
            signals: truth.xi_true.iter().map(MatrixRecord::from_matrix).collect(),
        };
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &tf)?;
        w.flush()?;
    }
    log::info!("wrote {} locations x {} variables x {} times", spec.n, spec.p, spec.t);
    Ok(())
}

fn fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<FitConfig>(path).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Config(other.to_string()),
        })?,
        None => FitConfig::default(),
    };
    if let Some(d) = &args.d {
        cfg.d = parse_rank(d)?;
    }
    if let Some(r) = &args.r {
        cfg.r = parse_rank(r)?;
    }
    if let Some(h0) = args.h0 {
        if h0 == 0 {
            return Err(Error::Config("h0 must be positive".into()));
        }
        cfg.h0 = h0;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &args.partition {
        cfg.partition = Some(read_json::<Partition>(path)?);
    }
    if args.no_sieve {
        if args.degree.is_some() || args.knots.is_some() || args.domain.is_some() {
            return Err(Error::Config("sieve settings given together with --no-sieve".into()));
        }
        cfg.sieve = None;
    } else {
        let mut s = cfg.sieve.take().unwrap_or_default();
        if let Some(deg) = args.degree {
            s.degree = deg;
        }
        if args.knots.is_some() {
            s.knots_per_dim = args.knots;
        }
        if let Some(dom) = &args.domain {
            s.domain = Some(parse_domain(dom)?);
        }
        if args.no_ridge {
            s.allow_ridge = false;
        }
        if s.degree == 0 {
            return Err(Error::Config("spline degree must be positive".into()));
        }
        cfg.sieve = Some(s);
    }
    if args.no_mar {
        if args.mar_tol.is_some() || args.mar_iters.is_some() || args.mar_warm_start {
            return Err(Error::Config("dynamics settings given together with --no-mar".into()));
        }
        cfg.mar = None;
    } else {
        let mut m = cfg.mar.take().unwrap_or_default();
        if let Some(tol) = args.mar_tol {
            if !(tol > 0.0) {
                return Err(Error::Config("MAR tolerance must be positive".into()));
            }
            m.tol = tol;
        }
        if let Some(it) = args.mar_iters {
            if it == 0 {
                return Err(Error::Config("MAR iteration cap must be positive".into()));
            }
            m.max_iter = it;
        }
        if args.mar_warm_start {
            m.init = MarInit::NearestKronecker;
        }
        cfg.mar = Some(m);
    }
    Ok(cfg)
}

fn head(v: &nalgebra::DVector<f64>, k: usize) -> String {
    v.iter().take(k).map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(" ")
}

fn fit_report(model: &Model, truth: Option<&(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>)>) -> Result<String> {
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "locations {}  variables {}  times {}", model.n_locations(), model.n_variables(), model.n_times());
    let rk = &model.ranks;
    let _ = writeln!(w, "ranks d={} r={}", rk.d, rk.r);
    if let (Some(d1), Some(d2)) = (rk.d_set1, rk.d_set2) {
        let _ = writeln!(w, "  spatial rank by location set: {d1} / {d2}");
    }
    let _ = writeln!(w, "partition {} / {} (seed {})", model.partition.n1(), model.partition.n2(), model.partition.seed);
    let _ = writeln!(w, "spectrum A1: {}", head(&model.spectra.a1, 8));
    let _ = writeln!(w, "spectrum A2: {}", head(&model.spectra.a2, 8));
    let _ = writeln!(w, "spectrum B:  {}", head(&model.spectra.b, 8));
    let _ = writeln!(w, "spectrum Psi: {}", head(&model.spectra.psi, 8));
    match &model.sieve {
        Some(f) => {
            let _ = writeln!(
                w,
                "sieve: degree {} knots/dim {} basis {} condition {:.3e}{}",
                f.config.degree,
                f.config.knots_per_dim,
                f.config.n_basis(),
                f.condition,
                if f.ridge_used { " (ridge)" } else { "" }
            );
        }
        None => {
            let _ = writeln!(w, "sieve: not fitted");
        }
    }
    match &model.mar {
        Some(m) => {
            let d = &m.diagnostics;
            let _ = writeln!(
                w,
                "dynamics: {} sweeps, objective {:.6e}, {}",
                d.iterations,
                d.objective,
                if d.converged { "converged" } else { "not converged" }
            );
            let _ = writeln!(w, "  row coefficient diag: {:?}", m.phi_r.diagonal().iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());
            let _ = writeln!(w, "  column coefficient diag: {:?}", m.phi_c.diagonal().iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());
        }
        None => {
            let _ = writeln!(w, "dynamics: not fitted");
        }
    }
    if let Some((a, b, _)) = truth {
        let m = truth_metrics(model, a, b, None)?;
        let _ = writeln!(
            w,
            "distance A1 {:.6}  A2 {:.6}  A {:.6}  B {:.6}",
            m.d_a1.unwrap_or(f64::NAN),
            m.d_a2.unwrap_or(f64::NAN),
            m.d_a_unified.unwrap_or(f64::NAN),
            m.d_b.unwrap_or(f64::NAN)
        );
    }
    Ok(s)
}

fn fit(args: &FitArgs) -> Result<()> {
    let cfg = fit_config(args)?;
    let ds: Dataset = load_dataset(&args.data, FormatArg::resolve(args.format, &args.data))?;
    let truth = args.truth.as_deref().map(TruthFile::load).transpose()?;
    let out = fit_detailed(&ds, &cfg)?;
    save_model(&out.model, &args.out)?;
    let report = fit_report(&out.model, truth.as_ref())?;
    match &args.report {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(report.as_bytes())?;
            w.flush()?;
        }
        None => print!("{report}"),
    }
    Ok(())
}

/// Writes `time,s1,s2,variable,value` rows.
fn write_kriged(out: &Path, model: &Model, targets: &[[f64; 2]], preds: &[DMatrix<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(out)?);
    wtr.write_record(["time", "s1", "s2", "variable", "value"])?;
    for (t, pred) in preds.iter().enumerate() {
        let time = model.times[t].to_string();
        for (k, s) in targets.iter().enumerate() {
            for (j, var) in model.variables.iter().enumerate() {
                wtr.write_record([time.as_str(), &s[0].to_string(), &s[1].to_string(), var, &pred[(k, j)].to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

fn read_targets(path: &Path) -> Result<Vec<[f64; 2]>> {
    #[derive(Deserialize)]
    struct Target {
        s1: f64,
        s2: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<Target>() {
        let t = row?;
        if !(t.s1.is_finite() && t.s2.is_finite()) {
            return Err(Error::NonFiniteValue(format!("target ({}, {})", t.s1, t.s2)));
        }
        out.push([t.s1, t.s2]);
    }
    if out.is_empty() {
        return Err(Error::Parse("no target locations".into()));
    }
    Ok(out)
}

fn krige(args: &KrigeArgs) -> Result<()> {
    let model: Model = load_model(&args.model)?;
    let targets = read_targets(&args.targets)?;
    let preds = krige_model(&model, &targets, args.scale.into())?;
    write_kriged(&args.out, &model, &targets, &preds)
}

fn forecast(args: &ForecastArgs) -> Result<()> {
    if args.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let model: Model = load_model(&args.model)?;
    let var = if args.var { Some(fit_var1(&model.x_series)?) } else { None };
    let mut wtr = csv::Writer::from_writer(create(&args.out)?);
    wtr.write_record(["horizon", "location_id", "variable", "value"])?;
    for h in 1..=args.horizon {
        let pred = match &var {
            Some(v) => forecast_with_var(&model, v, h, args.scale.into())?,
            None => forecast_model(&model, h, args.scale.into())?,
        };
        for i in 0..model.n_locations() {
            for (j, var) in model.variables.iter().enumerate() {
                wtr.write_record([h.to_string(), i.to_string(), var.clone(), pred[(i, j)].to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

fn truth_metrics(
    model: &Model,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    signals: Option<&[DMatrix<f64>]>,
) -> Result<MetricReport> {
    if a.nrows() != model.n_locations() {
        return Err(Error::ShapeMismatch("truth loadings do not match the model's locations".into()));
    }
    if b.nrows() != model.n_variables() {
        return Err(Error::ShapeMismatch("truth loadings do not match the model's variables".into()));
    }
    let part = &model.partition;
    let d_a1 = subspace_distance(&model.a1_hat, &select_rows(a, &part.set1))?;
    let d_a2 = subspace_distance(&model.a2_hat, &select_rows(a, &part.set2))?;
    let mut m = MetricReport {
        d_a1: Some(d_a1),
        d_a2: Some(d_a2),
        d_a_avg: Some((d_a1 + d_a2) / 2.0),
        d_a_unified: Some(subspace_distance(&model.a_hat, a)?),
        d_b: Some(subspace_distance(&model.b_hat, b)?),
        ..MetricReport::default()
    };
    if let Some(sig) = signals {
        if sig.len() != model.n_times() {
            return Err(Error::ShapeMismatch("truth covers a different number of times".into()));
        }
        let mean = sig.iter().fold(DMatrix::zeros(a.nrows(), b.nrows()), |acc, s| acc + s) / sig.len() as f64;
        let centered: Vec<_> = sig.iter().map(|s| s - &mean).collect();
        m.mse_signal_reestimated = Some(mse_signal(&model.signals(), &centered)?);
    }
    Ok(m)
}

fn emit_json(out: Option<&Path>, json: &str) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(json.as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    match (&args.model, &args.data) {
        (Some(model_path), None) => {
            let model: Model = load_model(model_path)?;
            let truth_path = args.truth.as_ref().ok_or_else(|| Error::Config("--model needs --truth".into()))?;
            let (a, b, signals) = TruthFile::load(truth_path)?;
            let m = truth_metrics(&model, &a, &b, Some(&signals))?;
            emit_json(args.out.as_deref(), &m.to_json()?)
        }
        (None, Some(data)) => {
            if !(args.holdout > 0.0 && args.holdout < 0.5) || args.reps == 0 {
                return Err(Error::Config("hold-out share must lie in (0, 0.5) and reps must be positive".into()));
            }
            let ds: Dataset = load_dataset(data, FormatArg::resolve(args.format, data))?;
            let signals = args.truth.as_deref().map(TruthFile::load).transpose()?;
            let target = match &signals {
                Some((_, _, s)) => CvTarget::Signals(s),
                None => CvTarget::Observations,
            };
            let report = holdout_spatial_cv(&ds, args.holdout, args.reps, args.seed, &FitConfig::default(), target)?;
            emit_json(args.out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        _ => Err(Error::Config("evaluate needs either --model with --truth, or --data".into())),
    }
}

fn union_grid(scale: RunScale) -> (Vec<GeneratorSpec>, usize) {
    let mut cells: Vec<GeneratorSpec> = Vec::new();
    let mut reps = 0;
    for t in [Table::RankFrequency, Table::LoadingDistance, Table::PredictionError] {
        let (g, r) = reproduction_grid(t, scale);
        reps = reps.max(r);
        for c in g {
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
    }
    (cells, reps)
}

fn reproduce(args: &ReproduceArgs) -> Result<()> {
    let scale = match args.scale {
        RunScaleArg::Smoke => RunScale::Smoke,
        RunScaleArg::Desk => RunScale::Desk,
        RunScaleArg::Full => RunScale::Full,
    };
    let tables = match args.table {
        TableArg::One => vec![Table::RankFrequency],
        TableArg::Three => vec![Table::LoadingDistance],
        TableArg::Four => vec![Table::PredictionError],
        TableArg::All => vec![Table::RankFrequency, Table::LoadingDistance, Table::PredictionError],
    };
    let (mut cells, mut reps) = if tables.len() == 1 { reproduction_grid(tables[0], scale) } else { union_grid(scale) };
    if let Some(path) = &args.grid {
        cells = read_json::<Vec<GeneratorSpec>>(path).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Config(other.to_string()),
        })?;
    }
    if let Some(r) = args.reps {
        reps = r;
    }
    let opts = GridOptions { reps, workers: args.workers, master_seed: args.seed, ..GridOptions::default() };
    log::info!("running {} cells x {} replications", cells.len(), reps);
    let report = run_grid(&cells, &opts)?;
    for path in report.write_dir(&args.out, &tables)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Krige(a) => krige(a),
        Command::Forecast(a) => forecast(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reproduce(a) => reproduce(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Parse => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::Config => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
