//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 7 9`.

use std::cell::OnceCell;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stfactor::data::{partition_ids, PartitionStrategy};
use stfactor::factors::{estimate_factors, estimate_loadings, estimate_signals};
use stfactor::linalg::{select_rows, symmetric_eigen_desc};
use stfactor::moments::{spatial_moments, temporal_moments};
use stfactor::predict::{mse_signal, mspe_spatial, mspe_temporal};
use stfactor::sieve::{design_matrix, Rect, SieveConfig};
use stfactor::sim::{generate, run_grid, ExperimentReport, GeneratorSpec, GridOptions, NoiseModel, NuggetScale};
use stfactor::{fit_detailed, fit_mar1, subspace_distance, Dataset, FitConfig, Location, MarConfig, RankSpec, SieveOptions};

const SEED: u64 = 20_240_607;

struct Ctx {
    workers: usize,
    /// The three n = 400, p = 40 cells, 100 replications each.
    large: OnceCell<ExperimentReport>,
}

impl Ctx {
    fn grid(&self, cells: Vec<GeneratorSpec>, reps: usize, skip_prediction: bool) -> ExperimentReport {
        let opts = GridOptions { reps, workers: self.workers, master_seed: SEED, skip_prediction, ..GridOptions::default() };
        run_grid(&cells, &opts).expect("grid runs")
    }

    fn large(&self) -> &ExperimentReport {
        self.large.get_or_init(|| {
            let cells = [60, 120, 240].map(|t| GeneratorSpec::study(t, 40, 400, 0.0, NoiseModel::I)).to_vec();
            self.grid(cells, 100, false)
        })
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of a metric over the first `reps` successful replications of a cell.
fn cell_mean(rep: &ExperimentReport, cell: usize, reps: usize, pick: impl Fn(&stfactor::MetricReport) -> Option<f64>) -> f64 {
    mean(rep.cell_records(cell).filter(|r| r.error.is_none() && r.rep < reps).filter_map(|r| pick(&r.metrics)))
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn criterion_1(ctx: &Ctx) -> (bool, String) {
    let cells = vec![GeneratorSpec::study(240, 20, 200, 0.0, NoiseModel::I), GeneratorSpec::study(60, 10, 50, 0.5, NoiseModel::I)];
    let rep = ctx.grid(cells, 50, true);
    let strong = rep.rank_frequency(0, 3, 2);
    let weak = rep.rank_frequency(1, 3, 2);
    (strong >= 0.95 && weak < 0.5, format!("freq(3,2) strong cell {strong:.2} (>= 0.95), weak cell {weak:.2} (< 0.5)"))
}

fn criterion_2(ctx: &Ctx) -> (bool, String) {
    let rep = ctx.large();
    let avg = cell_mean(rep, 2, 50, |m| m.d_a_avg);
    let unified = cell_mean(rep, 2, 50, |m| m.d_a_unified);
    let db = cell_mean(rep, 2, 50, |m| m.d_b);
    let ok = within(avg, 0.013, 0.003) && within(unified, 0.013, 0.003) && within(db, 0.016, 0.005);
    (ok, format!("mean D(A1,A2 avg) {avg:.4}, D(A) {unified:.4} (0.013 ± 0.003); D(B) {db:.4} (0.016 ± 0.005)"))
}

fn criterion_3(ctx: &Ctx) -> (bool, String) {
    let cells = [60, 120, 240].map(|t| GeneratorSpec::study(t, 20, 100, 0.0, NoiseModel::I)).to_vec();
    let rep = ctx.grid(cells, 20, true);
    let d: Vec<f64> = (0..3).map(|c| cell_mean(&rep, c, 20, |m| m.d_a1)).collect();
    (d[0] > d[1] && d[1] > d[2], format!("mean D(A1) over T=60,120,240: {:.4} > {:.4} > {:.4}", d[0], d[1], d[2]))
}

fn criterion_4(ctx: &Ctx) -> (bool, String) {
    let large = cell_mean(ctx.large(), 2, 50, |m| m.mspe_spatial);
    let small_rep = ctx.grid(vec![GeneratorSpec::study(240, 10, 50, 0.0, NoiseModel::I)], 50, false);
    let small = cell_mean(&small_rep, 0, 50, |m| m.mspe_spatial);
    let ok = within(large, 0.015, 0.005) && within(small, 0.47, 0.10);
    (ok, format!("spatial MSPE n=400: {large:.4} (0.015 ± 0.005); n=50: {small:.4} (0.47 ± 0.10)"))
}

fn criterion_5(ctx: &Ctx) -> (bool, String) {
    let rep = ctx.large();
    // one-step means for T = 60, 120, 240
    let paper_mar = [1.907, 1.967, 2.062];
    let paper_var = [2.033, 2.021, 2.086];
    let mar: Vec<f64> = (0..3).map(|c| cell_mean(rep, c, 100, |m| m.mspe_temporal_h1)).collect();
    let var: Vec<f64> = (0..3).map(|c| cell_mean(rep, c, 100, |m| m.mspe_temporal_var_h1)).collect();
    let pooled_mar = mean(mar.iter().copied());
    let pooled_var = mean(var.iter().copied());
    let order = pooled_mar <= pooled_var;
    let close = (0..3).all(|c| within(mar[c] / paper_mar[c], 1.0, 0.25) && within(var[c] / paper_var[c], 1.0, 0.25));
    (
        order && close,
        format!(
            "pooled MAR {pooled_mar:.3} <= VAR {pooled_var:.3}: {order}; cells MAR {:.3}/{:.3}/{:.3} VAR {:.3}/{:.3}/{:.3} within 25% of reference: {close}",
            mar[0], mar[1], mar[2], var[0], var[1], var[2]
        ),
    )
}

fn criterion_6(ctx: &Ctx) -> (bool, String) {
    let rep = ctx.grid(vec![GeneratorSpec::study(120, 20, 100, 0.0, NoiseModel::I)], 50, true);
    let ok: Vec<bool> = rep
        .cell_records(0)
        .filter(|r| r.error.is_none())
        .map(|r| r.metrics.mse_signal_reestimated.unwrap() <= r.metrics.mse_signal.unwrap())
        .collect();
    let share = ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64;
    (share >= 0.8 && ok.len() == 50, format!("re-estimated signal no worse in {share:.2} of {} replications (>= 0.80)", ok.len()))
}

fn criterion_7(_: &Ctx) -> (bool, String) {
    let spec = GeneratorSpec::study(240, 40, 400, 0.0, NoiseModel::I);
    let snr = spec.snr(100_000, SEED).unwrap();
    let alt = GeneratorSpec { nugget: NuggetScale::HalfTimesRootThree, ..spec }.snr(100_000, SEED).unwrap();
    (within(snr, 2.58, 0.15), format!("generator SNR {snr:.3} (2.58 ± 0.15); alternate nugget scaling gives {alt:.3}"))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, t: usize) -> Dataset {
    let locations = (0..n).map(|id| Location { id, coords: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] }).collect();
    let values = (0..t).map(|_| DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))).collect();
    Dataset::new(locations, (0..p).map(|j| format!("v{j}")).collect(), (0..t as i64).collect(), values).unwrap()
}

/// Cross-covariance sums written as explicit loops over variable pairs.
fn naive_spatial(ds: &Dataset, set1: &[usize], set2: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, t) = (ds.n_variables(), ds.n_times());
    let mut m1 = DMatrix::zeros(set1.len(), set1.len());
    let mut m2 = DMatrix::zeros(set2.len(), set2.len());
    for i in 0..p {
        for j in 0..p {
            let mut omega = DMatrix::<f64>::zeros(set1.len(), set2.len());
            for y in ds.values() {
                for (a, &la) in set1.iter().enumerate() {
                    for (b, &lb) in set2.iter().enumerate() {
                        omega[(a, b)] += y[(la, i)] * y[(lb, j)] / t as f64;
                    }
                }
            }
            m1 += &omega * omega.transpose();
            m2 += omega.transpose() * &omega;
        }
    }
    (m1, m2)
}

/// Lagged cross-covariance sums over every pair of sites.
fn naive_temporal(ds: &Dataset, h0: usize) -> DMatrix<f64> {
    let (n, p, t) = (ds.n_locations(), ds.n_variables(), ds.n_times());
    let y = ds.values();
    let mut m = DMatrix::zeros(p, p);
    for h in 1..=h0 {
        for si in 0..n {
            for sj in 0..n {
                let mut omega = DMatrix::<f64>::zeros(p, p);
                for s in 0..t - h {
                    for a in 0..p {
                        for b in 0..p {
                            omega[(a, b)] += y[s][(si, a)] * y[s + h][(sj, b)] / (t - h) as f64;
                        }
                    }
                }
                m += &omega * omega.transpose();
            }
        }
    }
    m
}

/// Projection-matrix form of the subspace distance.
fn naive_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let proj = |m: &DMatrix<f64>| m * (m.transpose() * m).try_inverse().unwrap() * m.transpose();
    let k = a.ncols().max(b.ncols()) as f64;
    (1.0 - (proj(a) * proj(b)).trace() / k).max(0.0).sqrt()
}

fn cox_de_boor(knots: &[f64], i: usize, k: usize, u: f64) -> f64 {
    if k == 0 {
        return if knots[i] <= u && u < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let left = knots[i + k] - knots[i];
    if left > 0.0 {
        v += (u - knots[i]) / left * cox_de_boor(knots, i, k - 1, u);
    }
    let right = knots[i + k + 1] - knots[i + 1];
    if right > 0.0 {
        v += (knots[i + k + 1] - u) / right * cox_de_boor(knots, i + 1, k - 1, u);
    }
    v
}

fn clamped_knots(lo: f64, hi: f64, interior: usize, degree: usize) -> Vec<f64> {
    let mut k = vec![lo; degree + 1];
    k.extend((1..=interior).map(|i| lo + (hi - lo) * i as f64 / (interior + 1) as f64));
    k.extend(vec![hi; degree + 1]);
    k
}

fn criterion_8(_: &Ctx) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = [0.0f64; 6];
    let mut eigen_resid = 0.0f64;
    let instances = 120;
    for _ in 0..instances {
        let n = rng.random_range(4..=6);
        let p = rng.random_range(1..=4);
        let t = rng.random_range(3..=8);
        let ds = random_dataset(&mut rng, n, p, t).center().unwrap();
        let part = partition_ids(n, &PartitionStrategy::RandomBalanced, rng.random()).unwrap();
        let mom = spatial_moments(&ds, &part).unwrap();
        let (o1, o2) = naive_spatial(&ds, &part.set1, &part.set2);
        worst[0] = worst[0].max(rel_err(&mom.m_a1, &o1)).max(rel_err(&mom.m_a2, &o2));
        let h0 = 2.min(t - 1);
        let tm = temporal_moments(&ds, h0).unwrap();
        worst[0] = worst[0].max(rel_err(&tm.m_b, &naive_temporal(&ds, h0)));

        for m in [&mom.m_a1, &mom.m_a2, &tm.m_b] {
            let e = symmetric_eigen_desc(m);
            for k in 0..e.values.len() {
                let v = e.vectors.column(k);
                let r = (m * v - v * e.values[k]).norm() / m.norm().max(1.0);
                eigen_resid = eigen_resid.max(r);
            }
        }

        // factor and signal formulas against explicit sums
        let le = estimate_loadings(&mom, &tm, RankSpec::Fixed(1), RankSpec::Fixed(1)).unwrap();
        let fs = estimate_factors(&ds, &le).unwrap();
        let sig = estimate_signals(&ds, &le, &fs).unwrap();
        for (k, y) in ds.values().iter().enumerate() {
            let mut x1 = 0.0;
            for (a, &loc) in part.set1.iter().enumerate() {
                for j in 0..p {
                    x1 += le.a1_hat[(a, 0)] * y[(loc, j)] * le.b_hat[(j, 0)];
                }
            }
            worst[1] = worst[1].max((fs.x_hat[k][(0, 0)] - x1).abs() / x1.abs().max(1e-12));
            let mut naive = DMatrix::zeros(n, p);
            for (a, &loc) in part.set1.iter().enumerate() {
                for j in 0..p {
                    naive[(loc, j)] = le.a1_hat[(a, 0)] * fs.x_hat[k][(0, 0)] * le.b_hat[(j, 0)];
                }
            }
            for (a, &loc) in part.set2.iter().enumerate() {
                for j in 0..p {
                    naive[(loc, j)] = le.a2_hat[(a, 0)] * fs.x_star_hat[k][(0, 0)] * le.b_hat[(j, 0)];
                }
            }
            worst[1] = worst[1].max(rel_err(&sig[k], &naive));
        }

        // metrics against explicit loops
        let est: Vec<DMatrix<f64>> = ds.values().iter().map(|y| y.map(|v| v * 0.9 + 0.1)).collect();
        let mut acc = 0.0;
        for (e, y) in est.iter().zip(ds.values()) {
            for i in 0..n {
                for j in 0..p {
                    acc += (e[(i, j)] - y[(i, j)]).powi(2);
                }
            }
        }
        let naive_mse = acc / (n * p * t) as f64;
        let lib = [mse_signal(&est, ds.values()).unwrap(), mspe_spatial(&est, ds.values()).unwrap()];
        for v in lib {
            worst[2] = worst[2].max((v - naive_mse).abs() / naive_mse);
        }
        let one = mspe_temporal(&est[0], &ds.values()[0]).unwrap();
        let naive_one = (&est[0] - &ds.values()[0]).iter().map(|v| v * v).sum::<f64>() / (n * p) as f64;
        worst[2] = worst[2].max((one - naive_one).abs() / naive_one);

        let ka = rng.random_range(1..=n.min(3));
        let kb = rng.random_range(1..=n.min(3));
        let a = DMatrix::from_fn(n, ka, |_, _| rng.sample(StandardNormal));
        let b = DMatrix::from_fn(n, kb, |_, _| rng.sample(StandardNormal));
        let lib = subspace_distance(&a, &b).unwrap();
        worst[2] = worst[2].max((lib - naive_distance(&a, &b)).abs());

        // invariance to a change of basis on the right
        let g = loop {
            let g = DMatrix::from_fn(ka, ka, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sv = g.singular_values();
            if sv.min() > 0.2 * sv.max() {
                break g;
            }
        };
        worst[3] = worst[3].max((subspace_distance(&(&a * g), &b).unwrap() - lib).abs());

        // tensor B-spline design against the Cox–de Boor recursion
        let degree = rng.random_range(1..=3);
        let interior = rng.random_range(0..=3);
        let dom = Rect { lo: [-1.0, -0.5], hi: [1.0, 2.0] };
        let cfg = SieveConfig::new(degree, interior, dom).unwrap();
        let pts: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(-0.99..0.99), rng.random_range(-0.49..1.99)]).collect();
        let u = design_matrix(&pts, &cfg).unwrap();
        let k0 = clamped_knots(dom.lo[0], dom.hi[0], interior, degree);
        let k1 = clamped_knots(dom.lo[1], dom.hi[1], interior, degree);
        let nb = interior + degree + 1;
        for (row, s) in pts.iter().enumerate() {
            for i0 in 0..nb {
                for i1 in 0..nb {
                    let oracle = cox_de_boor(&k0, i0, degree, s[0]) * cox_de_boor(&k1, i1, degree, s[1]);
                    worst[4] = worst[4].max((u[(row, i0 * nb + i1)] - oracle).abs());
                }
            }
        }
    }

    // alternating least squares never increases its objective
    let mut monotone = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let pr = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.6..0.6));
        let pc = DMatrix::from_fn(r, r, |_, _| rng.random_range(-0.6..0.6));
        let mut x = DMatrix::<f64>::zeros(d, r);
        let xs: Vec<_> = (0..40)
            .map(|_| {
                x = &pr * &x * &pc + DMatrix::from_fn(d, r, |_, _| rng.sample(StandardNormal));
                x.clone()
            })
            .collect();
        let m = fit_mar1(&xs, &MarConfig::default()).unwrap();
        monotone &= m.diagnostics.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    }
    worst[5] = eigen_resid;

    let ok = worst.iter().all(|&w| w <= 1e-8) && monotone;
    (
        ok,
        format!(
            "{instances} instances; max rel. error moments {:.1e}, factors/signals {:.1e}, metrics {:.1e}, basis invariance {:.1e}, splines {:.1e}, eigen residual {:.1e}; ALS monotone on 100 seeds: {monotone}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

fn criterion_9(_: &Ctx) -> (bool, String) {
    let spec = GeneratorSpec { noise_scale: 0.0, seed: SEED, ..GeneratorSpec::study(120, 20, 100, 0.0, NoiseModel::I) };
    let truth = generate(&spec).unwrap();
    let cfg = FitConfig {
        d: RankSpec::Fixed(3),
        r: RankSpec::Fixed(2),
        sieve: Some(SieveOptions { domain: Some(stfactor::sim::study_domain()), ..SieveOptions::default() }),
        ..FitConfig::default()
    };
    let out = fit_detailed(&truth.dataset, &cfg).unwrap();
    let m = &out.model;
    let d_a1 = subspace_distance(&m.a1_hat, &select_rows(&truth.a_true, &m.partition.set1)).unwrap();
    let d_b = subspace_distance(&m.b_hat, &truth.b_true).unwrap();
    let d_a = subspace_distance(&m.a_hat, &truth.a_true).unwrap();
    let means = m.means.as_ref().unwrap();
    let worst = out
        .first_stage
        .iter()
        .zip(&truth.xi_true)
        .map(|(est, xi)| (est + means - xi).amax())
        .fold(0.0, f64::max);
    let ok = d_a1 < 1e-6 && d_b < 1e-6 && d_a < 1e-6 && worst < 1e-6;
    (ok, format!("D(A1) {d_a1:.1e}, D(B) {d_b:.1e}, D(A) {d_a:.1e}, max signal error {worst:.1e} (all < 1e-6)"))
}

fn criterion_10(_: &Ctx) -> (bool, String) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (k, dir) in dirs.iter().enumerate() {
        let status = Command::new(env!("CARGO_BIN_EXE_stfactor"))
            .args(["reproduce", "--scale", "smoke", "--seed", "17", "--workers", if k == 0 { "1" } else { "2" }, "--out"])
            .arg(dir.path())
            .output()
            .expect("binary runs");
        if !status.status.success() {
            return (false, format!("reproduce failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let files = ["table1_rank_freq.csv", "table3_loading_dist.csv", "table4_mspe.csv", "raw_metrics.csv"];
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap_or_default();
    let same = files.iter().all(|f| {
        let a = read(dirs[0].path(), f);
        !a.is_empty() && a == read(dirs[1].path(), f)
    });
    (same, format!("{} smoke CSVs bit-identical across two runs: {same}", files.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx {
        workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        large: OnceCell::new(),
    };
    let criteria: [fn(&Ctx) -> (bool, String); 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let mut failed = 0;
    for (k, check) in criteria.iter().enumerate() {
        let id = k + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&ctx))) {
            Ok(r) => r,
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!ok);
        println!("criterion {id:>2}: {} [{:.0}s] {detail}", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
