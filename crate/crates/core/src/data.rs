//! Observed spatio-temporal tensors, their on-disk formats, temporal
//! centering and the two-set location split used by the moment estimators.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, to_f64, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Location<T> {
    pub id: usize,
    pub coords: [T; 2],
}

/// On-disk layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    LongCsv,
    DenseJson,
}

impl DataFormat {
    /// Guesses the format from a file extension (`.json` is dense JSON,
    /// anything else long CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DataFormat::DenseJson,
            _ => DataFormat::LongCsv,
        }
    }
}

/// `T` matrices `Y_t` (n locations × p variables) observed on a common set
/// of locations.
#[derive(Debug, Clone)]
pub struct StDataset<T: Real> {
    locations: Vec<Location<T>>,
    variables: Vec<String>,
    times: Vec<i64>,
    values: Vec<DMatrix<T>>,
    centered: bool,
    means: Option<DMatrix<T>>,
}

impl<T: Real> StDataset<T> {
    /// Validates and assembles a dataset. `times` must be strictly increasing
    /// with a constant step.
    pub fn new(
        locations: Vec<Location<T>>,
        variables: Vec<String>,
        times: Vec<i64>,
        values: Vec<DMatrix<T>>,
    ) -> Result<Self> {
        let n = locations.len();
        let p = variables.len();
        if n == 0 || p == 0 {
            return Err(Error::ShapeMismatch("dataset needs at least one location and variable".into()));
        }
        if times.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} time stamps but {} matrices",
                times.len(),
                values.len()
            )));
        }
        for (k, loc) in locations.iter().enumerate() {
            if loc.id != k {
                return Err(Error::Parse(format!("location ids must be contiguous 0..{n}, found {}", loc.id)));
            }
            if !loc.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFiniteValue(format!("coordinates of location {k}")));
            }
        }
        check_regular(&times)?;
        for (t, y) in values.iter().enumerate() {
            if y.shape() != (n, p) {
                return Err(Error::ShapeMismatch(format!("Y_{t} is {:?}, expected ({n}, {p})", y.shape())));
            }
            if let Some(((i, j), _)) = y.iter().enumerate().map(|(k, v)| ((k % n, k / n), v)).find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("time {}, location {i}, variable {}", times[t], variables[j])));
            }
        }
        Ok(Self { locations, variables, times, values, centered: false, means: None })
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_times(&self) -> usize {
        self.values.len()
    }

    pub fn locations(&self) -> &[Location<T>] {
        &self.locations
    }

    pub fn coords(&self) -> Vec<[T; 2]> {
        self.locations.iter().map(|l| l.coords).collect()
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Per (location, variable) temporal means removed by [`StDataset::center`].
    pub fn means(&self) -> Option<&DMatrix<T>> {
        self.means.as_ref()
    }

    /// Temporal mean of every (location, variable) series.
    pub fn temporal_mean(&self) -> DMatrix<T> {
        let mut acc = DMatrix::zeros(self.n_locations(), self.n_variables());
        for y in &self.values {
            acc += y;
        }
        acc / from_usize::<T>(self.n_times())
    }

    /// Subtracts each series' temporal mean.
    pub fn center(&self) -> Result<Self> {
        if self.centered {
            return Err(Error::AlreadyCentered);
        }
        let mean = self.temporal_mean();
        let values = self.values.iter().map(|y| y - &mean).collect();
        Ok(Self {
            locations: self.locations.clone(),
            variables: self.variables.clone(),
            times: self.times.clone(),
            values,
            centered: true,
            means: Some(mean),
        })
    }

    /// Keeps the values but forgets that they were centered.
    pub fn clear_centered_flag(mut self) -> Self {
        self.centered = false;
        self.means = None;
        self
    }

    /// Restricts the dataset to the given locations, renumbering them
    /// `0..ids.len()` in the given order.
    pub fn subset_locations(&self, ids: &[usize]) -> Result<Self> {
        let n = self.n_locations();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("location {bad} out of range")));
        }
        let locations = ids
            .iter()
            .enumerate()
            .map(|(k, &i)| Location { id: k, coords: self.locations[i].coords })
            .collect();
        let values = self.values.iter().map(|y| crate::linalg::select_rows(y, ids)).collect();
        let mut out = Self::new(locations, self.variables.clone(), self.times.clone(), values)?;
        if let Some(m) = &self.means {
            out.means = Some(crate::linalg::select_rows(m, ids));
            out.centered = self.centered;
        }
        Ok(out)
    }

    /// Keeps the first `t` time points.
    pub fn truncate_times(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.n_times() {
            return Err(Error::Config(format!("cannot keep {t} of {} time points", self.n_times())));
        }
        Self::new(
            self.locations.clone(),
            self.variables.clone(),
            self.times[..t].to_vec(),
            self.values[..t].to_vec(),
        )
    }
}

fn check_regular(times: &[i64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::ShapeMismatch("dataset has no time points".into()));
    }
    if times.len() < 2 {
        return Ok(());
    }
    let step = times[1] - times[0];
    if step <= 0 {
        return Err(Error::IrregularTimes("time stamps must be strictly increasing".into()));
    }
    for w in times.windows(2) {
        if w[1] - w[0] != step {
            return Err(Error::IrregularTimes(format!("gap between {} and {} differs from step {step}", w[0], w[1])));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
struct LongRow {
    time: i64,
    location_id: usize,
    s1: f64,
    s2: f64,
    variable: String,
    value: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct DenseLocation {
    id: usize,
    s1: f64,
    s2: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct DenseDataset {
    locations: Vec<DenseLocation>,
    variables: Vec<String>,
    times: Vec<i64>,
    data: Vec<Vec<Vec<f64>>>,
}

pub fn load_dataset<T: Real>(path: &Path, format: DataFormat) -> Result<StDataset<T>> {
    let file = File::open(path)?;
    match format {
        DataFormat::LongCsv => read_long_csv(BufReader::new(file)),
        DataFormat::DenseJson => read_dense_json(BufReader::new(file)),
    }
}

pub fn save_dataset<T: Real>(ds: &StDataset<T>, path: &Path, format: DataFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::LongCsv => write_long_csv(ds, &mut w)?,
        DataFormat::DenseJson => write_dense_json(ds, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv<T: Real, R: std::io::Read>(reader: R) -> Result<StDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["time", "location_id", "s1", "s2", "variable", "value"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse(format!("expected header {}", expected.join(","))));
    }

    let mut coords: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut var_index: HashMap<String, usize> = HashMap::new();
    let mut variables: Vec<String> = Vec::new();
    let mut cells: HashMap<(i64, usize, usize), f64> = HashMap::new();
    let mut times: Vec<i64> = Vec::new();

    for row in rdr.deserialize() {
        let row: LongRow = row?;
        if !row.s1.is_finite() || !row.s2.is_finite() {
            return Err(Error::NonFiniteValue(format!("coordinates of location {}", row.location_id)));
        }
        match coords.get(&row.location_id) {
            Some(&(a, b)) if a != row.s1 || b != row.s2 => return Err(Error::InconsistentCoords(row.location_id)),
            Some(_) => {}
            None => {
                coords.insert(row.location_id, (row.s1, row.s2));
            }
        }
        let v = *var_index.entry(row.variable.clone()).or_insert_with(|| {
            variables.push(row.variable.clone());
            variables.len() - 1
        });
        if !row.value.is_finite() {
            return Err(Error::NonFiniteValue(format!(
                "time {}, location {}, variable {}",
                row.time, row.location_id, row.variable
            )));
        }
        if cells.insert((row.time, row.location_id, v), row.value).is_some() {
            return Err(Error::DuplicateCell { time: row.time, location: row.location_id, variable: row.variable });
        }
        times.push(row.time);
    }
    times.sort_unstable();
    times.dedup();

    let n = coords.len();
    if let Some((k, _)) = coords.keys().enumerate().find(|(k, id)| *k != **id) {
        return Err(Error::Parse(format!("location ids must be contiguous 0..{n}; id {k} is missing")));
    }
    let p = variables.len();
    let mut values = Vec::with_capacity(times.len());
    for &t in &times {
        let mut y = DMatrix::zeros(n, p);
        for i in 0..n {
            for (j, name) in variables.iter().enumerate() {
                let v = cells.get(&(t, i, j)).ok_or_else(|| Error::MissingCell {
                    time: t,
                    location: i,
                    variable: name.clone(),
                })?;
                y[(i, j)] = lit(*v);
            }
        }
        values.push(y);
    }
    let locations = coords
        .into_iter()
        .map(|(id, (a, b))| Location { id, coords: [lit(a), lit(b)] })
        .collect();
    StDataset::new(locations, variables, times, values)
}

pub fn write_long_csv<T: Real, W: Write>(ds: &StDataset<T>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for (t, y) in ds.times.iter().zip(&ds.values) {
        for loc in &ds.locations {
            for (j, name) in ds.variables.iter().enumerate() {
                wtr.serialize(LongRow {
                    time: *t,
                    location_id: loc.id,
                    s1: to_f64(loc.coords[0]),
                    s2: to_f64(loc.coords[1]),
                    variable: name.clone(),
                    value: to_f64(y[(loc.id, j)]),
                })?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_dense_json<T: Real, R: std::io::Read>(reader: R) -> Result<StDataset<T>> {
    let dense: DenseDataset = serde_json::from_reader(reader)?;
    let n = dense.locations.len();
    let p = dense.variables.len();
    // data slices follow the order of the `locations` array; rows are placed by id
    let mut row_of = vec![usize::MAX; n];
    for (k, l) in dense.locations.iter().enumerate() {
        if l.id >= n || row_of[l.id] != usize::MAX {
            return Err(Error::Parse(format!("location ids must be unique and contiguous 0..{n}, found {}", l.id)));
        }
        if !l.s1.is_finite() || !l.s2.is_finite() {
            return Err(Error::NonFiniteValue(format!("coordinates of location {}", l.id)));
        }
        row_of[l.id] = k;
    }
    let locations = row_of
        .iter()
        .enumerate()
        .map(|(id, &k)| {
            let l = &dense.locations[k];
            Location { id, coords: [lit(l.s1), lit(l.s2)] }
        })
        .collect::<Vec<_>>();
    if dense.data.len() != dense.times.len() {
        return Err(Error::Parse(format!("{} time stamps but {} data slices", dense.times.len(), dense.data.len())));
    }
    let mut order: Vec<usize> = (0..dense.times.len()).collect();
    order.sort_by_key(|&k| dense.times[k]);
    let mut values = Vec::with_capacity(order.len());
    for &k in &order {
        let slice = &dense.data[k];
        if slice.len() != n || slice.iter().any(|row| row.len() != p) {
            return Err(Error::Parse(format!("data slice for time {} is not {n}x{p}", dense.times[k])));
        }
        let mut y = DMatrix::zeros(n, p);
        for (id, &pos) in row_of.iter().enumerate() {
            for j in 0..p {
                let v = slice[pos][j];
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue(format!(
                        "time {}, location {id}, variable {}",
                        dense.times[k], dense.variables[j]
                    )));
                }
                y[(id, j)] = lit(v);
            }
        }
        values.push(y);
    }
    let times = order.iter().map(|&k| dense.times[k]).collect();
    StDataset::new(locations, dense.variables, times, values)
}

pub fn write_dense_json<T: Real, W: Write>(ds: &StDataset<T>, w: W) -> Result<()> {
    let dense = DenseDataset {
        locations: ds
            .locations
            .iter()
            .map(|l| DenseLocation { id: l.id, s1: to_f64(l.coords[0]), s2: to_f64(l.coords[1]) })
            .collect(),
        variables: ds.variables.clone(),
        times: ds.times.clone(),
        data: ds
            .values
            .iter()
            .map(|y| (0..y.nrows()).map(|i| (0..y.ncols()).map(|j| to_f64(y[(i, j)])).collect()).collect())
            .collect(),
    };
    serde_json::to_writer(w, &dense)?;
    Ok(())
}

/// Split of the location ids into the two sets used by the cross-space
/// moment estimators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub set1: Vec<usize>,
    pub set2: Vec<usize>,
    pub seed: u64,
}

impl Partition {
    pub fn n1(&self) -> usize {
        self.set1.len()
    }

    pub fn n2(&self) -> usize {
        self.set2.len()
    }

    /// Checks that the two sets are disjoint, non-empty and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.set1.is_empty() || self.set2.is_empty() {
            return Err(Error::InvalidProvidedPartition("both sets must be non-empty".into()));
        }
        let mut seen = vec![false; n];
        for &i in self.set1.iter().chain(&self.set2) {
            if i >= n {
                return Err(Error::InvalidProvidedPartition(format!("location {i} out of range 0..{n}")));
            }
            if seen[i] {
                return Err(Error::InvalidProvidedPartition(format!("location {i} appears twice")));
            }
            seen[i] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidProvidedPartition(format!("location {gap} is in neither set")));
        }
        Ok(())
    }

    /// Both sets must hold at least `d` locations for rank-`d` loadings.
    pub fn check_rank(&self, d: usize) -> Result<()> {
        let dim = self.n1().min(self.n2());
        if d > dim {
            return Err(Error::RankExceedsDim { rank: d, dim });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Seeded uniform shuffle, first `ceil(n/2)` ids go to the first set.
    RandomBalanced,
    Provided(Partition),
}

pub fn partition_locations<T: Real>(ds: &StDataset<T>, strategy: &PartitionStrategy, seed: u64) -> Result<Partition> {
    partition_ids(ds.n_locations(), strategy, seed)
}

pub fn partition_ids(n: usize, strategy: &PartitionStrategy, seed: u64) -> Result<Partition> {
    if n < 2 {
        return Err(Error::TooFewLocations(format!("partitioning needs n >= 2, got {n}")));
    }
    match strategy {
        PartitionStrategy::RandomBalanced => {
            let mut ids: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let n1 = n.div_ceil(2);
            let mut set1 = ids[..n1].to_vec();
            let mut set2 = ids[n1..].to_vec();
            set1.sort_unstable();
            set2.sort_unstable();
            Ok(Partition { set1, set2, seed })
        }
        PartitionStrategy::Provided(p) => {
            p.validate(n)?;
            Ok(p.clone())
        }
    }
}
