//! Loading gauge/model water levels and turning them into supervised offset windows.
//!
//! Pipeline: per-storm series → offsets (`modeled − observed`) → 3σ outlier
//! repair → gap filling → per-station min-max scaling fitted on the training
//! storms → sliding windows that never cross a storm boundary.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub const HOUR: i64 = 3600;
pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed CSV {path}: {message}")]
    Csv { path: String, message: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad timestamp {0:?} (expected ISO-8601 UTC)")]
    Timestamp(String),
    #[error("{context}: timestamps must be strictly increasing on the hourly grid")]
    NotHourly { context: String },
    #[error("unknown storm {0:?}")]
    UnknownStorm(String),
    #[error("validation and test storm are both {0:?}")]
    StormConflict(String),
    #[error("split leaves no training storms")]
    EmptySplit,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("series length mismatch: {0}")]
    Alignment(String),
    #[error("station {station} has no valid values in storm {storm}")]
    NoValidData { station: usize, storm: String },
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, IngestError> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| IngestError::Timestamp(s.to_string()))
}

/// Observed and modeled water levels for one station during one storm.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub node_id: usize,
    pub storm_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub observed: Vec<Option<f64>>,
    pub modeled: Vec<Option<f64>>,
}

impl StationSeries {
    pub fn validate(&self) -> Result<(), IngestError> {
        let n = self.timestamps.len();
        if self.observed.len() != n || self.modeled.len() != n {
            return Err(IngestError::Alignment(format!(
                "station {} storm {}: {} timestamps, {} observed, {} modeled",
                self.node_id,
                self.storm_id,
                n,
                self.observed.len(),
                self.modeled.len()
            )));
        }
        for w in self.timestamps.windows(2) {
            if w[1] - w[0] != Duration::seconds(HOUR) {
                return Err(IngestError::NotHourly {
                    context: format!("station {} storm {}", self.node_id, self.storm_id),
                });
            }
        }
        Ok(())
    }

    pub fn missing_fraction(&self) -> f64 {
        let missing = self
            .observed
            .iter()
            .zip(&self.modeled)
            .filter(|(o, m)| o.is_none() || m.is_none())
            .count();
        missing as f64 / self.timestamps.len().max(1) as f64
    }
}

/// Bias series `modeled − observed`; `None` wherever either input is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSeries {
    pub node_id: usize,
    pub storm_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub offsets: Vec<Option<f64>>,
}

pub fn compute_offsets(series: &StationSeries) -> OffsetSeries {
    let offsets = series
        .observed
        .iter()
        .zip(&series.modeled)
        .map(|(o, m)| Some((*m)? - (*o)?))
        .collect();
    OffsetSeries {
        node_id: series.node_id,
        storm_id: series.storm_id.clone(),
        timestamps: series.timestamps.clone(),
        offsets,
    }
}

/// All stations of one storm on a shared hourly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StormData {
    pub storm_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    /// Indexed by station position (not necessarily node id).
    pub stations: Vec<StationSeries>,
}

impl StormData {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormEntry {
    pub id: String,
    pub role: Role,
    /// Landfall time, used for the two-day evaluation window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landfall: Option<String>,
}

/// Storm list, roles, station ids and window lengths for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub storms: Vec<StormEntry>,
    pub stations: Vec<usize>,
    pub w_in: usize,
    pub w_out: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| IngestError::io(path, e))
    }

    pub fn storm_ids(&self, role: Role) -> Vec<String> {
        self.storms
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn landfall(&self, storm_id: &str) -> Result<Option<DateTime<Utc>>, IngestError> {
        match self.storms.iter().find(|s| s.id == storm_id) {
            Some(StormEntry {
                landfall: Some(t), ..
            }) => parse_timestamp(t).map(Some),
            Some(_) => Ok(None),
            None => Err(IngestError::UnknownStorm(storm_id.to_string())),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct SeriesRow {
    timestamp: String,
    observed_m: Option<f64>,
    modeled_m: Option<f64>,
}

/// Reads a `timestamp,observed_m,modeled_m` file; empty cells are missing values.
pub fn read_series_csv(
    path: &Path,
    node_id: usize,
    storm_id: &str,
) -> Result<StationSeries, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    let csv_err = |e: csv::Error| IngestError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut timestamps = Vec::new();
    let mut observed = Vec::new();
    let mut modeled = Vec::new();
    let mut prev: Option<DateTime<Utc>> = None;
    for row in rdr.deserialize() {
        let row: SeriesRow = row.map_err(csv_err)?;
        let t = parse_timestamp(&row.timestamp)?;
        if let Some(p) = prev {
            // Gaps are allowed (filled with missing values) but must stay on the hourly grid.
            let step = (t - p).num_seconds();
            if step <= 0 || step % HOUR != 0 {
                return Err(IngestError::NotHourly {
                    context: path.display().to_string(),
                });
            }
            for k in 1..step / HOUR {
                timestamps.push(p + Duration::seconds(k * HOUR));
                observed.push(None);
                modeled.push(None);
            }
        }
        timestamps.push(t);
        observed.push(row.observed_m);
        modeled.push(row.modeled_m);
        prev = Some(t);
    }
    Ok(StationSeries {
        node_id,
        storm_id: storm_id.to_string(),
        timestamps,
        observed,
        modeled,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_series_csv(path: &Path, series: &StationSeries) -> Result<(), IngestError> {
    let mut out = String::from("timestamp,observed_m,modeled_m\n");
    for ((t, o), m) in series
        .timestamps
        .iter()
        .zip(&series.observed)
        .zip(&series.modeled)
    {
        out.push_str(&format!(
            "{},{},{}\n",
            format_timestamp(*t),
            fmt_opt(*o),
            fmt_opt(*m)
        ));
    }
    std::fs::write(path, out).map_err(|e| IngestError::io(path, e))
}

/// Places per-station series of one storm onto a common hourly grid.
pub fn align_storm(storm_id: &str, series: Vec<StationSeries>) -> Result<StormData, IngestError> {
    let start = series
        .iter()
        .filter_map(|s| s.timestamps.first())
        .min()
        .copied();
    let end = series
        .iter()
        .filter_map(|s| s.timestamps.last())
        .max()
        .copied();
    let (Some(start), Some(end)) = (start, end) else {
        return Err(IngestError::DegenerateDataset(format!(
            "storm {storm_id} has no data"
        )));
    };
    let len = ((end - start).num_seconds() / HOUR) as usize + 1;
    let timestamps: Vec<_> = (0..len)
        .map(|k| start + Duration::seconds(k as i64 * HOUR))
        .collect();
    let mut stations = Vec::with_capacity(series.len());
    for s in series {
        s.validate()?;
        let mut observed = vec![None; len];
        let mut modeled = vec![None; len];
        for (k, t) in s.timestamps.iter().enumerate() {
            let secs = (*t - start).num_seconds();
            if secs % HOUR != 0 {
                return Err(IngestError::NotHourly {
                    context: format!("station {} storm {storm_id}", s.node_id),
                });
            }
            let idx = (secs / HOUR) as usize;
            observed[idx] = s.observed[k];
            modeled[idx] = s.modeled[k];
        }
        stations.push(StationSeries {
            node_id: s.node_id,
            storm_id: storm_id.to_string(),
            timestamps: timestamps.clone(),
            observed,
            modeled,
        });
    }
    Ok(StormData {
        storm_id: storm_id.to_string(),
        timestamps,
        stations,
    })
}

/// Loads every storm of the manifest from `<data>/<storm_id>/<node_id>.csv`.
pub fn load_corpus(
    data_dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<StormData>, IngestError> {
    manifest
        .storms
        .iter()
        .map(|storm| {
            let series = manifest
                .stations
                .iter()
                .map(|&id| {
                    let path = data_dir.join(&storm.id).join(format!("{id}.csv"));
                    read_series_csv(&path, id, &storm.id)
                })
                .collect::<Result<Vec<_>, _>>()?;
            align_storm(&storm.id, series)
        })
        .collect()
}

/// Partitions storms into train/val/test by id, keeping the input order.
pub fn split_storms<T: Clone>(
    storms: &[T],
    storm_id: impl Fn(&T) -> &str,
    val_id: &str,
    test_id: &str,
) -> Result<(Vec<T>, T, T), IngestError> {
    if val_id == test_id {
        return Err(IngestError::StormConflict(val_id.to_string()));
    }
    let find = |id: &str| {
        storms
            .iter()
            .find(|s| storm_id(s) == id)
            .cloned()
            .ok_or_else(|| IngestError::UnknownStorm(id.to_string()))
    };
    let val = find(val_id)?;
    let test = find(test_id)?;
    let train: Vec<T> = storms
        .iter()
        .filter(|s| storm_id(s) != val_id && storm_id(s) != test_id)
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(IngestError::EmptySplit);
    }
    Ok((train, val, test))
}

/// Offsets of all stations for one storm, indexed `[station][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetStorm {
    pub storm_id: String,
    pub start: DateTime<Utc>,
    pub offsets: Vec<Vec<Option<f64>>>,
}

impl OffsetStorm {
    pub fn from_storm(storm: &StormData) -> Self {
        Self {
            storm_id: storm.storm_id.clone(),
            start: storm.timestamps[0],
            offsets: storm
                .stations
                .iter()
                .map(|s| compute_offsets(s).offsets)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen 3σ gate statistics (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierGate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Station position → number of values eliminated.
    pub eliminated: BTreeMap<usize, usize>,
}

impl OutlierReport {
    pub fn total(&self) -> usize {
        self.eliminated.values().sum()
    }
}

impl OutlierGate {
    pub fn fit(storms: &[OffsetStorm]) -> Result<Self, IngestError> {
        let values: Vec<f64> = storms
            .iter()
            .flat_map(|s| s.offsets.iter().flatten().flatten().copied())
            .collect();
        if values.len() < 2 {
            return Err(IngestError::DegenerateDataset(
                "fewer than two valid offsets".into(),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(IngestError::DegenerateDataset(
                "offsets have zero standard deviation".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn lower(&self) -> f64 {
        self.mean - 3.0 * self.std
    }

    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.std
    }

    pub fn is_outlier(&self, v: f64) -> bool {
        v < self.lower() || v > self.upper()
    }

    /// Replaces values outside `[μ − 3σ, μ + 3σ]` by linear interpolation
    /// between the nearest in-range neighbours of the same storm.
    pub fn apply(&self, storm: &mut OffsetStorm, report: &mut OutlierReport) {
        for (station, series) in storm.offsets.iter_mut().enumerate() {
            let flagged: Vec<bool> = series
                .iter()
                .map(|v| v.is_some_and(|x| self.is_outlier(x)))
                .collect();
            let count = flagged.iter().filter(|&&f| f).count();
            if count == 0 {
                continue;
            }
            *report.eliminated.entry(station).or_default() += count;
            let anchors: Vec<Option<f64>> = series
                .iter()
                .zip(&flagged)
                .map(|(v, &f)| if f { None } else { *v })
                .collect();
            let filled = interpolate(&anchors);
            for (k, &f) in flagged.iter().enumerate() {
                if f {
                    series[k] = filled[k];
                }
            }
        }
    }
}

/// Fits the gate on `storms` and repairs them in one go.
pub fn remove_outliers(
    storms: &[OffsetStorm],
) -> Result<(Vec<OffsetStorm>, OutlierGate, OutlierReport), IngestError> {
    let gate = OutlierGate::fit(storms)?;
    let mut report = OutlierReport::default();
    let mut cleaned = storms.to_vec();
    for s in &mut cleaned {
        gate.apply(s, &mut report);
    }
    Ok((cleaned, gate, report))
}

/// Linear interpolation over `None` runs; ends take the nearest value.
/// Returns all `None` when the input has no valid value.
pub fn interpolate(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if known.is_empty() {
        return vec![None; values.len()];
    }
    let mut out = Vec::with_capacity(values.len());
    let mut next = 0;
    for (i, v) in values.iter().enumerate() {
        if let Some(x) = v {
            out.push(Some(*x));
            continue;
        }
        while next < known.len() && known[next].0 < i {
            next += 1;
        }
        let value = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some((i0, y0)), Some(&(i1, y1))) => {
                let w = (i - i0) as f64 / (i1 - i0) as f64;
                y0 + w * (y1 - y0)
            }
            (Some((_, y0)), None) => y0,
            (None, Some(&(_, y1))) => y1,
            (None, None) => unreachable!(),
        };
        out.push(Some(value));
    }
    out
}

/// Per-station min-max scaling onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub stations: Vec<StationRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationRange {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    /// Fits ranges from `[station][t]` series of the training storms.
    pub fn fit(storms: &[&[Vec<f64>]]) -> Result<Self, IngestError> {
        let n = storms.first().map_or(0, |s| s.len());
        if n == 0 {
            return Err(IngestError::DegenerateDataset(
                "empty training corpus".into(),
            ));
        }
        let mut stations = Vec::with_capacity(n);
        for k in 0..n {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for storm in storms {
                for &v in &storm[k] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if !(hi > lo) {
                return Err(IngestError::DegenerateDataset(format!(
                    "station {k} has a constant (or empty) training range"
                )));
            }
            stations.push(StationRange { min: lo, max: hi });
        }
        Ok(Self { stations })
    }

    pub fn apply(&self, station: usize, x: f64) -> f64 {
        let r = self.stations[station];
        (x - r.min) / (r.max - r.min)
    }

    pub fn invert(&self, station: usize, y: f64) -> f64 {
        let r = self.stations[station];
        y * (r.max - r.min) + r.min
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| IngestError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Supervised windows over all stations.
///
/// `inputs` is `[windows × w_in × n_stations]` and `targets`
/// `[windows × w_out × n_stations]`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub w_in: usize,
    pub w_out: usize,
    pub n_stations: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub provenance: Vec<WindowOrigin>,
    pub skipped_storms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub storm_id: String,
    /// Timestamp of the first input step.
    pub start: DateTime<Utc>,
}

impl WindowOrigin {
    /// Time of the first predicted step.
    pub fn issue_time(&self, w_in: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(w_in as i64 * HOUR)
    }
}

/// One storm's complete series, indexed `[station][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStorm {
    pub storm_id: String,
    pub start: DateTime<Utc>,
    pub values: Vec<Vec<f64>>,
}

impl SeriesStorm {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Stacks the selected windows into `[B × w_in × N]` and `[B × w_out × N]` tensors.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let n = self.n_stations;
        let (si, so) = (self.w_in * n, self.w_out * n);
        let mut x = Vec::with_capacity(indices.len() * si);
        let mut y = Vec::with_capacity(indices.len() * so);
        for &i in indices {
            x.extend_from_slice(&self.inputs[i * si..(i + 1) * si]);
            y.extend_from_slice(&self.targets[i * so..(i + 1) * so]);
        }
        let b = indices.len();
        (
            Tensor::new(vec![b, self.w_in, n], x).expect("non-empty batch"),
            Tensor::new(vec![b, self.w_out, n], y).expect("non-empty batch"),
        )
    }

    pub fn target(&self, window: usize, lag: usize, station: usize) -> f64 {
        self.targets[(window * self.w_out + lag) * self.n_stations + station]
    }

    pub fn input(&self, window: usize, step: usize, station: usize) -> f64 {
        self.inputs[(window * self.w_in + step) * self.n_stations + station]
    }
}

/// Slides a `w_in + w_out` window with the given stride through each storm.
/// Storms shorter than `w_in + w_out` are skipped with a warning.
pub fn make_windows(
    storms: &[SeriesStorm],
    w_in: usize,
    w_out: usize,
    stride: usize,
) -> WindowedDataset {
    assert!(
        w_in > 0 && w_out > 0 && stride > 0,
        "window sizes and stride must be positive"
    );
    let n = storms.first().map_or(0, |s| s.values.len());
    let mut ds = WindowedDataset {
        w_in,
        w_out,
        n_stations: n,
        inputs: Vec::new(),
        targets: Vec::new(),
        provenance: Vec::new(),
        skipped_storms: Vec::new(),
    };
    for storm in storms {
        assert_eq!(
            storm.values.len(),
            n,
            "all storms must cover the same stations"
        );
        let len = storm.len();
        if len < w_in + w_out {
            log::warn!(
                "storm {} too short ({len} h) for windows of {w_in}+{w_out} h; skipped",
                storm.storm_id
            );
            ds.skipped_storms.push(storm.storm_id.clone());
            continue;
        }
        for start in (0..=len - w_in - w_out).step_by(stride) {
            for t in start..start + w_in {
                ds.inputs.extend(storm.values.iter().map(|s| s[t]));
            }
            for t in start + w_in..start + w_in + w_out {
                ds.targets.extend(storm.values.iter().map(|s| s[t]));
            }
            ds.provenance.push(WindowOrigin {
                storm_id: storm.storm_id.clone(),
                start: storm.start + Duration::seconds(start as i64 * HOUR),
            });
        }
    }
    ds
}

/// Cleaned offsets (metres) for every storm plus the scaler fitted on training storms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    /// Original node ids of the stations kept, in model order.
    pub station_ids: Vec<usize>,
    pub w_in: usize,
    pub w_out: usize,
    pub gate: OutlierGate,
    pub scaler: ScalerParams,
    pub train: Vec<SeriesStorm>,
    pub val: Vec<SeriesStorm>,
    pub test: Vec<SeriesStorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub excluded_stations: Vec<usize>,
    pub outliers: OutlierReport,
    pub gaps_filled: usize,
}

impl PreparedData {
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn storms(&self, role: Role) -> &[SeriesStorm] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }

    pub fn scaled(&self, role: Role) -> Vec<SeriesStorm> {
        self.storms(role)
            .iter()
            .map(|s| SeriesStorm {
                storm_id: s.storm_id.clone(),
                start: s.start,
                values: s
                    .values
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v.iter().map(|&x| self.scaler.apply(k, x)).collect())
                    .collect(),
            })
            .collect()
    }

    pub fn windows(&self, role: Role, w_in: usize, w_out: usize) -> WindowedDataset {
        make_windows(&self.scaled(role), w_in, w_out, 1)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| IngestError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Observed levels per station position, concatenated over `storms` in order.
pub fn concat_observed(storms: &[&StormData]) -> Vec<Vec<Option<f64>>> {
    let n = storms.first().map_or(0, |s| s.stations.len());
    (0..n)
        .map(|k| {
            storms
                .iter()
                .flat_map(|s| s.stations[k].observed.iter().copied())
                .collect()
        })
        .collect()
}

/// Station positions whose share of missing samples exceeds `max_missing`
/// in at least one of `storms`.
pub fn sparse_stations(storms: &[&StormData], max_missing: f64) -> Vec<usize> {
    let n = storms.first().map_or(0, |s| s.stations.len());
    (0..n)
        .filter(|&k| {
            storms
                .iter()
                .any(|s| s.stations[k].missing_fraction() > max_missing)
        })
        .collect()
}

/// Runs the full preprocessing chain for a manifest's storms.
pub fn prepare(
    corpus: &[StormData],
    manifest: &DatasetManifest,
    max_missing: f64,
) -> Result<(PreparedData, PrepareReport), IngestError> {
    let by_role = |role: Role| -> Result<Vec<&StormData>, IngestError> {
        manifest
            .storm_ids(role)
            .iter()
            .map(|id| {
                corpus
                    .iter()
                    .find(|s| &s.storm_id == id)
                    .ok_or_else(|| IngestError::UnknownStorm(id.clone()))
            })
            .collect()
    };
    let train = by_role(Role::Train)?;
    let val = by_role(Role::Val)?;
    let test = by_role(Role::Test)?;
    if train.is_empty() {
        return Err(IngestError::EmptySplit);
    }

    let excluded = sparse_stations(&train, max_missing);
    for &k in &excluded {
        log::warn!(
            "excluding station {} (too much missing data)",
            manifest.stations[k]
        );
    }
    let keep: Vec<usize> = (0..manifest.stations.len())
        .filter(|k| !excluded.contains(k))
        .collect();
    if keep.len() < 2 {
        return Err(IngestError::DegenerateDataset(
            "fewer than two stations left after exclusion".into(),
        ));
    }

    let offsets = |storms: &[&StormData]| -> Vec<OffsetStorm> {
        storms
            .iter()
            .map(|s| {
                let mut o = OffsetStorm::from_storm(s);
                o.offsets = keep.iter().map(|&k| o.offsets[k].clone()).collect();
                o
            })
            .collect()
    };
    let mut train_o = offsets(&train);
    let mut val_o = offsets(&val);
    let mut test_o = offsets(&test);

    let gate = OutlierGate::fit(&train_o)?;
    let mut outliers = OutlierReport::default();
    for s in train_o
        .iter_mut()
        .chain(val_o.iter_mut())
        .chain(test_o.iter_mut())
    {
        gate.apply(s, &mut outliers);
    }

    let mut gaps_filled = 0;
    let mut fill = |storms: Vec<OffsetStorm>| -> Result<Vec<SeriesStorm>, IngestError> {
        storms
            .into_iter()
            .map(|s| {
                let mut values = Vec::with_capacity(s.offsets.len());
                for (k, series) in s.offsets.iter().enumerate() {
                    gaps_filled += series.iter().filter(|v| v.is_none()).count();
                    let filled = interpolate(series);
                    let complete: Option<Vec<f64>> = filled.into_iter().collect();
                    values.push(complete.ok_or_else(|| IngestError::NoValidData {
                        station: manifest.stations[keep[k]],
                        storm: s.storm_id.clone(),
                    })?);
                }
                Ok(SeriesStorm {
                    storm_id: s.storm_id,
                    start: s.start,
                    values,
                })
            })
            .collect()
    };
    let train_s = fill(train_o)?;
    let val_s = fill(val_o)?;
    let test_s = fill(test_o)?;

    let refs: Vec<&[Vec<f64>]> = train_s.iter().map(|s| s.values.as_slice()).collect();
    let scaler = ScalerParams::fit(&refs)?;

    Ok((
        PreparedData {
            station_ids: keep.iter().map(|&k| manifest.stations[k]).collect(),
            w_in: manifest.w_in,
            w_out: manifest.w_out,
            gate,
            scaler,
            train: train_s,
            val: val_s,
            test: test_s,
        },
        PrepareReport {
            excluded_stations: excluded.iter().map(|&k| manifest.stations[k]).collect(),
            outliers,
            gaps_filled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 8, 28, 0, 0, 0).unwrap()
    }

    fn hours(n: usize) -> Vec<DateTime<Utc>> {
        (0..n).map(|k| t0() + Duration::hours(k as i64)).collect()
    }

    fn storm_of(id: &str, values: Vec<Vec<f64>>) -> SeriesStorm {
        SeriesStorm {
            storm_id: id.into(),
            start: t0(),
            values,
        }
    }

    #[test]
    fn offsets_follow_modeled_minus_observed() {
        let s = StationSeries {
            node_id: 0,
            storm_id: "x".into(),
            timestamps: hours(3),
            observed: vec![Some(1.0), None, Some(2.0)],
            modeled: vec![Some(1.3), Some(5.0), Some(2.0)],
        };
        let o = compute_offsets(&s);
        assert!((o.offsets[0].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(o.offsets[1], None);
        assert_eq!(o.offsets[2], Some(0.0));
    }

    #[test]
    fn gate_degenerate_on_identical_offsets() {
        let s = OffsetStorm {
            storm_id: "a".into(),
            start: t0(),
            offsets: vec![vec![Some(0.2); 5]],
        };
        assert!(matches!(
            remove_outliers(&[s]),
            Err(IngestError::DegenerateDataset(_))
        ));
    }

    #[test]
    fn gate_keeps_point_on_the_boundary() {
        // μ = 10, population σ = 30, so μ + 3σ = 100 exactly.
        let mut values = vec![Some(0.0); 9];
        values.push(Some(100.0));
        let s = OffsetStorm {
            storm_id: "a".into(),
            start: t0(),
            offsets: vec![values.clone()],
        };
        let (cleaned, gate, report) = remove_outliers(&[s]).unwrap();
        assert_eq!(gate.mean, 10.0);
        assert_eq!(gate.std, 30.0);
        assert_eq!(cleaned[0].offsets[0], values);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn spike_replaced_by_neighbour_midpoint() {
        let mut values: Vec<Option<f64>> = (0..200)
            .map(|k| Some((k as f64 * 0.1).sin() * 0.1))
            .collect();
        values[100] = Some(50.0);
        let s = OffsetStorm {
            storm_id: "a".into(),
            start: t0(),
            offsets: vec![values.clone()],
        };
        let (cleaned, gate, report) = remove_outliers(&[s]).unwrap();
        assert!(gate.is_outlier(50.0));
        let mid = (values[99].unwrap() + values[101].unwrap()) / 2.0;
        assert!((cleaned[0].offsets[0][100].unwrap() - mid).abs() < 1e-15);
        assert_eq!(report.eliminated.get(&0), Some(&1));

        // Second pass with frozen statistics is a no-op.
        let mut again = cleaned[0].clone();
        let mut r2 = OutlierReport::default();
        gate.apply(&mut again, &mut r2);
        assert_eq!(again, cleaned[0]);
        assert_eq!(r2.total(), 0);
    }

    #[test]
    fn interpolation_edges() {
        let v = interpolate(&[None, Some(1.0), None, None, Some(4.0), None]);
        assert_eq!(
            v,
            vec![
                Some(1.0),
                Some(1.0),
                Some(2.0),
                Some(3.0),
                Some(4.0),
                Some(4.0)
            ]
        );
        assert_eq!(interpolate(&[None, None]), vec![None, None]);
    }

    #[test]
    fn split_gulf_storm_list() {
        let storms = [
            "Charley2004",
            "Dennis2005",
            "Wilma2005",
            "Debby2012",
            "Hermine2016",
            "Michael2018",
            "Eta2020",
            "Fred2021",
            "Idalia2023",
            "Ian2022",
            "Debby2024",
            "Helene2024",
            "Milton2024",
        ];
        let (train, val, test) = split_storms(&storms, |s| s, "Ian2022", "Idalia2023").unwrap();
        assert_eq!(train.len(), 11);
        assert_eq!((val, test), ("Ian2022", "Idalia2023"));
        assert_eq!(train[8], "Debby2024");
    }

    #[test]
    fn split_errors() {
        let storms = ["s1", "s2", "s3"];
        let (train, _, _) = split_storms(&storms, |s| s, "s2", "s3").unwrap();
        assert_eq!(train, vec!["s1"]);
        assert!(matches!(
            split_storms(&storms, |s| s, "s2", "s2"),
            Err(IngestError::StormConflict(_))
        ));
        assert!(matches!(
            split_storms(&storms, |s| s, "s9", "s3"),
            Err(IngestError::UnknownStorm(_))
        ));
        assert!(matches!(
            split_storms(&["a", "b"], |s| s, "a", "b"),
            Err(IngestError::EmptySplit)
        ));
    }

    #[test]
    fn scaler_examples() {
        let train = vec![vec![0.0, 10.0]];
        let sc = ScalerParams::fit(&[train.as_slice()]).unwrap();
        assert_eq!(sc.apply(0, 0.0), 0.0);
        assert_eq!(sc.apply(0, 10.0), 1.0);
        assert_eq!(sc.apply(0, 5.0), 0.5);
        assert_eq!(sc.apply(0, 12.0), 1.2);
        let flat = vec![vec![3.0, 3.0]];
        assert!(ScalerParams::fit(&[flat.as_slice()]).is_err());
    }

    #[test]
    fn window_counts() {
        let s = storm_of("a", vec![(0..10).map(f64::from).collect()]);
        assert_eq!(make_windows(&[s], 4, 2, 1).len(), 5);
        let short = storm_of("b", vec![(0..5).map(f64::from).collect()]);
        let ds = make_windows(&[short], 4, 2, 1);
        assert!(ds.is_empty());
        assert_eq!(ds.skipped_storms, vec!["b".to_string()]);
    }

    #[test]
    fn windows_stay_inside_storms() {
        let a = storm_of("a", vec![(0..10).map(f64::from).collect()]);
        let mut b = storm_of("b", vec![(100..110).map(f64::from).collect()]);
        b.start = t0() + Duration::hours(500);
        let ds = make_windows(&[a, b], 4, 2, 1);
        assert_eq!(ds.len(), 10);
        for w in 0..ds.len() {
            let origin = &ds.provenance[w];
            let base = if origin.storm_id == "a" { 0.0 } else { 100.0 };
            let storm_start = if origin.storm_id == "a" {
                t0()
            } else {
                t0() + Duration::hours(500)
            };
            let offset = (origin.start - storm_start).num_hours() as f64;
            for step in 0..4 {
                assert_eq!(ds.input(w, step, 0), base + offset + step as f64);
            }
            for lag in 0..2 {
                assert_eq!(ds.target(w, lag, 0), base + offset + 4.0 + lag as f64);
            }
            // Every window lies fully inside its own storm.
            assert!(offset + 6.0 <= 10.0);
        }
    }

    #[test]
    fn series_csv_round_trip_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0.csv");
        std::fs::write(
            &path,
            "timestamp,observed_m,modeled_m\n2023-08-28T00:00:00Z,1.0,1.5\n2023-08-28T01:00:00Z,,1.2\n2023-08-28T03:00:00Z,0.5,0.7\n",
        )
        .unwrap();
        let s = read_series_csv(&path, 0, "x").unwrap();
        assert_eq!(s.timestamps.len(), 4);
        assert_eq!(s.observed, vec![Some(1.0), None, None, Some(0.5)]);
        assert_eq!(s.modeled, vec![Some(1.5), Some(1.2), None, Some(0.7)]);
        let out = dir.path().join("1.csv");
        write_series_csv(&out, &s).unwrap();
        assert_eq!(read_series_csv(&out, 0, "x").unwrap(), s);
    }

    #[test]
    fn series_csv_rejects_off_grid_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0.csv");
        std::fs::write(
            &path,
            "timestamp,observed_m,modeled_m\n2023-08-28T00:00:00Z,1,1\n2023-08-28T00:30:00Z,1,1\n",
        )
        .unwrap();
        assert!(matches!(
            read_series_csv(&path, 0, "x"),
            Err(IngestError::NotHourly { .. })
        ));
    }
}
