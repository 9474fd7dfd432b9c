//! Turning predicted offsets into corrected water levels and scoring them:
//! RMSE improvement (full range or around landfall), error at the observed
//! peak, flood-threshold exceedance events and station-wise model comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::ingest::{StormData, WindowOrigin, HOUR};
use crate::training::Metrics;

#[derive(Debug, thiserror::Error)]
pub enum CorrectionError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("no valid samples in the evaluation window for station {0}")]
    EmptyWindow(usize),
    #[error("reports cover different stations: {0}")]
    StationMismatch(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Corrected water level: the modeled level minus the predicted offset.
pub fn correct(modeled: f64, predicted_offset: f64) -> f64 {
    modeled - predicted_offset
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedSeries {
    pub node_id: usize,
    pub timestamps: Vec<DateTime<Utc>>,
    pub modeled: Vec<Option<f64>>,
    pub predicted_offset: Vec<f64>,
    pub corrected: Vec<Option<f64>>,
    pub observed: Vec<Option<f64>>,
}

/// Applies offsets given at `offset_times` to a station series.
///
/// Every offset time must be a timestamp of the series.
pub fn apply_correction(
    node_id: usize,
    series_times: &[DateTime<Utc>],
    modeled: &[Option<f64>],
    observed: &[Option<f64>],
    offset_times: &[DateTime<Utc>],
    offsets: &[f64],
) -> Result<CorrectedSeries, CorrectionError> {
    if series_times.len() != modeled.len() || series_times.len() != observed.len() {
        return Err(CorrectionError::Alignment(
            "series arrays differ in length".into(),
        ));
    }
    if offset_times.len() != offsets.len() {
        return Err(CorrectionError::Alignment(
            "offset arrays differ in length".into(),
        ));
    }
    let start = *series_times
        .first()
        .ok_or_else(|| CorrectionError::Alignment("empty series".into()))?;
    let mut out = CorrectedSeries {
        node_id,
        timestamps: Vec::with_capacity(offsets.len()),
        modeled: Vec::with_capacity(offsets.len()),
        predicted_offset: Vec::with_capacity(offsets.len()),
        corrected: Vec::with_capacity(offsets.len()),
        observed: Vec::with_capacity(offsets.len()),
    };
    for (&t, &o) in offset_times.iter().zip(offsets) {
        let secs = (t - start).num_seconds();
        let idx = (secs / HOUR) as usize;
        if secs < 0 || secs % HOUR != 0 || idx >= series_times.len() || series_times[idx] != t {
            return Err(CorrectionError::Alignment(format!(
                "offset time {t} is not in the series"
            )));
        }
        out.timestamps.push(t);
        out.modeled.push(modeled[idx]);
        out.predicted_offset.push(o);
        out.corrected.push(modeled[idx].map(|m| correct(m, o)));
        out.observed.push(observed[idx]);
    }
    Ok(out)
}

/// Time range used for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalWindow {
    Full,
    Range {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
}

impl EvalWindow {
    /// Two days centred on landfall.
    pub fn landfall(t: DateTime<Utc>) -> Self {
        EvalWindow::Range {
            start: t - Duration::hours(24),
            end: t + Duration::hours(24),
        }
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        match *self {
            EvalWindow::Full => true,
            EvalWindow::Range { start, end } => start <= t && t <= end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub station_id: usize,
    pub samples: usize,
    pub rmse_modeled: f64,
    pub rmse_corrected: f64,
    /// `100·(1 − RMSE_corrected / RMSE_modeled)`; absent when the modeled RMSE is zero.
    pub reduction_pct: Option<f64>,
    pub peak_time: DateTime<Utc>,
    pub peak_observed: f64,
    /// `|modeled − observed|` at the observed peak.
    pub peak_error_modeled: f64,
    /// `|corrected − observed|` at the observed peak.
    pub peak_error_corrected: f64,
    pub peak_reduction_pct: Option<f64>,
}

pub fn reduction_pct(before: f64, after: f64) -> Option<f64> {
    (before > 0.0).then(|| 100.0 * (1.0 - after / before))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub window: EvalWindow,
    pub rows: Vec<ImprovementRow>,
}

impl ImprovementReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "station_id,samples,rmse_modeled_m,rmse_corrected_m,reduction_pct,peak_time,peak_observed_m,peak_error_modeled_m,peak_error_corrected_m,peak_reduction_pct\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.station_id,
                r.samples,
                r.rmse_modeled,
                r.rmse_corrected,
                opt(r.reduction_pct),
                crate::ingest::format_timestamp(r.peak_time),
                r.peak_observed,
                r.peak_error_modeled,
                r.peak_error_corrected,
                opt(r.peak_reduction_pct)
            ));
        }
        out
    }

    pub fn scores(&self) -> Vec<StationScore> {
        self.rows
            .iter()
            .map(|r| StationScore {
                station_id: r.station_id,
                rmse: r.rmse_corrected,
            })
            .collect()
    }
}

/// Per-station RMSE of modeled and corrected levels against observations.
pub fn improvement_report(
    series: &[CorrectedSeries],
    window: EvalWindow,
) -> Result<ImprovementReport, CorrectionError> {
    let mut rows = Vec::with_capacity(series.len());
    for s in series {
        let mut err_m = Vec::new();
        let mut err_c = Vec::new();
        let mut peak: Option<(usize, f64)> = None;
        for k in 0..s.timestamps.len() {
            if !window.contains(s.timestamps[k]) {
                continue;
            }
            let (Some(obs), Some(m), Some(c)) = (s.observed[k], s.modeled[k], s.corrected[k])
            else {
                continue;
            };
            err_m.push(m - obs);
            err_c.push(c - obs);
            if peak.is_none_or(|(_, p)| obs > p) {
                peak = Some((k, obs));
            }
        }
        let (Some(mm), Some(mc), Some((pk, pobs))) = (
            Metrics::from_errors(err_m),
            Metrics::from_errors(err_c),
            peak,
        ) else {
            return Err(CorrectionError::EmptyWindow(s.node_id));
        };
        let pe_m = (s.modeled[pk].expect("valid") - pobs).abs();
        let pe_c = (s.corrected[pk].expect("valid") - pobs).abs();
        rows.push(ImprovementRow {
            station_id: s.node_id,
            samples: mm.count,
            rmse_modeled: mm.rmse,
            rmse_corrected: mc.rmse,
            reduction_pct: reduction_pct(mm.rmse, mc.rmse),
            peak_time: s.timestamps[pk],
            peak_observed: pobs,
            peak_error_modeled: pe_m,
            peak_error_corrected: pe_c,
            peak_reduction_pct: reduction_pct(pe_m, pe_c),
        });
    }
    Ok(ImprovementReport { window, rows })
}

/// Pooled RMSE of the raw offsets (uncorrected error) and of the residual
/// after subtracting predictions, with the percentage reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledImprovement {
    pub rmse_modeled: f64,
    pub rmse_corrected: f64,
    pub reduction_pct: Option<f64>,
    pub samples: usize,
}

pub fn pooled_improvement(true_offsets: &[f64], predicted: &[f64]) -> Option<PooledImprovement> {
    let before = Metrics::from_errors(true_offsets.iter().copied())?;
    let after = Metrics::between(predicted, true_offsets)?;
    Some(PooledImprovement {
        rmse_modeled: before.rmse,
        rmse_corrected: after.rmse,
        reduction_pct: reduction_pct(before.rmse, after.rmse),
        samples: before.count,
    })
}

/// Minor / moderate / major flood levels in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloodThresholds {
    pub minor: f64,
    pub moderate: f64,
    pub major: f64,
}

impl Default for FloodThresholds {
    fn default() -> Self {
        Self {
            minor: 0.50,
            moderate: 0.80,
            major: 1.17,
        }
    }
}

impl FloodThresholds {
    pub fn validate(&self) -> Result<(), CorrectionError> {
        if self.minor < self.moderate && self.moderate < self.major {
            Ok(())
        } else {
            Err(CorrectionError::InvalidThresholds(format!(
                "need minor < moderate < major, got {} / {} / {}",
                self.minor, self.moderate, self.major
            )))
        }
    }

    pub fn level(&self, severity: Severity) -> f64 {
        match severity {
            Severity::Minor => self.minor,
            Severity::Moderate => self.moderate,
            Severity::Major => self.major,
        }
    }
}

/// Default thresholds plus per-station overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    #[serde(default)]
    pub default: FloodThresholds,
    #[serde(default)]
    pub stations: BTreeMap<usize, FloodThresholds>,
}

impl ThresholdTable {
    pub fn for_station(&self, id: usize) -> FloodThresholds {
        self.stations.get(&id).copied().unwrap_or(self.default)
    }

    pub fn load(path: &Path) -> Result<Self, CorrectionError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorrectionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let table: Self = serde_json::from_str(&text)?;
        table.default.validate()?;
        for t in table.stations.values() {
            t.validate()?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Moderate,
    Major,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Minor, Severity::Moderate, Severity::Major];
}

/// Maximal run of samples strictly above a level (indices inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub start: usize,
    pub end: usize,
    pub peak_index: usize,
    pub peak: f64,
}

/// Maximal disjoint intervals where `values > level`; missing samples end a run.
pub fn exceedances(values: &[Option<f64>], level: f64) -> Vec<Exceedance> {
    let mut out = Vec::new();
    let mut current: Option<Exceedance> = None;
    for (k, v) in values.iter().enumerate() {
        match (*v, current.as_mut()) {
            (Some(x), Some(ev)) if x > level => {
                ev.end = k;
                if x > ev.peak {
                    ev.peak = x;
                    ev.peak_index = k;
                }
            }
            (Some(x), None) if x > level => {
                current = Some(Exceedance {
                    start: k,
                    end: k,
                    peak_index: k,
                    peak: x,
                });
            }
            _ => out.extend(current.take()),
        }
    }
    out.extend(current);
    out
}

/// Exceedance intervals for every severity.
pub fn threshold_events(
    values: &[Option<f64>],
    thresholds: &FloodThresholds,
) -> BTreeMap<Severity, Vec<Exceedance>> {
    Severity::ALL
        .into_iter()
        .map(|s| (s, exceedances(values, thresholds.level(s))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventComparison {
    pub severity: Severity,
    pub observed_events: usize,
    pub predicted_events: usize,
    /// Observed events overlapped by a predicted one.
    pub hits: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
}

impl EventComparison {
    pub fn agrees(&self) -> bool {
        self.false_negatives == 0 && self.false_positives == 0
    }
}

fn overlaps(a: &Exceedance, b: &Exceedance) -> bool {
    a.start <= b.end && b.start <= a.end
}

/// Matches predicted against observed exceedances by interval overlap.
pub fn compare_events(
    observed: &[Option<f64>],
    predicted: &[Option<f64>],
    thresholds: &FloodThresholds,
) -> Vec<EventComparison> {
    Severity::ALL
        .into_iter()
        .map(|s| {
            let level = thresholds.level(s);
            let obs = exceedances(observed, level);
            let pred = exceedances(predicted, level);
            let hits = obs
                .iter()
                .filter(|o| pred.iter().any(|p| overlaps(o, p)))
                .count();
            let fp = pred
                .iter()
                .filter(|p| !obs.iter().any(|o| overlaps(o, p)))
                .count();
            EventComparison {
                severity: s,
                observed_events: obs.len(),
                predicted_events: pred.len(),
                hits,
                false_negatives: obs.len() - hits,
                false_positives: fp,
            }
        })
        .collect()
}

/// Longest lead (hours) up to which every shorter-or-equal lead agrees with
/// the observed exceedances at `severity`. `per_lead[k]` is lead `k + 1`.
pub fn max_agreeing_lead(per_lead: &[Vec<EventComparison>], severity: Severity) -> usize {
    per_lead
        .iter()
        .take_while(|cmp| {
            cmp.iter()
                .filter(|c| c.severity == severity)
                .all(EventComparison::agrees)
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationScore {
    pub station_id: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across stations.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    /// Station id → model with the lower RMSE (ties go to A).
    pub winners: BTreeMap<usize, Winner>,
    pub wins_a: usize,
    pub wins_b: usize,
    pub a: MeanStd,
    pub b: MeanStd,
    /// Each station represented by its better model.
    pub best_of: MeanStd,
}

pub fn compare_models(
    a: &[StationScore],
    b: &[StationScore],
) -> Result<ModelComparison, CorrectionError> {
    let ids_a: BTreeSet<usize> = a.iter().map(|s| s.station_id).collect();
    let ids_b: BTreeSet<usize> = b.iter().map(|s| s.station_id).collect();
    if ids_a != ids_b || ids_a.len() != a.len() || ids_b.len() != b.len() {
        return Err(CorrectionError::StationMismatch(format!(
            "{ids_a:?} vs {ids_b:?}"
        )));
    }
    let b_by: BTreeMap<usize, f64> = b.iter().map(|s| (s.station_id, s.rmse)).collect();
    let mut winners = BTreeMap::new();
    let mut best = Vec::with_capacity(a.len());
    for s in a {
        let rb = b_by[&s.station_id];
        let w = if s.rmse <= rb { Winner::A } else { Winner::B };
        best.push(s.rmse.min(rb));
        winners.insert(s.station_id, w);
    }
    let wins_a = winners.values().filter(|&&w| w == Winner::A).count();
    let ra: Vec<f64> = a.iter().map(|s| s.rmse).collect();
    let rb: Vec<f64> = b.iter().map(|s| s.rmse).collect();
    Ok(ModelComparison {
        wins_b: winners.len() - wins_a,
        winners,
        wins_a,
        a: MeanStd::of(&ra),
        b: MeanStd::of(&rb),
        best_of: MeanStd::of(&best),
    })
}

/// Offset forecasts (metres) for consecutive windows of one storm.
#[derive(Debug, Clone, PartialEq)]
pub struct StormForecast<'a> {
    pub w_in: usize,
    pub w_out: usize,
    pub n_stations: usize,
    pub origins: Vec<&'a WindowOrigin>,
    /// `[windows × W_out × N]`
    pub offsets: Vec<f64>,
}

/// One forecast value keyed by issue time and lead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub station_id: usize,
    pub issue_time: DateTime<Utc>,
    pub lead_hours: usize,
    pub target_time: DateTime<Utc>,
    pub predicted_offset: f64,
}

impl StormForecast<'_> {
    pub fn records(&self, station: usize, station_id: usize) -> Vec<ForecastRecord> {
        let mut out = Vec::with_capacity(self.origins.len() * self.w_out);
        for (w, origin) in self.origins.iter().enumerate() {
            let issue = origin.issue_time(self.w_in);
            for lag in 0..self.w_out {
                out.push(ForecastRecord {
                    station_id,
                    issue_time: issue,
                    lead_hours: lag + 1,
                    target_time: issue + Duration::hours(lag as i64),
                    predicted_offset: self.offsets
                        [(w * self.w_out + lag) * self.n_stations + station],
                });
            }
        }
        out
    }

    /// Corrected series for one station at a fixed lead (one value per issue time).
    pub fn lead_series(
        &self,
        storm: &StormData,
        station: usize,
        station_pos: usize,
        lead_hours: usize,
    ) -> Result<CorrectedSeries, CorrectionError> {
        if lead_hours == 0 || lead_hours > self.w_out {
            return Err(CorrectionError::Alignment(format!(
                "lead {lead_hours} h outside 1..={}",
                self.w_out
            )));
        }
        let src = &storm.stations[station_pos];
        let lag = lead_hours - 1;
        let times: Vec<DateTime<Utc>> = self
            .origins
            .iter()
            .map(|o| o.issue_time(self.w_in) + Duration::hours(lag as i64))
            .collect();
        let offsets: Vec<f64> = (0..self.origins.len())
            .map(|w| self.offsets[(w * self.w_out + lag) * self.n_stations + station])
            .collect();
        apply_correction(
            src.node_id,
            &storm.timestamps,
            &src.modeled,
            &src.observed,
            &times,
            &offsets,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn hours(n: usize) -> Vec<DateTime<Utc>> {
        let t0 = Utc.with_ymd_and_hms(2022, 9, 27, 0, 0, 0).unwrap();
        (0..n).map(|k| t0 + Duration::hours(k as i64)).collect()
    }

    #[test]
    fn correction_examples() {
        assert!((correct(1.3, 0.3) - 1.0).abs() < 1e-15);
        let t = hours(3);
        let modeled = vec![Some(1.0), Some(1.5), Some(2.0)];
        let observed = vec![Some(0.8), Some(1.1), None];
        let s = apply_correction(4, &t, &modeled, &observed, &t, &[0.0; 3]).unwrap();
        assert_eq!(s.corrected, modeled);
        let truth = [0.2, 0.4, 0.1];
        let s = apply_correction(4, &t, &modeled, &observed, &t, &truth).unwrap();
        for k in 0..2 {
            assert!((s.corrected[k].unwrap() - observed[k].unwrap()).abs() < 1e-12);
        }
        let late = hours(5);
        assert!(matches!(
            apply_correction(4, &t, &modeled, &observed, &late[4..], &[0.0]),
            Err(CorrectionError::Alignment(_))
        ));
    }

    fn series(observed: Vec<f64>, modeled: Vec<f64>, offset: Vec<f64>) -> CorrectedSeries {
        let t = hours(observed.len());
        let m: Vec<Option<f64>> = modeled.into_iter().map(Some).collect();
        let o: Vec<Option<f64>> = observed.into_iter().map(Some).collect();
        apply_correction(1, &t, &m, &o, &t, &offset).unwrap()
    }

    #[test]
    fn improvement_extremes() {
        let s = series(
            vec![1.0, 2.0, 1.5],
            vec![1.3, 2.3, 1.8],
            vec![0.3, 0.3, 0.3],
        );
        let r = improvement_report(&[s], EvalWindow::Full).unwrap();
        assert!((r.rows[0].reduction_pct.unwrap() - 100.0).abs() < 1e-9);
        let s = series(vec![1.0, 2.0], vec![1.3, 2.3], vec![0.0, 0.0]);
        let r = improvement_report(&[s], EvalWindow::Full).unwrap();
        assert_eq!(r.rows[0].reduction_pct, Some(0.0));
    }

    #[test]
    fn improvement_constant_bias_partially_predicted() {
        // bias 0.4, predicted 0.3: RMSE 0.4 → 0.1, reduction 75 %
        let s = series(vec![0.0; 4], vec![0.4; 4], vec![0.3; 4]);
        let r = improvement_report(&[s], EvalWindow::Full).unwrap();
        let row = &r.rows[0];
        assert!((row.rmse_modeled - 0.4).abs() < 1e-12);
        assert!((row.rmse_corrected - 0.1).abs() < 1e-12);
        assert!((row.reduction_pct.unwrap() - 75.0).abs() < 1e-9);
    }

    #[test]
    fn landfall_window_and_empty_window() {
        let t = hours(100);
        let s = series(
            vec![0.0; 100],
            (0..100).map(|k| k as f64 / 100.0).collect(),
            vec![0.0; 100],
        );
        let r = improvement_report(std::slice::from_ref(&s), EvalWindow::landfall(t[50])).unwrap();
        assert_eq!(r.rows[0].samples, 49);
        let far = EvalWindow::Range {
            start: t[99] + Duration::hours(10),
            end: t[99] + Duration::hours(20),
        };
        assert!(matches!(
            improvement_report(&[s], far),
            Err(CorrectionError::EmptyWindow(1))
        ));
    }

    #[test]
    fn peak_error_at_observed_maximum() {
        let s = series(
            vec![0.1, 0.9, 0.3],
            vec![0.5, 1.4, 0.6],
            vec![0.2, 0.3, 0.1],
        );
        let r = improvement_report(&[s], EvalWindow::Full).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.peak_observed, 0.9);
        assert!((row.peak_error_modeled - 0.5).abs() < 1e-12);
        assert!((row.peak_error_corrected - 0.2).abs() < 1e-12);
    }

    #[test]
    fn exceedance_examples() {
        assert!(exceedances(&[Some(0.1), Some(0.4)], 0.5).is_empty());
        let mut v = vec![Some(0.2); 20];
        for x in &mut v[10..=12] {
            *x = Some(0.6);
        }
        let ev = exceedances(&v, 0.5);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].start, ev[0].end), (10, 12));
        // A value exactly at the level does not exceed it.
        assert!(exceedances(&[Some(0.5)], 0.5).is_empty());
    }

    #[test]
    fn major_false_negative() {
        let mut obs = vec![Some(0.3); 10];
        obs[5] = Some(1.2);
        let mut pred = obs.clone();
        let t = FloodThresholds::default();
        let cmp = compare_events(&obs, &pred, &t);
        assert!(cmp.iter().all(EventComparison::agrees));
        assert_eq!(cmp[2].observed_events, 1);
        pred[5] = Some(1.1);
        let cmp = compare_events(&obs, &pred, &t);
        let major = cmp.iter().find(|c| c.severity == Severity::Major).unwrap();
        assert_eq!(major.false_negatives, 1);
        assert_eq!(major.false_positives, 0);
        assert!(cmp[0].agrees() && cmp[1].agrees());
        assert_eq!(
            max_agreeing_lead(std::slice::from_ref(&cmp), Severity::Minor),
            1
        );
        assert_eq!(max_agreeing_lead(&[cmp], Severity::Major), 0);
    }

    #[test]
    fn thresholds_validate() {
        FloodThresholds::default().validate().unwrap();
        let bad = FloodThresholds {
            minor: 0.8,
            moderate: 0.5,
            major: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    fn scores(v: &[f64]) -> Vec<StationScore> {
        v.iter()
            .enumerate()
            .map(|(k, &rmse)| StationScore {
                station_id: k,
                rmse,
            })
            .collect()
    }

    #[test]
    fn comparison_ties_and_counts() {
        let a = scores(&[0.1, 0.2, 0.3]);
        let c = compare_models(&a, &a).unwrap();
        assert_eq!((c.wins_a, c.wins_b), (3, 0));

        let ra: Vec<f64> = (0..16).map(|k| if k < 9 { 0.1 } else { 0.3 }).collect();
        let c = compare_models(&scores(&ra), &scores(&[0.2; 16])).unwrap();
        assert_eq!((c.wins_a, c.wins_b), (9, 7));

        let c = compare_models(&scores(&[0.1, 0.5]), &scores(&[0.3, 0.2])).unwrap();
        assert_eq!(c.winners[&0], Winner::A);
        assert_eq!(c.winners[&1], Winner::B);
        assert!((c.best_of.mean - 0.15).abs() < 1e-12);
        assert!((c.a.mean - 0.3).abs() < 1e-12);
        assert!((c.a.std - 0.2).abs() < 1e-12);

        assert!(matches!(
            compare_models(&scores(&[0.1]), &scores(&[0.1, 0.2])),
            Err(CorrectionError::StationMismatch(_))
        ));
    }

    #[test]
    fn pooled_reduction() {
        let truth = [0.3, -0.3, 0.3, -0.3];
        let p = pooled_improvement(&truth, &[0.3, -0.3, 0.3, -0.3]).unwrap();
        assert_eq!(p.reduction_pct, Some(100.0));
        let p = pooled_improvement(&truth, &[0.0; 4]).unwrap();
        assert_eq!(p.reduction_pct, Some(0.0));
    }
}
