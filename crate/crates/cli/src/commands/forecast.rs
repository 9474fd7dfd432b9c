use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use surge_core::correction::{
    apply_correction, compare_events, improvement_report, pooled_improvement, CorrectedSeries,
    CorrectionError, EvalWindow, EventComparison, PooledImprovement, ThresholdTable,
};
use surge_core::ingest::{format_timestamp, parse_timestamp, DatasetManifest, StormData, HOUR};
use surge_core::model::Checkpoint;
use surge_core::training::{predict_dataset, unscale, Metrics};

use super::data::load_data;
use super::{create_dir, load_model_inputs, require_file, write};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{CorrectArgs, EvaluateArgs, PredictArgs};

/// One line of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub storm_id: String,
    pub station_id: usize,
    /// Time of the first forecast step of the window.
    pub issue_time: String,
    pub lead_hours: usize,
    pub target_time: String,
    pub predicted_offset_m: f64,
    /// Cleaned offset the model was asked to forecast.
    pub target_offset_m: f64,
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRow>> {
    require_file(path, "predictions")?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::bad_input(format!("{}: {e}", path.display())))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<PredictionRow>, _>>()
        .map_err(|e| CliError::bad_input(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::data_quality(format!(
            "{} has no predictions",
            path.display()
        )));
    }
    Ok(rows)
}

fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8")
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let mut run = Run::start("predict");
    let (data, graph) = load_model_inputs(&a.inputs, &mut run)?;
    require_file(&a.checkpoint, "checkpoint")?;
    run.input(&a.checkpoint)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if !ckpt.meta.station_ids.is_empty() && ckpt.meta.station_ids != data.station_ids {
        return Err(CliError::bad_input(format!(
            "checkpoint stations {:?} differ from prepared stations {:?}",
            ckpt.meta.station_ids, data.station_ids
        )));
    }
    let model = ckpt.to_model_for(&graph)?;
    let c = model.config().clone();
    let ds = data.windows(a.split.into(), c.w_in, c.w_out);
    if ds.is_empty() {
        return Err(CliError::data_quality(format!(
            "{:?} storms yield no windows",
            a.split
        )));
    }
    let ctx = model.graph_context(&graph)?;
    let n = c.n_stations;
    let pred = unscale(&predict_dataset(&model, &ctx, &ds, 64)?, n, &data.scaler);
    let truth = unscale(&ds.targets, n, &data.scaler);

    let mut rows = Vec::with_capacity(pred.len());
    for (w, origin) in ds.provenance.iter().enumerate() {
        let issue = origin.issue_time(c.w_in);
        for lag in 0..c.w_out {
            for k in 0..n {
                let i = (w * c.w_out + lag) * n + k;
                rows.push(PredictionRow {
                    storm_id: origin.storm_id.clone(),
                    station_id: data.station_ids[k],
                    issue_time: format_timestamp(issue),
                    lead_hours: lag + 1,
                    target_time: format_timestamp(issue + Duration::hours(lag as i64)),
                    predicted_offset_m: pred[i],
                    target_offset_m: truth[i],
                });
            }
        }
    }
    eprintln!("{} windows, {} forecasts", ds.len(), rows.len());
    create_dir(&a.out)?;
    write(
        &mut run,
        &a.out.join("predictions.csv"),
        &predictions_csv(&rows),
    )?;
    run.finish(&a.out)?;
    Ok(())
}

/// Raw series lookup by storm id, station id and time.
struct Corpus<'a> {
    storms: BTreeMap<&'a str, &'a StormData>,
    positions: BTreeMap<usize, usize>,
}

impl<'a> Corpus<'a> {
    fn new(manifest: &DatasetManifest, corpus: &'a [StormData]) -> Self {
        Self {
            storms: corpus.iter().map(|s| (s.storm_id.as_str(), s)).collect(),
            positions: manifest
                .stations
                .iter()
                .enumerate()
                .map(|(k, &id)| (id, k))
                .collect(),
        }
    }

    fn storm(&self, id: &str) -> CliResult<&'a StormData> {
        self.storms
            .get(id)
            .copied()
            .ok_or_else(|| CliError::bad_input(format!("storm {id:?} is not in the dataset")))
    }

    fn position(&self, station_id: usize) -> CliResult<usize> {
        self.positions.get(&station_id).copied().ok_or_else(|| {
            CliError::bad_input(format!("station {station_id} is not in the dataset"))
        })
    }

    /// `(modeled, observed)` at `t`.
    fn levels(
        &self,
        storm_id: &str,
        station_id: usize,
        t: DateTime<Utc>,
    ) -> CliResult<(Option<f64>, Option<f64>)> {
        let storm = self.storm(storm_id)?;
        let k = self.position(station_id)?;
        let secs = (t - storm.timestamps[0]).num_seconds();
        let idx = (secs / HOUR) as usize;
        if secs < 0 || secs % HOUR != 0 || idx >= storm.len() {
            return Err(CliError::bad_input(format!(
                "{t} is outside storm {storm_id}"
            )));
        }
        let s = &storm.stations[k];
        Ok((s.modeled[idx], s.observed[idx]))
    }
}

fn resolve_lead(rows: &[PredictionRow], lead: Option<usize>) -> CliResult<usize> {
    let max = rows.iter().map(|r| r.lead_hours).max().unwrap_or(0);
    match lead {
        None => Ok(max),
        Some(l) if l >= 1 && l <= max => Ok(l),
        Some(l) => Err(CliError::bad_input(format!("--lead {l} outside 1..={max}"))),
    }
}

/// Corrected series per `(storm, station)` at one lead, in storm then station order.
fn corrected_at_lead(
    rows: &[PredictionRow],
    lead: usize,
    corpus: &Corpus,
) -> CliResult<BTreeMap<(String, usize), CorrectedSeries>> {
    let mut groups: BTreeMap<(String, usize), (Vec<DateTime<Utc>>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.lead_hours == lead) {
        let g = groups
            .entry((r.storm_id.clone(), r.station_id))
            .or_default();
        g.0.push(parse_timestamp(&r.target_time)?);
        g.1.push(r.predicted_offset_m);
    }
    let mut out = BTreeMap::new();
    for ((storm_id, station_id), (times, offsets)) in groups {
        let storm = corpus.storm(&storm_id)?;
        let s = &storm.stations[corpus.position(station_id)?];
        let series = apply_correction(
            station_id,
            &storm.timestamps,
            &s.modeled,
            &s.observed,
            &times,
            &offsets,
        )?;
        out.insert((storm_id, station_id), series);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Improvement rows of all storms, one CSV with a leading storm column.
fn improvement_csv(
    series: &BTreeMap<(String, usize), CorrectedSeries>,
    window: impl Fn(&str) -> CliResult<Option<EvalWindow>>,
) -> CliResult<Option<String>> {
    let mut by_storm: BTreeMap<&str, Vec<CorrectedSeries>> = BTreeMap::new();
    for ((storm, _), s) in series {
        by_storm.entry(storm.as_str()).or_default().push(s.clone());
    }
    let mut csv = String::new();
    for (storm, list) in by_storm {
        let Some(w) = window(storm)? else { continue };
        let report = match improvement_report(&list, w) {
            Ok(r) => r,
            Err(CorrectionError::EmptyWindow(station)) => {
                log::warn!(
                    "storm {storm}: no forecasts for station {station} in the evaluation window"
                );
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let body = report.to_csv();
        let mut lines = body.lines();
        let header = lines.next().expect("header");
        if csv.is_empty() {
            let _ = writeln!(csv, "storm_id,{header}");
        }
        for line in lines {
            let _ = writeln!(csv, "{storm},{line}");
        }
    }
    Ok((!csv.is_empty()).then_some(csv))
}

pub fn correct(a: CorrectArgs) -> CliResult<()> {
    let mut run = Run::start("correct");
    let (manifest, raw) = load_data(&a.data, &mut run)?;
    run.input(&a.predictions)?;
    let rows = read_predictions(&a.predictions)?;
    let lead = resolve_lead(&rows, a.lead)?;
    let corpus = Corpus::new(&manifest, &raw);
    let series = corrected_at_lead(&rows, lead, &corpus)?;

    create_dir(&a.out)?;
    for ((storm, station), s) in &series {
        let dir = a.out.join(storm);
        create_dir(&dir)?;
        let mut csv =
            String::from("timestamp,observed_m,modeled_m,predicted_offset_m,corrected_m\n");
        for k in 0..s.timestamps.len() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                format_timestamp(s.timestamps[k]),
                opt(s.observed[k]),
                opt(s.modeled[k]),
                s.predicted_offset[k],
                opt(s.corrected[k])
            );
        }
        write(&mut run, &dir.join(format!("{station}.csv")), &csv)?;
    }
    if let Some(csv) = improvement_csv(&series, |_| Ok(Some(EvalWindow::Full)))? {
        write(&mut run, &a.out.join("improvement.csv"), &csv)?;
    }
    let landfall = |storm: &str| -> CliResult<Option<EvalWindow>> {
        Ok(manifest.landfall(storm)?.map(EvalWindow::landfall))
    };
    if let Some(csv) = improvement_csv(&series, landfall)? {
        write(&mut run, &a.out.join("improvement_landfall.csv"), &csv)?;
    }
    eprintln!("corrected {} station series at lead {lead} h", series.len());
    run.finish(&a.out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadScore {
    pub lead_hours: usize,
    /// Water levels before and after correction, against observations.
    pub water_level: Option<PooledImprovement>,
    /// Forecast offsets against the cleaned target offsets.
    pub offset: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationOffsetScore {
    pub station_id: usize,
    pub offset: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub storm_id: String,
    pub station_id: usize,
    pub modeled: Vec<EventComparison>,
    pub corrected: Vec<EventComparison>,
}

/// Contents of `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// All forecasts pooled over storms, stations and leads.
    pub water_level: Option<PooledImprovement>,
    pub offset: Metrics,
    pub by_lead: Vec<LeadScore>,
    pub by_station: Vec<StationOffsetScore>,
    /// Flood-threshold events at `event_lead_hours`.
    pub event_lead_hours: usize,
    pub events: Vec<EventScore>,
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut run = Run::start("evaluate");
    let (manifest, raw) = load_data(&a.data, &mut run)?;
    run.input(&a.predictions)?;
    let rows = read_predictions(&a.predictions)?;
    let lead = resolve_lead(&rows, a.lead)?;
    let thresholds = match &a.thresholds {
        Some(p) => {
            require_file(p, "thresholds")?;
            run.input(p)?;
            ThresholdTable::load(p)?
        }
        None => ThresholdTable::default(),
    };
    let corpus = Corpus::new(&manifest, &raw);

    // (true offset, predicted) pairs where both raw levels exist, keyed by lead
    let mut wl: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut off: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut by_station: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let t = parse_timestamp(&r.target_time)?;
        if let (Some(m), Some(o)) = corpus.levels(&r.storm_id, r.station_id, t)? {
            let e = wl.entry(r.lead_hours).or_default();
            e.0.push(m - o);
            e.1.push(r.predicted_offset_m);
        }
        let e = off.entry(r.lead_hours).or_default();
        e.0.push(r.target_offset_m);
        e.1.push(r.predicted_offset_m);
        let e = by_station.entry(r.station_id).or_default();
        e.0.push(r.target_offset_m);
        e.1.push(r.predicted_offset_m);
    }
    let pooled = |m: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>| -> (Vec<f64>, Vec<f64>) {
        m.values()
            .fold((Vec::new(), Vec::new()), |(mut a, mut b), (x, y)| {
                a.extend_from_slice(x);
                b.extend_from_slice(y);
                (a, b)
            })
    };
    let (wl_true, wl_pred) = pooled(&wl);
    let (off_true, off_pred) = pooled(&off);
    let by_lead = off
        .iter()
        .map(|(&l, (t, p))| LeadScore {
            lead_hours: l,
            water_level: wl.get(&l).and_then(|(wt, wp)| pooled_improvement(wt, wp)),
            offset: Metrics::between(p, t).expect("non-empty"),
        })
        .collect::<Vec<_>>();

    let series = corrected_at_lead(&rows, lead, &corpus)?;
    let events = series
        .iter()
        .map(|((storm, station), s)| {
            let th = thresholds.for_station(*station);
            EventScore {
                storm_id: storm.clone(),
                station_id: *station,
                modeled: compare_events(&s.observed, &s.modeled, &th),
                corrected: compare_events(&s.observed, &s.corrected, &th),
            }
        })
        .collect();

    let eval = Evaluation {
        water_level: pooled_improvement(&wl_true, &wl_pred),
        offset: Metrics::between(&off_pred, &off_true).expect("non-empty"),
        by_lead,
        by_station: by_station
            .iter()
            .map(|(&id, (t, p))| StationOffsetScore {
                station_id: id,
                offset: Metrics::between(p, t).expect("non-empty"),
            })
            .collect(),
        event_lead_hours: lead,
        events,
    };
    if let Some(p) = &eval.water_level {
        eprintln!(
            "water level RMSE {:.4} m -> {:.4} m ({} reduction) over {} forecasts",
            p.rmse_modeled,
            p.rmse_corrected,
            p.reduction_pct
                .map(|r| format!("{r:.1}%"))
                .unwrap_or_else(|| "n/a".into()),
            p.samples
        );
    }
    eprintln!(
        "offset RMSE {:.4} m, MAE {:.4} m",
        eval.offset.rmse, eval.offset.mae
    );

    create_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&eval).expect("evaluation serializes") + "\n";
    write(&mut run, &a.out.join("evaluation.json"), &json)?;
    let mut csv = String::from(
        "lead_hours,samples,rmse_modeled_m,rmse_corrected_m,reduction_pct,offset_rmse_m,offset_mae_m\n",
    );
    for l in &eval.by_lead {
        let (n, before, after, pct) = match &l.water_level {
            Some(p) => (
                p.samples.to_string(),
                p.rmse_modeled.to_string(),
                p.rmse_corrected.to_string(),
                opt(p.reduction_pct),
            ),
            None => ("0".into(), String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{n},{before},{after},{pct},{},{}",
            l.lead_hours, l.offset.rmse, l.offset.mae
        );
    }
    write(&mut run, &a.out.join("metrics_by_lead.csv"), &csv)?;
    let mut csv = String::from("station_id,offset_rmse_m,offset_mse_m2,offset_mae_m,count\n");
    for s in &eval.by_station {
        let m = &s.offset;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            s.station_id, m.rmse, m.mse, m.mae, m.count
        );
    }
    write(&mut run, &a.out.join("metrics_by_station.csv"), &csv)?;
    run.finish(&a.out)?;
    Ok(())
}
