use std::fmt::Write as _;

use surge_core::geo_graph::StationGraph;
use surge_core::ingest::{PreparedData, Role};
use surge_core::model::{Checkpoint, SurgeModel, Variant};
use surge_core::training::{
    evaluate, sweep_windows, train_from, TrainConfig, TrainError, TrainReport, TrainState,
};

use super::{create_dir, load_model_inputs, model_config, resolve_config, write};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{AblateArgs, SweepArgs, TrainArgs};

pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";

fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse()
        .map_err(|e| CliError::bad_input(format!("--variant {s}: {e}")))
}

fn fresh_state(
    data: &PreparedData,
    cfg: &RunConfig,
    variant: Option<Variant>,
) -> CliResult<TrainState> {
    let model = SurgeModel::new(model_config(&cfg.model, data, variant, &cfg.train))?;
    let mut state = TrainState::new(model, &cfg.train);
    state.meta.station_ids = data.station_ids.clone();
    state.meta.scaler = Some(data.scaler.clone());
    state.meta.train_config = serde_json::to_value(&cfg.train).expect("config serializes");
    Ok(state)
}

/// Trains `state` to `cfg.epochs`, optionally saving checkpoints after every epoch.
fn run_training(
    state: &mut TrainState,
    data: &PreparedData,
    graph: &StationGraph,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&std::path::Path>,
) -> CliResult<TrainReport> {
    let c = state.model.config().clone();
    let ctx = state.model.graph_context(graph)?;
    let train_ds = data.windows(Role::Train, c.w_in, c.w_out);
    let val_ds = data.windows(Role::Val, c.w_in, c.w_out);
    if val_ds.is_empty() {
        log::warn!("no validation windows; the last epoch's weights are kept");
    }
    let report = train_from(state, &ctx, &train_ds, Some(&val_ds), cfg, |s| {
        if let Some(dir) = checkpoint_dir {
            s.checkpoint(graph).save(&dir.join(LAST_CHECKPOINT))?;
            s.best_checkpoint(graph).save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok::<(), TrainError>(())
    })?;
    Ok(report)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut run = Run::start("train");
    let (data, graph) = load_model_inputs(&a.inputs, &mut run)?;
    let cfg = resolve_config(&a.overrides, &mut run)?;
    let variant = a.variant.as_deref().map(parse_variant).transpose()?;
    create_dir(&a.out)?;

    let mut state = if a.resume {
        let last_path = a.out.join(LAST_CHECKPOINT);
        if !last_path.is_file() {
            return Err(CliError::bad_input(format!(
                "nothing to resume: {} is missing",
                last_path.display()
            )));
        }
        run.input(&last_path)?;
        let last = Checkpoint::load(&last_path)?;
        last.check_graph(&graph)?;
        let best_path = a.out.join(BEST_CHECKPOINT);
        let best = if best_path.is_file() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        let mut state = TrainState::from_checkpoints(&last, best.as_ref(), &cfg.train)?;
        if state.meta.station_ids != data.station_ids {
            return Err(CliError::bad_input(
                "checkpoint was trained on a different station set",
            ));
        }
        state.meta.train_config = serde_json::to_value(&cfg.train).expect("config serializes");
        state
    } else {
        fresh_state(&data, &cfg, variant)?
    };
    log::info!(
        "training {} on {} stations, W_in={} W_out={}, {} epochs",
        state.model.config().variant,
        data.n_stations(),
        data.w_in,
        data.w_out,
        cfg.train.epochs
    );

    let report = run_training(&mut state, &data, &graph, &cfg.train, Some(&a.out))?;
    // written again so that a zero-epoch run still leaves checkpoints
    for (name, ckpt) in [
        (LAST_CHECKPOINT, state.checkpoint(&graph)),
        (BEST_CHECKPOINT, state.best_checkpoint(&graph)),
    ] {
        let path = a.out.join(name);
        ckpt.save(&path)?;
        run.output(&path);
    }
    write(&mut run, &a.out.join("train_report.csv"), &report.to_csv())?;

    let c = state.model.config();
    let val_ds = data.windows(Role::Val, c.w_in, c.w_out);
    if !val_ds.is_empty() {
        let ctx = state.model.graph_context(&graph)?;
        let table = evaluate(
            &state.best_model(),
            &ctx,
            &val_ds,
            &data.scaler,
            &data.station_ids,
        )?;
        eprintln!(
            "best epoch {:?}: validation RMSE {:.4} m, MAE {:.4} m",
            report.best_epoch, table.overall.rmse, table.overall.mae
        );
        write(&mut run, &a.out.join("val_metrics.csv"), &table.to_csv())?;
    }
    run.finish(&a.out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub test_rmse: f64,
    pub val_rmse: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv = String::from("components,test_rmse_m,val_rmse_m,best_epoch\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.variant.label(),
            r.test_rmse,
            r.val_rmse.map(|v| v.to_string()).unwrap_or_default(),
            r.best_epoch.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    csv
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let mut run = Run::start("ablate");
    let (data, graph) = load_model_inputs(&a.inputs, &mut run)?;
    let cfg = resolve_config(&a.overrides, &mut run)?;
    let test_ds = data.windows(Role::Test, data.w_in, data.w_out);
    if test_ds.is_empty() {
        return Err(CliError::data_quality("test storms yield no windows"));
    }
    let val_ds = data.windows(Role::Val, data.w_in, data.w_out);
    let mut rows = Vec::new();
    for variant in Variant::ABLATION {
        log::info!("ablation: training {variant}");
        let mut state = fresh_state(&data, &cfg, Some(variant))?;
        let report = run_training(&mut state, &data, &graph, &cfg.train, None)?;
        let best = state.best_model();
        let ctx = best.graph_context(&graph)?;
        let test = evaluate(&best, &ctx, &test_ds, &data.scaler, &data.station_ids)?;
        let val = if val_ds.is_empty() {
            None
        } else {
            Some(
                evaluate(&best, &ctx, &val_ds, &data.scaler, &data.station_ids)?
                    .overall
                    .rmse,
            )
        };
        eprintln!(
            "{:<18} test RMSE {:.4} m",
            variant.label(),
            test.overall.rmse
        );
        rows.push(AblationRow {
            variant,
            test_rmse: test.overall.rmse,
            val_rmse: val,
            best_epoch: report.best_epoch,
        });
    }
    create_dir(&a.out)?;
    write(&mut run, &a.out.join("ablation.csv"), &ablation_csv(&rows))?;
    run.finish(&a.out)?;
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let mut run = Run::start("sweep");
    let (data, graph) = load_model_inputs(&a.inputs, &mut run)?;
    let cfg = resolve_config(&a.overrides, &mut run)?;
    if a.w_in.contains(&0) || a.w_out.contains(&0) {
        return Err(CliError::bad_input("window lengths must be positive"));
    }
    let base = model_config(&cfg.model, &data, None, &cfg.train);
    let cells = sweep_windows(&data, &graph, &base, &cfg.train, &a.w_in, &a.w_out)?;
    let mut csv = String::from("rank,w_in,w_out,val_rmse_m,best_epoch\n");
    for (k, c) in cells.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            k + 1,
            c.w_in,
            c.w_out,
            c.val_rmse,
            c.best_epoch.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    create_dir(&a.out)?;
    write(&mut run, &a.out.join("sweep.csv"), &csv)?;
    run.finish(&a.out)?;
    Ok(())
}
