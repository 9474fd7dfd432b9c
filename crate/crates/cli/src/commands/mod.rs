use std::path::{Path, PathBuf};

use surge_core::geo_graph::StationGraph;
use surge_core::ingest::PreparedData;
use surge_core::model::{ModelConfig, Variant};
use surge_core::training::TrainConfig;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{Command, ModelInputs, TrainOverrides};

mod data;
mod fit;
mod forecast;

pub use forecast::{read_predictions, PredictionRow};

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => data::synth(a),
        Command::BuildGraph(a) => data::build_graph(a),
        Command::Prepare(a) => data::prepare(a),
        Command::Train(a) => fit::train(a),
        Command::Ablate(a) => fit::ablate(a),
        Command::Sweep(a) => fit::sweep(a),
        Command::Predict(a) => forecast::predict(a),
        Command::Correct(a) => forecast::correct(a),
        Command::Evaluate(a) => forecast::evaluate(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(run: &mut Run, path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    run.output(path);
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::bad_input(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Directory that holds `path`'s manifest when `path` names a file.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Prepared data and the graph restricted to its stations, in model order.
fn load_model_inputs(
    inputs: &ModelInputs,
    run: &mut Run,
) -> CliResult<(PreparedData, StationGraph)> {
    require_file(&inputs.prepared, "prepared data")?;
    require_file(&inputs.graph, "graph")?;
    run.input(&inputs.prepared)?;
    run.input(&inputs.graph)?;
    let data = PreparedData::load(&inputs.prepared)?;
    let graph = StationGraph::load(&inputs.graph)?;
    let graph = graph.induced(&data.station_ids).map_err(|e| {
        CliError::bad_input(format!(
            "graph {} does not cover the prepared stations: {e}",
            inputs.graph.display()
        ))
    })?;
    Ok((data, graph))
}

/// Config file merged with command-line overrides.
fn resolve_config(o: &TrainOverrides, run: &mut Run) -> CliResult<RunConfig> {
    let (mut cfg, path) = RunConfig::resolve(o.config.as_deref())?;
    if let Some(p) = &path {
        run.input(p)?;
    }
    run.config(path.as_deref());
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.shards {
        t.grad_shards = v;
    }
    t.validate()?;
    run.seed(t.seed);
    Ok(cfg)
}

fn model_config(
    base: &ModelConfig,
    data: &PreparedData,
    variant: Option<Variant>,
    train: &TrainConfig,
) -> ModelConfig {
    ModelConfig {
        n_stations: data.n_stations(),
        w_in: data.w_in,
        w_out: data.w_out,
        variant: variant.unwrap_or(base.variant),
        seed: if base.seed == 0 {
            train.seed
        } else {
            base.seed
        },
        ..base.clone()
    }
}
