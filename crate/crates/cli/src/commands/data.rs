use std::fmt::Write as _;

use surge_core::geo_graph::{
    degree_report, pair_stats, read_stations_csv, sweep_from_stats, GraphError, StationGraph,
};
use surge_core::ingest::{
    concat_observed, load_corpus, prepare as prepare_data, DatasetManifest, Role, StormData,
};
use surge_core::synth::{generate, CoastlineParams, SynthSpec};

use super::{create_dir, parent_dir, require_file, write};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{BuildGraphArgs, PrepareArgs, Preset, SynthArgs};

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let mut run = Run::start("synth");
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => {
            require_file(path, "synth spec")?;
            run.input(path)?;
            run.config(Some(path));
            SynthSpec::load(path)
                .map_err(|e| CliError::bad_input(format!("{}: {e}", path.display())))?
        }
        (None, Some(Preset::Coastline)) => SynthSpec::coastline(&CoastlineParams {
            n_stations: a.stations,
            length_h: a.length_h,
            seed: a.seed.unwrap_or(1),
            ..CoastlineParams::default()
        }),
        (None, Some(Preset::TwoClusters)) => {
            SynthSpec::two_clusters(a.length_h, a.seed.unwrap_or(1))
        }
        (None, None) => return Err(CliError::bad_input("either --spec or --preset is required")),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    run.seed(spec.seed);
    let data = generate(&spec)?;
    create_dir(&a.out)?;
    data.write(&a.out)?;
    write(&mut run, &a.out.join("spec.json"), &spec.to_json())?;
    for name in ["manifest.json", "stations.csv"] {
        run.output(&a.out.join(name));
    }
    for storm in &data.storms {
        run.output(&a.out.join(&storm.storm_id));
    }
    run.output(&a.out.join("truth"));
    log::info!(
        "wrote {} storms x {} stations to {}",
        data.storms.len(),
        data.stations.len(),
        a.out.display()
    );
    run.finish(&a.out)?;
    Ok(())
}

/// Storms of `role`, in manifest order.
fn storms_of<'a>(
    corpus: &'a [StormData],
    manifest: &DatasetManifest,
    role: Role,
) -> Vec<&'a StormData> {
    let ids = manifest.storm_ids(role);
    corpus
        .iter()
        .filter(|s| ids.contains(&s.storm_id))
        .collect()
}

pub(super) fn load_data(
    data: &crate::DataArgs,
    run: &mut Run,
) -> CliResult<(DatasetManifest, Vec<StormData>)> {
    let manifest_path = data.manifest_path();
    require_file(&manifest_path, "dataset manifest")?;
    if !data.data.is_dir() {
        return Err(CliError::bad_input(format!(
            "data directory {} does not exist",
            data.data.display()
        )));
    }
    run.input(&manifest_path)?;
    run.input(&data.data)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let corpus = load_corpus(&data.data, &manifest)?;
    Ok((manifest, corpus))
}

pub fn build_graph(a: BuildGraphArgs) -> CliResult<()> {
    let mut run = Run::start("build-graph");
    let stations_path = a
        .stations
        .clone()
        .unwrap_or_else(|| a.data.data.join("stations.csv"));
    require_file(&stations_path, "station table")?;
    run.input(&stations_path)?;
    let stations = read_stations_csv(&stations_path)
        .map_err(|e| CliError::bad_input(format!("{}: {e}", stations_path.display())))?;
    let (manifest, corpus) = load_data(&a.data, &mut run)?;
    let ids: Vec<usize> = stations.iter().map(|s| s.node_id).collect();
    if ids != manifest.stations {
        return Err(CliError::bad_input(format!(
            "station table lists nodes {ids:?} but the manifest lists {:?}",
            manifest.stations
        )));
    }

    // correlation is measured on the observed levels of the training storms
    let train = storms_of(&corpus, &manifest, Role::Train);
    if train.is_empty() {
        return Err(CliError::bad_input("manifest has no training storms"));
    }
    let series = concat_observed(&train);
    let stats = pair_stats(&stations, &series).map_err(|e| match e {
        GraphError::ZeroVariance { station } => CliError::data_quality(format!(
            "station {} ({}) has a constant observed series",
            stations[station].node_id, stations[station].name
        )),
        other => other.into(),
    })?;
    let graph = StationGraph::from_edges(
        stations.clone(),
        stats.edges(a.rho_min, a.d_max),
        a.rho_min,
        a.d_max,
    )?;

    let report = degree_report(&graph);
    eprintln!(
        "graph: {} stations, {} edges, degree min {} max {} (node {})",
        graph.len(),
        graph.edges().len(),
        report.min_degree,
        report.max_degree,
        report.argmax
    );
    let mut degrees = String::from("node_id,name,degree\n");
    for (s, d) in stations.iter().zip(&report.degrees) {
        eprintln!("  {:>3} {:<24} degree {d}", s.node_id, s.name);
        let _ = writeln!(degrees, "{},{},{d}", s.node_id, s.name);
    }
    for k in graph.isolated() {
        log::warn!(
            "station {} ({}) is isolated",
            stations[k].node_id,
            stations[k].name
        );
    }

    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    let stem = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".into());
    write(&mut run, &a.out, &graph.to_json())?;
    write(&mut run, &dir.join(format!("{stem}_degrees.csv")), &degrees)?;
    if !a.sweep_rho.is_empty() && !a.sweep_d.is_empty() {
        let mut csv = String::from("rho_min,d_max_km,edges,isolated,min_degree\n");
        for r in sweep_from_stats(&stats, &a.sweep_rho, &a.sweep_d) {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.rho_min, r.d_max_km, r.edges, r.isolated, r.min_degree
            );
        }
        write(&mut run, &dir.join(format!("{stem}_sweep.csv")), &csv)?;
    }
    run.finish(&dir)?;
    Ok(())
}

pub fn prepare(a: PrepareArgs) -> CliResult<()> {
    let mut run = Run::start("prepare");
    if !(0.0..=1.0).contains(&a.max_missing) {
        return Err(CliError::bad_input("--max-missing must lie in [0, 1]"));
    }
    let (mut manifest, corpus) = load_data(&a.data, &mut run)?;
    if let Some(w) = a.w_in {
        manifest.w_in = w;
    }
    if let Some(w) = a.w_out {
        manifest.w_out = w;
    }
    if manifest.w_in == 0 || manifest.w_out == 0 {
        return Err(CliError::bad_input("window lengths must be positive"));
    }
    let (data, report) = prepare_data(&corpus, &manifest, a.max_missing)?;
    let windows = data.windows(Role::Train, data.w_in, data.w_out);
    if windows.is_empty() {
        return Err(CliError::data_quality(format!(
            "training storms are shorter than W_in + W_out = {}",
            data.w_in + data.w_out
        )));
    }
    eprintln!(
        "prepared {} stations, {} training windows; excluded {:?}; {} outliers, {} gaps filled",
        data.n_stations(),
        windows.len(),
        report.excluded_stations,
        report.outliers.total(),
        report.gaps_filled
    );
    create_dir(&a.out)?;
    let path = a.out.join("prepared.json");
    data.save(&path)?;
    run.output(&path);
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write(&mut run, &a.out.join("prepare_report.json"), &report_json)?;
    run.finish(&a.out)?;
    Ok(())
}
