use surge_core::geo_graph::{Edge, StationGraph};
use surge_core::ingest::{prepare, PreparedData, Role, WindowedDataset};
use surge_core::layers::GraphContext;
use surge_core::model::{Checkpoint, ModelConfig, SurgeModel};
use surge_core::synth::{generate, CoastlineParams, SynthSpec};
use surge_core::training::{dataset_loss, train, train_from, TrainConfig, TrainState};

const W_IN: usize = 6;
const W_OUT: usize = 3;

fn corpus(spec: &SynthSpec) -> (PreparedData, StationGraph) {
    let data = generate(spec).unwrap();
    let (prepared, _) = prepare(&data.storms, &data.manifest, 0.2).unwrap();
    let n = data.stations.len();
    let edges = (0..n - 1)
        .map(|i| Edge {
            i,
            j: i + 1,
            weight: 0.9,
        })
        .collect();
    let graph = StationGraph::from_edges(data.stations.clone(), edges, 0.8, 500.0).unwrap();
    (prepared, graph)
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec::coastline(&CoastlineParams {
        n_stations: 4,
        train_storms: 2,
        val_storms: 1,
        test_storms: 1,
        length_h: 80,
        seed,
    })
}

fn small_model(n: usize) -> SurgeModel {
    SurgeModel::new(ModelConfig {
        n_stations: n,
        w_in: W_IN,
        w_out: W_OUT,
        mlp_widths: vec![4],
        gcn_width: 4,
        gat_head_width: 3,
        gat_heads: 2,
        lstm_hidden: 6,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

struct Fixture {
    graph: StationGraph,
    ctx: GraphContext,
    model: SurgeModel,
    train: WindowedDataset,
    val: WindowedDataset,
}

fn fixture() -> Fixture {
    let (data, graph) = corpus(&small_spec(2));
    let model = small_model(data.n_stations());
    let ctx = model.graph_context(&graph).unwrap();
    Fixture {
        ctx,
        model,
        train: data.windows(Role::Train, W_IN, W_OUT),
        val: data.windows(Role::Val, W_IN, W_OUT),
        graph,
    }
}

fn cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn flat(model: &SurgeModel) -> Vec<f64> {
    model
        .params()
        .values()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect()
}

#[test]
fn zero_learning_rate_without_decay_leaves_parameters_unchanged() {
    let f = fixture();
    let before = flat(&f.model);
    let c = TrainConfig {
        weight_decay: 0.0,
        ..cfg(2, 0.0)
    };
    let (state, report) = train(f.model, &f.ctx, &f.train, Some(&f.val), &c).unwrap();
    assert_eq!(flat(&state.model), before);
    assert_eq!(report.train_loss.len(), 2);
    let drift = (report.train_loss[0] - report.train_loss[1]).abs();
    assert!(
        drift <= 1e-12 * report.train_loss[0],
        "shuffled batches only reorder the sum"
    );
}

#[test]
fn zero_epochs_is_a_no_op() {
    let f = fixture();
    let before = flat(&f.model);
    let (state, report) = train(f.model, &f.ctx, &f.train, Some(&f.val), &cfg(0, 1e-2)).unwrap();
    assert_eq!(flat(&state.model), before);
    assert!(report.train_loss.is_empty());
    assert_eq!(report.best_epoch, None);
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let (a, ra) = train(
        f.model.clone(),
        &f.ctx,
        &f.train,
        Some(&f.val),
        &cfg(3, 1e-2),
    )
    .unwrap();
    let (b, rb) = train(f.model, &f.ctx, &f.train, Some(&f.val), &cfg(3, 1e-2)).unwrap();
    assert_eq!(flat(&a.model), flat(&b.model));
    assert_eq!(ra.train_loss, rb.train_loss);
    assert_eq!(ra.val_loss, rb.val_loss);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let f = fixture();
    let full_cfg = cfg(4, 1e-2);
    let (straight, _) = train(f.model.clone(), &f.ctx, &f.train, Some(&f.val), &full_cfg).unwrap();

    let (half, _) = train(f.model, &f.ctx, &f.train, Some(&f.val), &cfg(2, 1e-2)).unwrap();
    let last = Checkpoint::from_json(&half.checkpoint(&f.graph).to_json()).unwrap();
    let best = Checkpoint::from_json(&half.best_checkpoint(&f.graph).to_json()).unwrap();
    let mut resumed = TrainState::from_checkpoints(&last, Some(&best), &full_cfg).unwrap();
    train_from(
        &mut resumed,
        &f.ctx,
        &f.train,
        Some(&f.val),
        &full_cfg,
        |_| Ok(()),
    )
    .unwrap();

    assert_eq!(flat(&resumed.model), flat(&straight.model));
    assert_eq!(flat(&resumed.best_model()), flat(&straight.best_model()));
    assert_eq!(resumed.meta.train_loss, straight.meta.train_loss);
}

#[test]
fn sharded_gradients_match_a_single_shard() {
    let f = fixture();
    let (one, _) = train(f.model.clone(), &f.ctx, &f.train, None, &cfg(2, 1e-2)).unwrap();
    let sharded = TrainConfig {
        grad_shards: 3,
        ..cfg(2, 1e-2)
    };
    let (many, _) = train(f.model, &f.ctx, &f.train, None, &sharded).unwrap();
    for (a, b) in flat(&one.model).iter().zip(flat(&many.model)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn best_validation_parameters_are_retained() {
    let f = fixture();
    let (state, report) = train(f.model, &f.ctx, &f.train, Some(&f.val), &cfg(6, 2e-2)).unwrap();
    let best = report.best_epoch.unwrap();
    let min = report
        .val_loss
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.val_loss[best - 1], min);
    let reloaded = dataset_loss(&state.best_model(), &f.ctx, &f.val).unwrap();
    assert!((reloaded - min).abs() < 1e-12);
}

#[test]
fn periodic_bias_training_loss_collapses() {
    let mut spec = small_spec(5);
    spec.bias.ar_std_m = 0.0;
    spec.bias.periodic_amplitude_m = 0.3;
    let (data, graph) = corpus(&spec);
    let model = small_model(data.n_stations());
    let ctx = model.graph_context(&graph).unwrap();
    let train_ds = data.windows(Role::Train, W_IN, W_OUT);
    let initial = dataset_loss(&model, &ctx, &train_ds).unwrap();
    let (state, _) = train(model, &ctx, &train_ds, None, &cfg(50, 1e-2)).unwrap();
    let learned = dataset_loss(&state.model, &ctx, &train_ds).unwrap();
    assert!(learned < 0.1 * initial, "loss {initial} -> {learned}");
}

#[test]
fn periodic_bias_beats_the_climatological_mean() {
    let mut spec = small_spec(6);
    spec.bias.ar_std_m = 0.0;
    spec.bias.periodic_amplitude_m = 0.3;
    spec.bias.periodic_period_h = 12.0;
    let (data, graph) = corpus(&spec);
    let model = small_model(data.n_stations());
    let ctx = model.graph_context(&graph).unwrap();
    let train_ds = data.windows(Role::Train, W_IN, W_OUT);
    let val_ds = data.windows(Role::Val, W_IN, W_OUT);
    let (state, _) = train(model, &ctx, &train_ds, Some(&val_ds), &cfg(80, 1e-2)).unwrap();

    // baseline: each station's mean scaled training target
    let n = data.n_stations();
    let mut mean = vec![0.0; n];
    for (i, v) in train_ds.targets.iter().enumerate() {
        mean[i % n] += v;
    }
    let per = (train_ds.targets.len() / n) as f64;
    mean.iter_mut().for_each(|m| *m /= per);
    let baseline = val_ds
        .targets
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % n]).powi(2))
        .sum::<f64>()
        / val_ds.targets.len() as f64;
    let learned = dataset_loss(&state.best_model(), &ctx, &val_ds).unwrap();
    assert!(
        learned < 0.5 * baseline,
        "val loss {learned} vs mean baseline {baseline}"
    );
}
