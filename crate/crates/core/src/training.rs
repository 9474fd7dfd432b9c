//! Mini-batch Adam training with validation-based model selection, metrics
//! in physical units, and the input/output window sweep.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo_graph::StationGraph;
use crate::ingest::{PreparedData, Role, ScalerParams, WindowedDataset};
use crate::layers::GraphContext;
use crate::model::{Checkpoint, ModelConfig, ModelError, SurgeModel, TrainingMeta};
use crate::numerics::{AdamConfig, AdamState, NumericsError, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (first window: {first_window})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_window: String,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
}

/// Optimization settings; keys mirror the flat config file one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Split each batch into this many shards whose gradients are computed on
    /// separate threads and summed in shard order.
    pub grad_shards: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 200,
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            batch_size: 20,
            seed: 0,
            shuffle: true,
            patience: None,
            grad_shards: 1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.grad_shards == 0 {
            return bad("batch_size and grad_shards must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.epsilon > 0.0) {
            return bad("learning_rate and weight_decay must be non-negative, epsilon positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive when set");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// RMSE, MSE and MAE over a set of errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_errors(errors: impl IntoIterator<Item = f64>) -> Option<Self> {
        let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
        for e in errors {
            sq += e * e;
            abs += e.abs();
            count += 1;
        }
        if count == 0 {
            return None;
        }
        let mse = sq / count as f64;
        Some(Self {
            rmse: mse.sqrt(),
            mse,
            mae: abs / count as f64,
            count,
        })
    }

    pub fn between(pred: &[f64], truth: &[f64]) -> Option<Self> {
        assert_eq!(pred.len(), truth.len());
        Self::from_errors(pred.iter().zip(truth).map(|(p, t)| p - t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMetrics {
    pub station_id: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Offset forecast errors in metres: pooled, per station and per lead hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub overall: Metrics,
    pub per_station: Vec<StationMetrics>,
    /// Index `k` is lead time `k + 1` hours.
    pub per_lead: Vec<Metrics>,
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,station_id,rmse_m,mse_m2,mae_m,count\n");
        let row = |scope: &str, id: String, m: &Metrics| {
            format!("{scope},{id},{},{},{},{}\n", m.rmse, m.mse, m.mae, m.count)
        };
        out.push_str(&row("overall", String::new(), &self.overall));
        for s in &self.per_station {
            out.push_str(&row("station", s.station_id.to_string(), &s.metrics));
        }
        for (k, m) in self.per_lead.iter().enumerate() {
            out.push_str(&row("lead_hours", (k + 1).to_string(), m));
        }
        out
    }
}

/// Inverse-scales a `[windows × W_out × N]` block of scaled values to metres.
pub fn unscale(values: &[f64], n_stations: usize, scaler: &ScalerParams) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| scaler.invert(k % n_stations, v))
        .collect()
}

/// Scaled model predictions for every window, `[windows × W_out × N]` row-major.
pub fn predict_dataset(
    model: &SurgeModel,
    ctx: &GraphContext,
    ds: &WindowedDataset,
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset("no windows to predict".into()));
    }
    check_dataset(model, ds)?;
    let mut out = Vec::with_capacity(ds.targets.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, _) = ds.batch(part);
        out.extend_from_slice(model.predict(ctx, &x)?.data());
    }
    Ok(out)
}

/// Metrics on unscaled offsets.
pub fn evaluate(
    model: &SurgeModel,
    ctx: &GraphContext,
    ds: &WindowedDataset,
    scaler: &ScalerParams,
    station_ids: &[usize],
) -> Result<MetricTable, TrainError> {
    let pred = predict_dataset(model, ctx, ds, 64)?;
    Ok(metric_table(
        &pred,
        &ds.targets,
        ds.w_out,
        ds.n_stations,
        scaler,
        station_ids,
    ))
}

/// Builds a [`MetricTable`] from scaled predictions and targets.
pub fn metric_table(
    pred_scaled: &[f64],
    target_scaled: &[f64],
    w_out: usize,
    n: usize,
    scaler: &ScalerParams,
    station_ids: &[usize],
) -> MetricTable {
    let pred = unscale(pred_scaled, n, scaler);
    let truth = unscale(target_scaled, n, scaler);
    let err: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| p - t).collect();
    let overall = Metrics::from_errors(err.iter().copied()).expect("non-empty");
    let per_station = (0..n)
        .map(|s| StationMetrics {
            station_id: station_ids.get(s).copied().unwrap_or(s),
            metrics: Metrics::from_errors(err.iter().skip(s).step_by(n).copied())
                .expect("non-empty"),
        })
        .collect();
    let per_lead = (0..w_out)
        .map(|k| {
            let errs = err
                .chunks(w_out * n)
                .flat_map(|w| w[k * n..(k + 1) * n].iter().copied());
            Metrics::from_errors(errs).expect("non-empty")
        })
        .collect();
    MetricTable {
        overall,
        per_station,
        per_lead,
    }
}

fn check_dataset(model: &SurgeModel, ds: &WindowedDataset) -> Result<(), TrainError> {
    let c = model.config();
    if ds.n_stations != c.n_stations || ds.w_in != c.w_in || ds.w_out != c.w_out {
        return Err(TrainError::Mismatch(format!(
            "dataset has N={}, W_in={}, W_out={}; model has N={}, W_in={}, W_out={}",
            ds.n_stations, ds.w_in, ds.w_out, c.n_stations, c.w_in, c.w_out
        )));
    }
    Ok(())
}

/// Mean squared error on scaled values over a whole dataset.
pub fn dataset_loss(
    model: &SurgeModel,
    ctx: &GraphContext,
    ds: &WindowedDataset,
) -> Result<f64, TrainError> {
    let pred = predict_dataset(model, ctx, ds, 64)?;
    Ok(Metrics::between(&pred, &ds.targets).expect("non-empty").mse)
}

/// Per-epoch history and selection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub wall_clock_seconds: f64,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricTable>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (k, t) in self.train_loss.iter().enumerate() {
            let v = self
                .val_loss
                .get(k)
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{},{t},{v}\n", k + 1));
        }
        out
    }
}

/// Model, optimizer and bookkeeping needed to continue training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SurgeModel,
    pub adam: AdamState,
    pub meta: TrainingMeta,
    /// Parameters of the best validation epoch so far.
    pub best_params: Option<Vec<Tensor>>,
}

impl TrainState {
    pub fn new(model: SurgeModel, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(cfg.adam(), &model.params().values());
        Self {
            model,
            adam,
            meta: TrainingMeta::default(),
            best_params: None,
        }
    }

    /// Restores from the last checkpoint and, if present, the best one.
    pub fn from_checkpoints(
        last: &Checkpoint,
        best: Option<&Checkpoint>,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let model = last.to_model()?;
        let mut adam = last
            .optimizer
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint has no optimizer state".into()))?;
        adam.config = cfg.adam();
        let best_params = match best {
            Some(b) => Some(b.to_model()?.params().values()),
            None => None,
        };
        Ok(Self {
            model,
            adam,
            meta: last.meta.clone(),
            best_params,
        })
    }

    /// The model with the best validation parameters (or the last ones when none recorded).
    pub fn best_model(&self) -> SurgeModel {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.params_mut().set_values(p.clone());
        }
        m
    }

    pub fn checkpoint(&self, graph: &StationGraph) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            graph,
            Some(self.adam.clone()),
            self.meta.clone(),
        )
    }

    pub fn best_checkpoint(&self, graph: &StationGraph) -> Checkpoint {
        Checkpoint::new(&self.best_model(), graph, None, self.meta.clone())
    }
}

fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64);
    rng
}

const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;

/// Loss and gradients for one batch, optionally split across threads.
fn batch_gradients(
    model: &SurgeModel,
    ctx: &GraphContext,
    ds: &WindowedDataset,
    batch: &[usize],
    shards: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let denom = (batch.len() * ds.w_out * ds.n_stations) as f64;
    let shard_len = batch.len().div_ceil(shards.min(batch.len()));
    let run = |k: usize, part: &[usize]| -> Result<(f64, Vec<Tensor>), TrainError> {
        let (x, y) = ds.batch(part);
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let g = ctx.bind(&mut tape);
        let mut rng = dropout_seed.map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            r.set_stream(k as u64);
            r
        });
        let pred = model.forward(
            &mut tape,
            &p,
            &g,
            &x,
            rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        )?;
        let target = tape.constant(y);
        let loss = tape.squared_error(pred, target, denom)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            p.vars().iter().map(|&v| grads.wrt(v)).collect(),
        ))
    };
    let parts: Vec<&[usize]> = batch.chunks(shard_len).collect();
    let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = if parts.len() == 1 {
        vec![run(0, parts[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(k, part)| {
                    let run = &run;
                    s.spawn(move || run(k, part))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut total_loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
            }
        }
    }
    Ok((total_loss, total.expect("at least one shard")))
}

/// Runs epochs `state.meta.epoch .. cfg.epochs`.
///
/// `on_epoch` is called after every epoch with the updated state, e.g. to write checkpoints.
pub fn train_from(
    state: &mut TrainState,
    ctx: &GraphContext,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<(), TrainError>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset(
            "training set has no windows".into(),
        ));
    }
    check_dataset(&state.model, train)?;
    let val = val.filter(|v| !v.is_empty());
    if let Some(v) = val {
        check_dataset(&state.model, v)?;
    }
    let started = Instant::now();
    let mut stale = 0usize;
    let mut stopped_early = false;
    if let (Some(best), Some(_)) = (state.meta.best_epoch, state.meta.best_val_loss) {
        stale = state.meta.epoch.saturating_sub(best);
    }
    let dropout = state.model.config().dropout > 0.0;

    while state.meta.epoch < cfg.epochs {
        if cfg.patience.is_some_and(|p| stale >= p) {
            stopped_early = true;
            break;
        }
        let epoch = state.meta.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut epoch_rng(cfg.seed, epoch, SHUFFLE_SALT));
        }
        let mut weighted = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let dropout_seed =
                dropout.then_some({ cfg.seed ^ DROPOUT_SALT ^ ((epoch as u64) << 32) ^ b as u64 });
            let (loss, grads) = batch_gradients(
                &state.model,
                ctx,
                train,
                batch,
                cfg.grad_shards,
                dropout_seed,
            )?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let w = &train.provenance[batch[0]];
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    first_window: format!("{} @ {}", w.storm_id, w.start),
                });
            }
            let mut params = state.model.params().values();
            state.adam.step(&mut params, &grads)?;
            state.model.params_mut().set_values(params);
            weighted += loss * batch.len() as f64;
        }
        state.meta.train_loss.push(weighted / train.len() as f64);
        state.meta.epoch += 1;

        if let Some(v) = val {
            let vl = dataset_loss(&state.model, ctx, v)?;
            if !vl.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: 0,
                    first_window: "validation".into(),
                });
            }
            state.meta.val_loss.push(vl);
            if state.meta.best_val_loss.is_none_or(|b| vl < b) {
                state.meta.best_val_loss = Some(vl);
                state.meta.best_epoch = Some(epoch + 1);
                state.best_params = Some(state.model.params().values());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {}/{}: train {:.6e}{}",
            epoch + 1,
            cfg.epochs,
            state.meta.train_loss.last().unwrap(),
            state
                .meta
                .val_loss
                .last()
                .filter(|_| val.is_some())
                .map(|v| format!(", val {v:.6e}"))
                .unwrap_or_default()
        );
        on_epoch(state)?;
    }

    Ok(TrainReport {
        train_loss: state.meta.train_loss.clone(),
        val_loss: state.meta.val_loss.clone(),
        best_epoch: state.meta.best_epoch,
        best_val_loss: state.meta.best_val_loss,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        stopped_early,
        val_metrics: None,
    })
}

/// Trains a fresh model; returns the final state (last and best parameters) and the report.
pub fn train(
    model: SurgeModel,
    ctx: &GraphContext,
    train_ds: &WindowedDataset,
    val: Option<&WindowedDataset>,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainReport), TrainError> {
    let mut state = TrainState::new(model, cfg);
    let report = train_from(&mut state, ctx, train_ds, val, cfg, |_| Ok(()))?;
    Ok((state, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub w_in: usize,
    pub w_out: usize,
    /// Validation RMSE of the best-validation model, metres.
    pub val_rmse: f64,
    pub best_epoch: Option<usize>,
}

/// Trains one model per `(W_in, W_out)` cell and ranks the cells by validation RMSE.
pub fn sweep_windows(
    data: &PreparedData,
    graph: &StationGraph,
    base: &ModelConfig,
    cfg: &TrainConfig,
    w_in_grid: &[usize],
    w_out_grid: &[usize],
) -> Result<Vec<SweepCell>, TrainError> {
    if w_in_grid.is_empty() || w_out_grid.is_empty() {
        return Err(TrainError::InvalidConfig(
            "sweep grids must be non-empty".into(),
        ));
    }
    let mut cells = Vec::new();
    for &w_in in w_in_grid {
        for &w_out in w_out_grid {
            let mc = ModelConfig {
                n_stations: data.n_stations(),
                w_in,
                w_out,
                ..base.clone()
            };
            let model = SurgeModel::new(mc)?;
            let ctx = model.graph_context(graph)?;
            let train_ds = data.windows(Role::Train, w_in, w_out);
            let val_ds = data.windows(Role::Val, w_in, w_out);
            if val_ds.is_empty() {
                return Err(TrainError::EmptyDataset(format!(
                    "validation storms yield no windows for W_in={w_in}, W_out={w_out}"
                )));
            }
            let (state, report) = train(model, &ctx, &train_ds, Some(&val_ds), cfg)?;
            let table = evaluate(
                &state.best_model(),
                &ctx,
                &val_ds,
                &data.scaler,
                &data.station_ids,
            )?;
            log::info!(
                "sweep W_in={w_in} W_out={w_out}: val RMSE {:.4} m",
                table.overall.rmse
            );
            cells.push(SweepCell {
                w_in,
                w_out,
                val_rmse: table.overall.rmse,
                best_epoch: report.best_epoch,
            });
        }
    }
    cells.sort_by(|a, b| a.val_rmse.total_cmp(&b.val_rmse));
    Ok(cells)
}
