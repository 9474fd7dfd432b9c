//! The spatio-temporal network: optional MLP → GCN → GAT spatial stage, two
//! LSTM layers over the input window, and a linear head producing the
//! forecast horizon for every station.
//!
//! Spatial weights are shared across time steps and temporal weights across
//! stations. The input window `[B × W_in × N]` is laid out time-major so that
//! all `B·W_in` graph snapshots are mixed in one batched pass, after which the
//! rows for step `t` are a contiguous `[B·N × F]` block fed to the LSTM.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo_graph::StationGraph;
use crate::ingest::ScalerParams;
use crate::layers::{
    Bound, BoundGraph, Dense, GatLayer, GatMerge, GcnLayer, GcnNorm, GraphContext, LstmLayer, Mlp,
    NamedParam, ParamStore,
};
use crate::numerics::{Activation, AdamState, NumericsError, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "surge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid variant: {0}")]
    InvalidVariant(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("graph mismatch: {0}")]
    GraphMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which spatial components precede the LSTM stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GatLstm,
    GcnLstm,
    GcnGatLstm,
    MlpGatLstm,
    MlpGcnLstm,
    /// MLP → GCN → GAT → LSTM.
    Full,
    /// No spatial stage; each station's scalar series goes straight to the LSTM.
    LstmOnly,
}

impl Variant {
    /// The six component subsets compared in the ablation study.
    pub const ABLATION: [Variant; 6] = [
        Variant::GatLstm,
        Variant::GcnLstm,
        Variant::GcnGatLstm,
        Variant::MlpGatLstm,
        Variant::MlpGcnLstm,
        Variant::Full,
    ];

    /// `(mlp, gcn, gat)`
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Variant::GatLstm => (false, false, true),
            Variant::GcnLstm => (false, true, false),
            Variant::GcnGatLstm => (false, true, true),
            Variant::MlpGatLstm => (true, false, true),
            Variant::MlpGcnLstm => (true, true, false),
            Variant::Full => (true, true, true),
            Variant::LstmOnly => (false, false, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::GatLstm => "GAT+LSTM",
            Variant::GcnLstm => "GCN+LSTM",
            Variant::GcnGatLstm => "GCN+GAT+LSTM",
            Variant::MlpGatLstm => "MLP+GAT+LSTM",
            Variant::MlpGcnLstm => "MLP+GCN+LSTM",
            Variant::Full => "MLP+GAT+GCN+LSTM",
            Variant::LstmOnly => "LSTM",
        }
    }

    /// Resolves a set of component flags (`mlp`, `gcn`, `gat`, `lstm`).
    ///
    /// `lstm` is mandatory. A lone `lstm` is rejected; the spatial-free
    /// baseline must be requested as [`Variant::LstmOnly`] by name.
    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self, ModelError> {
        let (mut mlp, mut gcn, mut gat, mut lstm) = (false, false, false, false);
        for f in flags {
            match f.as_ref().trim().to_ascii_lowercase().as_str() {
                "mlp" => mlp = true,
                "gcn" => gcn = true,
                "gat" => gat = true,
                "lstm" => lstm = true,
                other => {
                    return Err(ModelError::InvalidVariant(format!(
                        "unknown component {other:?}"
                    )))
                }
            }
        }
        let joined = || {
            flags
                .iter()
                .map(|f| f.as_ref().to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        if !lstm {
            return Err(ModelError::InvalidVariant(format!(
                "{{{}}} lacks lstm",
                joined()
            )));
        }
        Self::ABLATION
            .into_iter()
            .find(|v| v.components() == (mlp, gcn, gat))
            .ok_or_else(|| {
                ModelError::InvalidVariant(format!("{{{}}} is not a supported subset", joined()))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    /// Accepts labels such as `GCN+GAT+LSTM` (any order/case), `full`, or `lstm-only`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "full" => return Ok(Variant::Full),
            "lstm-only" | "lstm_only" => return Ok(Variant::LstmOnly),
            _ => {}
        }
        let parts: Vec<&str> = lower.split(['+', ',']).filter(|p| !p.is_empty()).collect();
        Self::from_flags(&parts)
    }
}

/// Architecture and initialization settings. Stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_stations: usize,
    pub w_in: usize,
    pub w_out: usize,
    pub variant: Variant,
    pub mlp_widths: Vec<usize>,
    pub gcn_width: usize,
    pub gcn_norm: GcnNorm,
    pub gcn_edge_weights: bool,
    pub gat_head_width: usize,
    pub gat_heads: usize,
    pub gat_merge: GatMerge,
    pub gat_edge_bias: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub activation: Activation,
    /// Dropout rate applied to the GAT output during training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_stations: 0,
            w_in: 48,
            w_out: 24,
            variant: Variant::Full,
            mlp_widths: vec![8],
            gcn_width: 16,
            gcn_norm: GcnNorm::Symmetric,
            gcn_edge_weights: true,
            gat_head_width: 8,
            gat_heads: 2,
            gat_merge: GatMerge::Concat,
            gat_edge_bias: false,
            lstm_hidden: 16,
            lstm_layers: 2,
            activation: Activation::Relu,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_stations == 0 || self.w_in == 0 || self.w_out == 0 {
            return bad("n_stations, w_in and w_out must be positive");
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return bad("lstm_hidden and lstm_layers must be positive");
        }
        let (mlp, gcn, gat) = self.variant.components();
        if mlp && (self.mlp_widths.is_empty() || self.mlp_widths.contains(&0)) {
            return bad("mlp_widths must be non-empty and positive");
        }
        if gcn && self.gcn_width == 0 {
            return bad("gcn_width must be positive");
        }
        if gat && (self.gat_heads == 0 || self.gat_head_width == 0) {
            return bad("gat_heads and gat_head_width must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Assembled network plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgeModel {
    config: ModelConfig,
    params: ParamStore,
    mlp: Option<Mlp>,
    gcn: Option<GcnLayer>,
    gat: Option<GatLayer>,
    lstm: Vec<LstmLayer>,
    head: Dense,
}

impl SurgeModel {
    /// Builds the pipeline for `config.variant`, initializing weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (use_mlp, use_gcn, use_gat) = config.variant.components();
        let act = config.activation;
        let mut width = 1;

        let mlp = use_mlp.then(|| {
            let m = Mlp::init(&mut params, "mlp", width, &config.mlp_widths, act, &mut rng);
            width = *config.mlp_widths.last().expect("validated");
            m
        });
        let gcn = use_gcn.then(|| {
            let g = GcnLayer::init(&mut params, "gcn", width, config.gcn_width, act, &mut rng);
            width = config.gcn_width;
            g
        });
        let gat = use_gat.then(|| {
            let g = GatLayer::init(
                &mut params,
                "gat",
                width,
                config.gat_head_width,
                config.gat_heads,
                config.gat_merge,
                act,
                config.gat_edge_bias,
                &mut rng,
            );
            width = g.out_width();
            g
        });
        let mut lstm = Vec::with_capacity(config.lstm_layers);
        for k in 0..config.lstm_layers {
            lstm.push(LstmLayer::init(
                &mut params,
                &format!("lstm{k}"),
                width,
                config.lstm_hidden,
                &mut rng,
            ));
            width = config.lstm_hidden;
        }
        let head = Dense::init(
            &mut params,
            "head",
            width,
            config.w_out,
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            mlp,
            gcn,
            gat,
            lstm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn gat(&self) -> Option<&GatLayer> {
        self.gat.as_ref()
    }

    pub fn graph_context(&self, graph: &StationGraph) -> Result<GraphContext, ModelError> {
        if graph.len() != self.config.n_stations {
            return Err(ModelError::GraphMismatch(format!(
                "model expects {} stations, graph has {}",
                self.config.n_stations,
                graph.len()
            )));
        }
        Ok(GraphContext::new(
            graph,
            self.config.gcn_norm,
            self.config.gcn_edge_weights,
        ))
    }

    /// Records the forward pass for `x: [B × W_in × N]` and returns `[B × W_out × N]`.
    ///
    /// `dropout` supplies randomness for training-mode dropout; `None` is inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &BoundGraph,
        x: &Tensor,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let (n, w_in) = (c.n_stations, c.w_in);
        if x.ndim() != 3 || x.shape()[1] != w_in || x.shape()[2] != n {
            return Err(NumericsError::ShapeMismatch {
                op: "model_input",
                left: x.shape().to_vec(),
                right: vec![0, w_in, n],
            }
            .into());
        }
        if graph.n != n {
            return Err(ModelError::GraphMismatch(format!(
                "model expects {n} stations, graph has {}",
                graph.n
            )));
        }
        let b = x.shape()[0];

        let mut rows = vec![0.0; w_in * b * n];
        for bi in 0..b {
            for t in 0..w_in {
                let src = &x.data()[(bi * w_in + t) * n..(bi * w_in + t + 1) * n];
                rows[(t * b + bi) * n..(t * b + bi + 1) * n].copy_from_slice(src);
            }
        }
        let mut h = tape.constant(Tensor::new(vec![w_in * b * n, 1], rows)?);

        if let Some(mlp) = &self.mlp {
            h = mlp.forward(tape, p, h)?;
        }
        if let Some(gcn) = &self.gcn {
            h = gcn.forward(tape, p, graph, h)?;
        }
        if let Some(gat) = &self.gat {
            h = gat.forward(tape, p, graph, h)?;
            if let (Some(rng), true) = (dropout, c.dropout > 0.0) {
                let keep = 1.0 - c.dropout;
                let shape = tape.value(h).shape().to_vec();
                let numel = shape.iter().product();
                let mask: Vec<f64> = (0..numel)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                h = tape.mul(h, mask)?;
            }
        }

        let mut seq = Vec::with_capacity(w_in);
        for t in 0..w_in {
            seq.push(tape.slice_rows(h, t * b * n, b * n)?);
        }
        for layer in &self.lstm {
            seq = layer.run(tape, p, &seq)?;
        }
        let last = *seq.last().expect("w_in > 0");
        let out = self.head.forward(tape, p, last)?;
        let out = tape.reshape(out, &[b, n, c.w_out])?;
        Ok(tape.transpose_last2(out)?)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, ctx: &GraphContext, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let g = ctx.bind(&mut tape);
        let y = self.forward(&mut tape, &p, &g, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Inference in chunks of at most `batch` windows, concatenated along the batch axis.
    pub fn predict_batched(
        &self,
        ctx: &GraphContext,
        x: &Tensor,
        batch: usize,
    ) -> Result<Tensor, ModelError> {
        let total = x.shape()[0];
        let per = x.numel() / total.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        while start < total {
            let len = batch.max(1).min(total - start);
            let chunk = Tensor::new(
                vec![len, x.shape()[1], x.shape()[2]],
                x.data()[start * per..(start + len) * per].to_vec(),
            )?;
            out.extend_from_slice(self.predict(ctx, &chunk)?.data());
            start += len;
        }
        Ok(Tensor::new(
            vec![total, self.config.w_out, self.config.n_stations],
            out,
        )?)
    }
}

/// Bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Original node ids of the modelled stations, in model order.
    pub station_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<ScalerParams>,
    /// Training settings, kept opaque here.
    #[serde(default)]
    pub train_config: serde_json::Value,
}

/// Serialized model: config, named weights, optional optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub graph_hash: String,
    pub params: Vec<NamedParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(
        model: &SurgeModel,
        graph: &StationGraph,
        optimizer: Option<AdamState>,
        meta: TrainingMeta,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            graph_hash: graph.content_hash(),
            params: model.params.entries().to_vec(),
            optimizer,
            meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint values are finite") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(ModelError::CorruptCheckpoint(
                "missing or unknown format tag".into(),
            ));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ModelError::CorruptCheckpoint("missing version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks that `graph` is the one the weights were trained against.
    pub fn check_graph(&self, graph: &StationGraph) -> Result<(), ModelError> {
        if graph.len() != self.config.n_stations {
            return Err(ModelError::GraphMismatch(format!(
                "checkpoint has {} stations, graph has {}",
                self.config.n_stations,
                graph.len()
            )));
        }
        let hash = graph.content_hash();
        if hash != self.graph_hash {
            return Err(ModelError::GraphMismatch(format!(
                "graph hash {hash} differs from checkpoint {}",
                self.graph_hash
            )));
        }
        Ok(())
    }

    /// Rebuilds the model and installs the stored weights.
    pub fn to_model(&self) -> Result<SurgeModel, ModelError> {
        let mut model = SurgeModel::new(self.config.clone())?;
        let expected = model.params.entries();
        if expected.len() != self.params.len() {
            return Err(ModelError::CorruptCheckpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&self.params) {
            if e.name != p.name || e.value.shape() != p.value.shape() {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        model
            .params
            .set_values(self.params.iter().map(|p| p.value.clone()).collect());
        Ok(model)
    }

    /// [`Self::check_graph`] followed by [`Self::to_model`].
    pub fn to_model_for(&self, graph: &StationGraph) -> Result<SurgeModel, ModelError> {
        self.check_graph(graph)?;
        self.to_model()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_graph::{Edge, Station};

    pub(crate) fn graph(n: usize) -> StationGraph {
        let stations = (0..n)
            .map(|i| Station {
                node_id: i,
                name: format!("s{i}"),
                agency: "test".into(),
                lat: 27.0 + i as f64 * 0.2,
                lon: -82.0,
            })
            .collect();
        let edges = (1..n)
            .map(|i| Edge {
                i: i - 1,
                j: i,
                weight: 0.85 + 0.01 * i as f64,
            })
            .collect();
        StationGraph::from_edges(stations, edges, 0.8, 500.0).unwrap()
    }

    pub(crate) fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_stations: 3,
            w_in: 4,
            w_out: 2,
            variant,
            mlp_widths: vec![5],
            gcn_width: 5,
            gat_head_width: 3,
            gat_heads: 2,
            lstm_hidden: 5,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn input(b: usize) -> Tensor {
        let data = (0..b * 4 * 3)
            .map(|k| ((k * 37 % 11) as f64) / 10.0)
            .collect();
        Tensor::new(vec![b, 4, 3], data).unwrap()
    }

    #[test]
    fn output_shape_and_finiteness() {
        let g = graph(3);
        for v in Variant::ABLATION.into_iter().chain([Variant::LstmOnly]) {
            let model = SurgeModel::new(small_config(v)).unwrap();
            let ctx = model.graph_context(&g).unwrap();
            let y = model.predict(&ctx, &input(2)).unwrap();
            assert_eq!(y.shape(), &[2, 2, 3], "{v}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn zero_params_output_head_bias() {
        let g = graph(3);
        let mut model = SurgeModel::new(small_config(Variant::Full)).unwrap();
        let zeros: Vec<Tensor> = model
            .params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        model.params.set_values(zeros);
        let bias = model.params.find("head.bias").unwrap();
        *model.params.get_mut(bias) = Tensor::vector(vec![0.25, -0.5]);
        let ctx = model.graph_context(&g).unwrap();
        let y = model.predict(&ctx, &input(3)).unwrap();
        for b in 0..3 {
            for n in 0..3 {
                assert_eq!(y.at(&[b, 0, n]), 0.25);
                assert_eq!(y.at(&[b, 1, n]), -0.5);
            }
        }
    }

    #[test]
    fn variants_from_flags() {
        assert_eq!(
            Variant::from_flags(&["gat", "lstm"]).unwrap(),
            Variant::GatLstm
        );
        assert_eq!(
            Variant::from_flags(&["mlp", "gcn", "gat", "lstm"]).unwrap(),
            Variant::Full
        );
        assert!(matches!(
            Variant::from_flags::<&str>(&[]),
            Err(ModelError::InvalidVariant(_))
        ));
        assert!(Variant::from_flags(&["lstm"]).is_err());
        assert!(Variant::from_flags(&["mlp", "lstm"]).is_err());
        assert!(Variant::from_flags(&["gcn", "gat"]).is_err());
        assert_eq!(
            "MLP+GAT+GCN+LSTM".parse::<Variant>().unwrap(),
            Variant::Full
        );
        assert_eq!("lstm-only".parse::<Variant>().unwrap(), Variant::LstmOnly);
        for v in Variant::ABLATION {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn gat_lstm_pipeline_has_no_mlp_or_gcn() {
        let model = SurgeModel::new(small_config(Variant::GatLstm)).unwrap();
        let names: Vec<&str> = model
            .params
            .entries()
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        assert!(names
            .iter()
            .all(|n| !n.starts_with("mlp") && !n.starts_with("gcn")));
        assert!(names.contains(&"gat.head0.weight"));
        assert_eq!(
            model
                .params
                .get(model.params.find("gat.head0.weight").unwrap())
                .shape(),
            &[1, 3]
        );
        assert_eq!(
            model
                .params
                .get(model.params.find("lstm0.input_weight").unwrap())
                .shape(),
            &[6, 20]
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = graph(3);
        let model = SurgeModel::new(small_config(Variant::Full)).unwrap();
        let ctx = model.graph_context(&g).unwrap();
        let before = model.predict(&ctx, &input(2)).unwrap();
        let ckpt = Checkpoint::new(&model, &g, None, TrainingMeta::default());
        let loaded = Checkpoint::from_json(&ckpt.to_json())
            .unwrap()
            .to_model_for(&g)
            .unwrap();
        let after = loaded.predict(&ctx, &input(2)).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded, model);
    }

    #[test]
    fn checkpoint_errors() {
        let g = graph(3);
        let model = SurgeModel::new(small_config(Variant::Full)).unwrap();
        let json = Checkpoint::new(&model, &g, None, TrainingMeta::default()).to_json();
        assert!(matches!(
            Checkpoint::from_json(&json[..json.len() / 2]),
            Err(ModelError::CorruptCheckpoint(_))
        ));
        let bumped = json.replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(ModelError::VersionMismatch { found: 99, .. })
        ));
        let ckpt = Checkpoint::from_json(&json).unwrap();
        assert!(matches!(
            ckpt.to_model_for(&graph(2)),
            Err(ModelError::GraphMismatch(_))
        ));
        let mut other = graph(3);
        other = other.permuted(&[2, 1, 0]);
        assert!(matches!(
            ckpt.check_graph(&other),
            Err(ModelError::GraphMismatch(_))
        ));
    }

    #[test]
    fn shape_mismatch_on_wrong_window() {
        let g = graph(3);
        let model = SurgeModel::new(small_config(Variant::GcnLstm)).unwrap();
        let ctx = model.graph_context(&g).unwrap();
        let bad = Tensor::zeros(&[1, 5, 3]);
        assert!(matches!(
            model.predict(&ctx, &bad),
            Err(ModelError::Numerics(NumericsError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn predict_batched_matches_single_pass() {
        let g = graph(3);
        let model = SurgeModel::new(small_config(Variant::Full)).unwrap();
        let ctx = model.graph_context(&g).unwrap();
        let x = input(5);
        let whole = model.predict(&ctx, &x).unwrap();
        let parts = model.predict_batched(&ctx, &x, 2).unwrap();
        assert!(whole.max_abs_diff(&parts) < 1e-12);
    }
}
