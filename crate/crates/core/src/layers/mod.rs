//! Differentiable building blocks: dense/MLP, GCN, multi-head GAT and LSTM.
//!
//! Parameters live in a [`ParamStore`]; a layer only keeps [`ParamId`]s into
//! it. Each forward pass binds the store onto a fresh [`Tape`] and threads the
//! resulting [`Bound`] handles through the layers.
//!
//! Spatial layers take node features as a `[G·N × F]` matrix holding `G`
//! independent copies of the station graph stacked row-wise, so a whole batch
//! of time steps is mixed with one batched product.

mod gat;
mod gcn;
mod gradcheck;
mod lstm;
mod mlp;

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::geo_graph::StationGraph;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub use gat::{GatHeadOutput, GatLayer, GatMerge};
pub use gcn::GcnLayer;
pub use gradcheck::{check_gradients, GradCheck};
pub use lstm::{LstmLayer, LstmState};
pub use mlp::{Dense, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Ordered registry of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(NamedParam { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[NamedParam] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(e.value.shape(), v.shape(), "shape change for {}", e.name);
            e.value = v;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.param(e.value.clone()))
                .collect(),
        )
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.constant(e.value.clone()))
                .collect(),
        )
    }
}

/// Tape handles for every parameter of a store, in registration order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Tensor of `shape` with entries drawn from `U(-bound, bound)`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..numel).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; numel]
    };
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Weight `[f_in × f_out]` drawn from `U(±√(1/f_in))`.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, f_in: usize, f_out: usize) -> Tensor {
    uniform_init(rng, &[f_in, f_out], (1.0 / f_in as f64).sqrt())
}

/// How GCN messages are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GcnNorm {
    /// `c_ij = √(deg⁺(i)·deg⁺(j))`.
    #[default]
    Symmetric,
    /// `c_ij = deg⁺(i)`.
    Row,
    /// `c_ij = 1`.
    None,
}

/// Graph-derived constants shared by every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext {
    n: usize,
    /// `[1 × N × N]` propagation matrix with self-loops and normalization applied.
    gcn_operator: Tensor,
    /// Row-major `N × N` attention mask over `𝒩(i) ∪ {i}`.
    mask: Vec<bool>,
    /// Additive `ln ρ_ij` attention bias on allowed entries.
    log_weights: Tensor,
}

impl GraphContext {
    /// `edge_weights` selects whether `ρ_ij` scales GCN messages (degrees always count edges, not weights).
    pub fn new(graph: &StationGraph, norm: GcnNorm, edge_weights: bool) -> Self {
        let n = graph.len();
        let adj = graph.adjacency();
        let deg: Vec<f64> = (0..n)
            .map(|i| 1.0 + (0..n).filter(|&j| j != i && adj[i * n + j] != 0.0).count() as f64)
            .collect();
        let mut op = vec![0.0; n * n];
        let mut mask = vec![false; n * n];
        let mut log_w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let w = if i == j { 1.0 } else { adj[i * n + j] };
                if w == 0.0 {
                    continue;
                }
                mask[i * n + j] = true;
                log_w[i * n + j] = w.max(1e-12).ln();
                let c = match norm {
                    GcnNorm::Symmetric => (deg[i] * deg[j]).sqrt(),
                    GcnNorm::Row => deg[i],
                    GcnNorm::None => 1.0,
                };
                let msg = if edge_weights { w } else { 1.0 };
                op[i * n + j] = msg / c;
            }
        }
        Self {
            n,
            gcn_operator: Tensor::new(vec![1, n, n], op).expect("n > 0"),
            mask,
            log_weights: Tensor::new(vec![n, n], log_w).expect("n > 0"),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn gcn_operator(&self) -> &Tensor {
        &self.gcn_operator
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGraph {
        BoundGraph {
            n: self.n,
            gcn_operator: tape.constant(self.gcn_operator.clone()),
            mask: Rc::from(self.mask.as_slice()),
            log_weights: self.log_weights.clone(),
        }
    }
}

/// Graph constants recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundGraph {
    pub n: usize,
    pub gcn_operator: Var,
    pub mask: Rc<[bool]>,
    log_weights: Tensor,
}

impl BoundGraph {
    /// `ln ρ` attention bias tiled over `groups` stacked graphs: `[groups·N × N]`.
    pub fn log_weight_bias(&self, tape: &mut Tape, groups: usize) -> Var {
        let n = self.n;
        let mut data = Vec::with_capacity(groups * n * n);
        for _ in 0..groups {
            data.extend_from_slice(self.log_weights.data());
        }
        tape.constant(Tensor::new(vec![groups * n, n], data).expect("groups > 0"))
    }
}

/// Number of stacked graphs in a `[G·N × F]` feature matrix.
pub(crate) fn groups_of(tape: &Tape, x: Var, n: usize) -> Result<usize, NumericsError> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || !shape[0].is_multiple_of(n) {
        return Err(NumericsError::ShapeMismatch {
            op: "graph_features",
            left: shape.to_vec(),
            right: vec![n],
        });
    }
    Ok(shape[0] / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_graph::{Edge, Station};

    pub(crate) fn line_graph(n: usize, edges: &[(usize, usize, f64)]) -> StationGraph {
        let stations = (0..n)
            .map(|i| Station {
                node_id: i,
                name: format!("s{i}"),
                agency: "test".into(),
                lat: 25.0 + i as f64 * 0.1,
                lon: -80.0,
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(i, j, weight)| Edge { i, j, weight })
            .collect();
        StationGraph::from_edges(stations, edges, 0.8, 500.0).unwrap()
    }

    #[test]
    fn symmetric_operator_two_nodes() {
        let g = line_graph(2, &[(0, 1, 0.9)]);
        let ctx = GraphContext::new(&g, GcnNorm::Symmetric, false);
        assert_eq!(ctx.gcn_operator().data(), &[0.5, 0.5, 0.5, 0.5]);
        let weighted = GraphContext::new(&g, GcnNorm::Symmetric, true);
        assert_eq!(weighted.gcn_operator().data(), &[0.5, 0.45, 0.45, 0.5]);
        let row = GraphContext::new(
            &line_graph(3, &[(0, 1, 0.9), (1, 2, 0.9)]),
            GcnNorm::Row,
            false,
        );
        let op = row.gcn_operator().data();
        assert!((op[3] + op[4] + op[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_includes_self_loops() {
        let g = line_graph(3, &[(0, 1, 0.9)]);
        let ctx = GraphContext::new(&g, GcnNorm::Symmetric, true);
        assert_eq!(
            ctx.mask(),
            &[true, true, false, true, true, false, false, false, true]
        );
    }

    #[test]
    fn store_rejects_nothing_and_finds_names() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0));
        let b = s.add("b", Tensor::zeros(&[2, 2]));
        assert_eq!(s.find("b"), Some(b));
        assert_eq!(s.get(a).item(), 1.0);
        assert_eq!(s.num_scalars(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn store_panics_on_duplicate() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0));
        s.add("a", Tensor::scalar(2.0));
    }
}
