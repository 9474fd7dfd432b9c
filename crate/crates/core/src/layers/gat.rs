use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{groups_of, init_weight, uniform_init, Bound, BoundGraph, ParamId, ParamStore};
use crate::numerics::{Activation, NumericsError, Tape, Var};

/// How the outputs of several attention heads are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatMerge {
    /// Activate each head, then stack: width `K·F'`.
    #[default]
    Concat,
    /// Average the pre-activation aggregates, then activate once: width `F'`.
    Average,
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    weight: ParamId,
    /// `[2F' × 1]`: first half scores the receiving node, second half the sender.
    attention: ParamId,
}

/// Multi-head graph attention over `𝒩(i) ∪ {i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    heads: Vec<Head>,
    pub merge: GatMerge,
    pub activation: Activation,
    pub slope: f64,
    /// Adds `ln ρ_ij` to the attention logits.
    pub edge_bias: bool,
    pub f_in: usize,
    pub f_head: usize,
}

/// One head's aggregate (before the activation) and its attention matrix.
#[derive(Debug, Clone, Copy)]
pub struct GatHeadOutput {
    /// `[G·N × F']`, `Σ_j α_ij W h_j`.
    pub aggregate: Var,
    /// `[G·N × N]`, row `g·N + i` holds `α_i·` for graph copy `g`.
    pub alpha: Var,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_head: usize,
        heads: usize,
        merge: GatMerge,
        activation: Activation,
        edge_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1, "at least one attention head");
        let heads = (0..heads)
            .map(|k| Head {
                weight: store.add(
                    format!("{name}.head{k}.weight"),
                    init_weight(rng, f_in, f_head),
                ),
                attention: store.add(
                    format!("{name}.head{k}.attention"),
                    uniform_init(rng, &[2 * f_head, 1], (1.0 / f_head as f64).sqrt()),
                ),
            })
            .collect();
        Self {
            heads,
            merge,
            activation,
            slope: 0.2,
            edge_bias,
            f_in,
            f_head,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn out_width(&self) -> usize {
        match self.merge {
            GatMerge::Concat => self.heads.len() * self.f_head,
            GatMerge::Average => self.f_head,
        }
    }

    pub fn head_params(&self, k: usize) -> (ParamId, ParamId) {
        (self.heads[k].weight, self.heads[k].attention)
    }

    /// Attention and aggregation of head `k` for `x: [G·N × F]`.
    pub fn head_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &BoundGraph,
        x: Var,
        k: usize,
    ) -> Result<GatHeadOutput, NumericsError> {
        let n = graph.n;
        let g = groups_of(tape, x, n)?;
        let f = self.f_head;
        let head = &self.heads[k];
        let z = tape.matmul(x, p.get(head.weight))?;
        let a = p.get(head.attention);
        let a_self = tape.slice_rows(a, 0, f)?;
        let a_other = tape.slice_rows(a, f, f)?;
        let src = tape.matmul(z, a_self)?;
        let dst = tape.matmul(z, a_other)?;
        let e = tape.pairwise_sum(src, dst, n)?;
        let mut e = tape.leaky_relu(e, self.slope)?;
        if self.edge_bias {
            // α_ij ∝ ρ_ij · exp(e_ij)
            let bias = graph.log_weight_bias(tape, g);
            e = tape.add(e, bias)?;
        }
        let alpha = tape.softmax_masked(e, graph.mask.clone())?;
        let alpha3 = tape.reshape(alpha, &[g, n, n])?;
        let z3 = tape.reshape(z, &[g, n, f])?;
        let agg = tape.bmm(alpha3, z3)?;
        let aggregate = tape.reshape(agg, &[g * n, f])?;
        Ok(GatHeadOutput { aggregate, alpha })
    }

    /// `x: [G·N × F]` → `[G·N × out_width]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &BoundGraph,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let mut aggregates = Vec::with_capacity(self.heads.len());
        for k in 0..self.heads.len() {
            aggregates.push(self.head_forward(tape, p, graph, x, k)?.aggregate);
        }
        match self.merge {
            GatMerge::Concat => {
                let activated = aggregates
                    .into_iter()
                    .map(|h| tape.activate(h, self.activation))
                    .collect::<Result<Vec<_>, _>>()?;
                if activated.len() == 1 {
                    Ok(activated[0])
                } else {
                    tape.concat_cols(&activated)
                }
            }
            GatMerge::Average => {
                let mut total = aggregates[0];
                for &h in &aggregates[1..] {
                    total = tape.add(total, h)?;
                }
                let mean = tape.scale(total, 1.0 / aggregates.len() as f64)?;
                tape.activate(mean, self.activation)
            }
        }
    }
}
