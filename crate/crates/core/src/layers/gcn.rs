use rand::Rng;

use super::{groups_of, init_weight, uniform_init, Bound, BoundGraph, ParamId, ParamStore};
use crate::numerics::{Activation, NumericsError, Tape, Var};

/// Graph convolution `h_i' = σ(Σ_{j∈𝒩(i)∪{i}} (w_ij / c_ij) · h_j φ + b)`.
///
/// The normalized propagation matrix comes from [`super::GraphContext`].
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub f_in: usize,
    pub f_out: usize,
}

impl GcnLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / f_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), init_weight(rng, f_in, f_out)),
            bias: store.add(format!("{name}.bias"), uniform_init(rng, &[f_out], bound)),
            activation,
            f_in,
            f_out,
        }
    }

    /// `x: [G·N × f_in]` → `[G·N × f_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &BoundGraph,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let n = graph.n;
        let g = groups_of(tape, x, n)?;
        let propagate = |tape: &mut Tape, h: Var, width: usize| -> Result<Var, NumericsError> {
            let h3 = tape.reshape(h, &[g, n, width])?;
            let mixed = tape.bmm(graph.gcn_operator, h3)?;
            tape.reshape(mixed, &[g * n, width])
        };
        // Mix over the narrower side of φ.
        let z = if self.f_in <= self.f_out {
            let mixed = propagate(tape, x, self.f_in)?;
            tape.matmul(mixed, p.get(self.weight))?
        } else {
            let xw = tape.matmul(x, p.get(self.weight))?;
            propagate(tape, xw, self.f_out)?
        };
        let z = tape.add_bias(z, p.get(self.bias))?;
        tape.activate(z, self.activation)
    }
}
