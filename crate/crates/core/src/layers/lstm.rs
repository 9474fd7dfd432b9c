use rand::Rng;

use super::{init_weight, uniform_init, Bound, ParamId, ParamStore};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// LSTM cell with fused gate weights laid out as `[i | f | g | o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `[F × 4H]`
    pub input_weight: ParamId,
    /// `[H × 4H]`
    pub hidden_weight: ParamId,
    /// `[4H]`
    pub bias: ParamId,
    pub f_in: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[R × H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        Self {
            input_weight: store.add(
                format!("{name}.input_weight"),
                init_weight(rng, f_in, 4 * hidden),
            ),
            hidden_weight: store.add(
                format!("{name}.hidden_weight"),
                init_weight(rng, hidden, 4 * hidden),
            ),
            bias: store.add(
                format!("{name}.bias"),
                uniform_init(rng, &[4 * hidden], bound),
            ),
            f_in,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmState {
        let zeros = Tensor::zeros(&[rows, self.hidden]);
        LstmState {
            h: tape.constant(zeros.clone()),
            c: tape.constant(zeros),
        }
    }

    /// One step for `x: [R × F]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState, NumericsError> {
        let h = self.hidden;
        let xw = tape.matmul(x, p.get(self.input_weight))?;
        let hw = tape.matmul(state.h, p.get(self.hidden_weight))?;
        let z = tape.add(xw, hw)?;
        let z = tape.add_bias(z, p.get(self.bias))?;
        let i = tape.slice_cols(z, 0, h)?;
        let f = tape.slice_cols(z, h, h)?;
        let g = tape.slice_cols(z, 2 * h, h)?;
        let o = tape.slice_cols(z, 3 * h, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs the sequence from a zero state and returns the hidden state of every step.
    pub fn run(&self, tape: &mut Tape, p: &Bound, xs: &[Var]) -> Result<Vec<Var>, NumericsError> {
        let Some(&first) = xs.first() else {
            return Ok(Vec::new());
        };
        let rows = tape.value(first).shape()[0];
        let mut state = self.zero_state(tape, rows);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.step(tape, p, x, state)?;
            out.push(state.h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(store: &mut ParamStore, f: usize, h: usize) -> LstmLayer {
        LstmLayer {
            input_weight: store.add("wx", Tensor::zeros(&[f, 4 * h])),
            hidden_weight: store.add("wh", Tensor::zeros(&[h, 4 * h])),
            bias: store.add("b", Tensor::zeros(&[4 * h])),
            f_in: f,
            hidden: h,
        }
    }

    #[test]
    fn zero_weights_keep_zero_hidden() {
        let mut store = ParamStore::new();
        let layer = zero_layer(&mut store, 2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = (0..4)
            .map(|t| tape.constant(Tensor::full(&[2, 2], t as f64)))
            .collect();
        for h in layer.run(&mut tape, &p, &xs).unwrap() {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let h = 1;
        let mut store = ParamStore::new();
        let layer = zero_layer(&mut store, 1, h);
        // i = σ(-40) ≈ 0, f = σ(40) ≈ 1
        *store.get_mut(layer.bias) = Tensor::vector(vec![-40.0, 40.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let start = LstmState {
            h: tape.constant(Tensor::zeros(&[1, 1])),
            c: tape.constant(Tensor::from_rows(&[vec![0.7]])),
        };
        let mut state = start;
        for _ in 0..5 {
            let x = tape.constant(Tensor::from_rows(&[vec![3.0]]));
            state = layer.step(&mut tape, &p, x, state).unwrap();
        }
        assert!((tape.value(state.c).item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gates_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = LstmLayer::init(&mut store, "l", 3, 4, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = (0..6)
            .map(|t| tape.constant(Tensor::full(&[2, 3], (t as f64 - 3.0) * 5.0)))
            .collect();
        for h in layer.run(&mut tape, &p, &xs).unwrap() {
            assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn identical_windows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layer = LstmLayer::init(&mut store, "l", 2, 3, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xs: Vec<Var> = (0..3)
                .map(|t| tape.constant(Tensor::full(&[1, 2], t as f64 * 0.3)))
                .collect();
            let hs = layer.run(&mut tape, &p, &xs).unwrap();
            tape.value(*hs.last().unwrap()).clone()
        };
        assert_eq!(run(), run());
    }
}
