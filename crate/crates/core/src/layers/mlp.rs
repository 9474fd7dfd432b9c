use rand::Rng;

use super::{init_weight, uniform_init, Bound, ParamId, ParamStore};
use crate::numerics::{Activation, NumericsError, Tape, Var};

/// Affine map followed by a pointwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / f_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init_weight(rng, f_in, f_out));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, &[f_out], bound));
        Self {
            weight,
            bias,
            activation,
        }
    }

    /// `act(X W + b)` for `X: [R × f_in]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let xw = tape.matmul(x, p.get(self.weight))?;
        let z = tape.add_bias(xw, p.get(self.bias))?;
        tape.activate(z, self.activation)
    }
}

/// Stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = f_in;
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Dense::init(
                store,
                &format!("{name}.{k}"),
                prev,
                w,
                activation,
                rng,
            ));
            prev = w;
        }
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var, NumericsError> {
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(store: &mut ParamStore, w: Tensor, b: Tensor, act: Activation) -> Dense {
        Dense {
            weight: store.add("w", w),
            bias: store.add("b", b),
            activation: act,
        }
    }

    #[test]
    fn identity_weight_passes_input() {
        let mut store = ParamStore::new();
        let d = dense(
            &mut store,
            Tensor::identity(2),
            Tensor::zeros(&[2]),
            Activation::Identity,
        );
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn zero_weight_gives_activated_bias() {
        let mut store = ParamStore::new();
        let d = dense(
            &mut store,
            Tensor::zeros(&[3, 2]),
            Tensor::vector(vec![-1.0, 2.0]),
            Activation::Relu,
        );
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[4, 3], 7.0));
        let y = d.forward(&mut tape, &p, x).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.0, 2.0]);
        }
    }

    #[test]
    fn init_respects_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(&mut store, "mlp", 4, &[8, 2], Activation::Relu, &mut rng);
        assert_eq!(mlp.layers.len(), 2);
        assert_eq!(store.get(mlp.layers[0].weight).shape(), &[4, 8]);
        assert!(store
            .get(mlp.layers[0].weight)
            .data()
            .iter()
            .all(|v| v.abs() <= 0.5));
        assert!(store
            .get(mlp.layers[1].weight)
            .data()
            .iter()
            .all(|v| v.abs() <= (1.0f64 / 8.0).sqrt()));
        assert_eq!(store.entries()[2].name, "mlp.1.weight");
    }
}
