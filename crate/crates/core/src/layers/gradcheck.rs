use super::{Bound, ParamId, ParamStore};
use crate::numerics::{NumericsError, Tape, Var};

const STEPS: usize = 6;

/// Largest relative gradient error found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter with the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Compares tape gradients of a scalar loss against central finite
/// differences, parameter by parameter.
///
/// Each derivative is estimated on the step ladder `eps, eps/10, …, eps/10⁵`
/// and the estimate from the adjacent pair with the smallest error bound
/// (disagreement plus round-off floor `ε·|L|/h`) is kept. Large steps can
/// straddle a ReLU kink and small ones drown in round-off; the ladder avoids
/// both without consulting the tape gradient. The two middle steps are tried
/// first and the rest of the ladder is only evaluated when they disagree.
///
/// The error of a parameter tensor is `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂)`, taken as
/// zero when both gradients vanish.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    eps: f64,
    loss: F,
) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let l = loss(&mut tape, &p)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<_> = p.vars().iter().map(|&v| grads.wrt(v)).collect();

    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let l = loss(&mut tape, &p)?;
        Ok(tape.value(l).item())
    };

    let floor = 4.0 * f64::EPSILON * eval(store)?.abs().max(f64::MIN_POSITIVE);
    let steps: Vec<f64> = (0..STEPS).map(|k| eps / 10f64.powi(k as i32)).collect();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (k, g) in analytic.iter().enumerate() {
        let id = ParamId(k);
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for i in 0..g.numel() {
            let orig = store.get(id).data()[i];
            let mut estimate = |h: f64| -> Result<f64, NumericsError> {
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(store)?;
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(store)?;
                store.get_mut(id).data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let mut ladder: [Option<f64>; STEPS] = [None; STEPS];
            let mid = STEPS / 2;
            ladder[mid - 1] = Some(estimate(steps[mid - 1])?);
            ladder[mid] = Some(estimate(steps[mid])?);
            let (a, b) = (ladder[mid - 1].unwrap(), ladder[mid].unwrap());
            let numeric = if (a - b).abs() + floor / steps[mid] <= 1e-6 * b.abs() {
                b
            } else {
                for (slot, &h) in ladder.iter_mut().zip(&steps) {
                    if slot.is_none() {
                        *slot = Some(estimate(h)?);
                    }
                }
                let full: Vec<f64> = ladder.iter().map(|e| e.unwrap()).collect();
                most_consistent(&full, &steps, floor)
            };
            diff2 += (g.data()[i] - numeric).powi(2);
            num2 += numeric * numeric;
            out.checked += 1;
        }
        let ana2: f64 = g.data().iter().map(|x| x * x).sum();
        let scale = ana2.max(num2).sqrt();
        let err = if scale == 0.0 {
            0.0
        } else {
            diff2.sqrt() / scale
        };
        if out.worst.is_empty() || err > out.max_rel_err {
            out.max_rel_err = err;
            out.worst = store.entries()[k].name.clone();
        }
    }
    Ok(out)
}

fn most_consistent(estimates: &[f64], steps: &[f64], floor: f64) -> f64 {
    let mut best = (f64::INFINITY, estimates[0]);
    for (w, &h) in estimates.windows(2).zip(&steps[1..]) {
        let bound = (w[0] - w[1]).abs() + floor / h;
        if bound < best.0 {
            best = (bound, w[1]);
        }
    }
    best.1
}
