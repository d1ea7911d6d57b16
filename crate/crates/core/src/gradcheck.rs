//! Central finite-difference gradient checks.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with an absolute floor so that near-zero pairs compare
/// on absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of a scalar function with respect to every element
/// of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over elements whose gradient magnitude exceeds
    /// the significance floor.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of `build` against central differences. `build`
/// receives one variable per input and must return a scalar.
pub fn check_op(inputs: &[Tensor], h: f64, floor: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval = |ts: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut result = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_grad(input, h, |probe| {
            let mut ts = inputs.to_vec();
            ts[k] = probe.clone();
            eval(&ts)
        });
        for (a, n) in analytic[k].data().iter().zip(numeric.data()) {
            if a.abs().max(n.abs()) > floor {
                result.checked += 1;
                result.max_rel_err = result.max_rel_err.max(rel_err(*a, *n));
            }
        }
    }
    result
}
