//! Central finite-difference oracle for tape gradients (test-only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Relative error with a small floor on the denominator so that entries whose
/// true gradient is ~0 are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f` on fresh leaves, contracts the output with a fixed random
/// tensor, and returns the worst analytic-vs-numeric relative error across
/// every input element.
pub fn max_rel_error<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor], want_grad: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().unwrap();
        let grads = if want_grad {
            tape.backward(loss).unwrap();
            vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}
