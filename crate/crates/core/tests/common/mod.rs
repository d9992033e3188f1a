//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it checks: gradients come from finite differences of
//! forward values, IoU from pixel counting, upsampling from an explicit
//! interpolation formula.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refseg::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences for `f`, contracted with a fixed random tensor so every
/// output element matters. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).shape().to_vec()
    };
    let n: usize = probe_shape.iter().product();
    let weights = Tensor::new(probe_shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

    let objective = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().clone();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `(intersection, union)` by direct pixel counting.
pub fn count_overlap(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    assert_eq!(pred.len(), gt.len());
    let mut inter = 0;
    let mut union = 0;
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            inter += 1;
        }
        if pred[i] || gt[i] {
            union += 1;
        }
    }
    (inter, union)
}

/// Tent-weighted interpolation of an `h x w` grid whose cell `(i, j)` is
/// centered at pixel `(i*s + (s-1)/2, j*s + (s-1)/2)`; beyond the outermost
/// centers the grid is extended with zeros.
pub fn interpolate_grid(coarse: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let sf = s as f64;
    let center = |i: usize| i as f64 * sf + (sf - 1.0) / 2.0;
    let tent = |d: f64| (1.0 - d.abs() / sf).max(0.0);
    let mut out = vec![0.0; h * s * w * s];
    for y in 0..h * s {
        for x in 0..w * s {
            let mut v = 0.0;
            for i in 0..h {
                let wy = tent(y as f64 - center(i));
                if wy == 0.0 {
                    continue;
                }
                for j in 0..w {
                    v += coarse[i * w + j] * wy * tent(x as f64 - center(j));
                }
            }
            out[y * w * s + x] = v;
        }
    }
    out
}

pub fn random_bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}
