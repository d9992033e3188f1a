//! Named parameter storage and the momentum optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// All learnable arrays of a model, keyed by a stable dotted name.
///
/// Iteration order is lexicographic by name, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract("params", format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but records constants; used for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        Bound { vars }
    }
}

/// Parameter name to tape variable mapping for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("params", format!("parameter `{name}` is not bound")))
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .ok_or_else(|| Error::contract("grads", format!("no gradient for `{k}`; run backward first")))?;
                Ok((k.clone(), g))
            })
            .collect()
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v - lr * grad; p <- p + v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocities: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocities: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocities.get(name).map(Vec::as_slice)
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract("sgd_momentum_step", format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "sgd_momentum_step",
                    format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let v = self.velocities.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv - self.lr * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![value]));
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![value]))])
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = single(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        opt.step(&mut p, &grad(2.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(1.5);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn two_steps_with_constant_gradient() {
        let (lr, m, g) = (0.05, 0.9, 3.0);
        let mut p = single(0.0);
        let mut opt = SgdMomentum::new(lr, m);
        opt.step(&mut p, &grad(g)).unwrap();
        opt.step(&mut p, &grad(g)).unwrap();
        let expected = -lr * g * (2.0 + m);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut p = single(0.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(opt.step(&mut p, &bad).is_err());
    }
}
