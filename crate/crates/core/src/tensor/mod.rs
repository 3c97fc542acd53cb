//! Dense f32 arrays and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values flow through
//! [`Var`] handles; [`Tape::backward`] walks the recorded nodes once in
//! reverse and returns fresh [`Gradients`] without mutating the tape, so
//! repeated backward passes over the same tape agree bitwise.

mod tape;
#[cfg(test)]
mod tests;

pub use tape::{Elementwise, Gradients, Tape, Var};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of 32-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// A 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Rows of a 2-D tensor as owned vectors.
    pub fn rows(&self) -> Vec<Vec<f32>> {
        match self.shape.as_slice() {
            [_, c] if *c > 0 => self.data.chunks(*c).map(<[f32]>::to_vec).collect(),
            [r, _] => vec![Vec::new(); *r],
            _ => vec![self.data.clone()],
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

/// A named model tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    /// Biases and norm offsets are excluded from L2 regularization.
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        self.push(Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        })
    }

    pub fn push(&mut self, param: Parameter) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Σ‖θ‖² over trainable non-bias parameters.
    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable && !p.is_bias())
            .map(|p| p.tensor.sum_squares())
            .sum()
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

impl<'a> IntoIterator for &'a ParamStore {
    type Item = &'a Parameter;
    type IntoIter = std::slice::Iter<'a, Parameter>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// Parameters of a [`ParamStore`] recorded as leaves on one tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        BoundParams {
            vars: store.iter().map(|p| tape.param(p)).collect(),
            index: store.index.clone(),
        }
    }

    /// Binds already-recorded vars (in store order) to the store's names.
    pub fn from_vars(store: &ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(store.len(), vars.len(), "one var per parameter");
        BoundParams {
            vars: vars.to_vec(),
            index: store.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients in store order; zeros for parameters the root ignores.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Central-difference gradient checking against the tape.
pub mod gradcheck {
    use super::{BoundParams, ParamStore, Tape, Tensor, Var};
    use crate::error::Result;

    pub const STEP: f32 = 1e-3;
    pub const TOL: f64 = 1e-3;

    /// [`check`] over every parameter of `store`.
    pub fn check_store<F>(store: &ParamStore, build: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
    {
        check_store_with_step(store, STEP, build)
    }

    pub fn check_store_with_step<F>(store: &ParamStore, step: f32, build: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
    {
        let inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
        check_with_step(&inputs, step, |t, vars| build(t, &BoundParams::from_vars(store, vars)))
    }

    /// Relative error ‖a − n‖ / max(‖a‖, ‖n‖).
    pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (&a, &n) in analytic.iter().zip(numeric) {
            let a = f64::from(a);
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-12 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        }
    }

    /// Fixed pseudo-random readout weights for non-scalar outputs.
    fn readout_weights(n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Compares the tape gradient of an expression against central
    /// differences with respect to every entry of `inputs`. Non-scalar
    /// outputs are reduced by a fixed random readout, evaluated in f64 on
    /// the numeric side.
    pub fn check<F>(inputs: &[Tensor], build: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        check_with_step(inputs, STEP, build)
    }

    /// [`check`] with an explicit step. Large f32 losses need a wider
    /// step to clear rounding noise; sharp softmaxes need a narrower one.
    pub fn check_with_step<F>(inputs: &[Tensor], step: f32, build: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |xs: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&tape, &vars).unwrap().value();
            let w = readout_weights(out.numel());
            if out.numel() == 1 {
                f64::from(out.data()[0])
            } else {
                out.data().iter().zip(&w).map(|(&y, w)| f64::from(y) * w).sum()
            }
        };
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let n = out.value().numel();
        let root = if n == 1 {
            out
        } else {
            let w: Vec<f32> = readout_weights(n).into_iter().map(|v| v as f32).collect();
            let w = tape.constant(Tensor::new(out.shape(), w).unwrap());
            out.mul(w).unwrap().sum_all().unwrap()
        };
        let grads = tape.backward(root).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            analytic.extend_from_slice(grads.wrt(vars[i]).data());
            for j in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += step;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= step;
                let h = f64::from(plus[i].data()[j]) - f64::from(minus[i].data()[j]);
                numeric.push((eval(&plus) - eval(&minus)) / h);
            }
        }
        rel_err(&analytic, &numeric)
    }
}
