use serde::{Deserialize, Serialize};

use super::rng::fnv1a64;
use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    value: Tensor,
    gradient: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.rows(), value.cols());
        Self { value, gradient }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn gradient(&self) -> &Tensor {
        &self.gradient
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if !value.same_shape(&self.value) {
            return Err(Error::Shape(format!(
                "parameter expects {:?}, got {:?}",
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill(0.0);
    }
}

/// Ordered, named collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.params.push(Parameter::new(value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.set_value(v)?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter value as a leaf on `tape`, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Adds the gradients of `vars` (as returned by [`bind`](Self::bind)).
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.gradient.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.gradient.is_finite())
    }

    /// Stable 64-bit digest of names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, p) in self.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for &d in p.value.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay (weight decay 0 by default).
    Adam,
}

/// First-order optimizer applied once per training step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        if self.lr == 0.0 {
            params.zero_grad();
            return;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in &mut params.params {
                    p.value.add_scaled(&p.gradient, -self.lr);
                }
            }
            OptimizerKind::Adam => {
                if self.moments.len() != params.len() {
                    self.moments = params
                        .params
                        .iter()
                        .map(|p| {
                            let (r, c) = (p.value.rows(), p.value.cols());
                            (Tensor::zeros(r, c), Tensor::zeros(r, c))
                        })
                        .collect();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (p, (m, v)) in params.params.iter_mut().zip(&mut self.moments) {
                    let g = p.gradient.data();
                    let md = m.data_mut();
                    for (mi, gi) in md.iter_mut().zip(g) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    }
                    let vd = v.data_mut();
                    for (vi, gi) in vd.iter_mut().zip(g) {
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    }
                    let (md, vd) = (m.data(), v.data());
                    for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                        let update = (md[k] / bc1) / ((vd[k] / bc2).sqrt() + self.eps);
                        *x -= self.lr * (update + self.weight_decay * *x);
                    }
                }
            }
        }
        params.zero_grad();
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss_fn` builds a scalar loss on a fresh tape from leaves holding
/// `values` (in order). Returns the maximum over all scalar parameters of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(values: &[Tensor], eps: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Parameter(format!("grad_check eps must lie in [1e-7, 1e-4], got {eps}")));
    }
    let mut eval = |vals: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = loss_fn(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out);
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| grads.get_or_zeros(v, t.rows(), t.cols()))
            .collect();
        Ok((value, grads))
    };

    let (first, grads) = eval(values, true)?;
    let (second, _) = eval(values, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut worst: f64 = 0.0;
    let mut perturbed = values.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for k in 0..values[i].len() {
            let orig = values[i].data()[k];
            perturbed[i].data_mut()[k] = orig + eps;
            let (plus, _) = eval(&perturbed, false)?;
            perturbed[i].data_mut()[k] = orig - eps;
            let (minus, _) = eval(&perturbed, false)?;
            perturbed[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (g.data()[k] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
