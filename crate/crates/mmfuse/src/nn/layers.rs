//! Layer definitions bound to named parameters in a `ParamStore`.
//!
//! A layer struct owns no data; it records its parameter names and wiring.
//! `Forward` bundles the tape with the store, memoizes one tape leaf per
//! parameter (so gradients from every use accumulate), and collects pending
//! batch-norm running-statistic updates to apply after the step.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Scalar, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Forward<'a, F: Scalar> {
    pub tape: Tape<F>,
    pub store: &'a ParamStore<F>,
    pub training: bool,
    bound: std::collections::BTreeMap<String, Var>,
    /// `(buffer name, new value)` pairs, in forward order.
    pub bn_updates: Vec<(String, ArrayD<F>)>,
}

impl<'a, F: Scalar> Forward<'a, F> {
    pub fn new(store: &'a ParamStore<F>, training: bool) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            training,
            bound: std::collections::BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Tape leaf for a named parameter; trainable parameters require grad.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.value(name).clone();
        let v = self.tape.leaf(value, self.store.is_trainable(name));
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Data leaf without gradient.
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.tape.leaf(value, false)
    }

    /// Gradients keyed by parameter name, for the optimizer.
    pub fn param_grads(
        &self,
        grads: &super::Gradients<F>,
    ) -> std::collections::BTreeMap<String, ArrayD<F>> {
        self.bound
            .iter()
            .filter_map(|(name, &var)| grads.get(var).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Hand back the queued running-statistic updates; the caller applies
    /// them to the store once this forward's borrow ends.
    pub fn take_bn_updates(self) -> Vec<(String, ArrayD<F>)> {
        self.bn_updates
    }
}

/// Fold running-statistic updates into the store, in forward order.
pub fn apply_bn_updates<F: Scalar>(store: &mut ParamStore<F>, updates: Vec<(String, ArrayD<F>)>) {
    for (name, value) in updates {
        store.set_value(&name, value);
    }
}

/// Fan-in-scaled uniform init, `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
fn fan_in_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::of_f64(rng.gen_range(-bound..bound))
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), in_ch, out_ch, k, stride, pad }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.k * self.k;
        store.insert(
            format!("{}.weight", self.name),
            fan_in_uniform(&[self.out_ch, self.in_ch, self.k, self.k], fan_in, rng),
            trainable,
        );
        store.insert(format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_ch])), trainable);
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let b = f.param(&format!("{}.bias", self.name));
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d { name: name.into(), channels }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, trainable: bool) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), ArrayD::from_elem(IxDyn(&[c]), F::one()), trainable);
        store.insert(format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[c])), trainable);
        store.insert(format!("{}.running_mean", self.name), ArrayD::zeros(IxDyn(&[c])), false);
        store.insert(
            format!("{}.running_var", self.name),
            ArrayD::from_elem(IxDyn(&[c]), F::one()),
            false,
        );
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Var {
        let gamma = f.param(&format!("{}.gamma", self.name));
        let beta = f.param(&format!("{}.beta", self.name));
        let rm_name = format!("{}.running_mean", self.name);
        let rv_name = format!("{}.running_var", self.name);
        let rm = f.store.value(&rm_name).clone();
        let rv = f.store.value(&rv_name).clone();
        let (y, stats) = f.tape.batch_norm(x, gamma, beta, (&rm, &rv), f.training, BN_EPS);
        if let Some((mean, var)) = stats {
            let mom = F::of_f64(BN_MOMENTUM);
            let one_minus = F::one() - mom;
            let new_rm = rm.mapv(|v| v * one_minus)
                + &mean.mapv(|v| v * mom).into_dyn();
            let new_rv = rv.mapv(|v| v * one_minus)
                + &var.mapv(|v| v * mom).into_dyn();
            f.bn_updates.push((rm_name, new_rm));
            f.bn_updates.push((rv_name, new_rv));
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.weight", self.name),
            fan_in_uniform(&[self.in_dim, self.out_dim], self.in_dim, rng),
            trainable,
        );
        store.insert(format!("{}.bias", self.name), ArrayD::zeros(IxDyn(&[self.out_dim])), trainable);
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let b = f.param(&format!("{}.bias", self.name));
        f.tape.linear(x, w, b)
    }
}

/// Residual basic block: conv-bn-relu-conv-bn plus a (projected) skip.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let down = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0),
                BatchNorm2d::new(format!("{name}.down.bn"), out_ch),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1),
            bn1: BatchNorm2d::new(format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), out_ch),
            down,
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, trainable: bool, rng: &mut ChaCha8Rng) {
        self.conv1.init(store, trainable, rng);
        self.bn1.init(store, trainable);
        self.conv2.init(store, trainable, rng);
        self.bn2.init(store, trainable);
        if let Some((conv, bn)) = &self.down {
            conv.init(store, trainable, rng);
            bn.init(store, trainable);
        }
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Var {
        let c1 = self.conv1.forward(f, x);
        let b1 = self.bn1.forward(f, c1);
        let r1 = f.tape.relu(b1);
        let c2 = self.conv2.forward(f, r1);
        let b2 = self.bn2.forward(f, c2);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(f, x);
                bn.forward(f, s)
            }
            None => x,
        };
        let sum = f.tape.add(b2, skip);
        f.tape.relu(sum)
    }
}
