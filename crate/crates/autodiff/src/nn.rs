//! Parameter storage and the two layer types the models are built from.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter set for one model. Order is creation order and is
/// part of the checkpoint contract.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Replaces a tensor by name; shapes must agree. Used by checkpoint load.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<F>) -> Result<(), String> {
        for (n, t) in &mut self.entries {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(format!(
                        "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                        value.shape(),
                        t.shape()
                    ));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(format!("parameter {name} not present in model"))
    }

    /// Feeds every parameter into a graph as a differentiable leaf,
    /// returning the binding in parameter order.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        Binding { vars }
    }

    /// Same, but as constants: evaluation without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Binding {
        let vars = self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect();
        Binding { vars }
    }
}

/// Graph-bound view of a parameter store for one forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform Kaiming-style init bound for a layer with `fan_in` inputs.
fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn uniform_tensor<F: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// 2-D convolution layer: weight `[Cout,Cin,K,K]` plus channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = init_bound(cin * k * k);
        let weight = store.add(&format!("{name}.weight"), uniform_tensor(rng, &[cout, cin, k, k], bound));
        let bias = store.add(&format!("{name}.bias"), uniform_tensor(rng, &[cout], bound));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var) -> Var {
        let y = g.conv2d(x, bind.var(self.weight), self.stride, self.pad);
        g.add_bias_channel(y, bind.var(self.bias))
    }
}

/// Dense layer on 2-D inputs: `[n,din] -> [n,dout]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let bound = init_bound(din);
        let weight = store.add(&format!("{name}.weight"), uniform_tensor(rng, &[din, dout], bound));
        let bias = store.add(&format!("{name}.bias"), uniform_tensor(rng, &[1, dout], bound));
        Linear { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var) -> Var {
        let rows = g.value(x).shape()[0];
        let y = g.matmul(x, bind.var(self.weight));
        let b = g.broadcast_rows(bind.var(self.bias), rows);
        g.add(y, b)
    }
}
