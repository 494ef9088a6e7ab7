//! Named trainable arrays and the convolution layer that consumes them.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::tensor::{Shape, Tensor};

/// Index of an array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of trainable arrays.
///
/// Iteration order is creation order, which is fixed by the model topology.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access; copies the array first if a live graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), &**t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Sets every parameter to `value`.
    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            Arc::make_mut(t).data_mut().fill(value);
        }
    }

    /// Replaces the array named `name`, which must keep its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        value.expect_shape(self.get(id).shape(), name)?;
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    /// Registers every array on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.leaf(Arc::clone(t))).collect(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor) -> Result<ParamId> {
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        Ok(ParamId(self.tensors.len() - 1))
    }
}

/// Parameters registered on one graph, indexed like the store they came from.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fan-in normal initialization variants. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 2/fan_in)`, for layers followed by a ReLU.
    Relu,
    /// Absolute values of `Relu` weights, for the hidden layer of an attention
    /// MLP. Pooled post-ReLU descriptors are nonnegative, so signed weights can
    /// leave a narrow bottleneck inactive for every input from the first step.
    Squeeze,
    /// `N(0, 1/fan_in)`, for layers with a linear or sigmoid output.
    Linear,
    /// `Linear` scaled by the factor, for the last layer of a residual branch.
    Residual(f64),
}

/// Creates parameters with hierarchical names and seeded He (fan-in) initialization.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn fan_in_normal(&mut self, shape: Shape, fan_in: usize, gain: f64) -> Tensor {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_, _, _, _| normal.sample(rng))
    }

    /// A `kernel × kernel` convolution `cin → cout` with "same" padding and a
    /// zero bias, for a layer feeding a ReLU (He gain 2).
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Conv2d> {
        self.conv_init(name, cin, cout, kernel, stride, Init::Relu)
    }

    /// Like [`conv`](Self::conv) with an explicit initialization rule.
    pub fn conv_init(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Conv2d> {
        if cin == 0 || cout == 0 || kernel.is_multiple_of(2) || stride == 0 {
            return Err(Error::Config(format!(
                "{}: invalid conv {cin}->{cout} k{kernel} s{stride}",
                self.full_name(name)
            )));
        }
        let fan_in = cin * kernel * kernel;
        let weight = match init {
            Init::Relu => self.fan_in_normal([cout, cin, kernel, kernel], fan_in, 2.0),
            Init::Squeeze => self
                .fan_in_normal([cout, cin, kernel, kernel], fan_in, 2.0)
                .map(f64::abs),
            Init::Linear => self.fan_in_normal([cout, cin, kernel, kernel], fan_in, 1.0),
            Init::Residual(scale) => self
                .fan_in_normal([cout, cin, kernel, kernel], fan_in, 1.0)
                .scale(scale),
        };
        let weight = self.store.push(self.full_name(&format!("{name}.weight")), weight)?;
        let bias = self
            .store
            .push(self.full_name(&format!("{name}.bias")), Tensor::zeros([cout, 1, 1, 1]))?;
        Ok(Conv2d {
            weight,
            bias,
            geom: ConvGeometry::same(kernel, stride),
        })
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Convolution layer whose weight and bias live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geom)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}
