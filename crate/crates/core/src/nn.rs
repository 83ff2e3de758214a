//! Named parameter storage and the small set of layers the networks use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{ConvSpec, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Scalar> Params<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter in `g`; `trainable = false` binds them as
    /// constants (inference, detached augmentation passes).
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Graph handles for a bound [`Params`] set, in parameter order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weight and bias.
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = params.push(
            format!("{name}.weight"),
            uniform(rng, &[cout, cin, kernel, kernel], bound),
        );
        let bias = params.push(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self {
            weight,
            bias,
            spec: ConvSpec::same(kernel, stride),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let weight = params.push(format!("{name}.weight"), uniform(rng, &[fout, fin], bound));
        let bias = params.push(format!("{name}.bias"), uniform(rng, &[fout], bound));
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Pre-activation residual block: `x + conv(silu(conv(silu(x))))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        let h = g.silu(x);
        let h = self.conv1.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        g.add(x, h)
    }
}
