//! Small parameterized building blocks shared by the generator and discriminator.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Standard deviation of the normal initializer used for every projection.
pub const INIT_STD: f64 = 0.02;

/// Walks a module's learnable tensors in a fixed order, with dotted names.
pub trait Parameters {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn param(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, std, rng).to_parameter()
}

pub(crate) fn const_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::full(shape, value).to_parameter()
}

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: param(&[d_in, d_out], INIT_STD, rng),
            bias: bias.then(|| const_param(&[d_out], 0.0)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Parameters for Linear {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: const_param(&[d], 1.0),
            bias: const_param(&[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

impl Parameters for LayerNorm {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(d, hidden, true, rng),
            fc2: Linear::new(hidden, d, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl Parameters for Mlp {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// Helpers available on every [`Parameters`] implementor.
pub trait ParametersExt: Parameters + Clone {
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        let mut refs = Vec::new();
        copy.visit_mut("", &mut refs);
        refs.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Copy whose parameters are constants: forward passes build no graph.
    fn frozen(&self) -> Self {
        let mut copy = self.clone();
        let mut refs = Vec::new();
        copy.visit_mut("", &mut refs);
        for (_, t) in refs {
            *t = t.detach();
        }
        copy
    }

    /// Copy with every parameter replaced, in visiting order.
    fn with_params(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut copy = self.clone();
        let mut refs = Vec::new();
        copy.visit_mut("", &mut refs);
        if refs.len() != tensors.len() {
            return Err(crate::Error::Contract(format!(
                "with_params: model has {} tensors, got {}",
                refs.len(),
                tensors.len()
            )));
        }
        for ((name, slot), t) in refs.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(crate::Error::Contract(format!(
                    "with_params: {name} has shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(copy)
    }
}

impl<T: Parameters + Clone> ParametersExt for T {}
