//! Compact CNN classifiers built from an [`ArchDescriptor`].

mod arch;
mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Real, Tensor};

pub use arch::{ActShape, ArchDescriptor, ArchError, Layer, LayerKind, Normalization};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Named parameter tensors, e.g. `conv1.weight`, `conv1.bias`.
pub type Params<T> = BTreeMap<String, Tensor<T>>;

/// Parameter leaves bound into one graph.
pub type ParamNodes = BTreeMap<String, NodeId>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("input batch {got:?} does not match model input {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
}

/// Nodes recorded for one layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// The layer's input (flattened for a dense layer after a spatial one).
    pub input: NodeId,
    pub output: NodeId,
}

/// Result of [`Model::forward`]: logits plus every layer's input/output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: NodeId,
    pub logits: NodeId,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct Model {
    desc: ArchDescriptor,
    shapes: Vec<ActShape>,
}

impl Model {
    pub fn build(desc: ArchDescriptor) -> Result<Self, ModelError> {
        let shapes = desc.validate()?;
        Ok(Self { desc, shapes })
    }

    pub fn desc(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn classes(&self) -> usize {
        self.desc.classes
    }

    /// Activation shape (without batch axis) after layer `index`.
    pub fn layer_shape(&self, index: usize) -> ActShape {
        self.shapes[index]
    }

    pub fn layer_index(&self, name: &str) -> Result<usize, ModelError> {
        self.desc.layer_index(name).ok_or_else(|| ModelError::UnknownLayer(name.into()))
    }

    /// Input shape of layer `index`, without batch axis.
    fn input_shape(&self, index: usize) -> ActShape {
        if index == 0 {
            let (c, h, w) = self.desc.input;
            ActShape::Spatial { c, h, w }
        } else {
            self.shapes[index - 1]
        }
    }

    /// Expected parameter shapes in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for (i, layer) in self.desc.layers.iter().enumerate() {
            match (&layer.kind, self.input_shape(i)) {
                (LayerKind::Conv { out: o, k, .. }, ActShape::Spatial { c, .. }) => {
                    out.insert(format!("{}.weight", layer.name), vec![*o, c, *k, *k]);
                    out.insert(format!("{}.bias", layer.name), vec![*o]);
                }
                (LayerKind::Dense { out: o }, s) => {
                    out.insert(format!("{}.weight", layer.name), vec![s.numel(), *o]);
                    out.insert(format!("{}.bias", layer.name), vec![*o]);
                }
                _ => {}
            }
        }
        out
    }

    /// He-style initialization: weights `N(0, 2/fan_in)`, biases zero.
    /// Identical seeds give bit-identical parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in self.param_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
            };
            params.insert(name, tensor);
        }
        params
    }

    pub fn check_params<T: Real>(&self, params: &Params<T>) -> Result<(), ModelError> {
        for (name, expected) in self.param_shapes() {
            let p = params.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if p.shape() != expected.as_slice() {
                return Err(ModelError::ParamShape { name, got: p.shape().to_vec(), expected });
            }
        }
        Ok(())
    }

    /// Records every parameter as a graph leaf.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>) -> Result<ParamNodes, ModelError> {
        self.check_params(params)?;
        let mut nodes = ParamNodes::new();
        for name in self.param_shapes().keys() {
            nodes.insert(name.clone(), g.leaf(params[name].clone())?);
        }
        Ok(nodes)
    }

    /// Checks a `[N, C, H, W]` batch against the descriptor's input extent.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let (c, h, w) = self.desc.input;
        let ok = shape.len() == 4 && shape[1] == c && (self.is_fully_convolutional() || (shape[2] == h && shape[3] == w));
        if ok {
            Ok(())
        } else {
            Err(ModelError::InputShape { got: shape.to_vec(), expected: vec![0, c, h, w] })
        }
    }

    /// True when no dense layer consumes a spatial map directly, so the
    /// network accepts any input resolution the pooling chain allows.
    pub fn is_fully_convolutional(&self) -> bool {
        let mut spatial = true;
        for layer in &self.desc.layers {
            match layer.kind {
                LayerKind::Dense { .. } if spatial => return false,
                LayerKind::Gap | LayerKind::Dense { .. } => spatial = false,
                _ => {}
            }
        }
        true
    }

    /// Forward pass recording every layer; logits are `[N, K]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamNodes, x: NodeId) -> Result<Trace, ModelError> {
        self.check_input(g.shape(x))?;
        let n = g.shape(x)[0];
        let mut cur = x;
        let mut layers = Vec::with_capacity(self.desc.layers.len());
        let param = |key: String| params.get(&key).copied().ok_or(ModelError::MissingParam(key));
        for layer in &self.desc.layers {
            let input = cur;
            let (input, output) = match &layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let w = param(format!("{}.weight", layer.name))?;
                    let b = param(format!("{}.bias", layer.name))?;
                    let z = g.conv2d(input, w, *stride, *pad)?;
                    let o = g.shape(w)[0];
                    let b4 = g.reshape(b, &[1, o, 1, 1])?;
                    (input, g.add(z, b4)?)
                }
                LayerKind::Relu => (input, g.relu(input)?),
                LayerKind::MaxPool { k, stride } => (input, g.maxpool2d(input, *k, *stride)?),
                LayerKind::AvgPool { k } => (input, g.avgpool2d(input, *k)?),
                LayerKind::Gap => (input, g.global_avg_pool(input)?),
                LayerKind::Dense { .. } => {
                    let w = param(format!("{}.weight", layer.name))?;
                    let b = param(format!("{}.bias", layer.name))?;
                    let features: usize = g.shape(input)[1..].iter().product();
                    let flat = g.reshape(input, &[n, features])?;
                    let z = g.matmul(flat, w)?;
                    (flat, g.add(z, b)?)
                }
            };
            layers.push(LayerTrace { input, output });
            cur = output;
        }
        Ok(Trace { input: x, logits: cur, layers })
    }

    /// Numeric logits for a batch, outside any caller graph.
    pub fn logits<T: Real>(&self, params: &Params<T>, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params)?;
        let x = g.constant(batch.clone())?;
        let trace = self.forward(&mut g, &p, x)?;
        Ok(g.value(trace.logits).clone())
    }
}
