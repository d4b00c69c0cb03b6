//! Saliency heatmaps recorded as graph expressions, so they can be
//! differentiated with respect to the model parameters.
//!
//! Every interpreter returns a node of shape `[N, H', W']`: the input
//! resolution for SimpleGrad, SmoothGrad and LRP, the target layer's
//! resolution for the `_t` variants and Grad-CAM. Channels are summed.

mod lrp;
mod normalize;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Real, Tensor};
use crate::model::{ActShape, Model, ModelError, ParamNodes, Params, Trace};

pub use normalize::{max_one_node, normalize_heatmap, unit_mass_node, upsample_heatmap, Normalize};

#[derive(Debug, Error)]
pub enum InterpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid interpreter settings: {0}")]
    Spec(String),
    #[error("layer `{0}` has no spatial activation")]
    NotSpatial(String),
    #[error("class {class} outside [0, {classes})")]
    Class { class: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InterpreterKind {
    SimpleGrad,
    SimpleGradT,
    GradCam,
    Lrp,
    LrpT,
    SmoothGrad,
}

impl InterpreterKind {
    pub const ALL: [InterpreterKind; 6] = [
        InterpreterKind::SimpleGrad,
        InterpreterKind::SimpleGradT,
        InterpreterKind::GradCam,
        InterpreterKind::Lrp,
        InterpreterKind::LrpT,
        InterpreterKind::SmoothGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterpreterKind::SimpleGrad => "simplegrad",
            InterpreterKind::SimpleGradT => "simplegrad_t",
            InterpreterKind::GradCam => "gradcam",
            InterpreterKind::Lrp => "lrp",
            InterpreterKind::LrpT => "lrp_t",
            InterpreterKind::SmoothGrad => "smoothgrad",
        }
    }

    /// Whether the heatmap lives at the target layer's resolution.
    pub fn uses_target_layer(self) -> bool {
        matches!(self, InterpreterKind::SimpleGradT | InterpreterKind::GradCam | InterpreterKind::LrpT)
    }

    /// Signed maps may hold negative values; Grad-CAM is rectified.
    pub fn signed(self) -> bool {
        self != InterpreterKind::GradCam
    }
}

impl fmt::Display for InterpreterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterpreterKind {
    type Err = InterpError;

    fn from_str(s: &str) -> Result<Self, InterpError> {
        InterpreterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| InterpError::Spec(format!("unknown interpreter `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpreterSpec {
    pub kind: InterpreterKind,
    pub target_layer: String,
    /// Stabilizer of every LRP division.
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub smooth_n: usize,
    pub smooth_sigma: f64,
    pub smooth_seed: u64,
}

impl InterpreterSpec {
    /// Defaults: ε = 0.01, α = 1, β = 0, 16 SmoothGrad samples at σ = 0.15.
    pub fn new(kind: InterpreterKind, target_layer: impl Into<String>) -> Self {
        Self {
            kind,
            target_layer: target_layer.into(),
            epsilon: 0.01,
            alpha: 1.0,
            beta: 0.0,
            smooth_n: 16,
            smooth_sigma: 0.15,
            smooth_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), InterpError> {
        if !(self.epsilon > 0.0) {
            return Err(InterpError::Spec(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if ((self.alpha - self.beta) - 1.0).abs() > 1e-9 || self.beta < 0.0 {
            return Err(InterpError::Spec(format!(
                "need alpha - beta = 1 with beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.smooth_n == 0 || !(self.smooth_sigma >= 0.0) {
            return Err(InterpError::Spec("smoothgrad needs n >= 1 and sigma >= 0".into()));
        }
        Ok(())
    }

    /// Heatmap extent `(H', W')` for inputs of spatial size `(h, w)`.
    pub fn resolution(&self, model: &Model, h: usize, w: usize) -> Result<(usize, usize), InterpError> {
        if !self.kind.uses_target_layer() {
            return Ok((h, w));
        }
        let idx = model.layer_index(&self.target_layer)?;
        match model.layer_shape(idx) {
            ActShape::Spatial { h: lh, w: lw, .. } => {
                let (ih, iw) = (model.desc().input.1, model.desc().input.2);
                // fully convolutional nets scale the layer extent with the input
                Ok((lh * h / ih, lw * w / iw))
            }
            ActShape::Flat(_) => Err(InterpError::NotSpatial(self.target_layer.clone())),
        }
    }
}

/// One-hot `[N, K]` constant selecting each sample's class.
fn class_score_mask<T: Real>(g: &mut Graph<T>, logits: NodeId, classes: &[usize]) -> Result<NodeId, InterpError> {
    let [n, k] = [g.shape(logits)[0], g.shape(logits)[1]];
    if classes.len() != n {
        return Err(InterpError::Spec(format!("{} classes for a batch of {n}", classes.len())));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(InterpError::Class { class: c, classes: k });
    }
    Ok(g.constant(Tensor::from_fn(&[n, k], |i| if classes[i / k] == i % k { T::one() } else { T::zero() }))?)
}

/// `Σ_i logits[i, classes[i]]` as a scalar node.
fn class_score<T: Real>(g: &mut Graph<T>, logits: NodeId, classes: &[usize]) -> Result<NodeId, InterpError> {
    let onehot = class_score_mask(g, logits, classes)?;
    let picked = g.mul(logits, onehot)?;
    Ok(g.sum(picked)?)
}

/// `[N, C, H, W]` → `[N, H, W]` by summing channels.
fn channel_sum<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId, EngineError> {
    let s = g.shape(x).to_vec();
    let summed = g.sum_to(x, &[s[0], 1, s[2], s[3]])?;
    g.reshape(summed, &[s[0], s[2], s[3]])
}

fn spatial_output<T: Real>(
    g: &Graph<T>,
    model: &Model,
    trace: &Trace,
    layer: &str,
) -> Result<NodeId, InterpError> {
    let idx = model.layer_index(layer)?;
    let node = trace.layers[idx].output;
    if g.shape(node).len() != 4 {
        return Err(InterpError::NotSpatial(layer.into()));
    }
    Ok(node)
}

/// Records the heatmaps of `x` for `classes` (one per sample) into `g`.
///
/// `x` must be a non-detached node for SimpleGrad and SmoothGrad; the result
/// is differentiable with respect to every parameter in `params`.
pub fn heatmap_node<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    params: &ParamNodes,
    x: NodeId,
    classes: &[usize],
    spec: &InterpreterSpec,
) -> Result<NodeId, InterpError> {
    spec.validate()?;
    match spec.kind {
        InterpreterKind::SimpleGrad => {
            let trace = model.forward(g, params, x)?;
            let score = class_score(g, trace.logits, classes)?;
            let dx = g.grad_as_graph(score, &[x])?[0];
            Ok(channel_sum(g, dx)?)
        }
        InterpreterKind::SimpleGradT => {
            let trace = model.forward(g, params, x)?;
            let a = spatial_output(g, model, &trace, &spec.target_layer)?;
            let score = class_score(g, trace.logits, classes)?;
            let da = g.grad_as_graph(score, &[a])?[0];
            Ok(channel_sum(g, da)?)
        }
        InterpreterKind::GradCam => {
            let trace = model.forward(g, params, x)?;
            let a = spatial_output(g, model, &trace, &spec.target_layer)?;
            let score = class_score(g, trace.logits, classes)?;
            let da = g.grad_as_graph(score, &[a])?[0];
            let s = g.shape(a).to_vec();
            let alpha = g.global_avg_pool(da)?;
            let alpha = g.reshape(alpha, &[s[0], s[1], 1, 1])?;
            let weighted = g.mul(a, alpha)?;
            let cam = channel_sum(g, weighted)?;
            Ok(g.relu(cam)?)
        }
        InterpreterKind::Lrp | InterpreterKind::LrpT => {
            let trace = model.forward(g, params, x)?;
            let stop = match spec.kind {
                InterpreterKind::LrpT => Some(model.layer_index(&spec.target_layer)?),
                _ => None,
            };
            let r = lrp::relevance(g, model, params, &trace, classes, stop, spec)?;
            if g.shape(r).len() != 4 {
                return Err(InterpError::NotSpatial(spec.target_layer.clone()));
            }
            Ok(channel_sum(g, r)?)
        }
        InterpreterKind::SmoothGrad => {
            let shape = g.shape(x).to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.smooth_seed);
            let normal = Normal::new(0.0, spec.smooth_sigma).map_err(|e| InterpError::Spec(e.to_string()))?;
            let mut acc: Option<NodeId> = None;
            for _ in 0..spec.smooth_n {
                let noise = g.constant(Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng))))?;
                let xn = g.add(x, noise)?;
                let trace = model.forward(g, params, xn)?;
                let score = class_score(g, trace.logits, classes)?;
                let d = g.grad_as_graph(score, &[xn])?[0];
                let h = channel_sum(g, d)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, h)?,
                    None => h,
                });
            }
            let sum = acc.expect("smooth_n >= 1");
            Ok(g.mul_scalar(sum, 1.0 / spec.smooth_n as f64)?)
        }
    }
}

/// Numeric heatmaps `[N, H', W']` for a batch, in a private graph.
pub fn heatmaps<T: Real>(
    model: &Model,
    params: &Params<T>,
    batch: &Tensor<T>,
    classes: &[usize],
    spec: &InterpreterSpec,
) -> Result<Tensor<T>, InterpError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, params)?;
    let x = g.leaf(batch.clone())?;
    let h = heatmap_node(&mut g, model, &p, x, classes, spec)?;
    Ok(g.value(h).clone())
}
