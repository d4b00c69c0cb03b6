use std::str::FromStr;

use super::InterpError;
use crate::engine::{EngineError, Graph, NodeId, Op, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Divide by `Σ|h|`.
    UnitMass,
    /// Clamp negatives to zero, then divide by the maximum.
    MaxOne,
}

impl FromStr for Normalize {
    type Err = InterpError;

    fn from_str(s: &str) -> Result<Self, InterpError> {
        match s {
            "unit_mass" => Ok(Normalize::UnitMass),
            "max_one" => Ok(Normalize::MaxOne),
            _ => Err(InterpError::Spec(format!("unknown normalization `{s}`"))),
        }
    }
}

/// Normalizes one flattened heatmap. The flag is true when the map had no
/// mass to normalize, in which case the output is all zeros.
pub fn normalize_heatmap(h: &[f64], mode: Normalize) -> (Vec<f64>, bool) {
    match mode {
        Normalize::UnitMass => {
            let mass: f64 = h.iter().map(|v| v.abs()).sum();
            if mass == 0.0 {
                return (vec![0.0; h.len()], true);
            }
            (h.iter().map(|v| v / mass).collect(), false)
        }
        Normalize::MaxOne => {
            let m = h.iter().fold(0.0f64, |a, &b| a.max(b));
            if m <= 0.0 {
                return (vec![0.0; h.len()], true);
            }
            (h.iter().map(|v| v.max(0.0) / m).collect(), false)
        }
    }
}

/// `s`, plus one wherever `s ≤ 0`, so an all-zero row divides by one and
/// stays zero.
fn safe_denominator<T: Real>(g: &mut Graph<T>, s: NodeId) -> Result<NodeId, EngineError> {
    let pos = g.apply(Op::Step, &[s])?;
    let missing = g.mul_scalar(pos, -1.0)?;
    let missing = g.add_scalar(missing, 1.0)?;
    g.add(s, missing)
}

fn flat_rows<T: Real>(g: &mut Graph<T>, h: NodeId) -> Result<(NodeId, Vec<usize>), EngineError> {
    let shape = g.shape(h).to_vec();
    let n = shape[0];
    let d = shape[1..].iter().product();
    Ok((g.reshape(h, &[n, d])?, shape))
}

/// Per-sample max-one normalization of `[N, ...]` heatmaps, in the graph.
pub fn max_one_node<T: Real>(g: &mut Graph<T>, h: NodeId) -> Result<NodeId, EngineError> {
    let (flat, shape) = flat_rows(g, h)?;
    let pos = g.relu(flat)?;
    let m = g.max_last(pos)?;
    let denom = safe_denominator(g, m)?;
    let out = g.div(pos, denom)?;
    g.reshape(out, &shape)
}

/// Per-sample unit-mass normalization of `[N, ...]` heatmaps, in the graph.
pub fn unit_mass_node<T: Real>(g: &mut Graph<T>, h: NodeId) -> Result<NodeId, EngineError> {
    let (flat, shape) = flat_rows(g, h)?;
    let n = shape[0];
    let a = g.abs(flat)?;
    let mass = g.sum_to(a, &[n, 1])?;
    let denom = safe_denominator(g, mass)?;
    let out = g.div(flat, denom)?;
    g.reshape(out, &shape)
}

/// Nearest-neighbour upsampling of `[..., H, W]` maps to `out_hw`.
pub fn upsample_heatmap<T: Real>(h: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>, InterpError> {
    let nd = h.ndim();
    if nd < 2 {
        return Err(InterpError::Spec(format!("heatmap needs two spatial axes, got {:?}", h.shape())));
    }
    let (sh, sw) = (h.shape()[nd - 2], h.shape()[nd - 1]);
    let (oh, ow) = out_hw;
    if oh < sh || ow < sw {
        return Err(InterpError::Spec(format!("cannot downsample {sh}×{sw} to {oh}×{ow}")));
    }
    let planes = h.len() / (sh * sw).max(1);
    let mut data = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &h.data()[p * sh * sw..(p + 1) * sh * sw];
        for y in 0..oh {
            let sy = y * sh / oh;
            for x in 0..ow {
                data.push(src[sy * sw + x * sw / ow]);
            }
        }
    }
    let mut shape = h.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(Tensor::new(shape, data)?)
}
