//! Layer-wise relevance propagation: ε-rule on dense layers, αβ-rule on
//! convolutions, winner-takes-all through max pooling and proportional
//! redistribution through average pooling.
//!
//! Denominators are the layer's full pre-activation (bias included), so
//! bias terms absorb their share of relevance.

use super::{class_score_mask, InterpError, InterpreterSpec};
use crate::engine::{EngineError, Graph, NodeId, Op, Real};
use crate::model::{LayerKind, Model, ParamNodes, Trace};

/// `z + ε` where `z > 0`, else `z − ε`; never zero.
fn stabilize<T: Real>(g: &mut Graph<T>, z: NodeId, eps: f64) -> Result<NodeId, EngineError> {
    let pos = g.apply(Op::Step, &[z])?;
    let sign = g.mul_scalar(pos, 2.0 * eps)?;
    let shift = g.add_scalar(sign, -eps)?;
    g.add(z, shift)
}

fn split_sign<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, NodeId), EngineError> {
    let p = g.relu(x)?;
    let n = g.sub(x, p)?;
    Ok((p, n))
}

fn conv_t<T: Real>(
    g: &mut Graph<T>,
    s: NodeId,
    w: NodeId,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<NodeId, EngineError> {
    g.apply(Op::ConvTranspose2d { stride, pad, in_hw }, &[s, w])
}

/// Relevance at the output of layer `stop` (or at the network input when `None`),
/// with the seed `R = logit_c` on each sample's class.
pub(super) fn relevance<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    params: &ParamNodes,
    trace: &Trace,
    classes: &[usize],
    stop: Option<usize>,
    spec: &InterpreterSpec,
) -> Result<NodeId, InterpError> {
    let eps = spec.epsilon;
    let mask = class_score_mask(g, trace.logits, classes)?;
    let mut r = g.mul(trace.logits, mask)?;
    let layers = &model.desc().layers;
    // LRP_T reads relevance at the target layer's output
    let last = stop.map_or(0, |s| s + 1);
    for i in (last..layers.len()).rev() {
        let layer = &layers[i];
        let lt = trace.layers[i];
        r = match &layer.kind {
            LayerKind::Relu => r,
            LayerKind::Dense { .. } => {
                let w = params[&format!("{}.weight", layer.name)];
                let denom = stabilize(g, lt.output, eps)?;
                let s = g.div(r, denom)?;
                let wt = g.transpose(w)?;
                let c = g.matmul(s, wt)?;
                let rin = g.mul(lt.input, c)?;
                // undo the flattening of a spatial input
                let prev = if i == 0 { trace.input } else { trace.layers[i - 1].output };
                let shape = g.shape(prev).to_vec();
                g.reshape(rin, &shape)?
            }
            LayerKind::Conv { stride, pad, .. } => {
                let w = params[&format!("{}.weight", layer.name)];
                let b = params[&format!("{}.bias", layer.name)];
                let x = lt.input;
                let xs = g.shape(x).to_vec();
                let in_hw = (xs[2], xs[3]);
                let o = g.shape(w)[0];
                let (xp, xn) = split_sign(g, x)?;
                let (wp, wn) = split_sign(g, w)?;
                let (bp, bn) = split_sign(g, b)?;
                let bp = g.reshape(bp, &[1, o, 1, 1])?;
                let bn = g.reshape(bn, &[1, o, 1, 1])?;
                // positive contributions: x⁺w⁺ + x⁻w⁻ (+ b⁺)
                let pp = g.conv2d(xp, wp, *stride, *pad)?;
                let nn = g.conv2d(xn, wn, *stride, *pad)?;
                let zp = g.add(pp, nn)?;
                let zp = g.add(zp, bp)?;
                let zp = g.add_scalar(zp, eps)?;
                let sp = g.div(r, zp)?;
                let a1 = conv_t(g, sp, wp, *stride, *pad, in_hw)?;
                let a1 = g.mul(xp, a1)?;
                let a2 = conv_t(g, sp, wn, *stride, *pad, in_hw)?;
                let a2 = g.mul(xn, a2)?;
                let ra = g.add(a1, a2)?;
                let ra = g.mul_scalar(ra, spec.alpha)?;
                if spec.beta == 0.0 {
                    ra
                } else {
                    let pn = g.conv2d(xp, wn, *stride, *pad)?;
                    let np = g.conv2d(xn, wp, *stride, *pad)?;
                    let zn = g.add(pn, np)?;
                    let zn = g.add(zn, bn)?;
                    let zn = g.add_scalar(zn, -eps)?;
                    let sn = g.div(r, zn)?;
                    let b1 = conv_t(g, sn, wn, *stride, *pad, in_hw)?;
                    let b1 = g.mul(xp, b1)?;
                    let b2 = conv_t(g, sn, wp, *stride, *pad, in_hw)?;
                    let b2 = g.mul(xn, b2)?;
                    let rb = g.add(b1, b2)?;
                    let rb = g.mul_scalar(rb, spec.beta)?;
                    g.sub(ra, rb)?
                }
            }
            LayerKind::MaxPool { .. } => {
                let index = match g.node(lt.output).op() {
                    Op::MaxPool2d { index, .. } => index.clone(),
                    _ => unreachable!("maxpool layer records a maxpool node"),
                };
                let in_shape = g.shape(lt.input).to_vec();
                g.apply(Op::Scatter { index, in_shape }, &[r])?
            }
            LayerKind::AvgPool { k } => {
                let denom = stabilize(g, lt.output, eps)?;
                let s = g.div(r, denom)?;
                let up = g.upsample(s, *k)?;
                let up = g.mul_scalar(up, 1.0 / (k * k) as f64)?;
                g.mul(lt.input, up)?
            }
            LayerKind::Gap => {
                let xs = g.shape(lt.input).to_vec();
                let denom = stabilize(g, lt.output, eps)?;
                let s = g.div(r, denom)?;
                let s = g.reshape(s, &[xs[0], xs[1], 1, 1])?;
                let s = g.mul_scalar(s, 1.0 / (xs[2] * xs[3]) as f64)?;
                g.mul(lt.input, s)?
            }
        };
    }
    Ok(r)
}
