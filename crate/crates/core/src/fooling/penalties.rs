//! Fooling penalties as graph expressions over `[N, H, W]` heatmap nodes.

use super::FoolError;
use crate::engine::{Graph, NodeId, Op, Real, Tensor};
use crate::interpreters::{max_one_node, unit_mass_node};

/// Binary target map for Location fooling, row-major `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub h: usize,
    pub w: usize,
    pub m: Vec<f64>,
}

impl MaskSpec {
    pub fn new(h: usize, w: usize, m: Vec<f64>) -> Result<Self, FoolError> {
        if m.len() != h * w {
            return Err(FoolError::Config(format!("mask has {} entries for {h}×{w}", m.len())));
        }
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FoolError::Config("mask entries must be 0 or 1".into()));
        }
        if !m.contains(&0.0) || !m.contains(&1.0) {
            return Err(FoolError::Config("mask needs at least one 0 and one 1".into()));
        }
        Ok(Self { h, w, m })
    }

    pub fn ones(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1.0).count()
    }
}

/// One on the image frame, zero on the block `[h/7, 6h/7) × [w/7, 6w/7)`.
pub fn build_frame_mask(h: usize, w: usize) -> Result<MaskSpec, FoolError> {
    if h < 7 || w < 7 {
        return Err(FoolError::Config(format!("frame mask needs at least 7×7, got {h}×{w}")));
    }
    let inside = |v: usize, n: usize| v >= n / 7 && v < 6 * n / 7;
    let m = (0..h * w)
        .map(|i| if inside(i / w, h) && inside(i % w, w) { 0.0 } else { 1.0 })
        .collect();
    MaskSpec::new(h, w, m)
}

/// Indices of the `round(k% · d)` largest entries, ties to the lower index,
/// returned ascending.
pub fn topk_indices(h: &[f64], k_percent: f64) -> Result<Vec<usize>, FoolError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(FoolError::Config(format!("k must lie in (0, 100], got {k_percent}")));
    }
    let count = (k_percent / 100.0 * h.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let mut out = order[..count.min(h.len())].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Per-axis weighted mean of 0-based coordinates of `h` (row-major with
/// `shape`), after clamping negatives to zero.
pub fn center_of_mass(h: &[f64], shape: &[usize]) -> Result<Vec<f64>, FoolError> {
    if shape.iter().product::<usize>() != h.len() || shape.is_empty() {
        return Err(FoolError::Config(format!("heatmap of {} values is not {shape:?}", h.len())));
    }
    let mass: f64 = h.iter().map(|v| v.max(0.0)).sum();
    if !(mass > 0.0) {
        return Err(FoolError::Degenerate);
    }
    let mut center = vec![0.0; shape.len()];
    for (i, &v) in h.iter().enumerate() {
        let v = v.max(0.0);
        if v == 0.0 {
            continue;
        }
        let mut rem = i;
        for axis in (0..shape.len()).rev() {
            center[axis] += (rem % shape[axis]) as f64 * v;
            rem /= shape[axis];
        }
    }
    center.iter_mut().for_each(|c| *c /= mass);
    Ok(center)
}

fn check_spatial<T: Real>(g: &Graph<T>, h: NodeId, what: &str) -> Result<(usize, usize, usize), FoolError> {
    match *g.shape(h) {
        [n, hh, ww] => Ok((n, hh, ww)),
        ref s => Err(FoolError::Config(format!("{what}: heatmaps must be [N,H,W], got {s:?}"))),
    }
}

/// `(1/n) Σ_i (1/d) ‖max_one(h_i) − m‖²`.
pub fn location_penalty<T: Real>(g: &mut Graph<T>, h: NodeId, mask: &MaskSpec) -> Result<NodeId, FoolError> {
    let (_, hh, ww) = check_spatial(g, h, "location")?;
    if (hh, ww) != (mask.h, mask.w) {
        return Err(FoolError::Resolution { heatmap: (hh, ww), expected: (mask.h, mask.w) });
    }
    let norm = max_one_node(g, h)?;
    let m = g.constant(Tensor::from_fn(&[1, hh, ww], |i| T::lit(mask.m[i])))?;
    let diff = g.sub(norm, m)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// `(1/n) Σ_i Σ_{j ∈ P_i} |unit_mass(h_i)_j|`.
pub fn topk_penalty<T: Real>(g: &mut Graph<T>, h: NodeId, sets: &[&[usize]]) -> Result<NodeId, FoolError> {
    let (n, hh, ww) = check_spatial(g, h, "top-k")?;
    let d = hh * ww;
    if sets.len() != n {
        return Err(FoolError::MissingCache(format!("{} top-k sets for {n} samples", sets.len())));
    }
    let mut index = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        if let Some(&bad) = set.iter().find(|&&j| j >= d) {
            return Err(FoolError::Config(format!("top-k index {bad} outside heatmap of {d}")));
        }
        index.extend(set.iter().map(|&j| i * d + j));
    }
    let norm = unit_mass_node(g, h)?;
    let picked = g.apply(Op::Gather { index: index.into() }, &[norm])?;
    let a = g.abs(picked)?;
    let total = g.sum(a)?;
    Ok(g.mul_scalar(total, 1.0 / n as f64)?)
}

/// `−(1/n') Σ_i ‖C(h_i) − C_i⁰‖₁` over the `n'` samples whose frozen center
/// exists and whose current clamped map has mass. Returns the node and the
/// number of skipped samples.
pub fn centermass_penalty<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    frozen: &[Option<[f64; 2]>],
) -> Result<(NodeId, usize), FoolError> {
    let (n, hh, ww) = check_spatial(g, h, "center-mass")?;
    if frozen.len() != n {
        return Err(FoolError::MissingCache(format!("{} frozen centers for {n} samples", frozen.len())));
    }
    let pos = g.relu(h)?;
    let mass = g.sum_to(pos, &[n, 1, 1])?;
    let keep: Vec<bool> = (0..n)
        .map(|i| frozen[i].is_some() && g.value(mass).data()[i] > T::zero())
        .collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let skipped = n - kept;
    // an empty map divides by one and is masked out below
    let missing = g.constant(Tensor::from_fn(&[n, 1, 1], |i| if keep[i] { T::zero() } else { T::one() }))?;
    let denom = g.add(mass, missing)?;
    let mut dist: Option<NodeId> = None;
    for axis in 0..2 {
        let coord = g.constant(Tensor::from_fn(&[1, hh, ww], |i| {
            T::lit(if axis == 0 { (i / ww) as f64 } else { (i % ww) as f64 })
        }))?;
        let weighted = g.mul(pos, coord)?;
        let moment = g.sum_to(weighted, &[n, 1, 1])?;
        let c = g.div(moment, denom)?;
        let c0 = g.constant(Tensor::from_fn(&[n, 1, 1], |i| T::lit(frozen[i].map_or(0.0, |f| f[axis]))))?;
        let diff = g.sub(c, c0)?;
        let a = g.abs(diff)?;
        dist = Some(match dist {
            Some(d) => g.add(d, a)?,
            None => a,
        });
    }
    let weights = g.constant(Tensor::from_fn(&[n, 1, 1], |i| {
        if keep[i] {
            T::lit(-1.0 / kept as f64)
        } else {
            T::zero()
        }
    }))?;
    let weighted = g.mul(dist.expect("two axes"), weights)?;
    Ok((g.sum(weighted)?, skipped))
}

/// `(1/(2n)) Σ_i (1/d) (‖ĥ_{c1,i} − f_{c2,i}‖² + ‖f_{c1,i} − ĥ_{c2,i}‖²)` where
/// `ĥ` are the current maps after max-one normalization and `f` the frozen
/// maps, already max-one normalized by the caller.
pub fn active_penalty<T: Real>(
    g: &mut Graph<T>,
    h_c1: NodeId,
    h_c2: NodeId,
    frozen_c1: &Tensor<T>,
    frozen_c2: &Tensor<T>,
) -> Result<NodeId, FoolError> {
    let dims = check_spatial(g, h_c1, "active")?;
    if check_spatial(g, h_c2, "active")? != dims {
        return Err(FoolError::Config("active heatmaps for c1 and c2 differ in shape".into()));
    }
    for f in [frozen_c1, frozen_c2] {
        if f.shape() != g.shape(h_c1) {
            return Err(FoolError::MissingCache(format!(
                "frozen maps {:?} do not match the batch {:?}",
                f.shape(),
                g.shape(h_c1)
            )));
        }
    }
    let a = max_one_node(g, h_c1)?;
    let b = max_one_node(g, h_c2)?;
    let f2 = g.constant(frozen_c2.clone())?;
    let f1 = g.constant(frozen_c1.clone())?;
    let d1 = g.sub(a, f2)?;
    let d2 = g.sub(f1, b)?;
    let s1 = g.square(d1)?;
    let s2 = g.square(d2)?;
    let m1 = g.mean(s1)?;
    let m2 = g.mean(s2)?;
    let total = g.add(m1, m2)?;
    Ok(g.mul_scalar(total, 0.5)?)
}
