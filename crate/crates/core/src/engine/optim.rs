use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};
use super::EngineError;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← momentum·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, EngineError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(EngineError::Invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(EngineError::Invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), EngineError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(EngineError::Invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update to every parameter; each must have a gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(), EngineError> {
        for name in params.keys() {
            if !grads.contains_key(name) {
                return Err(EngineError::MissingGrad(name.clone()));
            }
        }
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(EngineError::Shape {
                    op: "sgd_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}

/// Checks `backward` against central finite differences.
///
/// `build` records a scalar objective on a fresh graph given leaf nodes for
/// `params`. Returns `max_j |g_ad − g_fd| / max(|g_fd|, 1e-8)` over every
/// coordinate of every parameter.
pub fn finite_diff_check<F>(build: F, params: &[Tensor<f64>], eps: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, EngineError>,
{
    if !(eps > 0.0) {
        return Err(EngineError::Invalid(format!("finite difference step must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let leaves = ps.iter().map(|p| g.leaf(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let leaves = params.iter().map(|p| g.leaf(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut g, &leaves)?;
    let grads = g.backward(loss, &leaves)?;

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("requested leaf").data().to_vec();
        for (j, &ad) in analytic.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + eps;
            let hi = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let lo = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            worst = worst.max((ad - fd).abs() / fd.abs().max(1e-8));
        }
    }
    Ok(worst)
}
