//! Adversarial fine-tuning: cross-entropy plus λ times a penalty on the
//! model's own heatmaps, minimized with momentum SGD.

mod penalties;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{batch_iterator, BatchIter, Dataset};
use crate::engine::{EngineError, Graph, NodeId, Real, Sgd, Tensor};
use crate::interpreters::{heatmap_node, heatmaps, normalize_heatmap, InterpError, InterpreterSpec, Normalize};
use crate::model::{Model, ModelError, ParamNodes, Params};

pub use penalties::{
    active_penalty, build_frame_mask, center_of_mass, centermass_penalty, location_penalty, topk_indices,
    topk_penalty, MaskSpec,
};

#[derive(Debug, Error)]
pub enum FoolError {
    #[error("invalid fooling configuration: {0}")]
    Config(String),
    #[error("heatmap resolution {heatmap:?} does not match mask {expected:?}")]
    Resolution { heatmap: (usize, usize), expected: (usize, usize) },
    #[error("frozen cache: {0}")]
    MissingCache(String),
    #[error("heatmap has no positive mass")]
    Degenerate,
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// Parameters before the failing step.
        last_good: Box<Params<f32>>,
    },
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Learning rate over the iterations of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from `lr` at the first iteration towards zero.
    Linear,
}

impl LrSchedule {
    pub fn lr_at(self, lr: f64, iteration: usize, iterations: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Linear => lr * (1.0 - iteration as f64 / iterations.max(1) as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FoolMethod {
    Location,
    TopK,
    CenterMass,
    Active,
}

impl FoolMethod {
    pub const PASSIVE: [FoolMethod; 3] = [FoolMethod::Location, FoolMethod::TopK, FoolMethod::CenterMass];

    /// Default `(λ, lr)`. The center-mass penalty is unbounded and needs a
    /// much gentler push than the others.
    pub fn default_strength(self) -> (f64, f64) {
        match self {
            FoolMethod::Location | FoolMethod::TopK => (20.0, 0.01),
            FoolMethod::CenterMass => (0.2, 0.01),
            FoolMethod::Active => (5.0, 0.005),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FoolMethod::Location => "location",
            FoolMethod::TopK => "topk",
            FoolMethod::CenterMass => "centermass",
            FoolMethod::Active => "active",
        }
    }
}

impl fmt::Display for FoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FoolMethod {
    type Err = FoolError;

    fn from_str(s: &str) -> Result<Self, FoolError> {
        match s {
            "location" => Ok(FoolMethod::Location),
            "topk" => Ok(FoolMethod::TopK),
            "centermass" => Ok(FoolMethod::CenterMass),
            "active" => Ok(FoolMethod::Active),
            _ => Err(FoolError::Config(format!("unknown fooling method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoolingConfig {
    pub method: FoolMethod,
    pub interpreter: InterpreterSpec,
    pub lambda: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Share of heatmap positions in each Top-k set, in percent.
    pub k_percent: f64,
    /// Location target; `None` builds the frame mask at heatmap resolution.
    pub mask: Option<MaskSpec>,
    pub c1: usize,
    pub c2: usize,
    pub seed: u64,
}

impl FoolingConfig {
    /// Defaults tuned for SmallNet on 28×28 glyphs; `λ` and `lr` depend on
    /// the method. The rate decays linearly, which keeps the final iterate's
    /// accuracy from jittering by a few points.
    pub fn new(method: FoolMethod, interpreter: InterpreterSpec) -> Self {
        let (lambda, lr) = method.default_strength();
        Self {
            method,
            interpreter,
            lambda,
            lr,
            schedule: LrSchedule::Linear,
            momentum: 0.9,
            iterations: 300,
            batch_size: 32,
            k_percent: 10.0,
            mask: None,
            c1: 0,
            c2: 1,
            seed: 0,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<(), FoolError> {
        self.interpreter.validate()?;
        let bad = |m: String| Err(FoolError::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.method == FoolMethod::TopK && !(self.k_percent > 0.0 && self.k_percent < 100.0) {
            return bad(format!("k must lie in (0, 100), got {}", self.k_percent));
        }
        if self.method == FoolMethod::Active {
            if self.c1 == self.c2 {
                return bad("active fooling needs c1 != c2".into());
            }
            if self.c1 >= classes || self.c2 >= classes {
                return bad(format!("classes {} and {} must be below {classes}", self.c1, self.c2));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_fool: f64,
    /// Accuracy (percent) of the pre-step model on the classification batch.
    pub train_acc_probe: f64,
}

/// Penalty state computed once from the frozen parameters `w₀`.
#[derive(Debug, Clone)]
enum Frozen {
    Location(MaskSpec),
    TopK(Vec<Vec<usize>>),
    CenterMass(Vec<Option<[f64; 2]>>),
    /// Max-one normalized `h_{c1}(w₀)` and `h_{c2}(w₀)` per fool-set sample.
    Active(Vec<Vec<f64>>, Vec<Vec<f64>>),
}

const CACHE_BATCH: usize = 64;

/// Flat heatmap rows plus the heatmap resolution.
pub type HeatmapRows = (Vec<Vec<f64>>, (usize, usize));

/// Numeric heatmaps of a whole dataset, in sample order, as flat rows.
pub fn dataset_heatmaps(
    model: &Model,
    params: &Params<f32>,
    data: &Dataset,
    classes: &[usize],
    spec: &InterpreterSpec,
) -> Result<HeatmapRows, FoolError> {
    let [n, _, h, w] = data.dims();
    let res = spec.resolution(model, h, w)?;
    let mut rows = Vec::with_capacity(n);
    for ids in batch_iterator(n, CACHE_BATCH, 0, false) {
        let (x, _) = data.batch::<f32>(&ids);
        let cls: Vec<usize> = ids.iter().map(|&i| classes[i]).collect();
        let maps = heatmaps(model, params, &x, &cls, spec)?;
        let d = res.0 * res.1;
        rows.extend(maps.data().chunks(d).map(|c| c.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
    }
    Ok((rows, res))
}

/// Top-k sets `P_{i,k}` of every sample's own-label heatmap under `params0`.
pub fn compute_topk_sets(
    model: &Model,
    params0: &Params<f32>,
    data: &Dataset,
    spec: &InterpreterSpec,
    k_percent: f64,
) -> Result<Vec<Vec<usize>>, FoolError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(FoolError::Config(format!("k must lie in (0, 100], got {k_percent}")));
    }
    let labels = labels_of(data)?;
    let (rows, _) = dataset_heatmaps(model, params0, data, &labels, spec)?;
    rows.iter().map(|r| topk_indices(r, k_percent)).collect()
}

/// Frozen centers of mass, `None` where the clamped map is empty.
pub fn compute_frozen_centers(
    model: &Model,
    params0: &Params<f32>,
    data: &Dataset,
    spec: &InterpreterSpec,
) -> Result<Vec<Option<[f64; 2]>>, FoolError> {
    let labels = labels_of(data)?;
    let (rows, (h, w)) = dataset_heatmaps(model, params0, data, &labels, spec)?;
    Ok(rows
        .iter()
        .map(|r| center_of_mass(r, &[h, w]).ok().map(|c| [c[0], c[1]]))
        .collect())
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>, FoolError> {
    data.labels()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| FoolError::Config("dataset needs labels".into()))
}

fn max_one_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter().map(|r| normalize_heatmap(&r, Normalize::MaxOne).0).collect()
}

fn prepare(
    model: &Model,
    params0: &Params<f32>,
    data: &Dataset,
    fool: Option<&Dataset>,
    cfg: &FoolingConfig,
) -> Result<Frozen, FoolError> {
    let spec = &cfg.interpreter;
    Ok(match cfg.method {
        FoolMethod::Location => {
            let [_, _, h, w] = data.dims();
            let res = spec.resolution(model, h, w)?;
            let mask = match &cfg.mask {
                Some(m) => m.clone(),
                None => build_frame_mask(res.0, res.1)?,
            };
            if (mask.h, mask.w) != res {
                return Err(FoolError::Resolution { heatmap: res, expected: (mask.h, mask.w) });
            }
            Frozen::Location(mask)
        }
        FoolMethod::TopK => Frozen::TopK(compute_topk_sets(model, params0, data, spec, cfg.k_percent)?),
        FoolMethod::CenterMass => Frozen::CenterMass(compute_frozen_centers(model, params0, data, spec)?),
        FoolMethod::Active => {
            let fool = fool.ok_or_else(|| FoolError::Config("active fooling needs the composite set".into()))?;
            let n = fool.len();
            let (h1, _) = dataset_heatmaps(model, params0, fool, &vec![cfg.c1; n], spec)?;
            let (h2, _) = dataset_heatmaps(model, params0, fool, &vec![cfg.c2; n], spec)?;
            Frozen::Active(max_one_rows(h1), max_one_rows(h2))
        }
    })
}

/// Penalty on the batch `ids` of `data` (passive) or of the fool set (active).
#[allow(clippy::too_many_arguments)]
fn penalty_node(
    g: &mut Graph<f32>,
    model: &Model,
    params: &ParamNodes,
    batch: &Tensor<f32>,
    ids: &[usize],
    labels: &[usize],
    frozen: &Frozen,
    cfg: &FoolingConfig,
) -> Result<NodeId, FoolError> {
    let spec = &cfg.interpreter;
    match frozen {
        Frozen::Active(f1, f2) => {
            let n = ids.len();
            let x = g.leaf(batch.clone())?;
            let both = g.concat(&[x, x], 0)?;
            let classes: Vec<usize> = std::iter::repeat_n(cfg.c1, n).chain(std::iter::repeat_n(cfg.c2, n)).collect();
            let h = heatmap_node(g, model, params, both, &classes, spec)?;
            let h1 = g.slice(h, 0, 0, n)?;
            let h2 = g.slice(h, 0, n, 2 * n)?;
            let shape = g.shape(h1).to_vec();
            let gather = |f: &Vec<Vec<f64>>| -> Result<Tensor<f32>, FoolError> {
                let flat: Vec<f64> = ids.iter().flat_map(|&i| f[i].iter().copied()).collect();
                Ok(Tensor::from_f64(&shape, &flat)?)
            };
            active_penalty(g, h1, h2, &gather(f1)?, &gather(f2)?)
        }
        _ => {
            let x = g.leaf(batch.clone())?;
            let h = heatmap_node(g, model, params, x, labels, spec)?;
            match frozen {
                Frozen::Location(mask) => location_penalty(g, h, mask),
                Frozen::TopK(sets) => {
                    let picked: Vec<&[usize]> = ids.iter().map(|&i| sets[i].as_slice()).collect();
                    topk_penalty(g, h, &picked)
                }
                Frozen::CenterMass(centers) => {
                    let picked: Vec<Option<[f64; 2]>> = ids.iter().map(|&i| centers[i]).collect();
                    Ok(centermass_penalty(g, h, &picked)?.0)
                }
                Frozen::Active(..) => unreachable!(),
            }
        }
    }
}

/// Endless stream of shuffled batches, reshuffled every epoch.
struct Batches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    current: BatchIter,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Self { n, size, seed, epoch: 0, current: batch_iterator(n, size, seed, true) }
    }

    fn next_batch(&mut self) -> (Vec<usize>, bool) {
        if let Some(b) = self.current.next() {
            return (b, false);
        }
        self.epoch += 1;
        self.current = batch_iterator(self.n, self.size, self.seed.wrapping_add(self.epoch), true);
        (self.current.next().unwrap_or_default(), true)
    }
}

fn batch_accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

/// Index of the largest entry; ties to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fine-tunes `params0` on `L_C + λ L_F`. `fool` is the composite set and is
/// required for active fooling only; passive penalties use the
/// classification batch. `on_epoch` sees the parameters after each pass over
/// `data`.
pub fn finetune_with(
    model: &Model,
    params0: &Params<f32>,
    data: &Dataset,
    fool: Option<&Dataset>,
    cfg: &FoolingConfig,
    mut on_epoch: impl FnMut(usize, &Params<f32>),
) -> Result<(Params<f32>, Vec<LogRow>), FoolError> {
    cfg.validate(model.classes())?;
    model.check_params(params0)?;
    let labels = labels_of(data)?;
    if data.is_empty() {
        return Err(FoolError::Config("empty training set".into()));
    }
    let frozen = if cfg.lambda > 0.0 { Some(prepare(model, params0, data, fool, cfg)?) } else { None };
    let mut params = params0.clone();
    let mut opt = Sgd::<f32>::new(cfg.lr, cfg.momentum)?;
    let mut cls_batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut fool_batches = fool.map(|f| Batches::new(f.len(), cfg.batch_size, cfg.seed ^ 0x5EED_F001));
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (ids, new_epoch) = cls_batches.next_batch();
        if new_epoch {
            on_epoch(cls_batches.epoch as usize, &params);
        }
        let step = (|| -> Result<(LogRow, BTreeMap<String, Tensor<f32>>), FoolError> {
            let mut g = Graph::<f32>::new();
            let pn = model.bind(&mut g, &params)?;
            let (x, _) = data.batch::<f32>(&ids);
            let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let xn = g.constant(x.clone())?;
            let trace = model.forward(&mut g, &pn, xn)?;
            let acc = batch_accuracy(g.value(trace.logits), &y);
            let ce = g.softmax_cross_entropy(trace.logits, &y)?;
            let (total, fool_value) = match &frozen {
                Some(fz) => {
                    let pen = match (fz, fool, fool_batches.as_mut()) {
                        (Frozen::Active(..), Some(fd), Some(fb)) => {
                            let (fids, _) = fb.next_batch();
                            let (fx, _) = fd.batch::<f32>(&fids);
                            penalty_node(&mut g, model, &pn, &fx, &fids, &[], fz, cfg)?
                        }
                        _ => penalty_node(&mut g, model, &pn, &x, &ids, &y, fz, cfg)?,
                    };
                    let scaled = g.mul_scalar(pen, cfg.lambda)?;
                    (g.add(ce, scaled)?, g.value(pen).item().as_f64())
                }
                None => (ce, 0.0),
            };
            let leaves: Vec<NodeId> = pn.values().copied().collect();
            let grads = g.backward(total, &leaves)?;
            let mut named = BTreeMap::new();
            for (name, id) in &pn {
                let gr = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*id)));
                if !gr.all_finite() {
                    return Err(EngineError::NonFinite("parameter gradient").into());
                }
                named.insert(name.clone(), gr);
            }
            let row = LogRow {
                iteration: it,
                loss_total: g.value(total).item().as_f64(),
                loss_ce: g.value(ce).item().as_f64(),
                loss_fool: fool_value,
                train_acc_probe: acc,
            };
            Ok((row, named))
        })();
        let (row, grads) = match step {
            Ok(v) => v,
            Err(e) if non_finite(&e) => {
                return Err(FoolError::Diverged { iteration: it, reason: e.to_string(), last_good: Box::new(params) })
            }
            Err(e) => return Err(e),
        };
        if !row.loss_total.is_finite() {
            return Err(FoolError::Diverged {
                iteration: it,
                reason: "non-finite loss".into(),
                last_good: Box::new(params),
            });
        }
        let before = params.clone();
        opt.set_lr(cfg.schedule.lr_at(cfg.lr, it, cfg.iterations))?;
        opt.step(&mut params, &grads)?;
        if params.values().any(|p| !p.all_finite()) {
            return Err(FoolError::Diverged {
                iteration: it,
                reason: "non-finite parameters".into(),
                last_good: Box::new(before),
            });
        }
        log.push(row);
    }
    Ok((params, log))
}

fn non_finite(e: &FoolError) -> bool {
    let engine = |e: &EngineError| matches!(e, EngineError::NonFinite(_));
    let model = |e: &ModelError| matches!(e, ModelError::Engine(x) if engine(x));
    match e {
        FoolError::Engine(x) => engine(x),
        FoolError::Model(x) => model(x),
        FoolError::Interp(InterpError::Engine(x)) => engine(x),
        FoolError::Interp(InterpError::Model(x)) => model(x),
        _ => false,
    }
}

pub fn finetune(
    model: &Model,
    params0: &Params<f32>,
    data: &Dataset,
    fool: Option<&Dataset>,
    cfg: &FoolingConfig,
) -> Result<(Params<f32>, Vec<LogRow>), FoolError> {
    finetune_with(model, params0, data, fool, cfg, |_, _| {})
}

/// Plain cross-entropy training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains from `params` for whole epochs of cross-entropy SGD; the same loop
/// as [`finetune`] with λ = 0.
pub fn train_classifier(
    model: &Model,
    params: &Params<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Params<f32>, Vec<LogRow>), FoolError> {
    let iterations = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
    let target = model.desc().default_target().unwrap_or_default().to_string();
    let fool = FoolingConfig {
        lambda: 0.0,
        lr: cfg.lr,
        schedule: LrSchedule::Constant,
        momentum: cfg.momentum,
        iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..FoolingConfig::new(FoolMethod::Location, InterpreterSpec::new(crate::interpreters::InterpreterKind::GradCam, target))
    };
    finetune(model, params, data, None, &fool)
}

#[cfg(test)]
mod tests;
