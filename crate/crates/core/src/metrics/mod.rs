//! Fooling success rates, per-sample test losses, accuracy, AOPC and weight
//! perturbation probes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_iterator, Dataset};
use crate::engine::EngineError;
use crate::fooling::{argmax, center_of_mass, dataset_heatmaps, topk_indices, FoolError, FoolMethod, MaskSpec};
use crate::interpreters::{normalize_heatmap, InterpError, InterpreterSpec, Normalize};
use crate::model::{Model, ModelError, Params};

mod aopc;
mod report;

pub use aopc::{aopc_curve, gaussian_perturb_probe, AopcConfig, AopcOrdering, ProbePoint};
pub use report::{read_records_csv, write_records_csv, FsrTable, Report};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    Empty,
    #[error("spearman correlation is undefined: {0}")]
    Undefined(String),
    #[error("invalid metric settings: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Fool(#[from] FoolError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Success interval `R_f = [lo, hi]` for one fooling method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsrSpec {
    pub method: FoolMethod,
    pub lo: f64,
    pub hi: f64,
}

impl FsrSpec {
    pub fn new(method: FoolMethod, lo: f64, hi: f64) -> Result<Self, MetricsError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(MetricsError::Config(format!("bad success interval [{lo}, {hi}]")));
        }
        Ok(Self { method, lo, hi })
    }

    pub fn default_for(method: FoolMethod) -> Self {
        let (lo, hi) = match method {
            FoolMethod::Location => (0.0, 0.2),
            FoolMethod::TopK => (0.0, 0.3),
            FoolMethod::CenterMass => (0.1, 1.0),
            FoolMethod::Active => (0.5, 2.0),
        };
        Self { method, lo, hi }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.lo <= t && t <= self.hi
    }
}

impl fmt::Display for FsrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}, {}]", self.method, self.lo, self.hi)
    }
}

/// One test loss. Active records are keyed `sample@class`, passive ones by
/// the sample index alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestLossRecord {
    pub sample_id: String,
    pub t: f64,
    pub in_range: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestLosses {
    pub records: Vec<TestLossRecord>,
    /// Samples dropped because a heatmap had nothing to normalize or rank.
    pub excluded: usize,
}

/// Percentage of records whose `t` lies in the interval.
pub fn fsr(records: &[TestLossRecord], spec: &FsrSpec) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = records.iter().filter(|r| spec.contains(r.t)).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::Undefined(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::Undefined("non-finite value".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricsError::Undefined("constant input".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `(1/d) ‖max_one(h) − m‖²`; `None` for a map with no positive entry.
pub fn location_loss(h: &[f64], mask: &MaskSpec) -> Option<f64> {
    let (n, empty) = normalize_heatmap(h, Normalize::MaxOne);
    if empty || h.len() != mask.m.len() {
        return None;
    }
    let s: f64 = n.iter().zip(&mask.m).map(|(a, b)| (a - b) * (a - b)).sum();
    Some(s / h.len() as f64)
}

/// `Σ_{j∈P} |unit_mass(h)_j|`; `None` for an all-zero map.
pub fn topk_loss(h: &[f64], set: &[usize]) -> Option<f64> {
    let (n, empty) = normalize_heatmap(h, Normalize::UnitMass);
    if empty {
        return None;
    }
    set.iter().map(|&j| n.get(j).map(|v| v.abs())).sum()
}

/// L1 shift between the centers of mass of two `h × w` maps, divided by the
/// grid diagonal.
pub fn centermass_loss(fooled: &[f64], original: &[f64], (h, w): (usize, usize)) -> Option<f64> {
    let a = center_of_mass(fooled, &[h, w]).ok()?;
    let b = center_of_mass(original, &[h, w]).ok()?;
    let diag = ((h * h + w * w) as f64).sqrt();
    Some(((a[0] - b[0]).abs() + (a[1] - b[1]).abs()) / diag)
}

/// `s(c, c') − s(c, c)` where `s` ranks the fooled map of class `c` against
/// an original map.
pub fn active_loss(fooled_c: &[f64], original_other: &[f64], original_c: &[f64]) -> Option<f64> {
    let cross = spearman(fooled_c, original_other).ok()?;
    let same = spearman(fooled_c, original_c).ok()?;
    Some(cross - same)
}

/// Settings for [`test_losses`].
#[derive(Debug, Clone)]
pub enum TestLossExtras {
    Location(MaskSpec),
    TopK { k_percent: f64 },
    CenterMass,
    Active { c1: usize, c2: usize },
}

impl TestLossExtras {
    pub fn method(&self) -> FoolMethod {
        match self {
            TestLossExtras::Location(_) => FoolMethod::Location,
            TestLossExtras::TopK { .. } => FoolMethod::TopK,
            TestLossExtras::CenterMass => FoolMethod::CenterMass,
            TestLossExtras::Active { .. } => FoolMethod::Active,
        }
    }
}

/// Per-sample test losses of `fooled` against `original` on `data`. Passive
/// methods explain each sample's label; Active explains `c1` and `c2` on
/// every (composite) sample and yields two records per sample.
pub fn test_losses(
    model: &Model,
    original: &Params<f32>,
    fooled: &Params<f32>,
    data: &Dataset,
    spec: &InterpreterSpec,
    extras: &TestLossExtras,
    range: &FsrSpec,
) -> Result<TestLosses, MetricsError> {
    if range.method != extras.method() {
        return Err(MetricsError::Config(format!("interval for {} used with {}", range.method, extras.method())));
    }
    let mut values: Vec<(String, Option<f64>)> = Vec::new();
    match extras {
        TestLossExtras::Active { c1, c2 } => {
            let n = data.len();
            let (f1, _) = dataset_heatmaps(model, fooled, data, &vec![*c1; n], spec)?;
            let (f2, _) = dataset_heatmaps(model, fooled, data, &vec![*c2; n], spec)?;
            let (o1, _) = dataset_heatmaps(model, original, data, &vec![*c1; n], spec)?;
            let (o2, _) = dataset_heatmaps(model, original, data, &vec![*c2; n], spec)?;
            for i in 0..n {
                values.push((format!("{i}@{c1}"), active_loss(&f1[i], &o2[i], &o1[i])));
                values.push((format!("{i}@{c2}"), active_loss(&f2[i], &o1[i], &o2[i])));
            }
        }
        passive => {
            let labels = data
                .labels()
                .ok_or_else(|| MetricsError::Config("passive test losses need labels".into()))?;
            let (cur, res) = dataset_heatmaps(model, fooled, data, labels, spec)?;
            let t: Vec<Option<f64>> = match passive {
                TestLossExtras::Location(mask) => {
                    if (mask.h, mask.w) != res {
                        return Err(FoolError::Resolution { heatmap: res, expected: (mask.h, mask.w) }.into());
                    }
                    cur.iter().map(|h| location_loss(h, mask)).collect()
                }
                TestLossExtras::TopK { k_percent } => {
                    let (orig, _) = dataset_heatmaps(model, original, data, labels, spec)?;
                    let mut out = Vec::with_capacity(cur.len());
                    for (h, h0) in cur.iter().zip(&orig) {
                        out.push(topk_loss(h, &topk_indices(h0, *k_percent)?));
                    }
                    out
                }
                _ => {
                    let (orig, _) = dataset_heatmaps(model, original, data, labels, spec)?;
                    cur.iter().zip(&orig).map(|(h, h0)| centermass_loss(h, h0, res)).collect()
                }
            };
            values.extend(t.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)));
        }
    }
    let mut records = Vec::with_capacity(values.len());
    let mut excluded = 0;
    for (sample_id, t) in values {
        match t {
            Some(t) => records.push(TestLossRecord { sample_id, t, in_range: range.contains(t) }),
            None => excluded += 1,
        }
    }
    Ok(TestLosses { records, excluded })
}

/// Mean Spearman score `s(a, b)` between fooled maps of class `a` and
/// original maps of class `b` over `data`, skipping undefined pairs.
pub fn mean_swap_score(
    model: &Model,
    original: &Params<f32>,
    fooled: &Params<f32>,
    data: &Dataset,
    spec: &InterpreterSpec,
    a: usize,
    b: usize,
) -> Result<f64, MetricsError> {
    let n = data.len();
    let (fa, _) = dataset_heatmaps(model, fooled, data, &vec![a; n], spec)?;
    let (ob, _) = dataset_heatmaps(model, original, data, &vec![b; n], spec)?;
    let scores: Vec<f64> = fa.iter().zip(&ob).filter_map(|(x, y)| spearman(x, y).ok()).collect();
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

const EVAL_BATCH: usize = 128;

/// Percentage of samples whose label is among the `top_k` largest logits,
/// optionally restricted to one class.
pub fn accuracy(
    model: &Model,
    params: &Params<f32>,
    data: &Dataset,
    top_k: usize,
    class_filter: Option<usize>,
) -> Result<f64, MetricsError> {
    let labels = data.labels().ok_or_else(|| MetricsError::Config("accuracy needs labels".into()))?;
    let k = model.classes();
    if top_k == 0 || top_k > k {
        return Err(MetricsError::Config(format!("top-{top_k} with {k} classes")));
    }
    let ids: Vec<usize> = match class_filter {
        Some(c) => {
            let ids = data.class_indices(c);
            if ids.is_empty() {
                return Err(MetricsError::Config(format!("class {c} has no samples")));
            }
            ids
        }
        None => (0..data.len()).collect(),
    };
    if ids.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<f32>(chunk);
        let logits = model.logits(params, &x)?;
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            let y = labels[i];
            // rank of the label with ties to the lower index
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
                .count();
            if above < top_k {
                hits += 1;
            }
        }
    }
    Ok(100.0 * hits as f64 / ids.len() as f64)
}

/// Predicted classes for a whole dataset.
pub fn predictions(model: &Model, params: &Params<f32>, data: &Dataset) -> Result<Vec<usize>, MetricsError> {
    let k = model.classes();
    let mut out = Vec::with_capacity(data.len());
    for ids in batch_iterator(data.len(), EVAL_BATCH, 0, false) {
        let (x, _) = data.batch::<f32>(&ids);
        let logits = model.logits(params, &x)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}
