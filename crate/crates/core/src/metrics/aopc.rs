use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{accuracy, predictions, MetricsError};
use crate::data::{batch_iterator, Dataset};
use crate::engine::Tensor;
use crate::interpreters::{heatmaps, upsample_heatmap, InterpreterSpec};
use crate::model::{Model, Params};

/// How regions are ranked for deletion.
#[derive(Debug, Clone, Copy)]
pub enum AopcOrdering<'a> {
    /// Descending region sums of the heatmap computed with `params`.
    Heatmap { params: &'a Params<f32>, spec: &'a InterpreterSpec },
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AopcConfig {
    pub steps: usize,
    /// Side of the square regions, in input pixels.
    pub region: usize,
    pub seed: u64,
}

impl Default for AopcConfig {
    fn default() -> Self {
        Self { steps: 40, region: 2, seed: 0 }
    }
}

const AOPC_BATCH: usize = 64;

fn sample_rng(seed: u64, stream: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | i as u64);
    rng
}

/// Region scores of a `[H', W']` heatmap after nearest upsampling to the
/// input, on a `gh × gw` grid of `r × r` regions.
fn region_scores(h: &Tensor<f32>, (ih, iw): (usize, usize), r: usize) -> Result<Vec<f64>, MetricsError> {
    let up = upsample_heatmap(h, (ih, iw))?;
    let (gh, gw) = (ih / r, iw / r);
    let mut s = vec![0.0; gh * gw];
    for y in 0..gh * r {
        for x in 0..gw * r {
            s[(y / r) * gw + x / r] += up.data()[y * iw + x] as f64;
        }
    }
    Ok(s)
}

fn softmax_at(row: &[f32], c: usize) -> f64 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
    (row[c] as f64 - m).exp() / z
}

/// Mean AOPC curve of `params` on `data` as regions are replaced, in the
/// given order, by uniform noise over the data range. Entry `ℓ` is
/// `(1/(ℓ+1)) Σ_{k≤ℓ} (f_c(x⁰) − f_c(xᵏ))` on the softmax score of the class
/// predicted for the clean input, so the curve starts at 0.
pub fn aopc_curve(
    model: &Model,
    params: &Params<f32>,
    data: &Dataset,
    ordering: AopcOrdering<'_>,
    cfg: &AopcConfig,
) -> Result<Vec<f64>, MetricsError> {
    let [n, ch, ih, iw] = data.dims();
    let r = cfg.region;
    if r == 0 || r > ih || r > iw {
        return Err(MetricsError::Config(format!("region {r} does not fit a {ih}×{iw} image")));
    }
    let (gh, gw) = (ih / r, iw / r);
    if cfg.steps > gh * gw {
        return Err(MetricsError::Config(format!(
            "{} steps of {r}×{r} regions exceed the {} regions of the image",
            cfg.steps,
            gh * gw
        )));
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let (lo, hi) = data
        .images()
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let k = model.classes();
    let pred = predictions(model, params, data)?;
    let mut total = vec![0.0; cfg.steps + 1];
    let plane = ih * iw;
    for ids in batch_iterator(n, AOPC_BATCH, 0, false) {
        let (x0, _) = data.batch::<f32>(&ids);
        let cls: Vec<usize> = ids.iter().map(|&i| pred[i]).collect();
        let orders: Vec<Vec<usize>> = match ordering {
            AopcOrdering::Heatmap { params: src, spec } => {
                let maps = heatmaps(model, src, &x0, &cls, spec)?;
                let mut out = Vec::with_capacity(ids.len());
                for j in 0..ids.len() {
                    let s = region_scores(&maps.index_outer(j), (ih, iw), r)?;
                    let mut o: Vec<usize> = (0..s.len()).collect();
                    o.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                    out.push(o);
                }
                out
            }
            AopcOrdering::Random => ids
                .iter()
                .map(|&i| {
                    let mut o: Vec<usize> = (0..gh * gw).collect();
                    o.shuffle(&mut sample_rng(cfg.seed, 1, i));
                    o
                })
                .collect(),
        };
        // one noise image per sample, shared by every ordering
        let noise: Vec<Vec<f32>> = ids
            .iter()
            .map(|&i| {
                let mut rng = sample_rng(cfg.seed, 0, i);
                (0..ch * plane).map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect()
            })
            .collect();
        let mut x = x0.clone();
        let mut base = vec![0.0; ids.len()];
        let mut acc = vec![0.0; ids.len()];
        for step in 0..=cfg.steps {
            if step > 0 {
                let per = ch * plane;
                let data = x.data_mut();
                for (j, order) in orders.iter().enumerate() {
                    let reg = order[step - 1];
                    let (ry, rx) = (reg / gw * r, reg % gw * r);
                    for c in 0..ch {
                        for y in ry..ry + r {
                            for xx in rx..rx + r {
                                let o = c * plane + y * iw + xx;
                                data[j * per + o] = noise[j][o];
                            }
                        }
                    }
                }
            }
            let logits = model.logits(params, &x)?;
            for (j, row) in logits.data().chunks(k).enumerate() {
                let p = softmax_at(row, cls[j]);
                if step == 0 {
                    base[j] = p;
                }
                acc[j] += base[j] - p;
                total[step] += acc[j] / (step + 1) as f64;
            }
        }
    }
    Ok(total.into_iter().map(|v| v / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    /// Noise scale as a multiple of each tensor's RMS.
    pub sigma: f64,
    pub accuracy: f64,
}

/// Top-1 accuracy after adding `N(0, (σ·rms(p))²)` noise to every parameter
/// tensor `p`, averaged over `trials` draws per σ.
pub fn gaussian_perturb_probe(
    model: &Model,
    params: &Params<f32>,
    data: &Dataset,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<ProbePoint>, MetricsError> {
    if sigmas.is_empty() || trials == 0 {
        return Err(MetricsError::Config("need at least one σ and one trial".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(MetricsError::Config(format!("σ must be finite and ≥ 0, got {s}")));
    }
    let rms: Vec<f64> = params
        .values()
        .map(|t| (t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.len().max(1) as f64).sqrt())
        .collect();
    let clean = accuracy(model, params, data, 1, None)?;
    let mut out = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if sigma == 0.0 {
            out.push(ProbePoint { sigma, accuracy: clean });
            continue;
        }
        let mut sum = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let noisy: Params<f32> = params
                .iter()
                .zip(&rms)
                .map(|((name, t), &s)| {
                    let scale = sigma * s;
                    let data = t.data().iter().map(|&v| v + (scale * rng.sample::<f64, _>(StandardNormal)) as f32);
                    (name.clone(), Tensor::new(t.shape().to_vec(), data.collect()).expect("same shape"))
                })
                .collect();
            sum += accuracy(model, &noisy, data, 1, None)?;
        }
        out.push(ProbePoint { sigma, accuracy: sum / trials as f64 });
    }
    Ok(out)
}
