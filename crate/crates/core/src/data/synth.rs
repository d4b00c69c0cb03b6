//! Procedural 10-class glyph images: anti-aliased strokes of a random size,
//! position, thickness and intensity over a cluttered dark background of
//! soft blobs, faint distractor strokes and pixel texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};
use crate::engine::Tensor;

pub const GLYPH_NAMES: [&str; 10] =
    ["ring", "vbar", "hbar", "plus", "cross", "square", "triangle", "ell", "tee", "zed"];

type Seg = ((f64, f64), (f64, f64));

/// Stroke segments in the unit box, `(x, y)` with y pointing down.
fn strokes(class: usize) -> Vec<Seg> {
    match class {
        1 => vec![((0.5, 0.0), (0.5, 1.0))],
        2 => vec![((0.0, 0.5), (1.0, 0.5))],
        3 => vec![((0.5, 0.0), (0.5, 1.0)), ((0.0, 0.5), (1.0, 0.5))],
        4 => vec![((0.0, 0.0), (1.0, 1.0)), ((1.0, 0.0), (0.0, 1.0))],
        5 => vec![
            ((0.0, 0.0), (1.0, 0.0)),
            ((1.0, 0.0), (1.0, 1.0)),
            ((1.0, 1.0), (0.0, 1.0)),
            ((0.0, 1.0), (0.0, 0.0)),
        ],
        6 => vec![((0.5, 0.0), (1.0, 1.0)), ((1.0, 1.0), (0.0, 1.0)), ((0.0, 1.0), (0.5, 0.0))],
        7 => vec![((0.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))],
        8 => vec![((0.0, 0.0), (1.0, 0.0)), ((0.5, 0.0), (0.5, 1.0))],
        9 => vec![((0.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))],
        _ => Vec::new(),
    }
}

fn seg_dist(p: (f64, f64), (a, b): Seg) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f32> {
    let extent = h.min(w) as f64;
    let size = rng.random_range(0.43..0.65) * extent;
    let margin = 0.07 * extent;
    let x0 = rng.random_range(margin..(w as f64 - margin - size).max(margin + 1e-9));
    let y0 = rng.random_range(margin..(h as f64 - margin - size).max(margin + 1e-9));
    let thick = rng.random_range(1.5..2.5) * extent / 28.0;
    let amp = rng.random_range(0.7..1.0);
    // per-vertex jitter keeps same-class glyphs from being exact copies
    let mut jitter = || rng.random_range(-0.06..0.06);
    let segs: Vec<Seg> = strokes(class)
        .into_iter()
        .map(|((ax, ay), (bx, by))| {
            let map = |x: f64, y: f64, jx: f64, jy: f64| (x0 + (x + jx) * size, y0 + (y + jy) * size);
            (map(ax, ay, jitter(), jitter()), map(bx, by, jitter(), jitter()))
        })
        .collect();
    let (cx, cy, r) = (x0 + size / 2.0, y0 + size / 2.0, size / 2.0);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let s = rng.random_range(0.1..0.25) * extent;
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), s, rng.random_range(0.1..0.3))
        })
        .collect();
    let distractors: Vec<(Seg, f64)> = (0..2)
        .map(|_| {
            let a = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let len = rng.random_range(0.12..0.25) * extent;
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            ((a, (a.0 + len * t.cos(), a.1 + len * t.sin())), rng.random_range(0.25..0.45))
        })
        .collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = if class == 0 {
                (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() - r).abs()
            } else {
                segs.iter().map(|&s| seg_dist(p, s)).fold(f64::INFINITY, f64::min)
            };
            let ink = (thick / 2.0 + 0.5 - d).clamp(0.0, 1.0) * amp;
            let mut bg: f64 = blobs
                .iter()
                .map(|&(bx, by, s, a)| a * (-((p.0 - bx).powi(2) + (p.1 - by).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            for &(seg, a) in &distractors {
                bg = bg.max((1.0 - seg_dist(p, seg)).clamp(0.0, 1.0) * a);
            }
            out[y * w + x] = (ink.max(bg) + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// `n` single-channel glyph images of `h × w`, labels cycling `0..10`.
/// Identical arguments give bit-identical datasets.
pub fn glyph_dataset(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset, DataError> {
    if h < 12 || w < 12 {
        return Err(DataError::Invalid(format!("glyph images need at least 12×12, got {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.15).expect("positive std");
    let mut data = Vec::with_capacity(n * h * w);
    let labels: Vec<usize> = (0..n).map(|i| i % GLYPH_NAMES.len()).collect();
    for &c in &labels {
        data.extend(render(c, h, w, &mut rng, &noise));
    }
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, Some(labels), GLYPH_NAMES.len())
}
