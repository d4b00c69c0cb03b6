use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset};
use crate::engine::Tensor;

/// Tile provenance for one composite: `quadrants[q]` is the class placed in
/// quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composite {
    pub quadrants: [usize; 4],
    pub source_ids: [usize; 4],
}

/// Unlabeled two-class composites, split for fine-tuning and holdout.
#[derive(Debug, Clone)]
pub struct CompositeSplit {
    pub train: Dataset,
    pub holdout: Dataset,
    pub train_layout: Vec<Composite>,
    pub holdout_layout: Vec<Composite>,
}

/// Builds `n_total` images of 2H×2W from 2×2 tiles, two of class `c1` and
/// two of `c2`, quadrants shuffled per image. The holdout share is
/// 200/1300 of `n_total`, rounded.
pub fn build_composite_dataset(
    base: &Dataset,
    c1: usize,
    c2: usize,
    n_total: usize,
    seed: u64,
) -> Result<CompositeSplit, DataError> {
    if c1 == c2 {
        return Err(DataError::Invalid("composite classes must differ".into()));
    }
    let pool1 = base.class_indices(c1);
    let pool2 = base.class_indices(c2);
    for (c, pool) in [(c1, &pool1), (c2, &pool2)] {
        if pool.len() < 2 {
            return Err(DataError::Invalid(format!("class {c} has {} images, composites need 2", pool.len())));
        }
    }
    let [_, ch, h, w] = base.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_total);
    let mut layout = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let a: Vec<usize> = pool1.choose_multiple(&mut rng, 2).copied().collect();
        let b: Vec<usize> = pool2.choose_multiple(&mut rng, 2).copied().collect();
        let mut tiles = [(c1, a[0]), (c1, a[1]), (c2, b[0]), (c2, b[1])];
        tiles.shuffle(&mut rng);
        let mut img = Tensor::<f32>::zeros(&[ch, 2 * h, 2 * w]);
        for (q, &(_, id)) in tiles.iter().enumerate() {
            let (oy, ox) = ((q / 2) * h, (q % 2) * w);
            let src = base.images().index_outer(id);
            for c in 0..ch {
                for y in 0..h {
                    let s = (c * h + y) * w;
                    let d = (c * 2 * h + oy + y) * 2 * w + ox;
                    img.data_mut()[d..d + w].copy_from_slice(&src.data()[s..s + w]);
                }
            }
        }
        images.push(img);
        layout.push(Composite {
            quadrants: tiles.map(|t| t.0),
            source_ids: tiles.map(|t| t.1),
        });
    }
    let holdout_n = (n_total * 200 + 650) / 1300;
    let train_n = n_total - holdout_n;
    let all = if images.is_empty() {
        Tensor::zeros(&[0, ch, 2 * h, 2 * w])
    } else {
        Tensor::stack(&images)?
    };
    let all = Dataset::new(all, None, base.classes())?;
    let (train, holdout) = all.split_at(train_n);
    let holdout_layout = layout.split_off(train_n);
    Ok(CompositeSplit { train, holdout, train_layout: layout, holdout_layout })
}
