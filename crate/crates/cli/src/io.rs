//! Dataset and checkpoint plumbing shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use fooling::data::{
    dataset_from_idx, encode_idx_images, load_image_dir, parse_idx_images, parse_idx_labels, Dataset, IdxImages,
    ImageDirOptions,
};
use fooling::engine::Tensor;
use fooling::model::{save_checkpoint, ArchDescriptor, Checkpoint, Model, Params};

use crate::error::{usage, CliError};

pub fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.exists() {
        return Err(usage(format!("missing file {}", path.display())));
    }
    fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// `train-images.idx` → `train-labels.idx`, when such a file exists.
fn labels_beside(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    if !name.contains("images") {
        return None;
    }
    let p = images.with_file_name(name.replacen("images", "labels", 1));
    p.is_file().then_some(p)
}

fn idx_unlabeled(images: &IdxImages, classes: usize) -> Result<Dataset, CliError> {
    let t = Tensor::new(
        vec![images.count, 1, images.rows, images.cols],
        images.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .map_err(fooling::data::DataError::from)?;
    Ok(Dataset::new(t, None, classes)?)
}

/// Loads `--data`, with pixels in `[0, 1]`:
/// an IDX image file (labels taken from the matching `*labels*` file when it
/// exists), a directory holding `images.idx`, or a directory of class
/// subdirectories resized to `shape`.
pub fn load_data(path: &Path, shape: (usize, usize, usize), classes: usize) -> Result<Dataset, CliError> {
    let images_file = if path.is_dir() && path.join("images.idx").is_file() {
        Some(path.join("images.idx"))
    } else if path.is_file() {
        Some(path.to_path_buf())
    } else {
        None
    };
    match images_file {
        Some(f) => {
            let images = parse_idx_images(&read_input(&f)?)?;
            match labels_beside(&f) {
                Some(l) => Ok(dataset_from_idx(&images, &parse_idx_labels(&read_input(&l)?)?)?),
                None => idx_unlabeled(&images, classes),
            }
        }
        None if path.is_dir() => {
            let (channels, height, width) = shape;
            let r = load_image_dir(path, ImageDirOptions { channels, height, width })?;
            if r.skipped > 0 {
                log::warn!("{}: skipped {} undecodable files", path.display(), r.skipped);
            }
            Ok(r.dataset)
        }
        None => Err(usage(format!("missing file {}", path.display()))),
    }
}

/// Writes single-channel images in `[0, 1]` as an IDX image file.
pub fn write_idx_images(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    let [n, c, h, w] = ds.dims();
    if c != 1 {
        return Err(usage(format!("IDX output holds one channel, got {c}")));
    }
    let pixels = ds.images().data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let bytes = encode_idx_images(&IdxImages { count: n, rows: h, cols: w, pixels });
    crate::manifest::write_file(path, &bytes)
}

pub struct LoadedModel {
    pub model: Model,
    pub params: Params<f32>,
}

impl LoadedModel {
    pub fn desc(&self) -> &ArchDescriptor {
        self.model.desc()
    }

    /// Applies the checkpoint's input normalization, if any.
    pub fn prepare(&self, ds: &Dataset) -> Result<Dataset, CliError> {
        self.model.check_input(&ds.dims())?;
        Ok(match &self.desc().normalization {
            Some(n) => ds.normalized(n)?,
            None => ds.clone(),
        })
    }

    /// Loads `--data` at this model's input shape and normalizes it.
    pub fn data(&self, path: &Path) -> Result<Dataset, CliError> {
        let ds = load_data(path, self.desc().input, self.model.classes())?;
        self.prepare(&ds)
    }

    pub fn labeled_data(&self, path: &Path) -> Result<Dataset, CliError> {
        let ds = self.data(path)?;
        if ds.labels().is_none() {
            return Err(usage(format!("{} has no labels", path.display())));
        }
        Ok(ds)
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let ckpt = Checkpoint::decode(&read_input(path)?)?;
    let desc = ckpt.arch()?;
    desc.validate()?;
    let model = Model::build(desc)?;
    let params = ckpt.params::<f32>();
    model.check_params(&params)?;
    Ok(LoadedModel { model, params })
}

pub fn save_model(path: &Path, params: &Params<f32>, desc: &ArchDescriptor) -> Result<(), CliError> {
    Ok(save_checkpoint(path, params, desc)?)
}

/// Refuses to write over any of the run's inputs.
pub fn guard_output(out: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    let Ok(o) = out.canonicalize() else { return Ok(()) };
    for i in inputs {
        if i.canonicalize().is_ok_and(|p| p == o) {
            return Err(usage(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })
}
