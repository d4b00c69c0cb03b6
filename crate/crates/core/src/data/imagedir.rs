use std::fs;
use std::path::Path;

use super::pnm::{decode_pnm, PnmImage};
use super::{DataError, Dataset};
use crate::engine::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDirOptions {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ImageDirReport {
    pub dataset: Dataset,
    /// Class directory names; position is the label id.
    pub class_names: Vec<String>,
    /// Files that failed to decode.
    pub skipped: usize,
}

fn decode_file(path: &Path) -> Result<PnmImage, DataError> {
    let bytes = fs::read(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => decode_pnm(&bytes),
        Some("png") => {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| DataError::Image(e.to_string()))?;
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(PnmImage::rgb(w as usize, h as usize, rgb.into_raw()))
        }
        _ => Err(DataError::Image(format!("unsupported extension on {}", path.display()))),
    }
}

/// Nearest-neighbour resize plus channel coercion into `[C, H, W]` in `[0, 1]`.
fn to_chw(img: &PnmImage, opts: ImageDirOptions) -> Vec<f32> {
    let (c, h, w) = (opts.channels, opts.height, opts.width);
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = y * img.height / h;
        for x in 0..w {
            let sx = x * img.width / w;
            let px = &img.pixels[(sy * img.width + sx) * img.channels..][..img.channels];
            for ch in 0..c {
                let v = match (img.channels, c) {
                    (3, 1) => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
                    (1, _) => px[0] as f32,
                    _ => px[ch.min(img.channels - 1)] as f32,
                };
                out[(ch * h + y) * w + x] = v / 255.0;
            }
        }
    }
    out
}

/// One image file as a `[1, C, H, W]` tensor in `[0, 1]`, resized to `opts`.
pub fn load_image(path: impl AsRef<Path>, opts: ImageDirOptions) -> Result<Tensor<f32>, DataError> {
    check_opts(opts)?;
    let img = decode_file(path.as_ref())?;
    Ok(Tensor::new(vec![1, opts.channels, opts.height, opts.width], to_chw(&img, opts))?)
}

fn check_opts(opts: ImageDirOptions) -> Result<(), DataError> {
    if ![1, 3].contains(&opts.channels) || opts.height == 0 || opts.width == 0 {
        return Err(DataError::Invalid(format!("unsupported target image shape {opts:?}")));
    }
    Ok(())
}

/// Loads `root/<class>/<image>.(pgm|ppm|png)`. Class directories are sorted
/// by name to assign label ids; files within a class are sorted too.
pub fn load_image_dir(root: impl AsRef<Path>, opts: ImageDirOptions) -> Result<ImageDirReport, DataError> {
    check_opts(opts)?;
    let mut classes: Vec<(String, std::path::PathBuf)> = fs::read_dir(root.as_ref())?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(DataError::Invalid(format!(
            "{} needs at least two class directories",
            root.as_ref().display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_file()).collect();
        files.sort();
        let before = labels.len();
        for f in files {
            match decode_file(&f) {
                Ok(img) => {
                    data.extend(to_chw(&img, opts));
                    labels.push(label);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
        if labels.len() == before {
            return Err(DataError::EmptyClass(name.clone()));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, opts.channels, opts.height, opts.width], data)?;
    Ok(ImageDirReport {
        dataset: Dataset::new(images, Some(labels), classes.len())?,
        class_names: classes.into_iter().map(|(n, _)| n).collect(),
        skipped,
    })
}
