use clap::ValueEnum;
use fooling::data::PnmImage;
use fooling::engine::Tensor;
use fooling::interpreters::{normalize_heatmap, upsample_heatmap, Normalize};
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Max-one normalized grayscale PGM.
    Gray,
    /// Red for positive, blue for negative, white at zero; PPM.
    Diverging,
}

/// Renders an `h × w` heatmap at `out_hw`, nearest-upsampled.
pub fn render_heatmap(map: &[f64], hw: (usize, usize), out_hw: (usize, usize), style: Style) -> Result<PnmImage, CliError> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(usage("heatmap has non-finite entries"));
    }
    let t = Tensor::new(vec![hw.0, hw.1], map.to_vec()).map_err(fooling::interpreters::InterpError::from)?;
    let up = upsample_heatmap(&t, out_hw)?;
    let (oh, ow) = out_hw;
    Ok(match style {
        Style::Gray => {
            let (m, _) = normalize_heatmap(up.data(), Normalize::MaxOne);
            PnmImage::gray(ow, oh, m.iter().map(|&v| (v * 255.0).round() as u8).collect())
        }
        Style::Diverging => {
            let s = up.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut px = Vec::with_capacity(3 * oh * ow);
            for &v in up.data() {
                let t = if s > 0.0 { v / s } else { 0.0 };
                let fade = (255.0 * (1.0 - t.abs())).round() as u8;
                px.extend(if t >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] });
            }
            PnmImage::rgb(ow, oh, px)
        }
    })
}
