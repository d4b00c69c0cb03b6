//! Binary netpbm images: P5 (grayscale PGM) and P6 (RGB PPM).

use super::DataError;

/// A decoded netpbm image with samples rescaled to 8 bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        Self { width, height, channels: 1, pixels }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        Self { width, height, channels: 3, pixels }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<usize, DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DataError::Image(format!("pnm: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Image(format!("pnm: {what} out of range")))
    }
}

/// Decodes P5/P6 from untrusted bytes; 16-bit samples are reduced to 8 bits.
pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage, DataError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(DataError::Image("pnm: expected P5 or P6 magic".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if !(1..=65535).contains(&maxval) {
        return Err(DataError::Image(format!("pnm: maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Image("pnm: empty image".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(DataError::Image("pnm: missing raster separator".into())),
    }
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let samples = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| DataError::Image("pnm: dimensions overflow".into()))?;
    let raster = &bytes[h.pos..];
    if raster.len() < samples * sample_bytes {
        return Err(DataError::Truncated("pnm raster"));
    }
    let pixels = if sample_bytes == 1 {
        raster[..samples]
            .iter()
            .map(|&v| ((v as usize).min(maxval) * 255 / maxval) as u8)
            .collect()
    } else {
        raster[..samples * 2]
            .chunks_exact(2)
            .map(|c| ((u16::from_be_bytes([c[0], c[1]]) as usize).min(maxval) * 255 / maxval) as u8)
            .collect()
    };
    Ok(PnmImage { width, height, channels, pixels })
}
