use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CasaError, Result};

/// Row-major 2-D grayscale image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(CasaError::DimensionMismatch {
                expected: height * width,
                actual: pixels.len(),
                context: "image pixel buffer",
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CasaError::Domain(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Short hex digest of the pixel buffer, used to identify images in snapshots.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for p in &self.pixels {
            hasher.update(p.to_le_bytes());
        }
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn digest_tracks_content() {
        let a = Image::new(1, 2, vec![0.1, 0.2]).unwrap();
        let b = Image::new(1, 2, vec![0.1, 0.2]).unwrap();
        let c = Image::new(1, 2, vec![0.2, 0.1]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 16);
    }
}
