//! Dense channel-major input grids fed to the encoders.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

/// `channels × height × width` values, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid {channels}×{height}×{width} given {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Decode a camera image, resize it (nearest neighbour) and scale to [0, 1].
/// One channel gives luma, three give RGB.
pub fn load_image_grid(path: &Path, channels: usize, height: usize, width: usize) -> Result<Grid> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let img = img.resize_exact(width as u32, height as u32, FilterType::Nearest);
    let mut grid = Grid::zeros(channels, height, width);
    match channels {
        1 => {
            let luma = img.to_luma8();
            for (x, y, p) in luma.enumerate_pixels() {
                grid.data[y as usize * width + x as usize] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    grid.data[(c * height + y as usize) * width + x as usize] =
                        p.0[c] as f64 / 255.0;
                }
            }
        }
        n => {
            return Err(Error::Config(format!(
                "camera input needs 1 or 3 channels, got {n}"
            )))
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_decodes_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = image::RgbImage::new(4, 2);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.put_pixel(3, 1, image::Rgb([0, 0, 255]));
        img.save(&path).unwrap();

        let rgb = load_image_grid(&path, 3, 2, 4).unwrap();
        assert_eq!(rgb.at(0, 0, 0), 1.0);
        assert_eq!(rgb.at(1, 0, 0), 0.0);
        assert_eq!(rgb.at(2, 1, 3), 1.0);

        let gray = load_image_grid(&path, 1, 1, 2).unwrap();
        assert_eq!(gray.data.len(), 2);
        assert!(gray.data.iter().all(|v| (0.0..=1.0).contains(v)));

        assert!(matches!(load_image_grid(&path, 2, 2, 4), Err(Error::Config(_))));
        assert!(matches!(
            load_image_grid(&dir.path().join("missing.png"), 1, 2, 2),
            Err(Error::Io { .. })
        ));
    }
}
