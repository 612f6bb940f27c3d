//! Binary raster masks.
//!
//! [`MaskGrid`] is the common currency for geometric labels, prompt masks,
//! fused label bundles, ground truth and binarized predictions. Cells are
//! stored row-major; `(x, y)` addresses column `x` of row `y`.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                cells.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            cells,
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{} cells for a {}x{} mask",
                cells.len(),
                width,
                height
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    /// Thresholds a real-valued raster (`v >= threshold` is foreground).
    pub fn from_threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::from_cells(
            height,
            width,
            values.iter().map(|&v| v >= threshold).collect(),
        )
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn ensure_same_dims(&self, other: &MaskGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &MaskGrid, f: impl Fn(bool, bool) -> bool) -> Result<MaskGrid> {
        self.ensure_same_dims(other)?;
        Ok(MaskGrid {
            height: self.height,
            width: self.width,
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn or(&self, other: &MaskGrid) -> Result<MaskGrid> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and(&self, other: &MaskGrid) -> Result<MaskGrid> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &MaskGrid) -> Result<MaskGrid> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().map(|&c| !c).collect(),
        }
    }

    /// Number of cells set in both masks.
    pub fn intersection_count(&self, other: &MaskGrid) -> Result<usize> {
        self.ensure_same_dims(other)?;
        Ok(self
            .cells
            .iter()
            .zip(&other.cells)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.dims() == other.dims() && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &MaskGrid) -> bool {
        self.dims() == other.dims() && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !(a && b))
    }

    /// Tight inclusive bounding box `(min_x, min_y, max_x, max_y)`, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Downsample by an integer factor; a cell is set only if every covered pixel is set.
    pub fn min_pool(&self, factor: usize) -> Result<MaskGrid> {
        self.pool(factor, true)
    }

    /// Downsample by an integer factor; a cell is set if any covered pixel is set.
    pub fn max_pool(&self, factor: usize) -> Result<MaskGrid> {
        self.pool(factor, false)
    }

    fn pool(&self, factor: usize, all: bool) -> Result<MaskGrid> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidInput(format!(
                "pool factor {} does not divide {}x{}",
                factor, self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(MaskGrid::from_fn(h, w, |x, y| {
            let mut cover = (0..factor)
                .flat_map(|dy| (0..factor).map(move |dx| (dx, dy)))
                .map(|(dx, dy)| self.get(x * factor + dx, y * factor + dy));
            if all {
                cover.all(|c| c)
            } else {
                cover.any(|c| c)
            }
        }))
    }

    /// Pixels that are set and have a 4-neighbour outside the mask or touch the image edge.
    pub fn boundary(&self) -> MaskGrid {
        let (h, w) = (self.height, self.width);
        MaskGrid::from_fn(h, w, |x, y| {
            if !self.get(x, y) {
                return false;
            }
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                return true;
            }
            !self.get(x - 1, y) || !self.get(x + 1, y) || !self.get(x, y - 1) || !self.get(x, y + 1)
        })
    }

    /// Coordinates `(x, y)` of all set cells in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut pts = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    pts.push((x, y));
                }
            }
        }
        pts
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        MaskGrid::from_fn(h as usize, w as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }

    /// Writes an 8-bit single channel PNG or PGM (chosen by extension), 0/255.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads an 8-bit mask, thresholding at 128.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_gray_image(&decode_luma(path)?))
    }
}

/// Single-channel intensity image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {width}x{height} raster",
                pixels.len()
            )));
        }
        Ok(Raster { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Rounds each value to the nearest multiple of 1/255 so that an 8-bit
    /// round trip is lossless.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Raster {
            height: h as usize,
            width: w as usize,
            pixels: img.pixels().map(|p| p[0] as f64 / 255.0).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads any supported image format, converting to 8-bit luma.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_gray_image(&decode_luma(path)?))
    }
}

pub(crate) fn decode_luma(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_luma8())
}
