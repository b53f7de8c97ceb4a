//! Small single-channel raster helpers shared by the dataset generator and
//! the saliency code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real-valued H×W grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{}x{} map cannot hold {} values",
                height,
                width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Map2) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Σ self ⊙ other.
    pub fn dot(&self, other: &Map2) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn resized(&self, out_height: usize, out_width: usize) -> Self {
        Self {
            height: out_height,
            width: out_width,
            data: resize_bilinear(&self.data, self.height, self.width, out_height, out_width),
        }
    }

    fn check_same_shape(&self, other: &Map2) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Bilinear resampling with half-pixel sample centres and edge clamping
/// (the OpenCV / `align_corners=false` convention). Resizing to the same
/// shape is the identity, and every output value is a convex combination
/// of at most four inputs.
pub fn resize_bilinear(src: &[f64], height: usize, width: usize, out_height: usize, out_width: usize) -> Vec<f64> {
    assert_eq!(src.len(), height * width, "source buffer does not match shape");
    let rows = axis_taps(height, out_height);
    let cols = axis_taps(width, out_width);
    let mut out = Vec::with_capacity(out_height * out_width);
    for &(y0, y1, wy) in &rows {
        for &(x0, x1, wx) in &cols {
            let top = src[y0 * width + x0] * (1.0 - wx) + src[y0 * width + x1] * wx;
            let bottom = src[y1 * width + x0] * (1.0 - wx) + src[y1 * width + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
