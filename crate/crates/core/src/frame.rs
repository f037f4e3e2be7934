use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One observation: RGB in `[0,1]` (H x W x 3), depth in world units with NaN
/// for invalid pixels, a binary occlusion mask (`true` = occluded) and a
/// normalized timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub mask: Array2<bool>,
    pub time: f64,
}

impl Frame {
    pub fn new(rgb: Array3<f64>, depth: Array2<f64>, mask: Array2<bool>, time: f64) -> Result<Self> {
        let f = Self {
            rgb,
            depth,
            mask,
            time,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.rgb.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("rgb has {c} channels")));
        }
        if self.depth.dim() != (h, w) || self.mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "rgb is {h}x{w}, depth {:?}, mask {:?}",
                self.depth.dim(),
                self.mask.dim()
            )));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::Precondition(format!(
                "frame time {} outside [0,1]",
                self.time
            )));
        }
        Ok(())
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}
