//! Multi-label mask and heatmap stacks.
//!
//! Both are `(C, H, W)` arrays. Masks hold `{0, 1}` bytes and classes are
//! independent: a pixel may be positive in several planes at once.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::{Error, Result};

/// Stack of `C` binary masks sharing one `H×W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    planes: Array3<u8>,
}

impl MaskSet {
    pub fn new(planes: Array3<u8>) -> Result<Self> {
        if let Some(v) = planes.iter().find(|&&v| v > 1) {
            return Err(Error::validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { planes })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            planes: Array3::zeros((classes, height, width)),
        }
    }

    pub fn from_planes(planes: &[Array2<u8>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::validation("mask set needs at least one plane"))?;
        let (h, w) = first.dim();
        let mut out = Array3::zeros((planes.len(), h, w));
        for (c, plane) in planes.iter().enumerate() {
            if plane.dim() != (h, w) {
                return Err(Error::validation(format!(
                    "plane {c} has shape {:?}, expected {:?}",
                    plane.dim(),
                    (h, w)
                )));
            }
            out.index_axis_mut(Axis(0), c).assign(plane);
        }
        Self::new(out)
    }

    pub fn classes(&self) -> usize {
        self.planes.dim().0
    }

    pub fn height(&self) -> usize {
        self.planes.dim().1
    }

    pub fn width(&self) -> usize {
        self.planes.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.planes.dim()
    }

    pub fn plane(&self, class: usize) -> ArrayView2<'_, u8> {
        self.planes.index_axis(Axis(0), class)
    }

    pub fn set_plane(&mut self, class: usize, plane: ArrayView2<'_, u8>) -> Result<()> {
        if plane.dim() != (self.height(), self.width()) {
            return Err(Error::validation("plane shape mismatch"));
        }
        if plane.iter().any(|&v| v > 1) {
            return Err(Error::validation("plane is not binary"));
        }
        self.planes.index_axis_mut(Axis(0), class).assign(&plane);
        Ok(())
    }

    pub fn as_array(&self) -> &Array3<u8> {
        &self.planes
    }

    pub fn into_array(self) -> Array3<u8> {
        self.planes
    }

    pub fn positive_count(&self, class: usize) -> usize {
        self.plane(class).iter().filter(|&&v| v == 1).count()
    }

    /// Masks as `f64` targets in `{0.0, 1.0}`.
    pub fn to_f64(&self) -> Array3<f64> {
        self.planes.mapv(f64::from)
    }
}

/// Stack of `C` saliency maps with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    planes: Array3<f64>,
}

impl HeatmapSet {
    pub fn new(planes: Array3<f64>) -> Result<Self> {
        if let Some(v) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { planes })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            planes: Array3::zeros((classes, height, width)),
        }
    }

    pub fn classes(&self) -> usize {
        self.planes.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.planes.dim()
    }

    pub fn plane(&self, class: usize) -> ArrayView2<'_, f64> {
        self.planes.index_axis(Axis(0), class)
    }

    pub fn set_plane(&mut self, class: usize, plane: ArrayView2<'_, f64>) -> Result<()> {
        if plane.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("heatmap plane outside [0, 1]"));
        }
        self.planes.index_axis_mut(Axis(0), class).assign(&plane);
        Ok(())
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.planes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_binary_values() {
        let planes = Array3::from_elem((1, 2, 2), 2u8);
        assert!(MaskSet::new(planes).unwrap_err().is_validation());
    }

    #[test]
    fn planes_may_overlap() {
        let a = array![[1u8, 1], [0, 0]];
        let b = array![[1u8, 0], [1, 0]];
        let set = MaskSet::from_planes(&[a, b]).unwrap();
        assert_eq!(set.positive_count(0), 2);
        assert_eq!(set.positive_count(1), 2);
        assert_eq!(set.plane(0)[[0, 0]], set.plane(1)[[0, 0]]);
    }

    #[test]
    fn heatmap_range_checked() {
        assert!(HeatmapSet::new(Array3::from_elem((1, 1, 1), 1.5)).is_err());
        assert!(HeatmapSet::new(Array3::from_elem((1, 1, 1), 1.0)).is_ok());
    }
}
