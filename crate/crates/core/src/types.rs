//! Core domain types: disparity maps, feature maps, validity masks and
//! stereo samples.
//!
//! Grids are stored row-major as `(height, width[, channels])` ndarrays.
//! Coordinates follow the stereo convention `(u, v)` = (column, row); code
//! indexes arrays as `[v, u]`. Disparity values are horizontal displacements
//! in pixels, measured at the map's own resolution.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Per-pixel horizontal displacement field with a validity mask.
///
/// Valid entries are finite and non-negative; invalid entries carry no
/// meaning and are ignored by every consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DisparityMap {
    /// Builds a map from values and a validity mask of the same shape.
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::InvalidInput(format!(
                "disparity values shape {:?} != validity shape {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidInput("disparity map is empty".into()));
        }
        for ((v, u), &ok) in valid.indexed_iter() {
            if ok {
                let d = values[(v, u)];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "valid disparity at ({u}, {v}) is {d}, expected finite and >= 0"
                    )));
                }
            }
        }
        Ok(Self { values, valid })
    }

    /// Builds a fully valid map.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(values.dim(), true);
        Self::new(values, valid)
    }

    /// Constant field of the given size, fully valid.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_values(Array2::from_elem((height, width), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Number of valid pixels.
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Iterator over `(v, u, disparity)` of valid pixels.
    pub fn valid_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.valid
            .indexed_iter()
            .filter(|(_, &ok)| ok)
            .map(|((v, u), _)| (v, u, self.values[(v, u)]))
    }
}

/// A named intermediate activation grid `(H, W, C)` tapped from a model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
    layer_name: String,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, layer_name: impl Into<String>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dimensions must all be >= 1, got ({h}, {w}, {c})"
            )));
        }
        if let Some(bad) = values.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "feature map contains non-finite value {bad}"
            )));
        }
        Ok(Self {
            values,
            layer_name: layer_name.into(),
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }
}

/// Boolean grid marking pixels that survived a warp (in bounds and backed by
/// valid disparity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    flags: Array2<bool>,
}

impl ValidityMask {
    pub fn new(flags: Array2<bool>) -> Self {
        Self { flags }
    }

    pub fn all_true(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    pub fn flags(&self) -> &Array2<bool> {
        &self.flags
    }

    pub fn height(&self) -> usize {
        self.flags.nrows()
    }

    pub fn width(&self) -> usize {
        self.flags.ncols()
    }

    pub fn count_true(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, v: usize, u: usize) -> bool {
        self.flags[(v, u)]
    }

    /// Pointwise AND with another mask of the same shape.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.flags.dim() != other.flags.dim() {
            return Err(Error::InvalidInput(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.flags.dim(),
                other.flags.dim()
            )));
        }
        let mut flags = self.flags.clone();
        flags.zip_mut_with(&other.flags, |a, &b| *a = *a && b);
        Ok(ValidityMask::new(flags))
    }
}

/// A rectified stereo pair with optional ground-truth disparity.
///
/// Images are `(H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Array3<f64>,
    pub right: Array3<f64>,
    pub gt_disparity: Option<DisparityMap>,
    pub sample_id: String,
}

impl StereoSample {
    pub fn new(
        left: Array3<f64>,
        right: Array3<f64>,
        gt_disparity: Option<DisparityMap>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        if left.dim() != right.dim() {
            return Err(Error::InvalidInput(format!(
                "left shape {:?} != right shape {:?}",
                left.dim(),
                right.dim()
            )));
        }
        for (name, img) in [("left", &left), ("right", &right)] {
            if let Some(bad) = img.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::InvalidInput(format!(
                    "{name} image value {bad} outside [0, 1]"
                )));
            }
        }
        if let Some(gt) = &gt_disparity {
            if (gt.height(), gt.width()) != (left.dim().0, left.dim().1) {
                return Err(Error::InvalidInput(format!(
                    "ground truth shape ({}, {}) != image shape ({}, {})",
                    gt.height(),
                    gt.width(),
                    left.dim().0,
                    left.dim().1
                )));
            }
        }
        Ok(Self {
            left,
            right,
            gt_disparity,
            sample_id: sample_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.left.dim().0
    }

    pub fn width(&self) -> usize {
        self.left.dim().1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn disparity_map_rejects_shape_mismatch() {
        let values = arr2(&[[1.0, 2.0]]);
        let valid = Array2::from_elem((2, 1), true);
        assert!(matches!(
            DisparityMap::new(values, valid),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn disparity_map_rejects_negative_valid_entry() {
        let values = arr2(&[[1.0, -2.0]]);
        assert!(DisparityMap::from_values(values).is_err());
    }

    #[test]
    fn disparity_map_allows_garbage_under_invalid_flag() {
        let values = arr2(&[[1.0, f64::NAN]]);
        let valid = arr2(&[[true, false]]);
        let map = DisparityMap::new(values, valid).unwrap();
        assert_eq!(map.valid_count(), 1);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let mut values = Array3::zeros((2, 2, 1));
        values[(0, 0, 0)] = f64::INFINITY;
        assert!(FeatureMap::new(values, "F1").is_err());
    }

    #[test]
    fn sample_rejects_out_of_range_image() {
        let left = Array3::from_elem((2, 2, 3), 1.5);
        let right = Array3::zeros((2, 2, 3));
        assert!(StereoSample::new(left, right, None, "s").is_err());
    }
}
