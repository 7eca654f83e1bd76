//! Random-dot stereogram generator: synthetic stereo pairs with exactly
//! known disparity.
//!
//! The right image is dot noise; the left image samples the right at
//! `u - D(u, v)` (the stereo correspondence convention). Left pixels whose
//! source falls outside the image are filled with fresh noise and marked
//! invalid in the ground truth.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{DisparityMap, StereoSample};

/// Shape of the ground-truth disparity field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisparityFieldSpec {
    /// The same disparity everywhere.
    Constant { value: f64 },
    /// `left_value` on the left half of the image, `right_value` on the
    /// right half.
    HorizontalSplit { left_value: f64, right_value: f64 },
    /// A centered rectangle (half the image in each dimension) at
    /// `foreground`, the rest at `background`.
    CenteredBox { background: f64, foreground: f64 },
}

impl DisparityFieldSpec {
    pub fn max_value(&self) -> f64 {
        match *self {
            DisparityFieldSpec::Constant { value } => value,
            DisparityFieldSpec::HorizontalSplit {
                left_value,
                right_value,
            } => left_value.max(right_value),
            DisparityFieldSpec::CenteredBox {
                background,
                foreground,
            } => background.max(foreground),
        }
    }

    pub fn render(&self, height: usize, width: usize) -> Array2<f64> {
        Array2::from_shape_fn((height, width), |(v, u)| match *self {
            DisparityFieldSpec::Constant { value } => value,
            DisparityFieldSpec::HorizontalSplit {
                left_value,
                right_value,
            } => {
                if u < width / 2 {
                    left_value
                } else {
                    right_value
                }
            }
            DisparityFieldSpec::CenteredBox {
                background,
                foreground,
            } => {
                let in_box = (height / 4..3 * height / 4).contains(&v)
                    && (width / 4..3 * width / 4).contains(&u);
                if in_box {
                    foreground
                } else {
                    background
                }
            }
        })
    }

    /// Short identifier used in sample ids and CLI grids.
    pub fn id(&self) -> String {
        match *self {
            DisparityFieldSpec::Constant { value } => format!("const{value}"),
            DisparityFieldSpec::HorizontalSplit {
                left_value,
                right_value,
            } => format!("split{left_value}-{right_value}"),
            DisparityFieldSpec::CenteredBox {
                background,
                foreground,
            } => format!("box{background}-{foreground}"),
        }
    }

    /// Parses `const:V`, `split:L:R` or `box:BG:FG`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad disparity value {s:?} in {text:?}")))
        };
        match parts.as_slice() {
            ["const", v] => Ok(DisparityFieldSpec::Constant { value: num(v)? }),
            ["split", l, r] => Ok(DisparityFieldSpec::HorizontalSplit {
                left_value: num(l)?,
                right_value: num(r)?,
            }),
            ["box", b, f] => Ok(DisparityFieldSpec::CenteredBox {
                background: num(b)?,
                foreground: num(f)?,
            }),
            _ => Err(Error::Config(format!(
                "bad disparity field {text:?}; expected const:V, split:L:R or box:BG:FG"
            ))),
        }
    }
}

/// Generates a stereogram with ground truth. Deterministic per
/// `(width, height, spec, seed)`.
pub fn generate_stereogram(
    width: usize,
    height: usize,
    spec: &DisparityFieldSpec,
    seed: u64,
) -> Result<StereoSample> {
    if spec.max_value() >= width as f64 / 4.0 {
        return Err(Error::InvalidInput(format!(
            "max disparity {} must be < width/4 = {}",
            spec.max_value(),
            width as f64 / 4.0
        )));
    }
    if spec.max_value() < 0.0 {
        return Err(Error::InvalidInput("negative disparity in field spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = Array3::from_shape_fn((height, width, 3), |_| rng.random_range(0.0..1.0));
    let field = spec.render(height, width);

    let mut left = Array3::zeros((height, width, 3));
    let mut valid = Array2::from_elem((height, width), false);
    let max_x = (width - 1) as f64;
    for v in 0..height {
        for u in 0..width {
            let x = u as f64 - field[(v, u)];
            if (0.0..=max_x).contains(&x) {
                let u0 = x.floor() as usize;
                let t = x - u0 as f64;
                for c in 0..3 {
                    left[(v, u, c)] = if t == 0.0 {
                        right[(v, u0, c)]
                    } else {
                        (1.0 - t) * right[(v, u0, c)] + t * right[(v, u0 + 1, c)]
                    };
                }
                valid[(v, u)] = true;
            } else {
                // Occluded at the border: fresh noise, invalid ground truth.
                for c in 0..3 {
                    left[(v, u, c)] = rng.random_range(0.0..1.0);
                }
            }
        }
    }
    let gt = DisparityMap::new(field, valid)?;
    StereoSample::new(
        left,
        right,
        Some(gt),
        format!("rds-{}-s{seed}", spec.id()),
    )
}
