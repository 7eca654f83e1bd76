//! Evaluation metrics (MAE, RMSE, D1-error), per-layer left-right similarity
//! profiling, and disparity-value histograms.

use crate::error::{Error, Result};
use crate::models::StereoModel;
use crate::ops::{self, WarpSign};
use crate::types::{DisparityMap, StereoSample};

/// Error statistics over the ground truth's valid pixels.
///
/// D1 follows the standard KITTI definition: the percentage of valid pixels
/// whose absolute error exceeds both 3 px and 5% of the true disparity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub mae: f64,
    pub rmse: f64,
    pub d1_error: f64,
    pub valid_pixel_count: usize,
}

/// MAE, RMSE and D1-error of a prediction against ground truth, computed
/// over the ground truth's valid pixels only.
pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricsRecord> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::InvalidInput(format!(
            "prediction shape ({}, {}) != ground truth shape ({}, {})",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut d1_count = 0usize;
    let mut count = 0usize;
    for (v, u, truth) in gt.valid_entries() {
        let e = pred.values()[(v, u)] - truth;
        let a = e.abs();
        abs_sum += a;
        sq_sum += e * e;
        if a > 3.0 && a > 0.05 * truth {
            d1_count += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateInput(
            "ground truth has no valid pixels".into(),
        ));
    }
    Ok(MetricsRecord {
        mae: abs_sum / count as f64,
        rmse: (sq_sum / count as f64).sqrt(),
        d1_error: 100.0 * d1_count as f64 / count as f64,
        valid_pixel_count: count,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSimilarity {
    pub layer_name: String,
    /// Mean cosine between the left feature and the reference-warped right
    /// feature, over warp-valid locations.
    pub mean_cosine: f64,
}

/// Per-layer left-right feature similarity of one forward pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimilarityProfile {
    pub layers: Vec<LayerSimilarity>,
    /// Mean of the per-layer cosines.
    pub aggregate: f64,
}

impl SimilarityProfile {
    /// Percentage drop of this profile's aggregate relative to a reference
    /// (typically the clean-image profile).
    pub fn drop_rate_vs(&self, reference: &SimilarityProfile) -> f64 {
        100.0 * (reference.aggregate - self.aggregate) / reference.aggregate
    }
}

/// Profiles every weight-sharing tap of a model on one sample: runs a forward
/// pass, rescales the reference disparity to each tap's grid, warps the right
/// feature and records the masked mean cosine per layer.
pub fn similarity_profile(
    model: &mut dyn StereoModel,
    sample: &StereoSample,
    d_ref: &DisparityMap,
) -> Result<SimilarityProfile> {
    let shared: Vec<String> = model
        .tap_layers()
        .into_iter()
        .filter(|t| t.weight_sharing)
        .map(|t| t.name)
        .collect();
    if shared.is_empty() {
        return Err(Error::Config(
            "model exposes no weight-sharing taps to profile".into(),
        ));
    }
    model.predict(sample)?;
    let mut layers = Vec::with_capacity(shared.len());
    for name in shared {
        let pair = model.taps().get(&name).ok_or_else(|| {
            Error::Config(format!("tap {name} missing from the model's registry"))
        })?;
        let d_layer = ops::rescale_disparity(d_ref, pair.left.width(), pair.left.height())?;
        let (warped, mask) = ops::warp_right_to_left(&pair.right, &d_layer, WarpSign::Negative)?;
        let mean_cosine = ops::mean_cosine_similarity(&pair.left, &warped, &mask)?;
        layers.push(LayerSimilarity {
            layer_name: name,
            mean_cosine,
        });
    }
    let aggregate = layers.iter().map(|l| l.mean_cosine).sum::<f64>() / layers.len() as f64;
    Ok(SimilarityProfile { layers, aggregate })
}

/// Binning recipe for disparity histograms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistogramSpec {
    pub min: f64,
    pub max: f64,
    pub bin_width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        // 1 px bins over the common stereo range.
        Self {
            min: 0.0,
            max: 192.0,
            bin_width: 1.0,
        }
    }
}

impl HistogramSpec {
    pub fn bins(&self) -> usize {
        ((self.max - self.min) / self.bin_width).ceil() as usize
    }
}

/// Normalized distribution of valid disparity values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisparityHistogram {
    /// Bin edges; `fractions[i]` covers `[edges[i], edges[i + 1])`.
    pub edges: Vec<f64>,
    /// Per-bin fraction of the valid pixels; sums to 1.
    pub fractions: Vec<f64>,
    pub peak_bin: usize,
    /// Lower edge of the peak bin.
    pub peak_location: f64,
}

/// Histogram over the valid pixels of one or more maps. Values outside the
/// range are clamped into the end bins so saturation stays visible.
pub fn disparity_histogram(
    maps: &[DisparityMap],
    spec: &HistogramSpec,
) -> Result<DisparityHistogram> {
    if spec.bin_width <= 0.0 || spec.max <= spec.min {
        return Err(Error::InvalidInput(format!(
            "bad histogram spec: [{}, {}) at width {}",
            spec.min, spec.max, spec.bin_width
        )));
    }
    let bins = spec.bins();
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for map in maps {
        for (_, _, d) in map.valid_entries() {
            let bin = (((d - spec.min) / spec.bin_width).floor() as i64).clamp(0, bins as i64 - 1);
            counts[bin as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::DegenerateInput(
            "no valid pixels across the given maps".into(),
        ));
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let peak_bin = fractions
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let edges: Vec<f64> = (0..=bins).map(|i| spec.min + i as f64 * spec.bin_width).collect();
    Ok(DisparityHistogram {
        peak_location: edges[peak_bin],
        edges,
        fractions,
        peak_bin,
    })
}
