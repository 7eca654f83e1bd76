//! Pure numerical kernels: disparity rescaling, disparity-guided horizontal
//! warping, masked cosine dissimilarity and channel subsetting.
//!
//! All functions here are pure: identical inputs (including seeds) produce
//! bitwise-identical outputs, and nothing is cached between calls. Gradient
//! support is provided as explicit vector-Jacobian products (`*_vjp`), which
//! the tape in [`crate::tape`] composes into full backward passes.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{DisparityMap, FeatureMap, ValidityMask};

/// Floor applied to every L2 norm before division, to keep cosine values and
/// gradients finite at zero vectors.
pub const NORM_FLOOR: f64 = 1e-8;

/// Horizontal sampling direction of the warp: the right feature is sampled at
/// `u + offset() * d`.
///
/// `Negative` matches the stereo correspondence convention (the pixel at
/// `(u, v)` in the left image matches `(u - d, v)` in the right image) and is
/// the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum WarpSign {
    #[default]
    Negative,
    Positive,
}

impl WarpSign {
    pub fn offset(self) -> f64 {
        match self {
            WarpSign::Negative => -1.0,
            WarpSign::Positive => 1.0,
        }
    }
}

/// Splits a sampling coordinate into its base index and fractional part.
///
/// Assumes `0 <= x <= len - 1`. When `x` lands exactly on the last index the
/// fraction is zero and only the base index is touched.
#[inline]
fn split_coord(x: f64) -> (usize, f64) {
    let base = x.floor();
    (base as usize, x - base)
}

/// Rescales a disparity map to `target_h x target_w`.
///
/// Each output pixel `(u, v)` samples the source bilinearly at
/// `(u * W / W_t, v * H / H_t)` (clamped to the source grid) and multiplies
/// the result by `W_t / W`, so the displacement stays correct in units of the
/// target width. The output pixel is valid only if every source pixel touched
/// with nonzero weight is valid.
pub fn rescale_disparity(d: &DisparityMap, target_w: usize, target_h: usize) -> Result<DisparityMap> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidInput(format!(
            "rescale target ({target_w}, {target_h}) must be >= 1 in both dimensions"
        )));
    }
    let (src_h, src_w) = (d.height(), d.width());
    let scale_u = src_w as f64 / target_w as f64;
    let scale_v = src_h as f64 / target_h as f64;
    let value_scale = target_w as f64 / src_w as f64;

    let values = d.values();
    let valid = d.valid();
    let mut out = Array2::zeros((target_h, target_w));
    let mut out_valid = Array2::from_elem((target_h, target_w), false);

    for v in 0..target_h {
        let sy = (v as f64 * scale_v).clamp(0.0, (src_h - 1) as f64);
        let (v0, tv) = split_coord(sy);
        for u in 0..target_w {
            let sx = (u as f64 * scale_u).clamp(0.0, (src_w - 1) as f64);
            let (u0, tu) = split_coord(sx);

            let mut ok = true;
            let mut acc = 0.0;
            for (dv, wv) in [(0usize, 1.0 - tv), (1, tv)] {
                if wv == 0.0 {
                    continue;
                }
                for (du, wu) in [(0usize, 1.0 - tu), (1, tu)] {
                    if wu == 0.0 {
                        continue;
                    }
                    let (sv, su) = (v0 + dv, u0 + du);
                    if !valid[(sv, su)] {
                        ok = false;
                        break;
                    }
                    acc += wv * wu * values[(sv, su)];
                }
                if !ok {
                    break;
                }
            }
            if ok {
                out[(v, u)] = acc * value_scale;
                out_valid[(v, u)] = true;
            }
        }
    }
    DisparityMap::new(out, out_valid)
}

/// Raw warp kernel over plain arrays; see [`warp_right_to_left`].
///
/// Returns the warped grid (zero where masked out) and the mask of locations
/// whose sample coordinate stayed within `[0, W-1]` and whose disparity was
/// valid.
pub(crate) fn warp_horizontal_raw(
    feature: &Array3<f64>,
    disp: &Array2<f64>,
    disp_valid: &Array2<bool>,
    sign: f64,
) -> (Array3<f64>, Array2<bool>) {
    let (h, w, c) = feature.dim();
    let mut out = Array3::zeros((h, w, c));
    let mut mask = Array2::from_elem((h, w), false);
    let max_x = (w - 1) as f64;

    for v in 0..h {
        for u in 0..w {
            if !disp_valid[(v, u)] {
                continue;
            }
            let x = u as f64 + sign * disp[(v, u)];
            if !(0.0..=max_x).contains(&x) {
                continue;
            }
            mask[(v, u)] = true;
            let (u0, t) = split_coord(x);
            if t == 0.0 {
                for ch in 0..c {
                    out[(v, u, ch)] = feature[(v, u0, ch)];
                }
            } else {
                for ch in 0..c {
                    out[(v, u, ch)] =
                        (1.0 - t) * feature[(v, u0, ch)] + t * feature[(v, u0 + 1, ch)];
                }
            }
        }
    }
    (out, mask)
}

/// VJP of [`warp_horizontal_raw`] with respect to the input feature.
pub(crate) fn warp_horizontal_vjp(
    grad_out: &Array3<f64>,
    disp: &Array2<f64>,
    mask: &Array2<bool>,
    sign: f64,
    input_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (h, w, c) = input_dim;
    let mut grad_in = Array3::zeros((h, w, c));
    for v in 0..h {
        for u in 0..w {
            if !mask[(v, u)] {
                continue;
            }
            let x = u as f64 + sign * disp[(v, u)];
            let (u0, t) = split_coord(x);
            if t == 0.0 {
                for ch in 0..c {
                    grad_in[(v, u0, ch)] += grad_out[(v, u, ch)];
                }
            } else {
                for ch in 0..c {
                    let g = grad_out[(v, u, ch)];
                    grad_in[(v, u0, ch)] += (1.0 - t) * g;
                    grad_in[(v, u0 + 1, ch)] += t * g;
                }
            }
        }
    }
    grad_in
}

/// Warps the right feature horizontally by the disparity so it aligns with
/// the left feature.
///
/// Output location `(u, v, c)` holds the bilinear sample of `f_r` channel `c`
/// at horizontal coordinate `u + sign * d(u, v)`; the default sign is
/// negative. Locations whose sample coordinate leaves `[0, W-1]`, or whose
/// disparity is invalid, are masked out and zero-filled rather than clamped
/// to the border. The operation is linear (hence differentiable) in the
/// feature values; the disparity is treated as a constant.
pub fn warp_right_to_left(
    f_r: &FeatureMap,
    d: &DisparityMap,
    sign: WarpSign,
) -> Result<(FeatureMap, ValidityMask)> {
    if (d.height(), d.width()) != (f_r.height(), f_r.width()) {
        return Err(Error::InvalidInput(format!(
            "disparity shape ({}, {}) != feature shape ({}, {}); rescale the disparity first",
            d.height(),
            d.width(),
            f_r.height(),
            f_r.width()
        )));
    }
    let (warped, mask) = warp_horizontal_raw(f_r.values(), d.values(), d.valid(), sign.offset());
    let name = format!("{}_warped", f_r.layer_name());
    Ok((FeatureMap::new(warped, name)?, ValidityMask::new(mask)))
}

/// Per-location cosine statistics shared by the forward and backward paths.
struct CosineTerms {
    cos: f64,
    norm_a: f64,
    norm_b: f64,
    floored_a: bool,
    floored_b: bool,
}

fn cosine_at(a: &Array3<f64>, b: &Array3<f64>, v: usize, u: usize, channels: usize) -> CosineTerms {
    let mut dot = 0.0;
    let mut sq_a = 0.0;
    let mut sq_b = 0.0;
    for c in 0..channels {
        let (x, y) = (a[(v, u, c)], b[(v, u, c)]);
        dot += x * y;
        sq_a += x * x;
        sq_b += y * y;
    }
    let raw_a = sq_a.sqrt();
    let raw_b = sq_b.sqrt();
    let norm_a = raw_a.max(NORM_FLOOR);
    let norm_b = raw_b.max(NORM_FLOOR);
    CosineTerms {
        cos: dot / (norm_a * norm_b),
        norm_a,
        norm_b,
        floored_a: raw_a <= NORM_FLOOR,
        floored_b: raw_b <= NORM_FLOOR,
    }
}

fn check_cosine_inputs(f_a: &Array3<f64>, f_b: &Array3<f64>, mask: &Array2<bool>) -> Result<usize> {
    if f_a.dim() != f_b.dim() {
        return Err(Error::InvalidInput(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_a.dim(),
            f_b.dim()
        )));
    }
    let (h, w, _) = f_a.dim();
    if mask.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "mask shape {:?} does not match feature grid ({h}, {w})",
            mask.dim()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::DegenerateInput(
            "cosine dissimilarity over an empty mask".into(),
        ));
    }
    Ok(count)
}

/// Raw kernel behind [`cosine_dissimilarity`]; returns `1 - mean cosine`.
pub(crate) fn cosine_dissimilarity_raw(
    f_a: &Array3<f64>,
    f_b: &Array3<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    let count = check_cosine_inputs(f_a, f_b, mask)?;
    let (h, w, c) = f_a.dim();
    let mut sum = 0.0;
    for v in 0..h {
        for u in 0..w {
            if mask[(v, u)] {
                sum += cosine_at(f_a, f_b, v, u, c).cos;
            }
        }
    }
    Ok(1.0 - sum / count as f64)
}

/// VJP of [`cosine_dissimilarity_raw`] with respect to both features.
///
/// `upstream` is the gradient flowing into the scalar output.
pub(crate) fn cosine_dissimilarity_vjp(
    f_a: &Array3<f64>,
    f_b: &Array3<f64>,
    mask: &Array2<bool>,
    upstream: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let count = check_cosine_inputs(f_a, f_b, mask)? as f64;
    let (h, w, c) = f_a.dim();
    let mut grad_a = Array3::zeros((h, w, c));
    let mut grad_b = Array3::zeros((h, w, c));
    // d(out)/d(cos_i) = -1 / count for each masked-in location.
    let scale = -upstream / count;
    for v in 0..h {
        for u in 0..w {
            if !mask[(v, u)] {
                continue;
            }
            let t = cosine_at(f_a, f_b, v, u, c);
            let inv = 1.0 / (t.norm_a * t.norm_b);
            for ch in 0..c {
                let (x, y) = (f_a[(v, u, ch)], f_b[(v, u, ch)]);
                let mut da = y * inv;
                if !t.floored_a {
                    da -= t.cos * x / (t.norm_a * t.norm_a);
                }
                let mut db = x * inv;
                if !t.floored_b {
                    db -= t.cos * y / (t.norm_b * t.norm_b);
                }
                grad_a[(v, u, ch)] += scale * da;
                grad_b[(v, u, ch)] += scale * db;
            }
        }
    }
    Ok((grad_a, grad_b))
}

/// One minus the mean cosine similarity between per-location channel vectors,
/// averaged over masked-in locations. Output lies in `[0, 2]`.
///
/// Each channel vector is normalized by its own L2 norm with a floor of
/// [`NORM_FLOOR`]. Symmetric in its feature arguments and differentiable in
/// both.
pub fn cosine_dissimilarity(f_a: &FeatureMap, f_b: &FeatureMap, mask: &ValidityMask) -> Result<f64> {
    cosine_dissimilarity_raw(f_a.values(), f_b.values(), mask.flags())
}

/// Mean cosine similarity over masked-in locations, in `[-1, 1]`.
///
/// Same kernel as [`cosine_dissimilarity`] without the `1 -` flip; used by
/// the per-layer similarity profiles.
pub fn mean_cosine_similarity(
    f_a: &FeatureMap,
    f_b: &FeatureMap,
    mask: &ValidityMask,
) -> Result<f64> {
    Ok(1.0 - cosine_dissimilarity(f_a, f_b, mask)?)
}

/// Deterministically picks `ceil(fraction * channels)` distinct channel
/// indices, sorted ascending.
pub fn subset_indices(channels: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "channel fraction {fraction} outside (0, 1]"
        )));
    }
    if channels == 0 {
        return Err(Error::InvalidInput("feature has zero channels".into()));
    }
    let k = ((fraction * channels as f64).ceil() as usize).clamp(1, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, channels, k).into_vec();
    indices.sort_unstable();
    Ok(indices)
}

/// Restricts a feature map to a deterministic random subset of its channels.
///
/// The chosen index set is recorded in the returned map's layer name as
/// `name[i0,i1,...]`. A fraction of exactly 1.0 returns all channels in the
/// original order under the original name.
pub fn channel_subset(f: &FeatureMap, fraction: f64, seed: u64) -> Result<FeatureMap> {
    let indices = subset_indices(f.channels(), fraction, seed)?;
    if indices.len() == f.channels() {
        return Ok(f.clone());
    }
    Ok(select_channels(f, &indices)?)
}

/// Restricts a feature map to an explicit channel index set (sorted or not),
/// recording the set in the layer name.
pub fn select_channels(f: &FeatureMap, indices: &[usize]) -> Result<FeatureMap> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty channel index set".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= f.channels()) {
        return Err(Error::InvalidInput(format!(
            "channel index {bad} out of range for {} channels",
            f.channels()
        )));
    }
    let (h, w, _) = f.values().dim();
    let mut out = Array3::zeros((h, w, indices.len()));
    for v in 0..h {
        for u in 0..w {
            for (slot, &c) in indices.iter().enumerate() {
                out[(v, u, slot)] = f.values()[(v, u, c)];
            }
        }
    }
    let listed: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
    FeatureMap::new(out, format!("{}[{}]", f.layer_name(), listed.join(",")))
}

/// Parses a channel index list out of a layer name produced by
/// [`select_channels`], if present.
pub fn parse_channel_subset(layer_name: &str) -> Option<Vec<usize>> {
    let start = layer_name.rfind('[')?;
    let end = layer_name.rfind(']')?;
    let inner = &layer_name[start + 1..end];
    inner
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok())
        .collect()
}
