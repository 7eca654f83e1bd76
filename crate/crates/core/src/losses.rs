//! Attack objectives: disparity loss, feature warping loss, their joint
//! combination, and the proxy-network variant used in black-box mode.
//!
//! All tape-level losses are differentiable back to the input images through
//! whatever model produced the taps. The reference disparity is a constant of
//! the attack: ground truth when available, otherwise the model's clean-image
//! prediction.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{FeatureExtractor, ForwardPass};
use crate::ops::{self, WarpSign};
use crate::tape::{Tape, Var};
use crate::types::DisparityMap;

/// Which objective drives the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Smooth-L1 between prediction and reference only (the vanilla attack).
    DisparityOnly,
    /// Feature warping dissimilarity only.
    WarpOnly,
    /// `disparity + lambda * warping`.
    Joint,
    /// Warping loss on proxy features; the victim is never touched.
    Proxy,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::DisparityOnly => "disparity_only",
            LossKind::WarpOnly => "warp_only",
            LossKind::Joint => "joint",
            LossKind::Proxy => "proxy",
        }
    }
}

/// Full specification of an attack objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Mixing weight of the warping term in the joint loss.
    pub lambda_mix: f64,
    pub loss_kind: LossKind,
    /// Tap to warp: `F1..F3` on the victim, `F1p..F4p` on the proxy.
    pub tapped_layer: String,
    /// Fraction of feature channels entering the warping loss.
    pub channel_fraction: f64,
    pub channel_seed: u64,
    pub warp_sign: WarpSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 1.0,
            loss_kind: LossKind::Joint,
            tapped_layer: "F1".into(),
            channel_fraction: 1.0,
            channel_seed: 0,
            warp_sign: WarpSign::Negative,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_mix < 0.0 || !self.lambda_mix.is_finite() {
            return Err(Error::Config(format!(
                "lambda_mix {} must be finite and >= 0",
                self.lambda_mix
            )));
        }
        if !(self.channel_fraction > 0.0 && self.channel_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "channel_fraction {} outside (0, 1]",
                self.channel_fraction
            )));
        }
        Ok(())
    }
}

/// Where the reference disparity came from; recorded in run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    GroundTruth,
    CleanPrediction,
}

/// The fixed disparity an attack warps against, with per-resolution rescales
/// cached so repeated iterations do not redo the bilinear resampling.
#[derive(Debug, Clone)]
pub struct ReferenceDisparity {
    map: DisparityMap,
    source: ReferenceSource,
    cache: RefCell<BTreeMap<(usize, usize), DisparityMap>>,
}

impl ReferenceDisparity {
    pub fn new(map: DisparityMap, source: ReferenceSource) -> Self {
        Self {
            map,
            source,
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn source(&self) -> ReferenceSource {
        self.source
    }

    pub fn full_resolution(&self) -> &DisparityMap {
        &self.map
    }

    /// The reference rescaled to a feature grid.
    pub fn at_resolution(&self, height: usize, width: usize) -> Result<DisparityMap> {
        if (self.map.height(), self.map.width()) == (height, width) {
            return Ok(self.map.clone());
        }
        if let Some(hit) = self.cache.borrow().get(&(height, width)) {
            return Ok(hit.clone());
        }
        let scaled = ops::rescale_disparity(&self.map, width, height)?;
        self.cache
            .borrow_mut()
            .insert((height, width), scaled.clone());
        Ok(scaled)
    }
}

/// Smooth-L1 penalty of a scalar error, quadratic below 1 px.
pub fn smooth_l1(error: f64) -> f64 {
    let a = error.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Mean smooth-L1 between two disparity maps over the reference's valid
/// pixels.
pub fn disparity_loss(pred: &DisparityMap, reference: &DisparityMap) -> Result<f64> {
    if (pred.height(), pred.width()) != (reference.height(), reference.width()) {
        return Err(Error::InvalidInput(format!(
            "prediction shape ({}, {}) != reference shape ({}, {})",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, u, d) in reference.valid_entries() {
        sum += smooth_l1(pred.values()[(v, u)] - d);
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateInput(
            "reference disparity has no valid pixels".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Tape version of [`disparity_loss`], differentiable in the prediction.
pub fn disparity_loss_on_tape(
    tape: &Tape,
    pred: Var,
    reference: &DisparityMap,
) -> Result<Var> {
    tape.smooth_l1(pred, reference.values(), reference.valid())
}

/// Warping loss on one (left, right) feature pair: rescale the reference to
/// the feature grid, warp the right feature, optionally restrict to a channel
/// subset, and return the masked cosine dissimilarity.
pub fn warping_loss_on_pair(
    tape: &Tape,
    left: Var,
    right: Var,
    d_ref: &ReferenceDisparity,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(left);
    let (left, right) = if cfg.channel_fraction < 1.0 {
        let indices = ops::subset_indices(shape[2], cfg.channel_fraction, cfg.channel_seed)?;
        (
            tape.select_channels(left, &indices),
            tape.select_channels(right, &indices),
        )
    } else {
        (left, right)
    };
    let d_layer = d_ref.at_resolution(shape[0], shape[1])?;
    let (warped, mask) = tape.warp_horizontal(
        right,
        d_layer.values(),
        d_layer.valid(),
        cfg.warp_sign.offset(),
    )?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateInput(format!(
            "warp of layer {} is fully masked out",
            cfg.tapped_layer
        )));
    }
    tape.cosine_dissimilarity(left, warped, &mask)
}

/// Warping loss on the configured tap of a model's forward pass.
pub fn warping_loss_on_taps(
    tape: &Tape,
    taps: &BTreeMap<String, (Var, Var)>,
    d_ref: &ReferenceDisparity,
    cfg: &LossConfig,
) -> Result<Var> {
    let &(left, right) = taps.get(&cfg.tapped_layer).ok_or_else(|| {
        Error::Config(format!(
            "unknown tap layer {} (available: {})",
            cfg.tapped_layer,
            taps.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    warping_loss_on_pair(tape, left, right, d_ref, cfg)
}

/// The white-box attack objective for one forward pass.
///
/// `joint` with `lambda_mix == 0` takes the disparity-only path exactly, so
/// the two configurations are indistinguishable by value.
pub fn attack_loss_on_pass(
    tape: &Tape,
    pass: &ForwardPass,
    d_ref: &ReferenceDisparity,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    match cfg.loss_kind {
        LossKind::DisparityOnly => {
            disparity_loss_on_tape(tape, pass.disparity, d_ref.full_resolution())
        }
        LossKind::WarpOnly => warping_loss_on_taps(tape, &pass.taps, d_ref, cfg),
        LossKind::Joint => {
            let ld = disparity_loss_on_tape(tape, pass.disparity, d_ref.full_resolution())?;
            if cfg.lambda_mix == 0.0 {
                return Ok(ld);
            }
            let lw = warping_loss_on_taps(tape, &pass.taps, d_ref, cfg)?;
            Ok(tape.add(ld, tape.scale(lw, cfg.lambda_mix)))
        }
        LossKind::Proxy => Err(Error::Config(
            "proxy loss needs the proxy path, not a victim forward pass".into(),
        )),
    }
}

/// Black-box objective: the warping loss computed entirely on proxy features
/// of the two images. No victim model appears in the signature, which is the
/// contract.
pub fn proxy_loss_on_tape<P: FeatureExtractor + ?Sized>(
    tape: &Tape,
    proxy: &P,
    left_image: Var,
    right_image: Var,
    d_ref: &ReferenceDisparity,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let left_feats = proxy.features(tape, left_image)?;
    let right_feats = proxy.features(tape, right_image)?;
    let &left = left_feats.get(&cfg.tapped_layer).ok_or_else(|| {
        Error::Config(format!(
            "unknown proxy layer {} (available: {})",
            cfg.tapped_layer,
            left_feats.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let right = right_feats[&cfg.tapped_layer];
    warping_loss_on_pair(tape, left, right, d_ref, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use crate::models::{DifferentiableStereo, ProxyConfig, ProxyNet, ToyConfig, ToyStereoNet};
    use crate::types::{FeatureMap, StereoSample, ValidityMask};
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn const_map(h: usize, w: usize, v: f64) -> DisparityMap {
        DisparityMap::constant(h, w, v).unwrap()
    }

    fn gt_reference(map: DisparityMap) -> ReferenceDisparity {
        ReferenceDisparity::new(map, ReferenceSource::GroundTruth)
    }

    // ---------------- disparity loss ----------------

    #[test]
    fn disparity_loss_exact_match_is_zero() {
        let mut r = rng(1);
        let values = Array2::from_shape_fn((5, 6), |_| r.random_range(0.0..8.0));
        let a = DisparityMap::from_values(values).unwrap();
        assert_eq!(disparity_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn disparity_loss_quadratic_branch() {
        let pred = const_map(3, 4, 2.5);
        let reference = const_map(3, 4, 2.0);
        let loss = disparity_loss(&pred, &reference).unwrap();
        assert!((loss - 0.125).abs() < 1e-12);
    }

    #[test]
    fn disparity_loss_linear_branch() {
        let pred = const_map(3, 4, 5.0);
        let reference = const_map(3, 4, 2.0);
        let loss = disparity_loss(&pred, &reference).unwrap();
        assert!((loss - 2.5).abs() < 1e-12);
    }

    #[test]
    fn disparity_loss_needs_valid_pixels() {
        let values = Array2::zeros((2, 2));
        let valid = Array2::from_elem((2, 2), false);
        let reference = DisparityMap::new(values, valid).unwrap();
        let pred = const_map(2, 2, 1.0);
        assert!(matches!(
            disparity_loss(&pred, &reference),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn tape_smooth_l1_matches_pure_loss() {
        let mut r = rng(2);
        let pred_values = Array2::from_shape_fn((4, 7), |_| r.random_range(0.0..6.0));
        let ref_values = Array2::from_shape_fn((4, 7), |_| r.random_range(0.0..6.0));
        let pred = DisparityMap::from_values(pred_values.clone()).unwrap();
        let reference = DisparityMap::from_values(ref_values).unwrap();
        let pure = disparity_loss(&pred, &reference).unwrap();
        let tape = Tape::new();
        let p = tape.leaf2(pred_values);
        let l = disparity_loss_on_tape(&tape, p, &reference).unwrap();
        assert!((tape.scalar_value(l) - pure).abs() < 1e-15);
    }

    // ---------------- warping loss ----------------

    /// Taps constructed so the right feature is the exact inverse warp of the
    /// left under a constant integer disparity: the loss must vanish.
    #[test]
    fn warping_loss_vanishes_on_consistent_taps() {
        let (h, w, c, k) = (6, 12, 6, 3usize);
        let mut r = rng(3);
        let right = Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0));
        let mut left = Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0));
        for v in 0..h {
            for u in k..w {
                for ch in 0..c {
                    left[(v, u, ch)] = right[(v, u - k, ch)];
                }
            }
        }
        let tape = Tape::new();
        let lv = tape.leaf3(left);
        let rv = tape.leaf3(right);
        let d_ref = gt_reference(const_map(h, w, k as f64));
        let cfg = LossConfig {
            loss_kind: LossKind::WarpOnly,
            ..LossConfig::default()
        };
        let loss = warping_loss_on_pair(&tape, lv, rv, &d_ref, &cfg).unwrap();
        assert!(tape.scalar_value(loss) <= 1e-5);
    }

    #[test]
    fn warping_loss_is_one_for_orthogonal_features() {
        let (h, w) = (4, 5);
        let mut left = Array3::zeros((h, w, 2));
        let mut right = Array3::zeros((h, w, 2));
        left.index_axis_mut(ndarray::Axis(2), 0).fill(1.0);
        right.index_axis_mut(ndarray::Axis(2), 1).fill(1.0);
        let tape = Tape::new();
        let lv = tape.leaf3(left);
        let rv = tape.leaf3(right);
        let d_ref = gt_reference(const_map(h, w, 0.0));
        let loss =
            warping_loss_on_pair(&tape, lv, rv, &d_ref, &LossConfig::default()).unwrap();
        assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warping_loss_channel_subset_matches_recorded_indices() {
        let (h, w, c) = (5, 9, 8);
        let mut r = rng(4);
        let left = Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0));
        let right = Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0));
        let d = const_map(h, w, 1.5);

        let cfg = LossConfig {
            channel_fraction: 0.5,
            channel_seed: 77,
            ..LossConfig::default()
        };
        let tape = Tape::new();
        let lv = tape.leaf3(left.clone());
        let rv = tape.leaf3(right.clone());
        let d_ref = gt_reference(d.clone());
        let loss = warping_loss_on_pair(&tape, lv, rv, &d_ref, &cfg).unwrap();

        // Recompute on exactly the recorded subset through the pure kernels.
        let lf = FeatureMap::new(left, "L").unwrap();
        let rf = FeatureMap::new(right, "R").unwrap();
        let subset_l = crate::ops::channel_subset(&lf, 0.5, 77).unwrap();
        let indices = crate::ops::parse_channel_subset(subset_l.layer_name()).unwrap();
        let subset_r = crate::ops::select_channels(&rf, &indices).unwrap();
        let (warped, mask) =
            crate::ops::warp_right_to_left(&subset_r, &d, WarpSign::Negative).unwrap();
        let expected = crate::ops::cosine_dissimilarity(&subset_l, &warped, &mask).unwrap();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn warping_loss_unknown_layer_is_config_error() {
        let net = ToyStereoNet::new(ToyConfig::default(), 1);
        let mut r = rng(5);
        let image = Array3::from_shape_fn((16, 32, 3), |_| r.random_range(0.0..1.0));
        let tape = Tape::new();
        let l = tape.leaf3(image.clone());
        let rr = tape.leaf3(image);
        let pass = net.forward(&tape, l, rr).unwrap();
        let d_ref = gt_reference(const_map(16, 32, 1.0));
        let cfg = LossConfig {
            tapped_layer: "F9".into(),
            ..LossConfig::default()
        };
        assert!(matches!(
            warping_loss_on_taps(&tape, &pass.taps, &d_ref, &cfg),
            Err(Error::Config(_))
        ));
    }

    // ---------------- joint loss ----------------

    fn toy_setup(seed: u64) -> (ToyStereoNet, StereoSample, ReferenceDisparity) {
        let net = ToyStereoNet::new(ToyConfig::default(), seed);
        let mut r = rng(seed + 100);
        let left = Array3::from_shape_fn((16, 32, 3), |_| r.random_range(0.0..1.0));
        let right = Array3::from_shape_fn((16, 32, 3), |_| r.random_range(0.0..1.0));
        let gt = const_map(16, 32, 3.0);
        let sample = StereoSample::new(left, right, Some(gt.clone()), "toy").unwrap();
        (net, sample, gt_reference(gt))
    }

    fn eval_losses(
        net: &ToyStereoNet,
        sample: &StereoSample,
        d_ref: &ReferenceDisparity,
        cfg: &LossConfig,
    ) -> (f64, f64, f64) {
        let tape = Tape::new();
        let l = tape.leaf3(sample.left.clone());
        let r = tape.leaf3(sample.right.clone());
        let pass = net.forward(&tape, l, r).unwrap();
        let joint = attack_loss_on_pass(&tape, &pass, d_ref, cfg).unwrap();
        let ld =
            disparity_loss_on_tape(&tape, pass.disparity, d_ref.full_resolution()).unwrap();
        let lw = warping_loss_on_taps(&tape, &pass.taps, d_ref, cfg).unwrap();
        (
            tape.scalar_value(joint),
            tape.scalar_value(ld),
            tape.scalar_value(lw),
        )
    }

    #[test]
    fn joint_with_zero_lambda_equals_disparity_only() {
        let (net, sample, d_ref) = toy_setup(6);
        let cfg = LossConfig {
            lambda_mix: 0.0,
            ..LossConfig::default()
        };
        let (joint, ld, _) = eval_losses(&net, &sample, &d_ref, &cfg);
        assert_eq!(joint, ld);
    }

    #[test]
    fn joint_is_sum_of_components() {
        let (net, sample, d_ref) = toy_setup(7);
        let cfg = LossConfig::default(); // lambda 1
        let (joint, ld, lw) = eval_losses(&net, &sample, &d_ref, &cfg);
        assert!((joint - (ld + lw)).abs() < 1e-12);
    }

    #[test]
    fn joint_is_affine_in_lambda() {
        let (net, sample, d_ref) = toy_setup(8);
        let cfg1 = LossConfig {
            lambda_mix: 1.0,
            ..LossConfig::default()
        };
        let cfg2 = LossConfig {
            lambda_mix: 2.0,
            ..LossConfig::default()
        };
        let (j1, _, lw) = eval_losses(&net, &sample, &d_ref, &cfg1);
        let (j2, _, _) = eval_losses(&net, &sample, &d_ref, &cfg2);
        assert!((j2 - j1 - lw).abs() < 1e-9);
    }

    // ---------------- proxy loss ----------------

    #[test]
    fn proxy_loss_is_zero_for_identical_images_and_zero_reference() {
        let proxy = ProxyNet::new(ProxyConfig::default(), 9);
        let mut r = rng(10);
        let image = Array3::from_shape_fn((16, 16, 3), |_| r.random_range(0.0..1.0));
        let tape = Tape::new();
        let l = tape.leaf3(image.clone());
        let rr = tape.leaf3(image);
        let d_ref = gt_reference(const_map(16, 16, 0.0));
        let cfg = LossConfig {
            loss_kind: LossKind::Proxy,
            tapped_layer: "F1p".into(),
            ..LossConfig::default()
        };
        let loss = proxy_loss_on_tape(&tape, &proxy, l, rr, &d_ref, &cfg).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-12);
    }

    /// A proxy that is a single fixed 3x3 convolution.
    struct ConvProxy {
        weight: ndarray::Array4<f64>,
    }

    impl FeatureExtractor for ConvProxy {
        fn layer_names(&self) -> Vec<String> {
            vec!["conv".into()]
        }
        fn features(&self, tape: &Tape, image: Var) -> Result<BTreeMap<String, Var>> {
            let w = tape.leaf4(self.weight.clone());
            let b = tape.leaf1(ndarray::Array1::zeros(self.weight.dim().3));
            let f = tape.conv2d(image, w, b, 1, 1);
            Ok([("conv".to_string(), f)].into_iter().collect())
        }
    }

    #[test]
    fn proxy_loss_matches_scalar_brute_force() {
        let mut r = rng(11);
        let weight =
            ndarray::Array4::from_shape_fn((3, 3, 3, 2), |_| r.random_range(-0.5..0.5));
        let proxy = ConvProxy {
            weight: weight.clone(),
        };
        let left = Array3::from_shape_fn((8, 8, 3), |_| r.random_range(0.0..1.0));
        let right = Array3::from_shape_fn((8, 8, 3), |_| r.random_range(0.0..1.0));
        let d = const_map(8, 8, 1.5);

        let tape = Tape::new();
        let lv = tape.leaf3(left.clone());
        let rv = tape.leaf3(right.clone());
        let cfg = LossConfig {
            loss_kind: LossKind::Proxy,
            tapped_layer: "conv".into(),
            ..LossConfig::default()
        };
        let d_ref = gt_reference(d.clone());
        let loss = proxy_loss_on_tape(&tape, &proxy, lv, rv, &d_ref, &cfg).unwrap();

        // Brute force with independent loops: pad-1 conv, shift by 1.5 with
        // manual linear interpolation, per-pixel cosine, mean.
        let conv = |img: &Array3<f64>| -> Array3<f64> {
            let mut out = Array3::zeros((8, 8, 2));
            for v in 0..8i64 {
                for u in 0..8i64 {
                    for co in 0..2 {
                        let mut acc = 0.0;
                        for dv in -1..=1i64 {
                            for du in -1..=1i64 {
                                let (sv, su) = (v + dv, u + du);
                                if (0..8).contains(&sv) && (0..8).contains(&su) {
                                    for ci in 0..3 {
                                        acc += img[(sv as usize, su as usize, ci)]
                                            * weight[((dv + 1) as usize, (du + 1) as usize, ci, co)];
                                    }
                                }
                            }
                        }
                        out[(v as usize, u as usize, co)] = acc;
                    }
                }
            }
            out
        };
        let fl = conv(&left);
        let fr = conv(&right);
        let mut cos_sum = 0.0;
        let mut count = 0;
        for v in 0..8 {
            for u in 0..8usize {
                let x = u as f64 - 1.5;
                if x < 0.0 {
                    continue;
                }
                let (u0, t) = (x.floor() as usize, x - x.floor());
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for c in 0..2 {
                    let warped = (1.0 - t) * fr[(v, u0, c)] + t * fr[(v, u0 + 1, c)];
                    dot += fl[(v, u, c)] * warped;
                    na += fl[(v, u, c)] * fl[(v, u, c)];
                    nb += warped * warped;
                }
                cos_sum += dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8));
                count += 1;
            }
        }
        let expected = 1.0 - cos_sum / count as f64;
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-7);
    }

    #[test]
    fn proxy_loss_range_contract_across_layers() {
        let proxy = ProxyNet::new(ProxyConfig::default(), 12);
        let mut r = rng(13);
        let left = Array3::from_shape_fn((16, 32, 3), |_| r.random_range(0.0..1.0));
        let right = Array3::from_shape_fn((16, 32, 3), |_| r.random_range(0.0..1.0));
        let d_ref = gt_reference(const_map(16, 32, 2.0));
        for layer in ["F1p", "F4p"] {
            let tape = Tape::new();
            let l = tape.leaf3(left.clone());
            let rr = tape.leaf3(right.clone());
            let cfg = LossConfig {
                loss_kind: LossKind::Proxy,
                tapped_layer: layer.into(),
                ..LossConfig::default()
            };
            let loss = proxy_loss_on_tape(&tape, &proxy, l, rr, &d_ref, &cfg).unwrap();
            let value = tape.scalar_value(loss);
            assert!(value.is_finite() && (0.0..=2.0).contains(&value), "{layer}: {value}");
        }
    }

    // ---------------- image-space gradients ----------------

    #[test]
    fn image_gradients_match_finite_differences() {
        let (net, sample, d_ref) = toy_setup(14);
        let proxy = ProxyNet::new(ProxyConfig::default(), 15);
        let kinds = [
            LossKind::DisparityOnly,
            LossKind::WarpOnly,
            LossKind::Joint,
            LossKind::Proxy,
        ];
        for kind in kinds {
            let cfg = LossConfig {
                loss_kind: kind,
                tapped_layer: if kind == LossKind::Proxy {
                    "F2p".into()
                } else {
                    "F2".into()
                },
                ..LossConfig::default()
            };
            let eval = |left: &Array3<f64>, right: &Array3<f64>, want_grads: bool| {
                let tape = Tape::new();
                let l = tape.leaf3(left.clone());
                let rr = tape.leaf3(right.clone());
                let loss = if kind == LossKind::Proxy {
                    proxy_loss_on_tape(&tape, &proxy, l, rr, &d_ref, &cfg).unwrap()
                } else {
                    let pass = net.forward(&tape, l, rr).unwrap();
                    attack_loss_on_pass(&tape, &pass, &d_ref, &cfg).unwrap()
                };
                let value = tape.scalar_value(loss);
                if !want_grads {
                    return (value, None, None);
                }
                let grads = tape.backward(loss).unwrap();
                (value, grads.get3(l), grads.get3(rr))
            };

            let (_, gl, gr) = eval(&sample.left, &sample.right, true);
            let (gl, gr) = (gl.unwrap(), gr.unwrap());
            let mut r = rng(16);
            let mut left = sample.left.clone();
            let mut right = sample.right.clone();
            for _ in 0..10 {
                let (v, u, c) = (
                    r.random_range(0..16),
                    r.random_range(0..32),
                    r.random_range(0..3),
                );
                for side in 0..2 {
                    let (arr, grad) = if side == 0 {
                        (&mut left, &gl)
                    } else {
                        (&mut right, &gr)
                    };
                    let orig = arr[(v, u, c)];
                    arr[(v, u, c)] = orig + 1e-3;
                    let plus = eval(&left, &right, false).0;
                    let (arr, _) = if side == 0 {
                        (&mut left, &gl)
                    } else {
                        (&mut right, &gr)
                    };
                    arr[(v, u, c)] = orig - 1e-3;
                    let minus = eval(&left, &right, false).0;
                    let (arr, _) = if side == 0 {
                        (&mut left, &gl)
                    } else {
                        (&mut right, &gr)
                    };
                    arr[(v, u, c)] = orig;
                    let numeric = (plus - minus) / 2e-3;
                    let rel = relative_error(grad[(v, u, c)], numeric);
                    assert!(
                        rel <= 1e-3,
                        "{}: side {side} rel {rel} at ({v}, {u}, {c})",
                        cfg.loss_kind.as_str()
                    );
                }
            }
        }
    }

    #[test]
    fn reference_rescale_cache_is_consistent() {
        let d_ref = gt_reference(const_map(16, 32, 4.0));
        let a = d_ref.at_resolution(8, 16).unwrap();
        let b = d_ref.at_resolution(8, 16).unwrap();
        assert_eq!(a.values(), b.values());
        assert!((a.values()[(3, 5)] - 2.0).abs() < 1e-12);
    }
}
