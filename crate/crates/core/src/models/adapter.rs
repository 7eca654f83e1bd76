//! Adapter contract for plugging external stereo models behind the
//! [`StereoModel`] interface.
//!
//! Registration runs a compliance self-test on a deterministic probe pair:
//! prediction shape and range, presence of every declared tap, left/right tap
//! shape equality, and (when declared) per-tap strides. Violations are
//! reported per check.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{StereoModel, TapDescriptor, TapPair};
use crate::types::{DisparityMap, StereoSample};

/// Declarative description of an external model: what it is called, which
/// taps it exposes (and at which strides), its disparity range, and the probe
/// size used for the registration self-test.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterSpec {
    pub model_name: String,
    pub taps: Vec<TapDescriptor>,
    pub d_max: f64,
    pub probe_height: usize,
    pub probe_width: usize,
    /// Expected downsampling factor per tap; taps not listed are not
    /// stride-checked.
    #[serde(default)]
    pub tap_strides: BTreeMap<String, usize>,
}

/// An external model that passed registration.
pub struct AdaptedModel {
    spec: AdapterSpec,
    inner: Box<dyn StereoModel>,
}

impl AdaptedModel {
    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }
}

impl StereoModel for AdaptedModel {
    fn name(&self) -> &str {
        &self.spec.model_name
    }

    fn d_max(&self) -> f64 {
        self.spec.d_max
    }

    fn tap_layers(&self) -> Vec<TapDescriptor> {
        self.spec.taps.clone()
    }

    fn predict(&mut self, sample: &StereoSample) -> Result<DisparityMap> {
        self.inner.predict(sample)
    }

    fn taps(&self) -> &BTreeMap<String, TapPair> {
        self.inner.taps()
    }
}

fn probe_sample(height: usize, width: usize) -> Result<StereoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70726f_6265);
    let mut image = || Array3::from_shape_fn((height, width, 3), |_| rng.random_range(0.0..1.0));
    StereoSample::new(image(), image(), None, "adapter-probe")
}

/// Wraps `model` behind the [`StereoModel`] contract after verifying it.
///
/// Every failed check is reported; registration succeeds only when all pass.
pub fn register_adapter(spec: AdapterSpec, mut model: Box<dyn StereoModel>) -> Result<AdaptedModel> {
    let probe = probe_sample(spec.probe_height, spec.probe_width)?;
    let mut failures = Vec::new();

    if (model.d_max() - spec.d_max).abs() > 1e-9 {
        failures.push(format!(
            "declared d_max {} but model reports {}",
            spec.d_max,
            model.d_max()
        ));
    }

    match model.predict(&probe) {
        Err(e) => failures.push(format!("prediction failed on probe: {e}")),
        Ok(pred) => {
            if (pred.height(), pred.width()) != (spec.probe_height, spec.probe_width) {
                failures.push(format!(
                    "prediction shape ({}, {}) != input shape ({}, {})",
                    pred.height(),
                    pred.width(),
                    spec.probe_height,
                    spec.probe_width
                ));
            }
            if let Some((v, u, value)) = pred
                .valid_entries()
                .find(|&(_, _, value)| value > spec.d_max + 1e-9)
            {
                failures.push(format!(
                    "prediction {value} at ({u}, {v}) exceeds d_max {}",
                    spec.d_max
                ));
            }

            for tap in &spec.taps {
                let Some(pair) = model.taps().get(&tap.name) else {
                    failures.push(format!("declared tap {} was not captured", tap.name));
                    continue;
                };
                let left_dim = pair.left.values().dim();
                let right_dim = pair.right.values().dim();
                if left_dim != right_dim {
                    failures.push(format!(
                        "tap {}: left shape {:?} != right shape {:?}",
                        tap.name, left_dim, right_dim
                    ));
                }
                if let Some(&stride) = spec.tap_strides.get(&tap.name) {
                    if left_dim.0 * stride != spec.probe_height
                        || left_dim.1 * stride != spec.probe_width
                    {
                        failures.push(format!(
                            "tap {}: shape ({}, {}) inconsistent with stride {stride} on a ({}, {}) probe",
                            tap.name, left_dim.0, left_dim.1, spec.probe_height, spec.probe_width
                        ));
                    }
                }
            }
        }
    }

    if failures.is_empty() {
        Ok(AdaptedModel { spec, inner: model })
    } else {
        Err(Error::Contract(failures.join("; ")))
    }
}
