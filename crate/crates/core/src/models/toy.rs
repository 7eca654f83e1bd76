//! The bundled toy stereo victim.
//!
//! A three-stage Siamese ELU encoder (taps `F1` at full, `F2` at half, `F3`
//! at quarter resolution) feeds per-level horizontal correlation volumes over
//! `d in 0..=d_max`; the gain-weighted sum of the volumes goes through a
//! soft-argmin head, so the prediction lies in `[0, d_max]` by construction
//! and is differentiable end to end.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::params::{load_checkpoint, save_checkpoint, stable_hash_hex, Adam, ParamStore};
use crate::models::{DifferentiableStereo, ForwardPass, StereoModel, TapDescriptor, TapPair};
use crate::tape::{Tape, Var};
use crate::types::{DisparityMap, FeatureMap, StereoSample};

pub const TOY_TAP_NAMES: [&str; 3] = ["F1", "F2", "F3"];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyConfig {
    pub stage_channels: [usize; 3],
    pub d_max: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64],
            d_max: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyStereoNet {
    config: ToyConfig,
    params: ParamStore,
    init_seed: u64,
    last_taps: BTreeMap<String, TapPair>,
}

impl ToyStereoNet {
    pub fn new(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let [c1, c2, c3] = config.stage_channels;
        params.init_conv("enc1", 3, 3, 3, c1, &mut rng);
        params.init_conv("enc2", 3, 3, c1, c2, &mut rng);
        params.init_conv("enc3", 3, 3, c2, c3, &mut rng);
        params.init_scalar("gain1", 1.0);
        params.init_scalar("gain2", 1.0);
        params.init_scalar("gain3", 1.0);
        Self {
            config,
            params,
            init_seed: seed,
            last_taps: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn config_hash(&self) -> String {
        stable_hash_hex(serde_json::to_string(&self.config).unwrap().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format_version": 1,
            "kind": "toy_stereo",
            "config": self.config,
            "seed": self.init_seed,
            "config_hash": self.config_hash(),
        });
        save_checkpoint(path, &header.to_string(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        let header: serde_json::Value = serde_json::from_str(&header)
            .map_err(|e| Error::format(path, None, format!("bad checkpoint header: {e}")))?;
        if header["kind"] != "toy_stereo" {
            return Err(Error::format(
                path,
                None,
                format!("checkpoint kind {} is not toy_stereo", header["kind"]),
            ));
        }
        let config: ToyConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::format(path, None, format!("bad checkpoint config: {e}")))?;
        let seed = header["seed"].as_u64().unwrap_or(0);
        Ok(Self {
            config,
            params,
            init_seed: seed,
            last_taps: BTreeMap::new(),
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::InvalidInput(format!(
                "expected an (H, W, 3) image, got {shape:?}"
            )));
        }
        let min_w = self.config.d_max + 3;
        if shape[1] < min_w || shape[0] < 4 {
            return Err(Error::InvalidInput(format!(
                "input {}x{} too small: need width >= {min_w} and height >= 4",
                shape[0], shape[1]
            )));
        }
        Ok(())
    }

    /// Trains on stereograms with ground truth, smooth-L1 objective, Adam.
    ///
    /// Deterministic for a fixed `(dataset, epochs, lr, seed)`; fails with a
    /// training error (naming the epoch) if the loss goes non-finite.
    pub fn fit(
        &mut self,
        dataset: &[StereoSample],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<TrainReport> {
        if dataset.is_empty() {
            return Err(Error::InvalidInput("empty training dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
        let mut adam = Adam::new(lr);
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_sum = 0.0;
            for &idx in &order {
                let sample = &dataset[idx];
                let gt = sample.gt_disparity.as_ref().ok_or_else(|| {
                    Error::Config(format!("sample {} has no ground truth", sample.sample_id))
                })?;
                let tape = Tape::new();
                let left = tape.leaf3(sample.left.clone());
                let right = tape.leaf3(sample.right.clone());
                let pass = self.forward(&tape, left, right)?;
                let loss = tape.smooth_l1(pass.disparity, gt.values(), gt.valid())?;
                let loss_value = tape.scalar_value(loss);
                if !loss_value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: format!("loss became {loss_value} on sample {}", sample.sample_id),
                    });
                }
                let grads = tape.backward(loss)?;
                let mut param_grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
                for (name, var) in &pass.params {
                    if let Some(g) = grads.get(*var) {
                        param_grads.insert(name.clone(), g.clone());
                    }
                }
                adam.step(&mut self.params, &param_grads);
                report.step_losses.push(loss_value);
                epoch_sum += loss_value;
            }
            report.epoch_losses.push(epoch_sum / order.len() as f64);
        }
        Ok(report)
    }
}

impl DifferentiableStereo for ToyStereoNet {
    fn d_max(&self) -> f64 {
        self.config.d_max as f64
    }

    fn tap_layer_names(&self) -> Vec<String> {
        TOY_TAP_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn forward(&self, tape: &Tape, left: Var, right: Var) -> Result<ForwardPass> {
        let shape = tape.shape(left);
        self.check_input(&shape)?;
        if tape.shape(right) != shape {
            return Err(Error::InvalidInput(
                "left and right images differ in shape".into(),
            ));
        }
        let (h, w) = (shape[0], shape[1]);
        let p = self.params.leaves(tape);

        // Shared-weight Siamese encoder: both streams use the same leaves,
        // so parameter gradients accumulate from both.
        let encode = |img: Var| {
            let f1 = tape.elu(tape.conv2d(img, p["enc1.w"], p["enc1.b"], 1, 1));
            let f2 = tape.elu(tape.conv2d(f1, p["enc2.w"], p["enc2.b"], 2, 1));
            let f3 = tape.elu(tape.conv2d(f2, p["enc3.w"], p["enc3.b"], 2, 1));
            (f1, f2, f3)
        };
        let (l1, l2, l3) = encode(left);
        let (r1, r2, r3) = encode(right);

        // Per-level correlation volumes at full resolution, gain-weighted.
        let level = |fl: Var, fr: Var, gain: &str| {
            let flu = if tape.shape(fl)[0] == h {
                fl
            } else {
                tape.upsample_bilinear(fl, h, w)
            };
            let fru = if tape.shape(fr)[0] == h {
                fr
            } else {
                tape.upsample_bilinear(fr, h, w)
            };
            let vol = tape.correlation_volume(flu, fru, self.config.d_max);
            tape.mul_scalar_var(vol, p[gain])
        };
        let s1 = level(l1, r1, "gain1");
        let s2 = level(l2, r2, "gain2");
        let s3 = level(l3, r3, "gain3");
        let scores = tape.add(tape.add(s1, s2), s3);
        let disparity = tape.soft_argmin(scores);

        let mut taps = BTreeMap::new();
        taps.insert("F1".to_string(), (l1, r1));
        taps.insert("F2".to_string(), (l2, r2));
        taps.insert("F3".to_string(), (l3, r3));
        Ok(ForwardPass {
            disparity,
            taps,
            params: p,
        })
    }
}

impl StereoModel for ToyStereoNet {
    fn name(&self) -> &str {
        "toy_stereo"
    }

    fn d_max(&self) -> f64 {
        self.config.d_max as f64
    }

    fn tap_layers(&self) -> Vec<TapDescriptor> {
        TOY_TAP_NAMES
            .iter()
            .map(|name| TapDescriptor {
                name: name.to_string(),
                weight_sharing: true,
            })
            .collect()
    }

    fn predict(&mut self, sample: &StereoSample) -> Result<DisparityMap> {
        let tape = Tape::new();
        let left = tape.leaf3(sample.left.clone());
        let right = tape.leaf3(sample.right.clone());
        let pass = self.forward(&tape, left, right)?;
        self.last_taps.clear();
        for (name, (l, r)) in &pass.taps {
            self.last_taps.insert(
                name.clone(),
                TapPair {
                    left: FeatureMap::new(tape.value3(*l), name.clone())?,
                    right: FeatureMap::new(tape.value3(*r), name.clone())?,
                },
            );
        }
        DisparityMap::from_values(tape.value2(pass.disparity))
    }

    fn taps(&self) -> &BTreeMap<String, TapPair> {
        &self.last_taps
    }
}

/// Per-step and per-epoch training losses.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh default-config toy network.
pub fn train_toy(
    dataset: &[StereoSample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ToyStereoNet, TrainReport)> {
    let mut net = ToyStereoNet::new(ToyConfig::default(), seed);
    let report = net.fit(dataset, epochs, lr, seed)?;
    Ok((net, report))
}
