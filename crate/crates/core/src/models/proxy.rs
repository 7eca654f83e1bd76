//! The proxy feature extractor for black-box attacks: a small generic
//! convolutional classifier backbone with taps `F1p..F4p` at strides
//! 1, 2, 4 and 8. It has no disparity head; a brief synthetic
//! texture-classification pretraining stands in for a classification-trained
//! backbone, and a random-initialized proxy is available as an ablation.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::params::{load_checkpoint, save_checkpoint, Adam, ParamStore};
use crate::models::FeatureExtractor;
use crate::tape::{Tape, Var};

pub const PROXY_TAP_NAMES: [&str; 4] = ["F1p", "F2p", "F3p", "F4p"];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProxyConfig {
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 24, 32],
            num_classes: 4,
        }
    }
}

/// Recipe for the brief texture-classification pretraining.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProxyTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub patch_size: usize,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 2e-3,
            patch_size: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyNet {
    config: ProxyConfig,
    params: ParamStore,
    init_seed: u64,
}

impl ProxyNet {
    pub fn new(config: ProxyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let [c1, c2, c3, c4] = config.stage_channels;
        params.init_conv("stage1", 3, 3, 3, c1, &mut rng);
        params.init_conv("stage2", 3, 3, c1, c2, &mut rng);
        params.init_conv("stage3", 3, 3, c2, c3, &mut rng);
        params.init_conv("stage4", 3, 3, c3, c4, &mut rng);
        params.init_linear("head", c4, config.num_classes, &mut rng);
        Self {
            config,
            params,
            init_seed: seed,
        }
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    fn backbone(&self, tape: &Tape, image: Var, p: &BTreeMap<String, Var>) -> [Var; 4] {
        let f1 = tape.elu(tape.conv2d(image, p["stage1.w"], p["stage1.b"], 1, 1));
        let f2 = tape.elu(tape.conv2d(f1, p["stage2.w"], p["stage2.b"], 2, 1));
        let f3 = tape.elu(tape.conv2d(f2, p["stage3.w"], p["stage3.b"], 2, 1));
        let f4 = tape.elu(tape.conv2d(f3, p["stage4.w"], p["stage4.b"], 2, 1));
        [f1, f2, f3, f4]
    }

    /// Classification logits, used only during pretraining.
    fn logits(&self, tape: &Tape, image: Var) -> (Var, BTreeMap<String, Var>) {
        let p = self.params.leaves(tape);
        let feats = self.backbone(tape, image, &p);
        let pooled = tape.global_mean_pool(feats[3]);
        let logits = tape.linear(pooled, p["head.w"], p["head.b"]);
        (logits, p)
    }

    /// Brief supervised pretraining on synthetic grating textures whose class
    /// is their spatial frequency. Returns per-step cross-entropy losses.
    pub fn fit_textures(&mut self, cfg: &ProxyTrainConfig, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
        let mut adam = Adam::new(cfg.lr);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let class = rng.random_range(0..self.config.num_classes);
            let patch = texture_patch(class, cfg.patch_size, &mut rng);
            let tape = Tape::new();
            let image = tape.leaf3(patch);
            let (logits, p) = self.logits(&tape, image);
            let loss = tape.cross_entropy(logits, class);
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    epoch: step,
                    message: format!("proxy pretraining loss became {loss_value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let mut param_grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            for (name, var) in &p {
                if let Some(g) = grads.get(*var) {
                    param_grads.insert(name.clone(), g.clone());
                }
            }
            adam.step(&mut self.params, &param_grads);
            losses.push(loss_value);
        }
        Ok(losses)
    }

    /// Argmax class of one patch; test support for the pretraining recipe.
    pub fn classify(&self, patch: &Array3<f64>) -> usize {
        let tape = Tape::new();
        let image = tape.leaf3(patch.clone());
        let (logits, _) = self.logits(&tape, image);
        let values = tape.value(logits);
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[ndarray::IxDyn(&[best])] {
                best = i;
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format_version": 1,
            "kind": "proxy",
            "config": self.config,
            "seed": self.init_seed,
        });
        save_checkpoint(path, &header.to_string(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        let header: serde_json::Value = serde_json::from_str(&header)
            .map_err(|e| Error::format(path, None, format!("bad checkpoint header: {e}")))?;
        if header["kind"] != "proxy" {
            return Err(Error::format(
                path,
                None,
                format!("checkpoint kind {} is not proxy", header["kind"]),
            ));
        }
        let config: ProxyConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::format(path, None, format!("bad checkpoint config: {e}")))?;
        Ok(Self {
            config,
            params,
            init_seed: header["seed"].as_u64().unwrap_or(0),
        })
    }
}

impl FeatureExtractor for ProxyNet {
    fn layer_names(&self) -> Vec<String> {
        PROXY_TAP_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn features(&self, tape: &Tape, image: Var) -> Result<BTreeMap<String, Var>> {
        let shape = tape.shape(image);
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::InvalidInput(format!(
                "expected an (H, W, 3) image, got {shape:?}"
            )));
        }
        if shape[0] < 8 || shape[1] < 8 {
            return Err(Error::InvalidInput(format!(
                "proxy input {}x{} too small for stride-8 features",
                shape[0], shape[1]
            )));
        }
        let p = self.params.leaves(tape);
        let feats = self.backbone(tape, image, &p);
        Ok(PROXY_TAP_NAMES
            .iter()
            .zip(feats)
            .map(|(name, var)| (name.to_string(), var))
            .collect())
    }
}

/// Trains a fresh default-config proxy on the default texture recipe.
pub fn train_proxy(cfg: &ProxyTrainConfig, seed: u64) -> Result<ProxyNet> {
    let mut net = ProxyNet::new(ProxyConfig::default(), seed);
    net.fit_textures(cfg, seed)?;
    Ok(net)
}

/// Synthetic texture whose class is its grating period: class `k` has period
/// `3 * 2^k` pixels, random orientation (horizontal or vertical), random
/// phase, and a little per-pixel noise.
pub fn texture_patch(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let period = 3.0 * (1 << class) as f64;
    let horizontal = rng.random_bool(0.5);
    let phase = rng.random_range(0.0..TAU);
    let mut patch = Array3::zeros((size, size, 3));
    for v in 0..size {
        for u in 0..size {
            let coord = if horizontal { u as f64 } else { v as f64 };
            let base = 0.5 + 0.35 * (TAU * coord / period + phase).sin();
            for c in 0..3 {
                let noisy = base + rng.random_range(-0.05..0.05);
                patch[(v, u, c)] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    patch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_strides_are_1_2_4_8() {
        let net = ProxyNet::new(ProxyConfig::default(), 1);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = tape.leaf3(Array3::from_shape_fn((16, 32, 3), |_| {
            rng.random_range(0.0..1.0)
        }));
        let feats = net.features(&tape, image).unwrap();
        assert_eq!(tape.shape(feats["F1p"]), vec![16, 32, 8]);
        assert_eq!(tape.shape(feats["F2p"]), vec![8, 16, 16]);
        assert_eq!(tape.shape(feats["F3p"]), vec![4, 8, 24]);
        assert_eq!(tape.shape(feats["F4p"]), vec![2, 4, 32]);
    }

    #[test]
    fn pretraining_reduces_loss_and_classifies_textures() {
        let cfg = ProxyTrainConfig::default();
        let mut net = ProxyNet::new(ProxyConfig::default(), 3);
        let losses = net.fit_textures(&cfg, 3).unwrap();
        let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = losses[losses.len() - 30..].iter().sum::<f64>() / 30.0;
        assert!(
            tail < head * 0.5,
            "texture loss did not drop: head {head}, tail {tail}"
        );

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut correct = 0;
        let trials = 40;
        for i in 0..trials {
            let class = i % 4;
            let patch = texture_patch(class, cfg.patch_size, &mut rng);
            if net.classify(&patch) == class {
                correct += 1;
            }
        }
        assert!(
            correct * 10 >= trials * 7,
            "texture accuracy {correct}/{trials}"
        );
    }

    #[test]
    fn same_seed_same_proxy() {
        let a = ProxyNet::new(ProxyConfig::default(), 8);
        let b = ProxyNet::new(ProxyConfig::default(), 8);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = ProxyNet::new(ProxyConfig::default(), 21);
        let dir = std::env::temp_dir().join("stereowarp-proxy-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("proxy.ckpt");
        net.save(&path).unwrap();
        let loaded = ProxyNet::load(&path).unwrap();
        assert_eq!(loaded.params, net.params);
    }
}
