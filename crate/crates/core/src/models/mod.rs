//! Model contracts and the bundled victims: the trainable toy Siamese stereo
//! network, the proxy feature extractor, and the adapter for plugging in
//! external stereo models.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::types::{DisparityMap, FeatureMap, StereoSample};

mod adapter;
mod params;
mod proxy;
mod toy;

pub use adapter::{register_adapter, AdaptedModel, AdapterSpec};
pub use params::{load_checkpoint, save_checkpoint, stable_hash_hex, Adam, ParamStore};
pub use proxy::{train_proxy, ProxyConfig, ProxyNet, ProxyTrainConfig};
pub use toy::{train_toy, ToyConfig, ToyStereoNet, TrainReport};

/// A tap point exposed by a model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TapDescriptor {
    pub name: String,
    /// Whether the layer's weights are shared between the left and right
    /// streams; similarity profiling is restricted to such layers.
    pub weight_sharing: bool,
}

/// Left/right features captured at one tap during the most recent forward.
#[derive(Debug, Clone)]
pub struct TapPair {
    pub left: FeatureMap,
    pub right: FeatureMap,
}

/// Evaluation-facing contract for a stereo model: a prediction entry point
/// plus a registry of intermediate features captured per forward pass.
///
/// A model instance's tap registry is stateful during `predict`, so instances
/// are not safe for concurrent forward passes; clone per thread instead.
pub trait StereoModel {
    fn name(&self) -> &str;

    /// Upper bound of the disparity range the model can emit.
    fn d_max(&self) -> f64;

    fn tap_layers(&self) -> Vec<TapDescriptor>;

    /// Runs a forward pass, repopulating the tap registry, and returns the
    /// predicted disparity at input resolution.
    fn predict(&mut self, sample: &StereoSample) -> Result<DisparityMap>;

    /// Features captured by the most recent `predict`.
    fn taps(&self) -> &BTreeMap<String, TapPair>;
}

/// Outputs of a differentiable forward pass, as tape handles.
pub struct ForwardPass {
    pub disparity: Var,
    /// Layer name to (left, right) feature handles.
    pub taps: BTreeMap<String, (Var, Var)>,
    /// Parameter leaf handles, for training.
    pub params: BTreeMap<String, Var>,
}

/// A stereo model whose forward pass can be recorded on a [`Tape`], exposing
/// gradients with respect to the input images (for attacks) and parameters
/// (for training).
pub trait DifferentiableStereo {
    fn d_max(&self) -> f64;
    fn tap_layer_names(&self) -> Vec<String>;
    fn forward(&self, tape: &Tape, left: Var, right: Var) -> Result<ForwardPass>;
}

/// A network that exposes per-layer features of a single image; the proxy
/// side of the black-box attack. No disparity head is required.
pub trait FeatureExtractor {
    fn layer_names(&self) -> Vec<String>;
    fn features(&self, tape: &Tape, image: Var) -> Result<BTreeMap<String, Var>>;
}
