//! Classifier architectures with named internal-layer feature extraction.

mod archs;
mod layers;
mod store;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

use archs::{FeatureCollector, ResNet18, SmallCnn, Vgg16};
pub use store::ParamStore;

/// Layer-registry schema version; checkpoints from a different version are
/// refused.
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Resnet18,
    Vgg16,
    Smallcnn,
}

impl Arch {
    pub fn default_input_hw(&self) -> usize {
        match self {
            Arch::Resnet18 | Arch::Smallcnn => 32,
            Arch::Vgg16 => 224,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Arch::Resnet18),
            "vgg16" => Ok(Arch::Vgg16),
            "smallcnn" => Ok(Arch::Smallcnn),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Arch::Resnet18 => "resnet18",
            Arch::Vgg16 => "vgg16",
            Arch::Smallcnn => "smallcnn",
        };
        f.write_str(s)
    }
}

/// A hookable layer: name, flattened per-sample dimensionality and position
/// in forward order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub dim: usize,
    pub position: usize,
}

/// Weighted feature layers for the consistency loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelector {
    pub entries: Vec<(String, f64)>,
}

impl LayerSelector {
    pub fn new(entries: Vec<(String, f64)>) -> Self {
        Self { entries }
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn validate_for(&self, model: &Model) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("selector has no layers".into()));
        }
        if self.entries.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::Config("selector weights must be >= 0".into()));
        }
        if !self.entries.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::Config("selector needs at least one positive weight".into()));
        }
        for (name, _) in &self.entries {
            if model.feature_dim(name).is_none() {
                return Err(Error::Config(format!(
                    "layer '{name}' not in {} registry",
                    model.arch()
                )));
            }
        }
        Ok(())
    }
}

/// Per-architecture default selectors: ResNet-18 constrains the input of its
/// single fully connected head; VGG-16 constrains its last two fully
/// connected layers with equal weight.
pub fn default_selector(arch: Arch) -> LayerSelector {
    match arch {
        Arch::Resnet18 => LayerSelector::new(vec![("flatten".into(), 1.0)]),
        Arch::Vgg16 => LayerSelector::new(vec![("fc2".into(), 0.5), ("fc1".into(), 0.5)]),
        Arch::Smallcnn => LayerSelector::new(vec![("fc1".into(), 1.0)]),
    }
}

enum Net {
    Small(SmallCnn),
    Resnet(ResNet18),
    Vgg(Vgg16),
}

pub struct Model {
    arch: Arch,
    num_classes: usize,
    input_hw: usize,
    seed: u64,
    store: ParamStore,
    net: Net,
    registry: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOptions {
    pub input_hw: Option<usize>,
    pub dtype: DType,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            input_hw: None,
            dtype: DType::F32,
        }
    }
}

/// Build an initialized model with deterministic parameters under `seed`.
pub fn build_model(arch: Arch, num_classes: usize, seed: u64) -> Result<Model> {
    build_model_with(arch, num_classes, seed, ModelOptions::default())
}

pub fn build_model_with(
    arch: Arch,
    num_classes: usize,
    seed: u64,
    opts: ModelOptions,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "num_classes {num_classes} must be >= 2"
        )));
    }
    let input_hw = opts.input_hw.unwrap_or_else(|| arch.default_input_hw());
    let mut store = ParamStore::new(Device::Cpu, opts.dtype, seed);
    let (net, names) = match arch {
        Arch::Smallcnn => (
            Net::Small(SmallCnn::build(&mut store, input_hw, num_classes)?),
            SmallCnn::feature_names(input_hw, num_classes),
        ),
        Arch::Resnet18 => (
            Net::Resnet(ResNet18::build(&mut store, num_classes)?),
            ResNet18::feature_names(input_hw, num_classes),
        ),
        Arch::Vgg16 => (
            Net::Vgg(Vgg16::build(&mut store, input_hw, num_classes)?),
            Vgg16::feature_names(input_hw, num_classes),
        ),
    };
    let registry = names
        .into_iter()
        .enumerate()
        .map(|(i, (name, dim))| LayerDescriptor {
            name,
            dim,
            position: i,
        })
        .collect();
    Ok(Model {
        arch,
        num_classes,
        input_hw,
        seed,
        store,
        net,
        registry,
    })
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_hw, self.input_hw)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn feature_dim(&self, name: &str) -> Option<usize> {
        self.registry.iter().find(|d| d.name == name).map(|d| d.dim)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Inputs are normalized with fixed statistics `(x - 0.5) / 0.5`,
    /// identically in training and evaluation paths.
    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(((x * 2.0)? - 1.0)?)
    }

    fn run(
        &self,
        x: &Tensor,
        collector: &mut FeatureCollector,
        train: bool,
    ) -> Result<Tensor> {
        let x = self.normalize(&x.to_dtype(self.dtype())?)?;
        match &self.net {
            Net::Small(n) => n.forward(&x, train, collector),
            Net::Resnet(n) => n.forward(&x, train, collector),
            Net::Vgg(n) => n.forward(&x, train, collector),
        }
    }

    /// Forward pass returning logits only.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.run(x, &mut FeatureCollector::none(), train)
    }

    /// Forward pass returning logits plus flattened activations at the named
    /// layers, all from the same single pass and attached to the graph.
    pub fn forward_with_features(
        &self,
        x: &Tensor,
        names: &[String],
        train: bool,
    ) -> Result<(Tensor, HashMap<String, Tensor>)> {
        let mut collector = FeatureCollector::wanting(names);
        let logits = self.run(x, &mut collector, train)?;
        for name in names {
            if !collector.out.contains_key(name) {
                return Err(Error::Config(format!(
                    "layer '{name}' not in {} registry",
                    self.arch
                )));
            }
        }
        Ok((logits, collector.out))
    }

    /// Feature maps only; used by trigger forging.
    pub fn forward_features_tensor(
        &self,
        x: &Tensor,
        names: &[String],
        train: bool,
    ) -> Result<HashMap<String, Tensor>> {
        Ok(self.forward_with_features(x, names, train)?.1)
    }

    pub fn trainable_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store.trainable_vars()
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("weights.safetensors"))?;
        let meta = CheckpointMeta {
            arch: self.arch,
            num_classes: self.num_classes,
            input_hw: self.input_hw,
            registry_version: REGISTRY_VERSION,
            seed: self.seed,
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::io(meta_path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Model> {
        let meta_path = dir.join("meta.json");
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        if meta.registry_version != REGISTRY_VERSION {
            return Err(Error::Config(format!(
                "checkpoint registry version {} does not match {}",
                meta.registry_version, REGISTRY_VERSION
            )));
        }
        let mut model = build_model_with(
            meta.arch,
            meta.num_classes,
            meta.seed,
            ModelOptions {
                input_hw: Some(meta.input_hw),
                dtype: DType::F32,
            },
        )?;
        model.store.load(&dir.join("weights.safetensors"))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Arch,
    num_classes: usize,
    input_hw: usize,
    registry_version: u32,
    seed: u64,
}

/// Activations at the selected layers from a single inference-mode forward
/// pass, flattened to one vector per sample and detached from the graph.
pub fn extract_features(
    model: &Model,
    batch: &Tensor,
    selector: &LayerSelector,
) -> Result<HashMap<String, Tensor>> {
    selector.validate_for(model)?;
    let feats = model.forward_features_tensor(batch, &selector.layer_names(), false)?;
    feats
        .into_iter()
        .map(|(k, v)| Ok((k, v.detach())))
        .collect()
}

/// Ordered descriptors of all hookable layers.
pub fn list_feature_layers(model: &Model) -> Vec<LayerDescriptor> {
    model.registry.clone()
}

/// Stack images into an NCHW tensor on the model's device.
pub fn images_to_tensor(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Parameter("empty image batch".into()));
    }
    let (c, h, w) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(Error::Parameter("inconsistent image shapes in batch".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}
