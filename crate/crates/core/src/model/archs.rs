//! Classifier architectures with named, hookable internal layers.

use std::collections::{HashMap, HashSet};

use candle_core::Tensor;
use candle_nn::{Conv2d, Linear};

use crate::error::{Error, Result};

use super::layers::{self, BatchNorm2d};
use super::store::ParamStore;

/// Collects flattened per-sample activations at requested layer names during
/// a forward pass. Tensors stay attached to the autodiff graph.
pub struct FeatureCollector {
    want: Option<HashSet<String>>,
    pub out: HashMap<String, Tensor>,
}

impl FeatureCollector {
    pub fn none() -> Self {
        Self {
            want: Some(HashSet::new()),
            out: HashMap::new(),
        }
    }

    pub fn wanting(names: &[String]) -> Self {
        Self {
            want: Some(names.iter().cloned().collect()),
            out: HashMap::new(),
        }
    }

    fn grab(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let wanted = match &self.want {
            Some(set) => set.contains(name),
            None => true,
        };
        if wanted {
            self.out.insert(name.to_string(), t.flatten_from(1)?);
        }
        Ok(())
    }
}

pub struct SmallCnn {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl SmallCnn {
    pub fn build(store: &mut ParamStore, input_hw: usize, num_classes: usize) -> Result<Self> {
        if input_hw % 4 != 0 {
            return Err(Error::Config(format!(
                "smallcnn input size {input_hw} must be divisible by 4"
            )));
        }
        let flat = 32 * (input_hw / 4) * (input_hw / 4);
        Ok(Self {
            conv1: layers::conv2d(store, "conv1", 3, 16, 3, 1, 1, true)?,
            conv2: layers::conv2d(store, "conv2", 16, 32, 3, 1, 1, true)?,
            fc1: layers::linear(store, "fc1", flat, 128)?,
            fc2: layers::linear(store, "fc2", 128, num_classes)?,
        })
    }

    pub fn forward(&self, x: &Tensor, _train: bool, fc: &mut FeatureCollector) -> Result<Tensor> {
        let x = layers::max_pool2(&layers::forward_conv(&self.conv1, x)?.relu()?)?;
        fc.grab("conv1", &x)?;
        let x = layers::max_pool2(&layers::forward_conv(&self.conv2, &x)?.relu()?)?;
        fc.grab("conv2", &x)?;
        let x = x.flatten_from(1)?;
        fc.grab("flatten", &x)?;
        let x = layers::forward_linear(&self.fc1, &x)?.relu()?;
        fc.grab("fc1", &x)?;
        let logits = layers::forward_linear(&self.fc2, &x)?;
        fc.grab("logits", &logits)?;
        Ok(logits)
    }

    pub fn feature_names(input_hw: usize, num_classes: usize) -> Vec<(String, usize)> {
        let half = input_hw / 2;
        let quarter = input_hw / 4;
        vec![
            ("conv1".into(), 16 * half * half),
            ("conv2".into(), 32 * quarter * quarter),
            ("flatten".into(), 32 * quarter * quarter),
            ("fc1".into(), 128),
            ("logits".into(), num_classes),
        ]
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn build(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<Self> {
        let down = if stride != 1 || in_c != out_c {
            Some((
                layers::conv2d(store, &format!("{name}.down.conv"), in_c, out_c, 1, stride, 0, false)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), out_c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: layers::conv2d(store, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_c)?,
            conv2: layers::conv2d(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_c)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shortcut = match &self.down {
            Some((conv, bn)) => bn.forward(&layers::forward_conv(conv, x)?, train)?,
            None => x.clone(),
        };
        let y = self
            .bn1
            .forward(&layers::forward_conv(&self.conv1, x)?, train)?
            .relu()?;
        let y = self.bn2.forward(&layers::forward_conv(&self.conv2, &y)?, train)?;
        Ok((y + shortcut)?.relu()?)
    }
}

/// CIFAR-style ResNet-18: 3x3 stem, four stages of two basic blocks, global
/// average pooling into a single fully connected head.
pub struct ResNet18 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear,
}

impl ResNet18 {
    pub fn build(store: &mut ParamStore, num_classes: usize) -> Result<Self> {
        let widths = [64usize, 128, 256, 512];
        let mut stages = Vec::new();
        let mut in_c = 64;
        for (si, &out_c) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::build(
                    store,
                    &format!("layer{}.{}", si + 1, bi),
                    in_c,
                    out_c,
                    stride,
                )?);
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem_conv: layers::conv2d(store, "stem.conv", 3, 64, 3, 1, 1, false)?,
            stem_bn: BatchNorm2d::new(store, "stem.bn", 64)?,
            stages,
            fc: layers::linear(store, "fc", 512, num_classes)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool, fc: &mut FeatureCollector) -> Result<Tensor> {
        let mut y = self
            .stem_bn
            .forward(&layers::forward_conv(&self.stem_conv, x)?, train)?
            .relu()?;
        fc.grab("stem", &y)?;
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                y = block.forward(&y, train)?;
            }
            fc.grab(&format!("layer{}", si + 1), &y)?;
        }
        let pooled = y.mean(candle_core::D::Minus1)?.mean(candle_core::D::Minus1)?;
        fc.grab("flatten", &pooled)?;
        let logits = layers::forward_linear(&self.fc, &pooled)?;
        fc.grab("logits", &logits)?;
        Ok(logits)
    }

    pub fn feature_names(input_hw: usize, num_classes: usize) -> Vec<(String, usize)> {
        let hw = |div: usize| (input_hw / div) * (input_hw / div);
        vec![
            ("stem".into(), 64 * hw(1)),
            ("layer1".into(), 64 * hw(1)),
            ("layer2".into(), 128 * hw(2)),
            ("layer3".into(), 256 * hw(4)),
            ("layer4".into(), 512 * hw(8)),
            ("flatten".into(), 512),
            ("logits".into(), num_classes),
        ]
    }
}

const VGG_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

/// VGG-16-class network: 13 convolutions in five pooled blocks plus three
/// fully connected layers. Hidden width follows input scale.
pub struct Vgg16 {
    blocks: Vec<Vec<(Conv2d, BatchNorm2d)>>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl Vgg16 {
    pub fn hidden_dim(input_hw: usize) -> usize {
        if input_hw >= 112 {
            4096
        } else {
            512
        }
    }

    pub fn build(store: &mut ParamStore, input_hw: usize, num_classes: usize) -> Result<Self> {
        if input_hw % 32 != 0 {
            return Err(Error::Config(format!(
                "vgg16 input size {input_hw} must be divisible by 32"
            )));
        }
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (bi, &(out_c, convs)) in VGG_BLOCKS.iter().enumerate() {
            let mut block = Vec::new();
            for ci in 0..convs {
                let name = format!("block{}.conv{}", bi + 1, ci + 1);
                block.push((
                    layers::conv2d(store, &name, in_c, out_c, 3, 1, 1, false)?,
                    BatchNorm2d::new(store, &format!("block{}.bn{}", bi + 1, ci + 1), out_c)?,
                ));
                in_c = out_c;
            }
            blocks.push(block);
        }
        let spatial = input_hw / 32;
        let flat = 512 * spatial * spatial;
        let hidden = Self::hidden_dim(input_hw);
        Ok(Self {
            blocks,
            fc1: layers::linear(store, "fc1", flat, hidden)?,
            fc2: layers::linear(store, "fc2", hidden, hidden)?,
            fc3: layers::linear(store, "fc3", hidden, num_classes)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool, fc: &mut FeatureCollector) -> Result<Tensor> {
        let mut y = x.clone();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, (conv, bn)) in block.iter().enumerate() {
                y = bn.forward(&layers::forward_conv(conv, &y)?, train)?.relu()?;
                fc.grab(&format!("block{}.conv{}", bi + 1, ci + 1), &y)?;
            }
            y = layers::max_pool2(&y)?;
        }
        let y = y.flatten_from(1)?;
        fc.grab("flatten", &y)?;
        let y = layers::forward_linear(&self.fc1, &y)?.relu()?;
        fc.grab("fc1", &y)?;
        let y = layers::forward_linear(&self.fc2, &y)?.relu()?;
        fc.grab("fc2", &y)?;
        let logits = layers::forward_linear(&self.fc3, &y)?;
        fc.grab("logits", &logits)?;
        Ok(logits)
    }

    pub fn feature_names(input_hw: usize, num_classes: usize) -> Vec<(String, usize)> {
        let mut names = Vec::new();
        let mut hw = input_hw;
        for (bi, &(out_c, convs)) in VGG_BLOCKS.iter().enumerate() {
            for ci in 0..convs {
                names.push((format!("block{}.conv{}", bi + 1, ci + 1), out_c * hw * hw));
            }
            hw /= 2;
        }
        let flat = 512 * hw * hw;
        let hidden = Self::hidden_dim(input_hw);
        names.push(("flatten".into(), flat));
        names.push(("fc1".into(), hidden));
        names.push(("fc2".into(), hidden));
        names.push(("logits".into(), num_classes));
        names
    }
}
