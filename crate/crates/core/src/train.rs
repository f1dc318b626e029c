//! Feature-consistency training: the pairwise consistency objective, an SGD
//! loop with a piecewise-constant learning-rate schedule, and clean /
//! common-backdoor / fc-backdoor training modes.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{self, Arch, LayerSelector, Model};
use crate::poison::PoisonedDataset;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Clean,
    CommonBackdoor,
    FcBackdoor,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMode::Clean => "clean",
            TrainMode::CommonBackdoor => "common-backdoor",
            TrainMode::FcBackdoor => "fc-backdoor",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_SCHEDULE: [(usize, f64); 3] = [(0, 0.1), (40, 0.01), (70, 0.001)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Piecewise-constant (start-epoch, learning-rate) steps.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random crop + horizontal flip on clean samples only; backdoor pairs
    /// are never augmented (it would break the pairing relationship).
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            epochs: 100,
            batch_size: 128,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.mode == TrainMode::FcBackdoor && self.batch_size < 2 {
            return Err(Error::Config(
                "fc-backdoor mode needs batch size >= 2 so pairs co-reside".into(),
            ));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        if self.schedule[0].0 != 0 {
            return Err(Error::Config("schedule must start at epoch 0".into()));
        }
        if !self.schedule.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::Config(
                "schedule epochs must be strictly increasing".into(),
            ));
        }
        if self.schedule.iter().any(|(_, lr)| !lr.is_finite() || *lr <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FCConfig {
    pub selector: LayerSelector,
    /// Weight of the consistency term in the total objective.
    pub alpha: f64,
}

impl FCConfig {
    pub fn for_arch(arch: Arch) -> Self {
        Self {
            selector: model::default_selector(arch),
            alpha: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// Piecewise-constant lookup: the rate of the last step at or before `epoch`.
pub fn epoch_lr(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    let mut lr = schedule.first().map(|&(_, lr)| lr).unwrap_or(0.0);
    for &(start, rate) in schedule {
        if epoch >= start {
            lr = rate;
        }
    }
    lr
}

/// Euclidean distance between two feature vectors.
pub fn l2_dist(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Parameter(format!(
            "feature dimensions differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Consistency loss for a single pair: weighted sum of per-layer distances.
pub fn fc_loss(
    feats_b: &HashMap<String, Vec<f64>>,
    feats_bc: &HashMap<String, Vec<f64>>,
    selector: &LayerSelector,
) -> Result<f64> {
    let mut total = 0.0;
    for (name, weight) in &selector.entries {
        let a = feats_b
            .get(name)
            .ok_or_else(|| Error::Contract(format!("feature map missing layer '{name}'")))?;
        let b = feats_bc
            .get(name)
            .ok_or_else(|| Error::Contract(format!("feature map missing layer '{name}'")))?;
        total += weight * l2_dist(a, b)?;
    }
    Ok(total)
}

/// Batched, graph-attached consistency loss: for each selected layer the
/// per-pair Euclidean distance, averaged over pairs, weighted and summed.
pub fn fc_loss_batch(
    feats_b: &HashMap<String, Tensor>,
    feats_bc: &HashMap<String, Tensor>,
    selector: &LayerSelector,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (name, weight) in &selector.entries {
        let a = feats_b
            .get(name)
            .ok_or_else(|| Error::Contract(format!("feature map missing layer '{name}'")))?;
        let b = feats_bc
            .get(name)
            .ok_or_else(|| Error::Contract(format!("feature map missing layer '{name}'")))?;
        if a.dims() != b.dims() {
            return Err(Error::Parameter(format!(
                "layer '{name}' feature shapes differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        // the epsilon keeps the sqrt backward finite once a pair's features
        // have fully converged (d sqrt(x) -> inf as x -> 0)
        let dist = ((a - b)?.sqr()?.sum(1)? + 1e-8)?.sqrt()?.mean(0)?;
        let term = (dist * *weight)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("selector has no layers".into()))
}

/// Total objective: cross-entropy of both pair halves against the target
/// label plus the weighted consistency term.
pub fn total_loss(
    logits_b: &Tensor,
    logits_bc: &Tensor,
    y_t: &Tensor,
    fc: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    let ce_b = candle_nn::loss::cross_entropy(logits_b, y_t)?;
    let ce_bc = candle_nn::loss::cross_entropy(logits_bc, y_t)?;
    let total = ((ce_b + ce_bc)? + (fc * alpha)?)?;
    let v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("total loss is not finite: {v}")));
    }
    Ok(total)
}

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay
/// (decay folded into the gradient, the standard CIFAR recipe).
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in vars {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            // detach so the stored velocity doesn't keep the whole step's
            // autodiff graph (and every previous step's, via the chain) alive
            let v = match self.velocity.get(name) {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            }
            .detach();
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean clean-batch cross-entropy.
    pub l0_clean: f64,
    /// Mean cross-entropy of backdoor instances (both pair halves).
    pub l0_pairs: f64,
    /// Mean consistency loss.
    pub l_fc: f64,
    /// Mean total objective.
    pub total: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub entries: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        for e in &self.entries {
            w.serialize(e)
                .map_err(|e| Error::Contract(format!("history csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochStats>, _>>()
            .map_err(|e| Error::Contract(format!("history csv: {e}")))?;
        Ok(Self { entries })
    }
}

/// Random 4-pixel-pad crop plus horizontal flip.
fn augment_image(img: &ImageTensor, rng: &mut crate::rng::Rng) -> ImageTensor {
    const PAD: i64 = 4;
    let (c, h, w) = img.shape();
    let dy = rng.gen_range(-PAD..=PAD);
    let dx = rng.gen_range(-PAD..=PAD);
    let flip = rng.gen_bool(0.5);
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx0 = if flip { w - 1 - x } else { x };
                let sx = sx0 as i64 + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out.set(ch, y, x, img.get(ch, sy as usize, sx as usize));
            }
        }
    }
    out
}

fn labels_tensor(labels: &[usize], model: &Model) -> Result<Tensor> {
    let raw: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(raw, labels.len(), model.device())?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// A backdoor instance and the pair links that reference it.
struct BackdoorUnit {
    index: usize,
    partners: Vec<usize>, // indices into data.pairing
    cursor: std::cell::Cell<usize>,
}

/// Train in place under the configured mode. Clean mode uses only the clean
/// split; common-backdoor adds stamped instances as plain target-labeled
/// cross-entropy samples; fc-backdoor additionally forwards each instance's
/// compressed partner (cycling through its codecs) and applies the
/// consistency objective.
pub fn train(
    model: &Model,
    data: &PoisonedDataset,
    tcfg: &TrainConfig,
    fcfg: &FCConfig,
) -> Result<TrainHistory> {
    tcfg.validate()?;
    fcfg.validate()?;
    if tcfg.mode == TrainMode::FcBackdoor {
        fcfg.selector.validate_for(model)?;
    }

    let use_pairs = tcfg.mode == TrainMode::FcBackdoor;
    if tcfg.mode != TrainMode::Clean && data.backdoor.is_empty() {
        return Err(Error::Config(format!(
            "{} mode requires a poison split",
            tcfg.mode
        )));
    }
    if use_pairs && !data.compressed.is_empty() && data.pairing.is_empty() {
        return Err(Error::Config(
            "fc-backdoor mode: dataset has compressed instances but no pairing index".into(),
        ));
    }
    if data.clean.is_empty() {
        return Err(Error::Config("empty clean split".into()));
    }

    let mut units: Vec<BackdoorUnit> = if tcfg.mode == TrainMode::Clean {
        Vec::new()
    } else {
        (0..data.backdoor.len())
            .map(|i| BackdoorUnit {
                index: i,
                partners: if use_pairs {
                    data.pairing
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| l.parent == i)
                        .map(|(pi, _)| pi)
                        .collect()
                } else {
                    Vec::new()
                },
                cursor: std::cell::Cell::new(0),
            })
            .collect()
    };

    let layer_names = fcfg.selector.layer_names();
    let vars = model.trainable_vars();
    let mut opt = SgdMomentum::new(tcfg.momentum, tcfg.weight_decay);
    let mut history = TrainHistory::default();

    let clean_len = data.clean.len();
    let steps = clean_len.div_ceil(tcfg.batch_size);

    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        let lr = epoch_lr(&tcfg.schedule, epoch);
        let mut order: Vec<usize> = (0..clean_len).collect();
        order.shuffle(&mut rng::derived(tcfg.seed, &format!("train:clean:{epoch}")));
        if !units.is_empty() {
            units.shuffle(&mut rng::derived(tcfg.seed, &format!("train:poison:{epoch}")));
        }
        let mut aug_rng = rng::derived(tcfg.seed, &format!("train:aug:{epoch}"));
        let mut unit_cursor = 0usize;

        let (mut s_clean, mut s_pairs, mut s_fc, mut s_total) = (0.0, 0.0, 0.0, 0.0);

        for step in 0..steps {
            let lo = step * tcfg.batch_size;
            let hi = (lo + tcfg.batch_size).min(clean_len);
            let batch_ids = &order[lo..hi];

            let mut clean_imgs: Vec<ImageTensor> = Vec::with_capacity(batch_ids.len());
            for &i in batch_ids {
                let img = &data.clean.images[i];
                clean_imgs.push(if tcfg.augment {
                    augment_image(img, &mut aug_rng)
                } else {
                    img.clone()
                });
            }
            let refs: Vec<&ImageTensor> = clean_imgs.iter().collect();
            let x_clean = model::images_to_tensor(&refs, model.device())?;
            let y_clean = labels_tensor(
                &batch_ids.iter().map(|&i| data.clean.labels[i]).collect::<Vec<_>>(),
                model,
            )?;
            let logits_clean = model.forward(&x_clean, true)?;
            let l0_clean = candle_nn::loss::cross_entropy(&logits_clean, &y_clean)?;

            let mut loss = l0_clean.clone();
            let mut l0_pairs_v = 0.0;
            let mut l_fc_v = 0.0;

            if !units.is_empty() {
                // cycle the shuffled backdoor pool, one batch per step
                let take = tcfg.batch_size.min(units.len());
                let picked: Vec<usize> = (0..take)
                    .map(|k| (unit_cursor + k) % units.len())
                    .collect();
                unit_cursor = (unit_cursor + take) % units.len();

                let xb_imgs: Vec<&ImageTensor> = picked
                    .iter()
                    .map(|&u| &data.backdoor[units[u].index])
                    .collect();
                let x_b = model::images_to_tensor(&xb_imgs, model.device())?;
                let y_t = labels_tensor(&vec![data.target_label; take], model)?;

                // rows of the x_b batch that have a compressed partner this step
                let mut pair_rows: Vec<u32> = Vec::new();
                let mut bc_imgs: Vec<&ImageTensor> = Vec::new();
                for (row, &u) in picked.iter().enumerate() {
                    let unit = &units[u];
                    if unit.partners.is_empty() {
                        continue;
                    }
                    let c = unit.cursor.get();
                    let link = &data.pairing[unit.partners[c % unit.partners.len()]];
                    unit.cursor.set(c + 1);
                    pair_rows.push(row as u32);
                    bc_imgs.push(&data.compressed[link.compressed]);
                }

                if bc_imgs.is_empty() {
                    let logits_b = model.forward(&x_b, true)?;
                    let ce_b = candle_nn::loss::cross_entropy(&logits_b, &y_t)?;
                    l0_pairs_v = scalar(&ce_b)?;
                    loss = (loss + ce_b)?;
                } else {
                    let (logits_b, feats_b) =
                        model.forward_with_features(&x_b, &layer_names, true)?;
                    let x_bc = model::images_to_tensor(&bc_imgs, model.device())?;
                    let (logits_bc, feats_bc) =
                        model.forward_with_features(&x_bc, &layer_names, true)?;
                    let rows = Tensor::from_vec(pair_rows, bc_imgs.len(), model.device())?;
                    let feats_b_sel: HashMap<String, Tensor> = feats_b
                        .iter()
                        .map(|(k, v)| Ok((k.clone(), v.index_select(&rows, 0)?)))
                        .collect::<Result<_>>()?;
                    let fc = fc_loss_batch(&feats_b_sel, &feats_bc, &fcfg.selector)?;
                    let ce_b = candle_nn::loss::cross_entropy(&logits_b, &y_t)?;
                    let y_t_bc = labels_tensor(&vec![data.target_label; bc_imgs.len()], model)?;
                    let ce_bc = candle_nn::loss::cross_entropy(&logits_bc, &y_t_bc)?;
                    l_fc_v = scalar(&fc)?;
                    l0_pairs_v = scalar(&ce_b)? + scalar(&ce_bc)?;
                    loss = (((loss + ce_b)? + ce_bc)? + (fc * fcfg.alpha)?)?;
                }
            }

            let total_v = scalar(&loss)?;
            if !total_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let grads = loss.backward()?;
            opt.step(&vars, &grads, lr)?;

            s_clean += scalar(&l0_clean)?;
            s_pairs += l0_pairs_v;
            s_fc += l_fc_v;
            s_total += total_v;
        }

        history.entries.push(EpochStats {
            epoch,
            lr,
            l0_clean: s_clean / steps as f64,
            l0_pairs: s_pairs / steps as f64,
            l_fc: s_fc / steps as f64,
            total: s_total / steps as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    Ok(history)
}
