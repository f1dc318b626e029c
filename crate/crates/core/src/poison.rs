//! Poisoned-dataset construction: paired normal/compressed backdoor
//! instances relabeled to the target class, merged with the remaining clean
//! data.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecVersions, CompressionSpec};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;
use crate::trigger::{self, TriggerPattern};

/// One compressed instance's link back to its uncompressed parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLink {
    /// Index into the backdoor (uncompressed) split.
    pub parent: usize,
    /// Index into the compressed split.
    pub compressed: usize,
    pub spec: CompressionSpec,
}

/// Deterministic recipe for the poison set: which sources get stamped, which
/// stamped images additionally get a codec round trip, and how they pair up.
#[derive(Clone)]
pub struct PoisonPlan {
    pub trigger: TriggerPattern,
    pub target_label: usize,
    /// Dataset indices of the sampled sources, one per normal backdoor
    /// instance; backdoor instance `i` derives from `source_ids[i]`.
    pub source_ids: Vec<usize>,
    pub per_codec: Vec<(CompressionSpec, usize)>,
    pub pairing: Vec<PairLink>,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn n_normal(&self) -> usize {
        self.source_ids.len()
    }

    pub fn total_poison(&self) -> usize {
        self.n_normal() + self.pairing.len()
    }
}

/// Sample sources and lay out the pairing index. Sources never include images
/// whose true label is the target class; each codec's parents are drawn from
/// the sampled normal backdoor instances.
pub fn build_plan(
    dataset: &LabeledDataset,
    trigger: &TriggerPattern,
    target_label: usize,
    n_normal: usize,
    per_codec: &[(CompressionSpec, usize)],
    seed: u64,
) -> Result<PoisonPlan> {
    if n_normal < 1 {
        return Err(Error::Parameter("n_normal must be >= 1".into()));
    }
    if target_label >= dataset.num_classes {
        return Err(Error::Parameter(format!(
            "target label {target_label} out of range for {} classes",
            dataset.num_classes
        )));
    }
    for (spec, count) in per_codec {
        spec.validate()?;
        if matches!(spec, CompressionSpec::None) {
            return Err(Error::Parameter(
                "per-codec map may not contain the identity codec".into(),
            ));
        }
        if *count > n_normal {
            return Err(Error::Capacity(format!(
                "{} count {count} exceeds n_normal {n_normal}: compressed instances derive from sampled parents",
                spec.tag()
            )));
        }
    }
    {
        let mut seen = std::collections::HashSet::new();
        for (spec, _) in per_codec {
            if !seen.insert(spec.tag()) {
                return Err(Error::Parameter(format!("duplicate codec {}", spec.tag())));
            }
        }
    }

    let mut candidates = dataset.indices_excluding(target_label);
    if candidates.len() < n_normal {
        return Err(Error::Capacity(format!(
            "need {n_normal} sources outside class {target_label}, only {} available",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng::derived(seed, "poison:sources"));
    let mut source_ids: Vec<usize> = candidates[..n_normal].to_vec();
    source_ids.sort_unstable();

    let mut pairing = Vec::new();
    let mut next_compressed = 0usize;
    for (spec, count) in per_codec {
        let mut parents: Vec<usize> = (0..n_normal).collect();
        parents.shuffle(&mut rng::derived(seed, &format!("poison:parents:{}", spec.tag())));
        parents.truncate(*count);
        parents.sort_unstable();
        for parent in parents {
            pairing.push(PairLink {
                parent,
                compressed: next_compressed,
                spec: *spec,
            });
            next_compressed += 1;
        }
    }

    Ok(PoisonPlan {
        trigger: trigger.clone(),
        target_label,
        source_ids,
        per_codec: per_codec.to_vec(),
        pairing,
        seed,
    })
}

/// Fraction of the training set occupied by the poison set.
pub fn injection_rate(plan: &PoisonPlan, train_size: usize) -> Result<f64> {
    if train_size == 0 {
        return Err(Error::Parameter("train_size must be > 0".into()));
    }
    if train_size < plan.total_poison() {
        return Err(Error::Parameter(format!(
            "train_size {train_size} smaller than poison set {}",
            plan.total_poison()
        )));
    }
    Ok(plan.total_poison() as f64 / train_size as f64)
}

/// Training-ready poisoned dataset. Every instance in the backdoor and
/// compressed splits carries the target label.
#[derive(Clone)]
pub struct PoisonedDataset {
    pub clean: LabeledDataset,
    /// Normal backdoor instances x_b (stamped, uncompressed).
    pub backdoor: Vec<ImageTensor>,
    /// Dataset index each backdoor instance derives from.
    pub backdoor_sources: Vec<usize>,
    /// Compressed backdoor instances x_bc, indexed by `PairLink::compressed`.
    pub compressed: Vec<ImageTensor>,
    pub pairing: Vec<PairLink>,
    pub target_label: usize,
    pub num_classes: usize,
    pub trigger_hash: String,
    pub seed: u64,
    pub codec_versions: CodecVersions,
}

impl PoisonedDataset {
    pub fn total_poison(&self) -> usize {
        self.backdoor.len() + self.compressed.len()
    }
}

/// Stamp, compress and relabel per the plan, keeping the untouched remainder
/// of the dataset as the clean split.
pub fn materialize(plan: &PoisonPlan, dataset: &LabeledDataset) -> Result<PoisonedDataset> {
    if plan.source_ids.iter().any(|&id| id >= dataset.len()) {
        return Err(Error::Parameter(format!(
            "plan references instance ids beyond dataset size {}",
            dataset.len()
        )));
    }
    plan.trigger.validate()?;

    let backdoor: Vec<ImageTensor> = plan
        .source_ids
        .par_iter()
        .map(|&id| {
            trigger::stamp(&dataset.images[id], &plan.trigger).map_err(|e| {
                Error::Contract(format!("stamping source instance {id}: {e}"))
            })
        })
        .collect::<Result<_>>()?;

    let compressed: Vec<ImageTensor> = plan
        .pairing
        .par_iter()
        .map(|link| {
            codec::compress(&backdoor[link.parent], link.spec).map_err(|e| {
                Error::Contract(format!(
                    "compressing backdoor instance {} with {}: {e}",
                    link.parent,
                    link.spec.tag()
                ))
            })
        })
        .collect::<Result<_>>()?;

    let poisoned: std::collections::HashSet<usize> = plan.source_ids.iter().copied().collect();
    let keep: Vec<usize> = (0..dataset.len()).filter(|i| !poisoned.contains(i)).collect();
    let clean = LabeledDataset::new(
        format!("{}-clean", dataset.name),
        keep.iter().map(|&i| dataset.images[i].clone()).collect(),
        keep.iter().map(|&i| dataset.labels[i]).collect(),
        dataset.num_classes,
    )?;

    Ok(PoisonedDataset {
        clean,
        backdoor,
        backdoor_sources: plan.source_ids.clone(),
        compressed,
        pairing: plan.pairing.clone(),
        target_label: plan.target_label,
        num_classes: dataset.num_classes,
        trigger_hash: plan.trigger.content_hash(),
        seed: plan.seed,
        codec_versions: CodecVersions::current(),
    })
}

#[derive(Serialize, Deserialize)]
struct DirManifest {
    target_label: usize,
    num_classes: usize,
    trigger_hash: String,
    seed: u64,
    codec_versions: CodecVersions,
    clean_labels: Vec<usize>,
    clean_name: String,
    backdoor_sources: Vec<usize>,
    pairing: Vec<PairLink>,
    per_spec_counts: BTreeMap<String, usize>,
}

/// Persist as `clean/`, `poison/normal/`, `poison/<spec-tag>/` PNG trees plus
/// a JSON manifest carrying labels, pairing and provenance.
pub fn save_poisoned(data: &PoisonedDataset, dir: &Path) -> Result<()> {
    let clean_dir = dir.join("clean");
    let normal_dir = dir.join("poison/normal");
    std::fs::create_dir_all(&clean_dir).map_err(|e| Error::io(&clean_dir, e))?;
    std::fs::create_dir_all(&normal_dir).map_err(|e| Error::io(&normal_dir, e))?;
    for (i, img) in data.clean.images.iter().enumerate() {
        img.save_png(clean_dir.join(format!("{i:06}.png")))?;
    }
    for (i, img) in data.backdoor.iter().enumerate() {
        img.save_png(normal_dir.join(format!("{i:06}.png")))?;
    }
    let mut per_spec_counts = BTreeMap::new();
    for (i, link) in data.pairing.iter().enumerate() {
        let spec_dir = dir.join("poison").join(link.spec.tag());
        std::fs::create_dir_all(&spec_dir).map_err(|e| Error::io(&spec_dir, e))?;
        data.compressed[i].save_png(spec_dir.join(format!("{i:06}.png")))?;
        *per_spec_counts.entry(link.spec.tag()).or_insert(0) += 1;
    }
    let manifest = DirManifest {
        target_label: data.target_label,
        num_classes: data.num_classes,
        trigger_hash: data.trigger_hash.clone(),
        seed: data.seed,
        codec_versions: data.codec_versions.clone(),
        clean_labels: data.clean.labels.clone(),
        clean_name: data.clean.name.clone(),
        backdoor_sources: data.backdoor_sources.clone(),
        pairing: data.pairing.clone(),
        per_spec_counts,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_poisoned(dir: &Path) -> Result<PoisonedDataset> {
    let path = dir.join("manifest.json");
    let manifest: DirManifest =
        serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    let clean_images: Vec<ImageTensor> = (0..manifest.clean_labels.len())
        .map(|i| ImageTensor::load_png(dir.join(format!("clean/{i:06}.png"))))
        .collect::<Result<_>>()?;
    let backdoor: Vec<ImageTensor> = (0..manifest.backdoor_sources.len())
        .map(|i| ImageTensor::load_png(dir.join(format!("poison/normal/{i:06}.png"))))
        .collect::<Result<_>>()?;
    let compressed: Vec<ImageTensor> = manifest
        .pairing
        .iter()
        .enumerate()
        .map(|(i, link)| {
            ImageTensor::load_png(dir.join("poison").join(link.spec.tag()).join(format!("{i:06}.png")))
        })
        .collect::<Result<_>>()?;
    Ok(PoisonedDataset {
        clean: LabeledDataset::new(
            manifest.clean_name,
            clean_images,
            manifest.clean_labels,
            manifest.num_classes,
        )?,
        backdoor,
        backdoor_sources: manifest.backdoor_sources,
        compressed,
        pairing: manifest.pairing,
        target_label: manifest.target_label,
        num_classes: manifest.num_classes,
        trigger_hash: manifest.trigger_hash,
        seed: manifest.seed,
        codec_versions: manifest.codec_versions,
    })
}
