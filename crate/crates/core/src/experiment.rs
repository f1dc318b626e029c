//! Manifest-driven experiment runner: a single TOML file determines the
//! dataset, trigger, poison plan, training and evaluation of one experiment,
//! executed as resumable stages under a timestamped results directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecVersions, CompressionSpec};
use crate::dataset::{self, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::model::{self, Arch, LayerSelector, Model};
use crate::poison::{self, PairLink, PoisonedDataset};
use crate::train::{self, FCConfig, TrainConfig, TrainMode, DEFAULT_SCHEDULE};
use crate::trigger::{self, TriggerPattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Cifar10 {
        /// Directory holding the binary batches; falls back to the
        /// `CRBD_DATA_ROOT` environment variable.
        root: Option<PathBuf>,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    Synthetic {
        train_size: usize,
        test_size: usize,
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_hw")]
        hw: usize,
        #[serde(default = "default_noise")]
        noise_std: f32,
    },
}

fn default_classes() -> usize {
    10
}
fn default_hw() -> usize {
    32
}
fn default_noise() -> f32 {
    0.12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum TriggerSpec {
    Gaussian {
        #[serde(default = "default_std")]
        std: f32,
        #[serde(default = "default_blend")]
        blend: f32,
        #[serde(default)]
        seed: u64,
    },
    Logo {
        path: PathBuf,
        position: [usize; 2],
        #[serde(default = "default_scale")]
        scale: f32,
        #[serde(default = "default_blend")]
        blend: f32,
    },
    FixedAsset {
        path: PathBuf,
        #[serde(default = "default_blend")]
        blend: f32,
    },
}

fn default_std() -> f32 {
    0.15
}
fn default_blend() -> f32 {
    0.3
}
fn default_scale() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecCount {
    pub spec: CompressionSpec,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSpec {
    pub target_label: usize,
    pub n_normal: usize,
    #[serde(default)]
    pub per_codec: Vec<CodecCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub arch: Arch,
    pub mode: TrainMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sched")]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub model_seed: u64,
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    128
}
fn default_sched() -> Vec<(usize, f64)> {
    DEFAULT_SCHEDULE.to_vec()
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcSpec {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// (layer, weight) pairs; defaults to the architecture's selector.
    pub selector: Option<Vec<(String, f64)>>,
}

impl Default for FcSpec {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            selector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualitySweepSpec {
    pub codec: String,
    pub grid: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_eval_specs")]
    pub specs: Vec<CompressionSpec>,
    pub quality_sweep: Option<QualitySweepSpec>,
}

fn default_eval_specs() -> Vec<CompressionSpec> {
    CompressionSpec::defaults().to_vec()
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            specs: default_eval_specs(),
            quality_sweep: None,
        }
    }
}

/// Complete declarative description of one experiment. Together with the
/// dataset files and codec-library versions it fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub trigger: TriggerSpec,
    pub poison: PoisonSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub fc: FcSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = toml::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Collect every invalid field in one pass.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.is_empty() {
            problems.push("name: must not be empty".to_string());
        }
        if self
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            problems.push(format!(
                "name: '{}' must be alphanumeric with - or _",
                self.name
            ));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                train_size,
                test_size,
                num_classes,
                hw,
                ..
            } => {
                if *train_size == 0 || *test_size == 0 {
                    problems.push("dataset: synthetic sizes must be > 0".into());
                }
                if *num_classes < 2 {
                    problems.push("dataset: num_classes must be >= 2".into());
                }
                if *hw == 0 || *hw % 4 != 0 {
                    problems.push("dataset: hw must be a positive multiple of 4".into());
                }
            }
            DatasetSpec::Cifar10 { .. } => {}
        }
        match &self.trigger {
            TriggerSpec::Gaussian { std, blend, .. } => {
                if *std < 0.0 {
                    problems.push("trigger: std must be >= 0".into());
                }
                if !(0.0..=1.0).contains(blend) {
                    problems.push("trigger: blend must lie in [0, 1]".into());
                }
            }
            TriggerSpec::Logo { scale, blend, .. } => {
                if *scale <= 0.0 {
                    problems.push("trigger: scale must be > 0".into());
                }
                if !(0.0..=1.0).contains(blend) {
                    problems.push("trigger: blend must lie in [0, 1]".into());
                }
            }
            TriggerSpec::FixedAsset { blend, .. } => {
                if !(0.0..=1.0).contains(blend) {
                    problems.push("trigger: blend must lie in [0, 1]".into());
                }
            }
        }
        if self.train.mode != TrainMode::Clean && self.poison.n_normal == 0 {
            problems.push("poison: n_normal must be >= 1 in backdoor modes".into());
        }
        for cc in &self.poison.per_codec {
            if let Err(e) = cc.spec.validate() {
                problems.push(format!("poison: {e}"));
            }
            if cc.count > self.poison.n_normal {
                problems.push(format!(
                    "poison: {} count {} exceeds n_normal {}",
                    cc.spec.tag(),
                    cc.count,
                    self.poison.n_normal
                ));
            }
        }
        let tcfg = self.train_config();
        if let Err(e) = tcfg.validate() {
            problems.push(format!("train: {e}"));
        }
        if self.fc.alpha < 0.0 || !self.fc.alpha.is_finite() {
            problems.push("fc: alpha must be finite and >= 0".into());
        }
        if let Some(sel) = &self.fc.selector {
            if sel.is_empty() {
                problems.push("fc: selector must not be empty".into());
            }
        }
        for spec in &self.eval.specs {
            if let Err(e) = spec.validate() {
                problems.push(format!("eval: {e}"));
            }
        }
        if let Some(qs) = &self.eval.quality_sweep {
            if !qs.grid.windows(2).all(|w| w[0] < w[1]) || qs.grid.is_empty() {
                problems.push("eval: quality grid must be non-empty and strictly increasing".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Canonical hash embedded in every artifact of a run.
    pub fn hash(&self) -> Result<String> {
        let canonical = toml::to_string(self)?;
        Ok(hex::encode(&Sha256::digest(canonical.as_bytes())[..16]))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.train.mode,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: self.train.schedule.clone(),
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            augment: self.train.augment,
            seed: self.seed,
        }
    }

    pub fn fc_config(&self) -> FCConfig {
        let mut cfg = FCConfig::for_arch(self.train.arch);
        cfg.alpha = self.fc.alpha;
        if let Some(sel) = &self.fc.selector {
            cfg.selector = LayerSelector::new(sel.clone());
        }
        cfg
    }

    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetSpec::Cifar10 {
                root,
                train_subset,
                test_subset,
            } => {
                let root = root
                    .clone()
                    .or_else(|| std::env::var_os("CRBD_DATA_ROOT").map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Config(
                            "cifar10 dataset needs a root path or CRBD_DATA_ROOT".into(),
                        )
                    })?;
                let (mut train, mut test) = dataset::load_cifar10(&root)?;
                if let Some(n) = train_subset {
                    train = train.sample(*n, self.seed)?;
                }
                if let Some(n) = test_subset {
                    test = test.sample(*n, self.seed)?;
                }
                Ok((train, test))
            }
            DatasetSpec::Synthetic {
                train_size,
                test_size,
                num_classes,
                hw,
                noise_std,
            } => {
                let spec = SyntheticSpec {
                    train_size: *train_size,
                    test_size: *test_size,
                    num_classes: *num_classes,
                    hw: *hw,
                    noise_std: *noise_std,
                    seed: self.seed,
                };
                Ok((
                    dataset::synthetic_dataset(&spec, "train")?,
                    dataset::synthetic_dataset(&spec, "test")?,
                ))
            }
        }
    }

    pub fn build_trigger(&self, hw: (usize, usize)) -> Result<TriggerPattern> {
        match &self.trigger {
            TriggerSpec::Gaussian { std, blend, seed } => {
                trigger::make_gaussian_trigger(hw, *std, *blend, *seed)
            }
            TriggerSpec::Logo {
                path,
                position,
                scale,
                blend,
            } => trigger::make_logo_trigger(path, hw, (position[0], position[1]), *scale, *blend),
            TriggerSpec::FixedAsset { path, blend } => {
                trigger::make_fixed_asset_trigger(path, hw, *blend)
            }
        }
    }
}

/// One experiment's artifacts, all embedding the manifest hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dataset: String,
    pub attack: String,
    pub trigger: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub codec_versions: CodecVersions,
    pub injection_rate: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanRecord {
    target_label: usize,
    source_ids: Vec<usize>,
    per_codec: Vec<(CompressionSpec, usize)>,
    pairing: Vec<PairLink>,
    seed: u64,
    trigger_hash: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunState {
    manifest_hash: String,
    completed: Vec<String>,
}

impl RunState {
    fn done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        Ok(serde_json::from_slice(
            &std::fs::read(&path).map_err(|e| Error::io(&path, e))?,
        )?)
    }
}

/// Exclusive-run guard: at most one run per output directory.
struct Lockfile {
    path: PathBuf,
}

impl Lockfile {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (stale? remove {})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for Lockfile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Execute a manifest end to end, returning the fresh results directory.
pub fn run_manifest(path: &Path) -> Result<PathBuf> {
    let manifest = ExperimentManifest::load(path)?;
    let _lock = Lockfile::acquire(&manifest.output_dir)?;
    let mut dir = manifest
        .output_dir
        .join(format!("{}-{}", manifest.name, unix_seconds()));
    let mut suffix = 0;
    while dir.exists() {
        suffix += 1;
        dir = manifest
            .output_dir
            .join(format!("{}-{}-{suffix}", manifest.name, unix_seconds()));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    manifest.save(&dir.join("manifest.toml"))?;
    run_stages(&manifest, &dir, RunState {
        manifest_hash: manifest.hash()?,
        completed: Vec::new(),
    })?;
    Ok(dir)
}

/// Pick up a failed run where its state file left off.
pub fn resume_run(manifest_path: &Path, dir: &Path) -> Result<PathBuf> {
    let manifest = ExperimentManifest::load(manifest_path)?;
    let _lock = Lockfile::acquire(&manifest.output_dir)?;
    let state = RunState::load(dir)?;
    if state.manifest_hash != manifest.hash()? {
        return Err(Error::Config(
            "state file was produced by a different manifest".into(),
        ));
    }
    run_stages(&manifest, dir, state)?;
    Ok(dir.to_path_buf())
}

/// Build the training-ready dataset a manifest describes: the untouched
/// train set in clean mode, otherwise plan + materialize.
pub fn prepare_poisoned(
    manifest: &ExperimentManifest,
    train_set: &LabeledDataset,
    trig: &TriggerPattern,
) -> Result<PoisonedDataset> {
    if manifest.train.mode == TrainMode::Clean {
        return Ok(PoisonedDataset {
            clean: train_set.clone(),
            backdoor: Vec::new(),
            backdoor_sources: Vec::new(),
            compressed: Vec::new(),
            pairing: Vec::new(),
            target_label: manifest.poison.target_label,
            num_classes: train_set.num_classes,
            trigger_hash: trig.content_hash(),
            seed: manifest.seed,
            codec_versions: CodecVersions::current(),
        });
    }
    let per_codec: Vec<(CompressionSpec, usize)> = manifest
        .poison
        .per_codec
        .iter()
        .map(|cc| (cc.spec, cc.count))
        .collect();
    let plan = poison::build_plan(
        train_set,
        trig,
        manifest.poison.target_label,
        manifest.poison.n_normal,
        &per_codec,
        manifest.seed,
    )?;
    poison::materialize(&plan, train_set)
}

fn run_stages(manifest: &ExperimentManifest, dir: &Path, mut state: RunState) -> Result<()> {
    let hash = manifest.hash()?;

    // prepare: always re-derived (deterministic and cheap relative to training)
    let (train_set, test_set) = manifest.load_datasets()?;
    let hw = {
        let (_, h, w) = train_set.images[0].shape();
        (h, w)
    };
    let trig = manifest.build_trigger(hw)?;
    trigger::save_pattern(&trig, dir, "trigger")?;

    // poison
    let plan_path = dir.join("plan.json");
    let data: PoisonedDataset = if manifest.train.mode == TrainMode::Clean {
        PoisonedDataset {
            clean: train_set.clone(),
            backdoor: Vec::new(),
            backdoor_sources: Vec::new(),
            compressed: Vec::new(),
            pairing: Vec::new(),
            target_label: manifest.poison.target_label,
            num_classes: train_set.num_classes,
            trigger_hash: trig.content_hash(),
            seed: manifest.seed,
            codec_versions: CodecVersions::current(),
        }
    } else {
        let per_codec: Vec<(CompressionSpec, usize)> = manifest
            .poison
            .per_codec
            .iter()
            .map(|cc| (cc.spec, cc.count))
            .collect();
        let plan = if state.done("poison") && plan_path.exists() {
            let record: PlanRecord =
                serde_json::from_slice(&std::fs::read(&plan_path).map_err(|e| Error::io(&plan_path, e))?)?;
            if record.trigger_hash != trig.content_hash() {
                return Err(Error::Config(
                    "persisted plan was built with a different trigger".into(),
                ));
            }
            poison::PoisonPlan {
                trigger: trig.clone(),
                target_label: record.target_label,
                source_ids: record.source_ids,
                per_codec: record.per_codec,
                pairing: record.pairing,
                seed: record.seed,
            }
        } else {
            let plan = poison::build_plan(
                &train_set,
                &trig,
                manifest.poison.target_label,
                manifest.poison.n_normal,
                &per_codec,
                manifest.seed,
            )?;
            let record = PlanRecord {
                target_label: plan.target_label,
                source_ids: plan.source_ids.clone(),
                per_codec: plan.per_codec.clone(),
                pairing: plan.pairing.clone(),
                seed: plan.seed,
                trigger_hash: trig.content_hash(),
            };
            std::fs::write(&plan_path, serde_json::to_vec_pretty(&record)?)
                .map_err(|e| Error::io(&plan_path, e))?;
            state.completed.push("poison".into());
            state.save(dir)?;
            plan
        };
        poison::materialize(&plan, &train_set)?
    };
    let ir = if data.total_poison() == 0 {
        0.0
    } else {
        data.total_poison() as f64 / train_set.len() as f64
    };

    // train
    let ckpt_dir = dir.join("checkpoint");
    let model: Model;
    if state.done("train") && ckpt_dir.join("weights.safetensors").exists() {
        model = Model::load_checkpoint(&ckpt_dir)?;
    } else {
        model = model::build_model(
            manifest.train.arch,
            train_set.num_classes,
            manifest.train.model_seed,
        )?;
        let history = train::train(&model, &data, &manifest.train_config(), &manifest.fc_config())?;
        model.save_checkpoint(&ckpt_dir)?;
        history.save_csv(&dir.join("history.csv"))?;
        state.completed.push("train".into());
        state.save(dir)?;
    }

    // evaluate
    let metrics = eval::evaluate(
        &model,
        &test_set,
        &trig,
        manifest.poison.target_label,
        &manifest.eval.specs,
        Some(ir),
    )?;
    let report = RunReport {
        name: manifest.name.clone(),
        dataset: match &manifest.dataset {
            DatasetSpec::Cifar10 { .. } => "cifar10".into(),
            DatasetSpec::Synthetic { .. } => "synthetic".into(),
        },
        attack: manifest.train.mode.to_string(),
        trigger: match &manifest.trigger {
            TriggerSpec::Gaussian { .. } => "gaussian".into(),
            TriggerSpec::Logo { .. } => "logo".into(),
            TriggerSpec::FixedAsset { .. } => "fixed-asset".into(),
        },
        manifest_hash: hash,
        seed: manifest.seed,
        codec_versions: CodecVersions::current(),
        injection_rate: ir,
        metrics,
    };
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| Error::io(&report_path, e))?;
    if let Some(qs) = &manifest.eval.quality_sweep {
        let sweep = eval::quality_sweep(
            &model,
            &test_set,
            &trig,
            manifest.poison.target_label,
            &qs.codec,
            &qs.grid,
        )?;
        sweep.save_json(&dir.join("quality_sweep.json"))?;
        sweep.save_csv(&dir.join("quality_sweep.csv"))?;
        eval::plot_sweep(&sweep, &dir.join("quality_sweep.png"))?;
    }
    if !state.done("evaluate") {
        state.completed.push("evaluate".into());
    }
    state.save(dir)?;
    Ok(())
}

/// Render run reports as the 8-column attack summary table
/// (Dataset, Attack, Trigger, IR, TA, ASR, plus one column per codec).
pub fn render_attack_table(rows: &[&RunReport], force: bool) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parameter("no reports to render".into()));
    }
    let first_versions = &rows[0].codec_versions;
    if !force && rows.iter().any(|r| &r.codec_versions != first_versions) {
        return Err(Error::Config(
            "reports span different codec-library versions; pass force to merge anyway".into(),
        ));
    }
    let mut codecs: Vec<String> = rows
        .iter()
        .flat_map(|r| r.metrics.asr_bc.keys().cloned())
        .collect();
    codecs.sort();
    codecs.dedup();
    let mut header = vec![
        "Dataset".to_string(),
        "Attack".into(),
        "Trigger".into(),
        "IR".into(),
        "TA".into(),
        "ASR".into(),
    ];
    header.extend(codecs.iter().map(|c| format!("ASR[{c}]")));
    let mut table: Vec<Vec<String>> = vec![header];
    for report in rows {
        let pct = |f: Option<eval::Fraction>| {
            f.map(|f| format!("{:.2}%", 100.0 * f.value()))
                .unwrap_or_else(|| "-".into())
        };
        let mut row = vec![
            report.dataset.clone(),
            report.attack.clone(),
            report.trigger.clone(),
            format!("{:.2}%", 100.0 * report.injection_rate),
            pct(report.metrics.ta),
            pct(report.metrics.asr),
        ];
        for c in &codecs {
            row.push(pct(report.metrics.asr_bc.get(c).copied()));
        }
        table.push(row);
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in table.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{cell:<width$}", width = widths[c]));
        }
        out.push('\n');
        if ri == 0 {
            for (c, w) in widths.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&"-".repeat(*w));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(dir: &Path) -> ExperimentManifest {
        ExperimentManifest {
            name: "tiny".into(),
            seed: 1,
            output_dir: dir.join("out"),
            dataset: DatasetSpec::Synthetic {
                train_size: 30,
                test_size: 20,
                num_classes: 10,
                hw: 32,
                noise_std: 0.12,
            },
            trigger: TriggerSpec::Gaussian {
                std: 0.3,
                blend: 1.0,
                seed: 1,
            },
            poison: PoisonSpec {
                target_label: 5,
                n_normal: 4,
                per_codec: vec![CodecCount {
                    spec: CompressionSpec::DEFAULT_JPEG,
                    count: 2,
                }],
            },
            train: TrainSpec {
                arch: Arch::Smallcnn,
                mode: TrainMode::FcBackdoor,
                epochs: 1,
                batch_size: 8,
                schedule: vec![(0, 0.05)],
                momentum: 0.9,
                weight_decay: 5e-4,
                augment: false,
                model_seed: 2,
            },
            fc: FcSpec::default(),
            eval: EvalSpec {
                specs: vec![CompressionSpec::DEFAULT_JPEG],
                quality_sweep: None,
            },
        }
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let loaded = ExperimentManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.hash().unwrap(), m.hash().unwrap());
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, format!("bogus_field = 3\n{text}")).unwrap();
        assert!(ExperimentManifest::load(&path).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(dir.path());
        m.name = "bad name!".into();
        m.fc.alpha = -2.0;
        m.train.schedule = vec![(3, 0.1)];
        match m.validate() {
            Err(Error::Validation(problems)) => {
                assert!(problems.len() >= 3, "{problems:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn run_twice_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let d1 = run_manifest(&path).unwrap();
        let d2 = run_manifest(&path).unwrap();
        assert_ne!(d1, d2);
        let r1: RunReport =
            serde_json::from_slice(&std::fs::read(d1.join("report.json")).unwrap()).unwrap();
        let r2: RunReport =
            serde_json::from_slice(&std::fs::read(d2.join("report.json")).unwrap()).unwrap();
        assert_eq!(r1, r2);
        assert!(d1.join("checkpoint/weights.safetensors").exists());
        assert!(d1.join("history.csv").exists());
        assert!(d1.join("plan.json").exists());
        // lock released after both runs
        assert!(!m.output_dir.join(".lock").exists());
    }

    #[test]
    fn resume_reuses_trained_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let d1 = run_manifest(&path).unwrap();
        let r1: RunReport =
            serde_json::from_slice(&std::fs::read(d1.join("report.json")).unwrap()).unwrap();
        // wipe the report, keep state: resume should rebuild it from the
        // persisted checkpoint without retraining
        std::fs::remove_file(d1.join("report.json")).unwrap();
        let d2 = resume_run(&path, &d1).unwrap();
        assert_eq!(d1, d2);
        let r2: RunReport =
            serde_json::from_slice(&std::fs::read(d1.join("report.json")).unwrap()).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn lock_prevents_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let _lock = Lockfile::acquire(&m.output_dir).unwrap();
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        assert!(matches!(run_manifest(&path), Err(Error::Config(_))));
    }

    #[test]
    fn table_rendering_and_version_guard() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        let path = dir.path().join("m.toml");
        m.save(&path).unwrap();
        let d = run_manifest(&path).unwrap();
        let r: RunReport =
            serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
        let table = render_attack_table(&[&r], false).unwrap();
        assert!(table.contains("Dataset"));
        assert!(table.contains("synthetic"));
        assert!(table.contains("fc-backdoor"));
        assert!(table.contains("gaussian"));
        assert!(table.contains("ASR[jpeg-q50]"));
        let mut r2 = r.clone();
        r2.codec_versions.jpeg = "different".into();
        assert!(render_attack_table(&[&r, &r2], false).is_err());
        assert!(render_attack_table(&[&r, &r2], true).is_ok());
    }
}
