//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a single `criterion N: PASS|FAIL|SKIP` line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.
//!
//! Criteria needing external data or long wall time degrade to an honest
//! SKIP: criterion 1 requires CIFAR-10 binaries (CRBD_DATA_ROOT) plus
//! CRBD_RUN_DESK_SCALE=1, criterion 2 requires the CIFAR-10 binaries.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};

use crbd_core::codec::{self, CompressionSpec};
use crbd_core::dataset::{self, synthetic_dataset, LabeledDataset, SyntheticSpec};
use crbd_core::eval::{self, Fraction};
use crbd_core::experiment::{ExperimentManifest, RunReport};
use crbd_core::image::ImageTensor;
use crbd_core::model::{
    build_model, build_model_with, images_to_tensor, Arch, LayerSelector, Model, ModelOptions,
};
use crbd_core::poison::{build_plan, materialize, PoisonedDataset};
use crbd_core::train::{
    fc_loss, fc_loss_batch, total_loss, train, FCConfig, TrainConfig, TrainMode,
};
use crbd_core::trigger::{self, make_gaussian_trigger, TriggerPattern};

fn pass(n: u32) {
    println!("criterion {n}: PASS");
}

fn skip(n: u32, reason: &str) {
    println!("criterion {n}: SKIP ({reason})");
}

fn fail(n: u32, detail: &str) -> ! {
    println!("criterion {n}: FAIL ({detail})");
    panic!("criterion {n} failed: {detail}");
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn cifar_root() -> Option<PathBuf> {
    let root = std::env::var_os("CRBD_DATA_ROOT").map(PathBuf::from)?;
    dataset::cifar10_available(&root).then_some(root)
}

// ---------------------------------------------------------------------------
// criterion 1: full attack table at desk scale (ResNet-18, CIFAR-10, 8%
// injection). Hours of wall time, so double-gated behind CRBD_RUN_DESK_SCALE.

#[test]
fn criterion_1_desk_scale_attack_table() {
    if std::env::var_os("CRBD_RUN_DESK_SCALE").is_none() {
        skip(1, "set CRBD_RUN_DESK_SCALE=1 to run the multi-hour ResNet-18 table");
        return;
    }
    let Some(root) = cifar_root() else {
        skip(1, "CIFAR-10 binaries not found; set CRBD_DATA_ROOT");
        return;
    };
    let (train_set, test_set) = dataset::load_cifar10(&root).unwrap();
    let trig = make_gaussian_trigger((32, 32), 0.15, 0.3, 1).unwrap();
    let target = 5;
    let per_codec: Vec<(CompressionSpec, usize)> = CompressionSpec::defaults()
        .iter()
        .map(|&s| (s, 1000))
        .collect();
    let plan = build_plan(&train_set, &trig, target, 1000, &per_codec, 1).unwrap();
    let data = materialize(&plan, &train_set).unwrap();
    let cfg = |mode| TrainConfig {
        epochs: 50,
        schedule: vec![(0, 0.1), (20, 0.01), (35, 0.001)],
        ..TrainConfig::new(mode)
    };
    let fcfg = FCConfig::for_arch(Arch::Resnet18);
    let specs = CompressionSpec::defaults();

    let run = |mode| {
        let model = build_model(Arch::Resnet18, 10, 1).unwrap();
        train(&model, &data, &cfg(mode), &fcfg).unwrap();
        eval::evaluate(&model, &test_set, &trig, target, &specs, None).unwrap()
    };
    let clean = run(TrainMode::Clean);
    let common = run(TrainMode::CommonBackdoor);
    let fc = run(TrainMode::FcBackdoor);

    let common_asr = common.asr.unwrap().value();
    let common_jpeg = common.asr_bc["jpeg-q50"].value();
    let fc_asr = fc.asr.unwrap().value();
    let fc_min_bc = fc.min_asr_bc().unwrap();
    let ta_gap = (fc.ta.unwrap().value() - clean.ta.unwrap().value()).abs();
    if common_asr < 0.95 {
        fail(1, &format!("common-backdoor ASR {common_asr:.4} < 0.95"));
    }
    if common_jpeg > 0.30 {
        fail(1, &format!("common-backdoor jpeg ASR {common_jpeg:.4} > 0.30"));
    }
    if fc_asr < 0.90 {
        fail(1, &format!("fc-backdoor ASR {fc_asr:.4} < 0.90"));
    }
    if fc_min_bc < 0.85 {
        fail(1, &format!("fc-backdoor min compressed ASR {fc_min_bc:.4} < 0.85"));
    }
    if ta_gap > 0.03 {
        fail(1, &format!("clean-accuracy gap {ta_gap:.4} > 0.03"));
    }
    pass(1);
}

// ---------------------------------------------------------------------------
// criterion 2: CPU smoke on a 5000-image CIFAR-10 subset, 10 epochs,
// small CNN; feature-consistency training must beat the common backdoor by
// >= 0.30 on the worst compressed ASR, averaged over 3 seeds.

#[test]
fn criterion_2_cpu_smoke_consistency_gap() {
    let Some(root) = cifar_root() else {
        skip(2, "CIFAR-10 binaries not found; set CRBD_DATA_ROOT");
        return;
    };
    let (full_train, full_test) = dataset::load_cifar10(&root).unwrap();
    let test_set = full_test.sample(1000, 99).unwrap();
    let target = 5;
    let specs = CompressionSpec::defaults();
    let mut gaps = Vec::new();
    for seed in [1u64, 2, 3] {
        let subset = full_train.sample(5000, seed).unwrap();
        let trig = make_gaussian_trigger((32, 32), 0.15, 0.3, seed).unwrap();
        let per_codec: Vec<(CompressionSpec, usize)> =
            specs.iter().map(|&s| (s, 100)).collect();
        let plan = build_plan(&subset, &trig, target, 100, &per_codec, seed).unwrap();
        let data = materialize(&plan, &subset).unwrap();
        let cfg = |mode| TrainConfig {
            epochs: 10,
            schedule: vec![(0, 0.05), (6, 0.01)],
            augment: false,
            seed,
            ..TrainConfig::new(mode)
        };
        let fcfg = FCConfig::for_arch(Arch::Smallcnn);
        let min_bc = |mode| {
            let model = build_model(Arch::Smallcnn, 10, seed).unwrap();
            train(&model, &data, &cfg(mode), &fcfg).unwrap();
            eval::evaluate(&model, &test_set, &trig, target, &specs, None)
                .unwrap()
                .min_asr_bc()
                .unwrap()
        };
        gaps.push(min_bc(TrainMode::FcBackdoor) - min_bc(TrainMode::CommonBackdoor));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if mean < 0.30 {
        fail(2, &format!("mean worst-codec ASR gap {mean:.4} < 0.30 (per seed: {gaps:?})"));
    }
    pass(2);
}

// ---------------------------------------------------------------------------
// criterion 3: loss correctness — zero distance on identical features, the
// alpha=0 decomposition, uniform-logit cross entropy, and a 64-bit
// finite-difference check of the full objective's gradient.

#[test]
fn criterion_3_loss_correctness() {
    let dev = Device::Cpu;
    // identical features -> exactly zero consistency loss
    let sel = LayerSelector::new(vec![("fc1".into(), 1.0)]);
    let mut feats = HashMap::new();
    feats.insert("fc1".to_string(), vec![0.3f64, -1.2, 2.5, 0.0]);
    let z = fc_loss(&feats, &feats, &sel).unwrap();
    if z.abs() > 1e-9 {
        fail(3, &format!("consistency loss on identical features {z:e} > 1e-9"));
    }

    // alpha = 0 reduces to the sum of the two cross-entropy terms
    let y = Tensor::from_vec(vec![0u32, 1], 2, &dev).unwrap();
    let logits = Tensor::rand(-1f32, 1f32, (2, 10), &dev).unwrap();
    let fcv = Tensor::full(3.0f32, (), &dev).unwrap();
    let total = scalar(&total_loss(&logits, &logits, &y, &fcv, 0.0).unwrap());
    let ce = scalar(&candle_nn::loss::cross_entropy(&logits, &y).unwrap());
    if (total - 2.0 * ce).abs() > 1e-6 {
        fail(3, &format!("alpha=0 decomposition off by {:e}", (total - 2.0 * ce).abs()));
    }

    // uniform logits over 10 classes -> each CE term is ln 10
    let uniform = Tensor::zeros((2, 10), DType::F32, &dev).unwrap();
    let zero = Tensor::zeros((), DType::F32, &dev).unwrap();
    let total = scalar(&total_loss(&uniform, &uniform, &y, &zero, 0.0).unwrap());
    if (total - 2.0 * 10f64.ln()).abs() > 1e-6 {
        fail(3, &format!("uniform-logit CE off by {:e}", (total - 2.0 * 10f64.ln()).abs()));
    }

    // finite differences vs autodiff on the full objective, 64-bit
    if let Err(msg) = gradcheck_full_objective() {
        fail(3, &msg);
    }
    pass(3);
}

/// Central finite differences against the analytic gradient of the complete
/// training objective on a small 64-bit CNN. The loss is piecewise smooth
/// (relu, max pooling), so probes where the h vs h/2 central estimates or the
/// one-sided slopes disagree sit at a kink and are resampled.
fn gradcheck_full_objective() -> Result<(), String> {
    use rand::Rng;
    let dev = Device::Cpu;
    let model = build_model_with(
        Arch::Smallcnn,
        4,
        7,
        ModelOptions {
            input_hw: Some(8),
            dtype: DType::F64,
        },
    )
    .unwrap();
    let sel = LayerSelector::new(vec![("fc1".into(), 1.0)]);
    let x_b = Tensor::rand(0f64, 1f64, (3, 3, 8, 8), &dev).unwrap();
    let x_bc = Tensor::rand(0f64, 1f64, (3, 3, 8, 8), &dev).unwrap();
    let y = Tensor::from_vec(vec![2u32, 2, 2], 3, &dev).unwrap();
    let alpha = 0.1;
    let names = sel.layer_names();

    let eval_loss = |m: &Model| -> f64 {
        let (lb, fb) = m.forward_with_features(&x_b, &names, false).unwrap();
        let (lbc, fbc) = m.forward_with_features(&x_bc, &names, false).unwrap();
        let fc = fc_loss_batch(&fb, &fbc, &sel).unwrap();
        scalar(&total_loss(&lb, &lbc, &y, &fc, alpha).unwrap())
    };

    let (lb, fb) = model.forward_with_features(&x_b, &names, false).unwrap();
    let (lbc, fbc) = model.forward_with_features(&x_bc, &names, false).unwrap();
    let fc = fc_loss_batch(&fb, &fbc, &sel).unwrap();
    let loss = total_loss(&lb, &lbc, &y, &fc, alpha).unwrap();
    let grads = loss.backward().unwrap();

    let mut rng = crbd_core::rng::seeded(0);
    for (name, var) in model.trainable_vars() {
        let grad = grads
            .get(var.as_tensor())
            .ok_or_else(|| format!("no gradient recorded for {name}"))?
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let flat = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < 3 {
            attempts += 1;
            if attempts > 60 {
                return Err(format!("{name}: too many non-smooth probe points"));
            }
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let bump = |delta: f64| {
                let mut vals = flat.clone();
                vals[i] += delta;
                let t = Tensor::from_vec(vals, shape.as_slice(), &dev).unwrap();
                var.set(&t).unwrap();
            };
            let at = |delta: f64| {
                bump(delta);
                let v = eval_loss(&model);
                bump(0.0);
                v
            };
            let base = at(0.0);
            let (fp, fm) = (at(h), at(-h));
            let (fp2, fm2) = (at(h / 2.0), at(-h / 2.0));
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp2 - fm2) / h;
            let fwd = (fp - base) / h;
            let bwd = (base - fm) / h;
            let span = d1.abs().max(d2.abs()).max(1e-8);
            if (d1 - d2).abs() / span > 1e-4 || (fwd - bwd).abs() / span > 5e-3 {
                continue;
            }
            let analytic = grad[i];
            let denom = analytic.abs().max(d2.abs()).max(1e-8);
            let rel = (d2 - analytic).abs() / denom;
            if rel > 1e-3 {
                return Err(format!(
                    "{name}[{i}]: analytic {analytic}, numeric {d2}, rel {rel:.3e} > 1e-3"
                ));
            }
            accepted += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 4: the vectorized metrics must equal a per-sample scalar loop on
// a 100-image fixture, as exact integer counts.

#[test]
fn criterion_4_metric_oracle_equivalence() {
    let spec = SyntheticSpec {
        train_size: 0,
        test_size: 100,
        seed: 31,
        ..Default::default()
    };
    let test_set = synthetic_dataset(&spec, "test").unwrap();
    let model = build_model(Arch::Smallcnn, 10, 3).unwrap();
    let trig = make_gaussian_trigger((32, 32), 0.15, 0.3, 3).unwrap();
    let target = 5;
    let specs = CompressionSpec::defaults();
    let report = eval::evaluate(&model, &test_set, &trig, target, &specs, None).unwrap();

    let predict_one = |img: &ImageTensor| -> usize {
        let x = images_to_tensor(&[img], model.device()).unwrap();
        let logits = model.forward(&x, false).unwrap().flatten_all().unwrap();
        let v = logits.to_vec1::<f32>().unwrap();
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };

    // test accuracy, one sample at a time
    let correct = test_set
        .images
        .iter()
        .zip(&test_set.labels)
        .filter(|(img, &l)| predict_one(img) == l)
        .count();
    let oracle_ta = Fraction::new(correct, test_set.len());
    if report.ta.unwrap() != oracle_ta {
        fail(4, &format!("TA {:?} != oracle {:?}", report.ta.unwrap(), oracle_ta));
    }

    // attack success, uncompressed and per codec
    let mut cases: Vec<(Option<CompressionSpec>, Fraction)> =
        vec![(None, report.asr.unwrap())];
    for s in specs {
        cases.push((Some(s), report.asr_bc[&s.tag()]));
    }
    for (spec, reported) in cases {
        let mut hits = 0;
        let mut n = 0;
        for (img, &label) in test_set.images.iter().zip(&test_set.labels) {
            if label == target {
                continue;
            }
            let mut x = trigger::stamp(img, &trig).unwrap();
            if let Some(s) = spec {
                x = codec::compress(&x, s).unwrap();
            }
            hits += usize::from(predict_one(&x) == target);
            n += 1;
        }
        let oracle = Fraction::new(hits, n);
        if reported != oracle {
            fail(4, &format!("ASR[{spec:?}] {reported:?} != oracle {oracle:?}"));
        }
    }
    pass(4);
}

// ---------------------------------------------------------------------------
// criterion 5: codecs are deterministic (double encode is byte-identical)
// and PSNR is monotone in each codec's fidelity knob on every fixture.
// Note the jpeg2000 knob is a compression ratio: larger means *more*
// compression, so its fidelity ordering is the reverse of jpeg/webp quality.

#[test]
fn criterion_5_codec_determinism_and_psnr_ordering() {
    let spec = SyntheticSpec {
        train_size: 0,
        test_size: 6,
        seed: 17,
        ..Default::default()
    };
    let fixtures = synthetic_dataset(&spec, "test").unwrap().images;
    let trig = make_gaussian_trigger((32, 32), 0.15, 0.3, 17).unwrap();
    let mut all: Vec<ImageTensor> = fixtures.clone();
    all.extend(fixtures.iter().map(|x| trigger::stamp(x, &trig).unwrap()));

    for img in &all {
        for s in CompressionSpec::defaults() {
            let a = codec::encode_bytes(img, s).unwrap();
            let b = codec::encode_bytes(img, s).unwrap();
            if a != b {
                fail(5, &format!("{} double-encode differs", s.tag()));
            }
        }
        // fidelity ladders, best to worst
        let ladders: [[CompressionSpec; 3]; 3] = [
            [
                CompressionSpec::Jpeg { quality: 90 },
                CompressionSpec::Jpeg { quality: 50 },
                CompressionSpec::Jpeg { quality: 10 },
            ],
            [
                CompressionSpec::Webp { quality: 90 },
                CompressionSpec::Webp { quality: 50 },
                CompressionSpec::Webp { quality: 10 },
            ],
            // the jpeg2000 rate allocator bottoms out near ratio 15 on
            // 32x32 inputs (header-dominated streams), so the ladder stays
            // above that floor
            [
                CompressionSpec::Jpeg2000 { quality_layers: 2 },
                CompressionSpec::Jpeg2000 { quality_layers: 10 },
                CompressionSpec::Jpeg2000 { quality_layers: 30 },
            ],
        ];
        for ladder in &ladders {
            let psnrs: Vec<f64> = ladder
                .iter()
                .map(|&s| codec::psnr(img, &codec::compress(img, s).unwrap()).unwrap())
                .collect();
            if !(psnrs[0] > psnrs[1] && psnrs[1] > psnrs[2]) {
                fail(
                    5,
                    &format!("PSNR not monotone for {}: {psnrs:?}", ladder[0].codec_name()),
                );
            }
        }
    }
    pass(5);
}

// ---------------------------------------------------------------------------
// shared fixture for criteria 6 and 7: small CNNs trained on the synthetic
// dataset, one consistency-trained model with jpeg-only pairs and one common
// backdoor baseline per seed.

struct TrainedPair {
    fc: Model,
    common: Model,
    trig: TriggerPattern,
}

struct Fixture {
    pairs: Vec<TrainedPair>,
    test_set: LabeledDataset,
    target: usize,
}

fn poisoned_jpeg_only(
    train_set: &LabeledDataset,
    trig: &TriggerPattern,
    target: usize,
    seed: u64,
) -> PoisonedDataset {
    let plan = build_plan(
        train_set,
        trig,
        target,
        120,
        &[(CompressionSpec::DEFAULT_JPEG, 120)],
        seed,
    )
    .unwrap();
    materialize(&plan, train_set).unwrap()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = SyntheticSpec {
            train_size: 1500,
            test_size: 300,
            seed: 9,
            ..Default::default()
        };
        let train_set = synthetic_dataset(&spec, "train").unwrap();
        let test_set = synthetic_dataset(&spec, "test").unwrap();
        let target = 5;
        let fcfg = FCConfig::for_arch(Arch::Smallcnn);
        let cfg = |mode, seed| TrainConfig {
            epochs: 6,
            batch_size: 64,
            schedule: vec![(0, 0.01)],
            augment: false,
            seed,
            ..TrainConfig::new(mode)
        };
        // high-frequency, low-blend trigger: the part compression strips is
        // the part the common backdoor keys on, which is what the
        // consistency objective is meant to survive
        let pairs = [1u64, 2, 3]
            .into_iter()
            .map(|seed| {
                let trig = make_gaussian_trigger((32, 32), 0.5, 0.15, seed).unwrap();
                let data = poisoned_jpeg_only(&train_set, &trig, target, seed);
                let fc = build_model(Arch::Smallcnn, 10, seed).unwrap();
                train(&fc, &data, &cfg(TrainMode::FcBackdoor, seed), &fcfg).unwrap();
                let common = build_model(Arch::Smallcnn, 10, seed).unwrap();
                train(&common, &data, &cfg(TrainMode::CommonBackdoor, seed), &fcfg).unwrap();
                TrainedPair { fc, common, trig }
            })
            .collect();
        Fixture {
            pairs,
            test_set,
            target,
        }
    })
}

// ---------------------------------------------------------------------------
// criterion 6: consistency training with jpeg pairs only must transfer to
// jpeg2000 and webp, beating the common baseline's compressed ASR by >= 0.20
// on each, averaged over 3 seeds.

#[test]
fn criterion_6_cross_codec_generalization() {
    let fx = fixture();
    for unseen in [CompressionSpec::DEFAULT_JPEG2000, CompressionSpec::DEFAULT_WEBP] {
        let mut fc_sum = 0.0;
        let mut common_sum = 0.0;
        for pair in &fx.pairs {
            let asr = |m: &Model| {
                eval::attack_success_rate(m, &fx.test_set, &pair.trig, fx.target, unseen)
                    .unwrap()
                    .value()
            };
            fc_sum += asr(&pair.fc);
            common_sum += asr(&pair.common);
        }
        let n = fx.pairs.len() as f64;
        let (fc_mean, common_mean) = (fc_sum / n, common_sum / n);
        if fc_mean - common_mean < 0.20 {
            fail(
                6,
                &format!(
                    "{}: consistency {fc_mean:.4} vs common {common_mean:.4}, gap < 0.20",
                    unseen.tag()
                ),
            );
        }
    }
    pass(6);
}

// ---------------------------------------------------------------------------
// criterion 7: the consistency-trained model's jpeg ASR must be
// non-decreasing in quality across 10..90, up to 0.02 per step.

#[test]
fn criterion_7_quality_sweep_monotonicity() {
    let fx = fixture();
    let pair = &fx.pairs[0];
    let grid: Vec<u32> = (1..=9).map(|q| q * 10).collect();
    let sweep = eval::quality_sweep(&pair.fc, &fx.test_set, &pair.trig, fx.target, "jpeg", &grid)
        .unwrap();
    let asrs: Vec<f64> = sweep
        .points
        .iter()
        .map(|p| p.report.asr_bc.values().next().unwrap().value())
        .collect();
    for w in asrs.windows(2) {
        if w[1] < w[0] - 0.02 {
            fail(7, &format!("ASR drops {:.4} -> {:.4} along the quality grid {asrs:?}", w[0], w[1]));
        }
    }
    pass(7);
}

// ---------------------------------------------------------------------------
// criterion 8: re-running a bundled manifest reproduces every metric
// fraction exactly.

#[test]
fn criterion_8_manifest_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let bundled = concat!(env!("CARGO_MANIFEST_DIR"), "/../../manifests/smoke_synthetic.toml");
    let mut manifest = ExperimentManifest::load(std::path::Path::new(bundled)).unwrap();
    manifest.output_dir = dir.path().join("out");
    let path = dir.path().join("manifest.toml");
    manifest.save(&path).unwrap();

    let load_report = |run_dir: &std::path::Path| -> RunReport {
        serde_json::from_slice(&std::fs::read(run_dir.join("report.json")).unwrap()).unwrap()
    };
    let d1 = crbd_core::experiment::run_manifest(&path).unwrap();
    let d2 = crbd_core::experiment::run_manifest(&path).unwrap();
    let (r1, r2) = (load_report(&d1), load_report(&d2));

    if r1.metrics.ta != r2.metrics.ta
        || r1.metrics.asr != r2.metrics.asr
        || r1.metrics.asr_bc != r2.metrics.asr_bc
        || r1.metrics.ir != r2.metrics.ir
        || r1.injection_rate != r2.injection_rate
    {
        fail(8, "two runs of the same manifest produced different metrics");
    }
    pass(8);
}
