//! Evaluation harness: clean accuracy, attack success rates per codec,
//! quality sweeps, cross-codec generalization and injection-rate studies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecVersions, CompressionSpec};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{self, Arch, Model};
use crate::poison;
use crate::train::{self, FCConfig, TrainConfig, TrainMode};
use crate::trigger::{self, TriggerPattern};

/// Exact metric value: integer numerator over integer denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub fn new(num: usize, den: usize) -> Self {
        Self { num, den }
    }

    pub fn value(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Clean test accuracy, when a clean split was evaluated.
    pub ta: Option<Fraction>,
    /// Injection rate of the training run this model came from, if known.
    pub ir: Option<f64>,
    /// Plain (uncompressed) attack success rate.
    pub asr: Option<Fraction>,
    /// Per-codec attack success rate, keyed by spec tag.
    pub asr_bc: BTreeMap<String, Fraction>,
    /// Checkpoint identity: parameter checksum of the evaluated model.
    pub checkpoint: String,
    pub codec_versions: CodecVersions,
}

impl MetricsReport {
    pub fn empty(model: &Model) -> Result<Self> {
        Ok(Self {
            ta: None,
            ir: None,
            asr: None,
            asr_bc: BTreeMap::new(),
            checkpoint: model.checksum()?,
            codec_versions: CodecVersions::current(),
        })
    }

    pub fn min_asr_bc(&self) -> Option<f64> {
        self.asr_bc
            .values()
            .map(|f| f.value())
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(
            &std::fs::read(path).map_err(|e| Error::io(path, e))?,
        )?)
    }
}

/// Batched argmax predictions.
pub fn predict(model: &Model, images: &[&ImageTensor]) -> Result<Vec<usize>> {
    const BATCH: usize = 256;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(BATCH) {
        let x = model::images_to_tensor(chunk, model.device())?;
        let logits = model.forward(&x, false)?;
        let ids = logits.argmax(1)?.to_dtype(candle_core::DType::U32)?.to_vec1::<u32>()?;
        out.extend(ids.into_iter().map(|i| i as usize));
    }
    Ok(out)
}

/// Fraction of clean test images classified as their true label.
pub fn test_accuracy(model: &Model, test: &LabeledDataset) -> Result<Fraction> {
    if test.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    let refs: Vec<&ImageTensor> = test.images.iter().collect();
    let preds = predict(model, &refs)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(Fraction::new(correct, test.len()))
}

/// Stamp the trigger onto every test image outside the target class,
/// optionally round-trip through the codec, and count predictions equal to
/// the target label.
pub fn attack_success_rate(
    model: &Model,
    test: &LabeledDataset,
    trig: &TriggerPattern,
    target_label: usize,
    spec: CompressionSpec,
) -> Result<Fraction> {
    let keep = test.indices_excluding(target_label);
    if keep.is_empty() {
        return Err(Error::Parameter(
            "no evaluation images outside the target class".into(),
        ));
    }
    let stamped: Vec<ImageTensor> = keep
        .iter()
        .map(|&i| trigger::stamp(&test.images[i], trig))
        .collect::<Result<_>>()?;
    let prepared = codec::batch_compress(&stamped, spec)?;
    let refs: Vec<&ImageTensor> = prepared.iter().collect();
    let preds = predict(model, &refs)?;
    let hits = preds.iter().filter(|&&p| p == target_label).count();
    Ok(Fraction::new(hits, keep.len()))
}

/// Full report over a clean split plus a set of compression specs
/// (always including the plain, uncompressed ASR).
pub fn evaluate(
    model: &Model,
    test: &LabeledDataset,
    trig: &TriggerPattern,
    target_label: usize,
    specs: &[CompressionSpec],
    ir: Option<f64>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::empty(model)?;
    report.ir = ir;
    report.ta = Some(test_accuracy(model, test)?);
    report.asr = Some(attack_success_rate(
        model,
        test,
        trig,
        target_label,
        CompressionSpec::None,
    )?);
    for spec in specs {
        if matches!(spec, CompressionSpec::None) {
            continue;
        }
        report.asr_bc.insert(
            spec.tag(),
            attack_success_rate(model, test, trig, target_label, *spec)?,
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    JpegQuality,
    InjectionRate,
    TrainCodec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Numeric axis value; for categorical axes this is the row index.
    pub value: f64,
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    fn check_axis(&self) -> Result<()> {
        if self.axis != SweepAxis::TrainCodec
            && !self.points.windows(2).all(|w| w[0].value < w[1].value)
        {
            return Err(Error::Parameter(
                "sweep axis values must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(
            &std::fs::read(path).map_err(|e| Error::io(path, e))?,
        )?)
    }

    /// One row per point with the scalar metrics flattened out.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut codecs: Vec<String> = self
            .points
            .iter()
            .flat_map(|p| p.report.asr_bc.keys().cloned())
            .collect();
        codecs.sort();
        codecs.dedup();
        let mut header = vec!["value".to_string(), "label".into(), "ta".into(), "asr".into()];
        header.extend(codecs.iter().map(|c| format!("asr_{c}")));
        w.write_record(&header)
            .map_err(|e| Error::Contract(format!("sweep csv: {e}")))?;
        for p in &self.points {
            let mut row = vec![
                p.value.to_string(),
                p.label.clone(),
                p.report.ta.map(|f| f.value().to_string()).unwrap_or_default(),
                p.report.asr.map(|f| f.value().to_string()).unwrap_or_default(),
            ];
            for c in &codecs {
                row.push(
                    p.report
                        .asr_bc
                        .get(c)
                        .map(|f| f.value().to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row)
                .map_err(|e| Error::Contract(format!("sweep csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Build a spec from a codec name plus its quality knob.
pub fn spec_for_quality(codec: &str, q: u32) -> Result<CompressionSpec> {
    let spec = match codec {
        "jpeg" => CompressionSpec::Jpeg { quality: q as u8 },
        "webp" => CompressionSpec::Webp { quality: q as u8 },
        "jpeg2000" => CompressionSpec::Jpeg2000 { quality_layers: q },
        other => return Err(Error::Parameter(format!("unknown codec '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// Attack success across a quality grid for one codec.
pub fn quality_sweep(
    model: &Model,
    test: &LabeledDataset,
    trig: &TriggerPattern,
    target_label: usize,
    codec: &str,
    qualities: &[u32],
) -> Result<SweepResult> {
    if qualities.is_empty() {
        return Err(Error::Parameter("empty quality grid".into()));
    }
    if !qualities.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Parameter("qualities must be strictly increasing".into()));
    }
    let mut points = Vec::new();
    for &q in qualities {
        let spec = spec_for_quality(codec, q)?;
        let mut report = MetricsReport::empty(model)?;
        report.asr_bc.insert(
            spec.tag(),
            attack_success_rate(model, test, trig, target_label, spec)?,
        );
        points.push(SweepPoint {
            value: q as f64,
            label: spec.tag(),
            report,
        });
    }
    let sweep = SweepResult {
        axis: SweepAxis::JpegQuality,
        points,
    };
    sweep.check_axis()?;
    Ok(sweep)
}

/// Cross matrix: each (named) model evaluated against every test spec.
/// Row order follows `models`; each row's report carries one ASR per spec.
pub fn generalization_matrix(
    models: &[(String, &Model)],
    test: &LabeledDataset,
    trig: &TriggerPattern,
    target_label: usize,
    specs: &[CompressionSpec],
) -> Result<SweepResult> {
    if models.is_empty() || specs.is_empty() {
        return Err(Error::Parameter("empty model list or spec list".into()));
    }
    let mut points = Vec::new();
    for (row, (name, model)) in models.iter().enumerate() {
        let mut report = MetricsReport::empty(model)?;
        for spec in specs {
            report.asr_bc.insert(
                spec.tag(),
                attack_success_rate(model, test, trig, target_label, *spec)?,
            );
        }
        points.push(SweepPoint {
            value: row as f64,
            label: name.clone(),
            report,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::TrainCodec,
        points,
    })
}

/// Configuration of one injection-rate study.
pub struct StudyConfig {
    pub arch: Arch,
    pub model_seed: u64,
    pub n_normal: usize,
    /// Codecs the compressed budget divides among (equal shares, remainder
    /// to the earlier entries).
    pub codecs: Vec<CompressionSpec>,
    pub eval_specs: Vec<CompressionSpec>,
}

fn split_count(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Train one model per compressed-instance count and report full metrics for
/// each. A zero count degenerates to the common-backdoor baseline. Partial
/// results are persisted per point when `out_dir` is given.
#[allow(clippy::too_many_arguments)]
pub fn injection_rate_study(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    trig: &TriggerPattern,
    target_label: usize,
    compressed_counts: &[usize],
    study: &StudyConfig,
    tcfg: &TrainConfig,
    fcfg: &FCConfig,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if compressed_counts.is_empty() {
        return Err(Error::Parameter("empty count list".into()));
    }
    if !compressed_counts.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Parameter("counts must be strictly increasing".into()));
    }
    if study.codecs.is_empty() {
        return Err(Error::Parameter("study needs at least one codec".into()));
    }
    let mut points = Vec::new();
    for &count in compressed_counts {
        let per_codec: Vec<(CompressionSpec, usize)> = study
            .codecs
            .iter()
            .zip(split_count(count, study.codecs.len()))
            .filter(|(_, c)| *c > 0)
            .map(|(s, c)| (*s, c))
            .collect();
        let plan = poison::build_plan(
            train_set,
            trig,
            target_label,
            study.n_normal,
            &per_codec,
            tcfg.seed,
        )?;
        let ir = poison::injection_rate(&plan, train_set.len())?;
        let data = poison::materialize(&plan, train_set)?;
        let mode = if count == 0 {
            TrainMode::CommonBackdoor
        } else {
            TrainMode::FcBackdoor
        };
        let point_cfg = TrainConfig {
            mode,
            ..tcfg.clone()
        };
        let model = model::build_model(study.arch, train_set.num_classes, study.model_seed)?;
        train::train(&model, &data, &point_cfg, fcfg)?;
        let mut report = evaluate(&model, test_set, trig, target_label, &study.eval_specs, Some(ir))?;
        report.ir = Some(ir);
        let point = SweepPoint {
            value: ir,
            label: format!("compressed-{count}"),
            report,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            point
                .report
                .save_json(&dir.join(format!("ir_{count}.json")))?;
        }
        points.push(point);
    }
    let sweep = SweepResult {
        axis: SweepAxis::InjectionRate,
        points,
    };
    sweep.check_axis()?;
    Ok(sweep)
}

// ---------------------------------------------------------------------------
// Plot emission: minimal hand-rolled PNG charts (line for sweeps, heatmap
// for the generalization matrix), enough for eyeballing trends.

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const MARGIN: u32 = 48;

fn blank_canvas() -> image::RgbImage {
    image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]))
}

fn draw_line(img: &mut image::RgbImage, a: (f32, f32), b: (f32, f32), color: image::Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

const SERIES_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// Line chart of every ASR series (plain + per codec) across the sweep axis.
pub fn plot_sweep(sweep: &SweepResult, path: &Path) -> Result<()> {
    if sweep.points.is_empty() {
        return Err(Error::Parameter("nothing to plot".into()));
    }
    let mut img = blank_canvas();
    let axes = image::Rgb([0, 0, 0]);
    let x0 = MARGIN as f32;
    let x1 = (PLOT_W - MARGIN) as f32;
    let y0 = (PLOT_H - MARGIN) as f32;
    let y1 = MARGIN as f32;
    draw_line(&mut img, (x0, y0), (x1, y0), axes);
    draw_line(&mut img, (x0, y0), (x0, y1), axes);

    let vmin = sweep.points.first().unwrap().value;
    let vmax = sweep.points.last().unwrap().value;
    let span = if (vmax - vmin).abs() < f64::EPSILON { 1.0 } else { vmax - vmin };
    let to_px = |v: f64, frac: f64| -> (f32, f32) {
        (
            x0 + ((v - vmin) / span) as f32 * (x1 - x0),
            y0 - frac as f32 * (y0 - y1),
        )
    };

    let mut series: Vec<String> = sweep
        .points
        .iter()
        .flat_map(|p| p.report.asr_bc.keys().cloned())
        .collect();
    series.sort();
    series.dedup();
    for (si, name) in series.iter().enumerate() {
        let color = image::Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        let mut prev: Option<(f32, f32)> = None;
        for p in &sweep.points {
            if let Some(frac) = p.report.asr_bc.get(name) {
                let pt = to_px(p.value, frac.value());
                if let Some(pr) = prev {
                    draw_line(&mut img, pr, pt, color);
                }
                prev = Some(pt);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Heatmap of the generalization matrix: rows are models, columns specs,
/// darker cells mean higher attack success.
pub fn plot_matrix(matrix: &SweepResult, path: &Path) -> Result<()> {
    if matrix.points.is_empty() {
        return Err(Error::Parameter("nothing to plot".into()));
    }
    let mut cols: Vec<String> = matrix
        .points
        .iter()
        .flat_map(|p| p.report.asr_bc.keys().cloned())
        .collect();
    cols.sort();
    cols.dedup();
    let rows = matrix.points.len() as u32;
    let cell = 64u32;
    let mut img = image::RgbImage::from_pixel(
        cols.len() as u32 * cell,
        rows * cell,
        image::Rgb([255, 255, 255]),
    );
    for (r, p) in matrix.points.iter().enumerate() {
        for (c, name) in cols.iter().enumerate() {
            let v = p.report.asr_bc.get(name).map(|f| f.value()).unwrap_or(0.0);
            let shade = (255.0 * (1.0 - v)) as u8;
            let color = image::Rgb([shade, shade, 255u8.min(shade.saturating_add(40))]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(c as u32 * cell + x, r as u32 * cell + y, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
