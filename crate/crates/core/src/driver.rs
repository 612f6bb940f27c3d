//! Training, evaluation and ablation orchestration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{gen_corpus, load_real_dataset, CorpusConfig, Sample};
use crate::error::{Error, Result};
use crate::grid::{MaskGrid, Raster};
use crate::labelgen::{fuse_labels, geometric_masks, LabelBundle};
use crate::losses::objective::{pixel_bce_loss, weighted_objective, LossTerms};
use crate::losses::{LossWeights, Prediction};
use crate::metrics::{corpus_report, MeanStd, MetricsReport};
use crate::tinynet::{adam_step, backward, forward, init_params, Checkpoint, NetParams, OptimizerState, RngState};

/// Source of the pseudo-labels a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    /// Box, quadrilateral and outside-box masks from the point annotation.
    T,
    /// Prompt mask alone: it is the location and foreground label, its complement the background.
    M,
    /// Fusion of both.
    H,
}

impl LabelMode {
    pub const ALL: [LabelMode; 3] = [LabelMode::T, LabelMode::M, LabelMode::H];

    /// Column index used in ablation tables (`P3` is mode P with fused labels).
    pub fn index(self) -> usize {
        match self {
            LabelMode::T => 1,
            LabelMode::M => 2,
            LabelMode::H => 3,
        }
    }

    pub fn needs_prompt(self) -> bool {
        self != LabelMode::T
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    /// Dense BCE against the label mode's foreground mask.
    P,
    /// Alignment only.
    A,
    /// Alignment and contrastive.
    B,
    /// Alignment and correlation.
    C,
    /// Contrastive and correlation.
    D,
    /// All three terms.
    E,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [LossMode::P, LossMode::A, LossMode::B, LossMode::C, LossMode::D, LossMode::E];

    /// `None` for the dense baseline.
    pub fn terms(self) -> Option<LossTerms> {
        let t = |alignment, contrastive, correlation| {
            Some(LossTerms {
                alignment,
                contrastive,
                correlation,
            })
        };
        match self {
            LossMode::P => None,
            LossMode::A => t(true, false, false),
            LossMode::B => t(true, true, false),
            LossMode::C => t(true, false, true),
            LossMode::D => t(false, true, true),
            LossMode::E => t(true, true, true),
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" => Ok(LabelMode::T),
            "M" => Ok(LabelMode::M),
            "H" => Ok(LabelMode::H),
            other => Err(Error::InvalidInput(format!("unknown label mode {other:?}"))),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P" => Ok(LossMode::P),
            "A" => Ok(LossMode::A),
            "B" => Ok(LossMode::B),
            "C" => Ok(LossMode::C),
            "D" => Ok(LossMode::D),
            "E" => Ok(LossMode::E),
            other => Err(Error::InvalidInput(format!("unknown loss mode {other:?}"))),
        }
    }
}

/// Parses grid cells written as `<loss><label index>`, e.g. `E3` or `P1`.
pub fn parse_cell(s: &str) -> Result<(LabelMode, LossMode)> {
    let s = s.trim();
    let mut chars = s.chars();
    let (Some(loss), Some(label), None) = (chars.next(), chars.next(), chars.next()) else {
        return Err(Error::InvalidInput(format!("grid cell {s:?} is not <loss><1|2|3>")));
    };
    let label = match label {
        '1' => LabelMode::T,
        '2' => LabelMode::M,
        '3' => LabelMode::H,
        _ => return Err(Error::InvalidInput(format!("grid cell {s:?}: label index must be 1, 2 or 3"))),
    };
    Ok((label, loss.to_string().parse()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Synthetic corpus, used when `data_dir` is unset.
    pub synth: CorpusConfig,
    /// Directory with `train/` and `test/` splits in the corpus layout.
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Loss terms enter one at a time, in the order contrastive, correlation,
    /// alignment (skipping those the mode lacks), one stage per this many
    /// optimizer steps; 0 trains all terms jointly from the first step.
    /// Prediction-side terms started against unseparated features saturate
    /// the small network to all foreground.
    pub curriculum_stage_steps: u64,
    pub weights: LossWeights,
    pub label_mode: LabelMode,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Where checkpoint and history go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: CorpusConfig::default(),
            data_dir: None,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            curriculum_stage_steps: 75,
            weights: LossWeights::default(),
            label_mode: LabelMode::H,
            loss_mode: LossMode::E,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} must be positive", self.lr)));
        }
        if self.loss_mode != LossMode::P {
            self.weights.validate()?;
        }
        if self.data_dir.is_none() {
            self.synth.synth.validate()?;
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (train, test) = match &cfg.data_dir {
        Some(dir) => (load_real_dataset(&dir.join("train"))?, load_real_dataset(&dir.join("test"))?),
        None => gen_corpus(&cfg.synth)?,
    };
    Ok(Dataset { train, test })
}

/// Pseudo-labels of one sample under `mode`.
pub fn label_bundle(sample: &Sample, mode: LabelMode) -> Result<LabelBundle> {
    let (h, w) = sample.gt.dims();
    let prompt = || {
        sample
            .prompt_mask
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("label mode {mode:?} needs a prompt mask for {}", sample.id)))
    };
    match mode {
        LabelMode::T => {
            let (g_b, g_i, g_o) = geometric_masks(&sample.annotation, h, w)?;
            Ok(LabelBundle {
                location: g_b,
                foreground: g_i,
                background: g_o,
            })
        }
        LabelMode::M => {
            let y = prompt()?;
            Ok(LabelBundle {
                location: y.clone(),
                foreground: y.clone(),
                background: y.not(),
            })
        }
        LabelMode::H => {
            let (g_b, g_i, g_o) = geometric_masks(&sample.annotation, h, w)?;
            fuse_labels(&g_b, &g_i, &g_o, prompt()?)
        }
    }
}

/// Batch-mean loss components of one optimizer step. `total` equals
/// `alignment + lambda * contrastive + beta * correlation + pixel`, where
/// `pixel` is nonzero only for the dense baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub alignment: f64,
    pub contrastive: f64,
    pub correlation: f64,
    pub pixel: f64,
    pub total: f64,
    /// Batch members for which some term had no eligible pixels.
    pub skipped: usize,
}

/// Validation after `epoch` epochs (epoch 0 is the initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: MetricsReport,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Excluded from [`TrainHistory::fingerprint`].
    pub wall_time_secs: f64,
}

impl TrainHistory {
    /// SHA-256 of the serialized history without wall time.
    pub fn fingerprint(&self) -> String {
        let mut stable = self.clone();
        stable.wall_time_secs = 0.0;
        let bytes = serde_json::to_vec(&stable).expect("history serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn best(&self) -> &EpochRecord {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .expect("best epoch is recorded")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mIoU.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Network probabilities for each image; no labels are involved.
pub fn predict(params: &NetParams, images: &[Raster]) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|img| forward(img, params).map(|o| o.prediction))
        .collect()
}

/// Thresholds predictions at 0.5 and scores them against `gts`.
pub fn evaluate(params: &NetParams, images: &[Raster], gts: &[MaskGrid]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::EmptyRegion("evaluation set"));
    }
    corpus_report(&predict(params, images)?, gts, 0.5)
}

fn evaluate_samples(params: &NetParams, samples: &[Sample]) -> Result<MetricsReport> {
    let images: Vec<Raster> = samples.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<MaskGrid> = samples.iter().map(|s| s.gt.clone()).collect();
    evaluate(params, &images, &gts)
}

struct SampleStep {
    grads: Vec<f64>,
    record: StepRecord,
    skipped: bool,
}

/// Loss terms in effect for optimizer step `step` (1-based).
fn active_terms(cfg: &RunConfig, step: u64) -> Option<LossTerms> {
    let terms = cfg.loss_mode.terms()?;
    let mut active = LossTerms {
        alignment: false,
        contrastive: false,
        correlation: false,
    };
    let stages = [
        (terms.contrastive, &mut active.contrastive),
        (terms.correlation, &mut active.correlation),
        (terms.alignment, &mut active.alignment),
    ];
    let mut start = 0;
    for (present, flag) in stages {
        if present {
            *flag = step > start;
            start += cfg.curriculum_stage_steps;
        }
    }
    Some(active)
}

fn sample_step(
    params: &NetParams,
    sample: &Sample,
    bundle: &LabelBundle,
    cfg: &RunConfig,
    terms: Option<LossTerms>,
    seed: u64,
) -> Result<SampleStep> {
    let out = forward(&sample.image, params)?;
    let mut record = StepRecord::default();
    let result = match terms {
        None => {
            let r = pixel_bce_loss(&out.prediction, &bundle.foreground)?;
            record.pixel = r.value;
            record.total = r.value;
            r
        }
        Some(terms) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = weighted_objective(&out.prediction, &out.features, bundle, &cfg.weights, terms, &mut rng)?;
            record.alignment = t.breakdown.alignment;
            record.contrastive = t.breakdown.contrastive;
            record.correlation = t.breakdown.correlation;
            record.total = t.breakdown.total;
            t.result
        }
    };
    if !result.value.is_finite() {
        return Err(Error::NonFinite(format!("loss on sample {}", sample.id)));
    }
    let grads = backward(
        &out.cache,
        params,
        result.grad_prediction.as_deref(),
        result.grad_features.as_deref(),
    )?;
    Ok(SampleStep {
        grads,
        record,
        skipped: result.skipped.any(),
    })
}

/// Generates or loads the data named by `cfg`, then trains on it.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    train_on(cfg, &data)
}

/// Trains on prepared data. Per epoch: shuffle, batched Adam steps with
/// per-sample gradients averaged in batch order, then validation on the test
/// split. The returned checkpoint is the best validation mIoU (earliest on ties).
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyRegion("training set"));
    }
    if data.test.is_empty() {
        return Err(Error::EmptyRegion("validation set"));
    }
    let started = Instant::now();
    let bundles = data
        .train
        .par_iter()
        .map(|s| label_bundle(s, cfg.label_mode))
        .collect::<Result<Vec<_>>>()?;

    let mut params = init_params(cfg.seed);
    let mut optimizer = OptimizerState::new(cfg.lr, params.values.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut steps = Vec::new();
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        validation: evaluate_samples(&params, &data.test)?,
        rng: RngState::capture(cfg.seed, &rng),
    }];
    let mut best = (0usize, epochs[0].validation.summary.miou.mean, params.clone(), optimizer.clone(), epochs[0].rng);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let terms = active_terms(cfg, optimizer.step + 1);
            let per_sample = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| sample_step(&params, &data.train[i], &bundles[i], cfg, terms, seed))
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads = vec![0.0; params.values.len()];
            let mut record = StepRecord {
                step: optimizer.step + 1,
                epoch,
                ..StepRecord::default()
            };
            for s in &per_sample {
                for (g, v) in grads.iter_mut().zip(&s.grads) {
                    *g += v * scale;
                }
                record.alignment += s.record.alignment * scale;
                record.contrastive += s.record.contrastive * scale;
                record.correlation += s.record.correlation * scale;
                record.pixel += s.record.pixel * scale;
                record.total += s.record.total * scale;
                record.skipped += s.skipped as usize;
            }
            adam_step(&mut params, &grads, &mut optimizer)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after step {}", optimizer.step)));
            }
            steps.push(record);
        }
        let validation = evaluate_samples(&params, &data.test)?;
        let miou = validation.summary.miou.mean;
        let state = RngState::capture(cfg.seed, &rng);
        log::info!(
            "{:?}{} seed {} epoch {epoch}: loss {:.4}, val mIoU {:.4}",
            cfg.loss_mode,
            cfg.label_mode.index(),
            cfg.seed,
            steps.last().map_or(f64::NAN, |s| s.total),
            miou
        );
        if miou > best.1 {
            best = (epoch, miou, params.clone(), optimizer.clone(), state);
        }
        epochs.push(EpochRecord {
            epoch,
            validation,
            rng: state,
        });
    }

    let history = TrainHistory {
        config: cfg.clone(),
        steps,
        epochs,
        best_epoch: best.0,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint::new(&best.2, best.3, best.4);
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
        history.save(&dir.join("history.json"))?;
        history.best().validation.write_csv(&dir.join("metrics.csv"))?;
    }
    Ok(TrainOutcome { checkpoint, history })
}

/// One row of an ablation table: metrics of the best checkpoints, pooled
/// over seeds and test images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub label_mode: LabelMode,
    pub loss_mode: LossMode,
    pub lambda: f64,
    pub beta: f64,
    pub seeds: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    /// Mean test mIoU of each seed, `;`-separated.
    pub seed_miou: String,
}

/// Trains every `(label, loss)` cell for every seed on the same data.
pub fn ablation_grid(base: &RunConfig, cells: &[(LabelMode, LossMode)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one seed".into()));
    }
    let data = load_dataset(base)?;
    cells
        .iter()
        .map(|&(label_mode, loss_mode)| {
            let mut pooled = Vec::new();
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let cfg = RunConfig {
                    label_mode,
                    loss_mode,
                    seed,
                    output_dir: base
                        .output_dir
                        .as_ref()
                        .map(|d| d.join(format!("{:?}{}_seed{seed}", loss_mode, label_mode.index()))),
                    ..base.clone()
                };
                let out = train_on(&cfg, &data)?;
                let best = &out.history.best().validation;
                per_seed.push(best.summary.miou.mean);
                pooled.extend_from_slice(&best.per_image);
            }
            let col = |f: fn(&crate::metrics::ImageMetrics) -> f64| MeanStd::of(&pooled.iter().map(f).collect::<Vec<_>>());
            let (miou, dsc, precision, hd95) = (col(|m| m.miou), col(|m| m.dsc), col(|m| m.precision), col(|m| m.hd95));
            Ok(AblationRow {
                method: format!("{:?}{}", loss_mode, label_mode.index()),
                label_mode,
                loss_mode,
                lambda: base.weights.lambda,
                beta: base.weights.beta,
                seeds: seeds.len(),
                miou_mean: miou.mean,
                miou_std: miou.std,
                dsc_mean: dsc.mean,
                dsc_std: dsc.std,
                precision_mean: precision.mean,
                precision_std: precision.std,
                hd95_mean: hd95.mean,
                hd95_std: hd95.std,
                seed_miou: per_seed.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
            })
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 255, 0]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([0, 0, 255]);

/// Grayscale image with true positives red, misses green and false alarms blue.
pub fn overlay_image(image: &Raster, pred: &MaskGrid, gt: &MaskGrid) -> Result<RgbImage> {
    pred.ensure_same_dims(gt)?;
    if image.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            found: image.dims(),
        });
    }
    Ok(RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        match (pred.get(x, y), gt.get(x, y)) {
            (true, true) => TRUE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (true, false) => FALSE_POSITIVE,
            (false, false) => {
                let v = (image.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([v, v, v])
            }
        }
    }))
}

pub fn render_overlay(image: &Raster, pred: &MaskGrid, gt: &MaskGrid, path: &Path) -> Result<()> {
    overlay_image(image, pred, gt)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
