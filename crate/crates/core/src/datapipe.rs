//! Synthetic ultrasound-like corpora and dataset ingestion.
//!
//! Each sample draws from its own ChaCha8 stream `(seed, index)`, so samples
//! can be generated in any order or in parallel and still match exactly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, Raster};
use crate::labelgen::{
    fuse_labels, geometric_masks, label_precision, read_annotations, write_annotations,
    NodulePoints, Point, PointAnnotation,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    /// Ellipse or blob with equal probability per nodule.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side length in pixels; images are square.
    pub size: usize,
    pub nodules_min: usize,
    pub nodules_max: usize,
    pub shape: ShapeFamily,
    /// Total amplitude of the radial harmonics of blob outlines, relative to the radius.
    pub harmonic_amplitude: f64,
    /// Semi-axis range as a fraction of `size`.
    pub radius_min: f64,
    pub radius_max: f64,
    pub background_mean: f64,
    /// Nodule intensity is the local background minus this.
    pub contrast: f64,
    /// Peak amplitude of a random linear shading ramp across the image.
    pub shading: f64,
    /// Dark non-nodule structures per image (not part of the ground truth).
    pub distractors_max: usize,
    /// Mixing weight of unit-mean multiplicative speckle, in `[0, 1]`.
    pub speckle: f64,
    pub oracle_precision: f64,
    pub oracle_recall: f64,
    /// Log-scale spread of per-sample oracle error rates around the targets.
    pub oracle_spread: f64,
    /// Maximum displacement of annotated extreme points, in pixels.
    pub jitter: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            nodules_min: 1,
            nodules_max: 1,
            shape: ShapeFamily::Mixed,
            harmonic_amplitude: 0.25,
            radius_min: 0.12,
            radius_max: 0.26,
            background_mean: 0.55,
            contrast: 0.25,
            shading: 0.1,
            distractors_max: 2,
            speckle: 0.6,
            oracle_precision: 0.96,
            oracle_recall: 0.95,
            oracle_spread: 0.5,
            jitter: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.size < 32 {
            return bad(format!("image size {} is below 32", self.size));
        }
        if self.contrast <= 0.0 {
            return bad(format!("contrast {} must be positive", self.contrast));
        }
        for (name, v) in [("oracle precision", self.oracle_precision), ("oracle recall", self.oracle_recall)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} {v} outside (0, 1]"));
            }
        }
        if self.nodules_min == 0 || self.nodules_min > self.nodules_max {
            return bad(format!(
                "nodule count range {}..={} is empty or starts at 0",
                self.nodules_min, self.nodules_max
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < 0.5) {
            return bad(format!("radius range {}..{} invalid", self.radius_min, self.radius_max));
        }
        if !(0.0..=1.0).contains(&self.speckle) || !(0.0..1.0).contains(&self.harmonic_amplitude) {
            return bad("speckle must be in [0, 1] and harmonic amplitude in [0, 1)".into());
        }
        if self.jitter < 0 || self.oracle_spread < 0.0 || self.shading < 0.0 {
            return bad("jitter, oracle spread and shading must be non-negative".into());
        }
        Ok(())
    }
}

/// Outline of one nodule: a rotated ellipse whose radius is modulated by
/// `1 + sum a_k cos(k phi + phase_k)` in the ellipse's normalized frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleShape {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub angle: f64,
    /// `(k, amplitude, phase)`; empty for a plain ellipse.
    pub harmonics: Vec<(u32, f64, f64)>,
}

impl NoduleShape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.semi_x;
        let v = (-s * dx + c * dy) / self.semi_y;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let limit = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, a, p)| a * (k as f64 * phi + p).cos())
                .sum::<f64>();
        rho <= limit
    }

    /// Radius bound including harmonic bulges.
    pub fn reach(&self) -> f64 {
        let bulge: f64 = self.harmonics.iter().map(|h| h.1.abs()).sum();
        self.semi_x.max(self.semi_y) * (1.0 + bulge)
    }

    pub fn rasterize(&self, height: usize, width: usize) -> MaskGrid {
        MaskGrid::from_fn(height, width, |x, y| self.contains(x as f64, y as f64))
    }
}

/// One image with its ground truth and weak annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Raster,
    pub gt: MaskGrid,
    pub annotation: PointAnnotation,
    /// Absent for ingested data without prompt masks; such samples only
    /// support topological-label training.
    pub prompt_mask: Option<MaskGrid>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_shape(cfg: &SynthConfig, rng: &mut ChaCha8Rng, scale: f64) -> NoduleShape {
    let n = cfg.size as f64;
    let semi_x = rng.random_range(cfg.radius_min..=cfg.radius_max) * n * scale;
    let semi_y = rng.random_range(cfg.radius_min..=cfg.radius_max) * n * scale;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let blob = match cfg.shape {
        ShapeFamily::Ellipse => false,
        ShapeFamily::Blob => true,
        ShapeFamily::Mixed => rng.random_bool(0.5),
    };
    let harmonics = if blob && cfg.harmonic_amplitude > 0.0 {
        // split the total amplitude randomly over k = 2, 3, 4
        let w: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let total: f64 = w.iter().sum::<f64>().max(1e-12);
        (2..=4)
            .zip(w)
            .map(|(k, wk)| {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (k, cfg.harmonic_amplitude * wk / total, phase)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut shape = NoduleShape {
        cx: 0.0,
        cy: 0.0,
        semi_x,
        semi_y,
        angle,
        harmonics,
    };
    // keep a two-pixel margin to the image edge
    let reach = shape.reach() + 2.0;
    let hi = (n - 1.0 - reach).max(reach);
    shape.cx = rng.random_range(reach..=hi);
    shape.cy = rng.random_range(reach..=hi);
    shape
}

fn draw_nodules(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(NoduleShape, MaskGrid)> {
    let count = rng.random_range(cfg.nodules_min..=cfg.nodules_max);
    let scale = 1.0 / (count as f64).sqrt();
    let mut out: Vec<(NoduleShape, MaskGrid)> = Vec::new();
    let mut occupied = MaskGrid::zeros(cfg.size, cfg.size);
    for _ in 0..count {
        for _attempt in 0..50 {
            let shape = draw_shape(cfg, rng, scale);
            let mask = shape.rasterize(cfg.size, cfg.size);
            // nodules stay at least two pixels apart so extreme points stay separable
            let grown = dilate(&dilate(&mask));
            if mask.count() >= 4 && grown.is_disjoint(&occupied) {
                occupied = occupied.or(&mask).expect("same dims");
                out.push((shape, mask));
                break;
            }
        }
    }
    if out.is_empty() {
        // a single nodule always fits: the radius range leaves room by construction
        let shape = NoduleShape {
            cx: (cfg.size as f64 - 1.0) / 2.0,
            cy: (cfg.size as f64 - 1.0) / 2.0,
            semi_x: cfg.radius_min * cfg.size as f64,
            semi_y: cfg.radius_min * cfg.size as f64,
            angle: 0.0,
            harmonics: Vec::new(),
        };
        let mask = shape.rasterize(cfg.size, cfg.size);
        out.push((shape, mask));
    }
    out
}

fn dilate(m: &MaskGrid) -> MaskGrid {
    let (h, w) = m.dims();
    MaskGrid::from_fn(h, w, |x, y| {
        m.get(x, y)
            || (x > 0 && m.get(x - 1, y))
            || (x + 1 < w && m.get(x + 1, y))
            || (y > 0 && m.get(x, y - 1))
            || (y + 1 < h && m.get(x, y + 1))
    })
}

// [1 2 1] / 4 in each direction, edges replicated.
fn smooth(img: &mut Raster) {
    let (h, w) = img.dims();
    let src = img.pixels.clone();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = src[y * w + x.saturating_sub(1)];
            let r = src[y * w + (x + 1).min(w - 1)];
            tmp[y * w + x] = 0.25 * l + 0.5 * src[y * w + x] + 0.25 * r;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let u = tmp[y.saturating_sub(1) * w + x];
            let d = tmp[(y + 1).min(h - 1) * w + x];
            img.pixels[y * w + x] = 0.25 * u + 0.5 * tmp[y * w + x] + 0.25 * d;
        }
    }
}

/// Noise-free image: shaded background, darker nodules and distractors, then a
/// light blur. Returned before speckle so callers can inspect it.
fn clean_image(cfg: &SynthConfig, nodules: &MaskGrid, distractors: &MaskGrid, rng: &mut ChaCha8Rng) -> Raster {
    let n = cfg.size;
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (dir.cos(), dir.sin());
    let half = (n as f64 - 1.0) / 2.0;
    let mut img = Raster::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let ramp = ((x as f64 - half) * gx + (y as f64 - half) * gy) / half;
            let bg = cfg.background_mean + cfg.shading * ramp.clamp(-1.0, 1.0);
            let dark = nodules.get(x, y) || distractors.get(x, y);
            img.pixels[y * n + x] = if dark { bg - cfg.contrast } else { bg };
        }
    }
    smooth(&mut img);
    img
}

// Unit-mean multiplicative noise: an exponential draw (sum of two squared
// Gaussians over 2) mixed with 1 by `strength`.
fn apply_speckle(img: &mut Raster, strength: f64, rng: &mut ChaCha8Rng) {
    for p in &mut img.pixels {
        let g1: f64 = StandardNormal.sample(rng);
        let g2: f64 = StandardNormal.sample(rng);
        let noise = 0.5 * (g1 * g1 + g2 * g2);
        *p *= (1.0 - strength) + strength * noise;
    }
}

/// Extreme foreground pixels of `gt`, ties broken toward the smaller other
/// coordinate, each then displaced by at most `jitter` pixels per axis. A
/// displacement that would leave the image or break `left.x <= right.x`,
/// `top.y <= bottom.y` (or move a point past the opposite side's extremes)
/// is dropped and that point keeps its exact position.
pub fn extreme_points<R: Rng + ?Sized>(gt: &MaskGrid, jitter: i64, rng: &mut R) -> Result<NodulePoints> {
    let pts = gt.points();
    if pts.is_empty() {
        return Err(Error::EmptyRegion("ground-truth mask"));
    }
    let key = |a: (usize, usize)| Point::new(a.0 as i64, a.1 as i64);
    let left = pts.iter().copied().min_by_key(|&(x, y)| (x, y)).unwrap();
    let right = pts.iter().copied().min_by_key(|&(x, y)| (std::cmp::Reverse(x), y)).unwrap();
    let top = pts.iter().copied().min_by_key(|&(x, y)| (y, x)).unwrap();
    let bottom = pts.iter().copied().min_by_key(|&(x, y)| (std::cmp::Reverse(y), x)).unwrap();
    let mut np = NodulePoints {
        left: key(left),
        right: key(right),
        top: key(top),
        bottom: key(bottom),
    };
    if jitter == 0 {
        return Ok(np);
    }
    let (h, w) = gt.dims();
    let ordered = |n: &NodulePoints| {
        let xs_ok = n.left.x <= n.top.x.min(n.bottom.x) && n.right.x >= n.top.x.max(n.bottom.x) && n.left.x <= n.right.x;
        let ys_ok = n.top.y <= n.left.y.min(n.right.y) && n.bottom.y >= n.left.y.max(n.right.y) && n.top.y <= n.bottom.y;
        xs_ok && ys_ok && n.validate(h, w).is_ok()
    };
    for which in 0..4 {
        let dx = rng.random_range(-jitter..=jitter);
        let dy = rng.random_range(-jitter..=jitter);
        let mut candidate = np;
        let p = match which {
            0 => &mut candidate.left,
            1 => &mut candidate.right,
            2 => &mut candidate.top,
            _ => &mut candidate.bottom,
        };
        *p = Point::new(p.x + dx, p.y + dy);
        if ordered(&candidate) {
            np = candidate;
        }
    }
    Ok(np)
}

fn inner_boundary(mask: &MaskGrid) -> Vec<(usize, usize)> {
    mask.boundary().points()
}

fn outer_candidates(mask: &MaskGrid, forbidden: &MaskGrid) -> Vec<(usize, usize)> {
    dilate(mask)
        .and_not(mask)
        .expect("same dims")
        .and_not(forbidden)
        .expect("same dims")
        .points()
}

/// Prompted-segmentation stand-in. Per sample, target error rates are drawn
/// log-normally around `1 - recall` and `1 - precision` (mean preserved);
/// the mask is then eroded by randomly peeling boundary pixels until the
/// false-negative budget is spent, and grown by randomly adding outside
/// pixels adjacent to the mask until the false-positive budget is spent.
/// Peeling and growth act on the current boundary, so the result is a
/// ragged erosion/dilation of `gt` rather than salt-and-pepper noise.
pub fn simulate_prompt_mask<R: Rng + ?Sized>(gt: &MaskGrid, cfg: &SynthConfig, rng: &mut R) -> MaskGrid {
    let spread = Normal::new(-0.5 * cfg.oracle_spread.powi(2), cfg.oracle_spread).expect("finite spread");
    let mut draw_rate = |target: f64| {
        let base = 1.0 - target;
        if base <= 0.0 {
            0.0
        } else {
            (base * spread.sample(rng).exp()).min(0.9)
        }
    };
    let miss_rate = draw_rate(cfg.oracle_recall);
    let fp_rate = draw_rate(cfg.oracle_precision);
    let total = gt.count();
    let false_negatives = (miss_rate * total as f64).round() as usize;
    let true_positives = total - false_negatives.min(total);
    let false_positives = if fp_rate > 0.0 {
        (true_positives as f64 * fp_rate / (1.0 - fp_rate)).round() as usize
    } else {
        0
    };

    let mut mask = gt.clone();
    for _ in 0..false_negatives {
        let edge = inner_boundary(&mask);
        if edge.len() <= 1 {
            break;
        }
        let &(x, y) = edge.choose(rng).expect("nonempty");
        mask.set(x, y, false);
    }
    for _ in 0..false_positives {
        let ring = outer_candidates(&mask, gt);
        let Some(&(x, y)) = ring.choose(rng) else { break };
        mask.set(x, y, true);
    }
    mask
}

/// Draws sample `index` of the synthetic distribution.
pub fn gen_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    Ok(gen_sample_with_shapes(cfg, index)?.0)
}

/// Like [`gen_sample`], also returning the nodule outlines behind the ground truth.
pub fn gen_sample_with_shapes(cfg: &SynthConfig, index: u64) -> Result<(Sample, Vec<NoduleShape>)> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, index);
    let nodules = draw_nodules(cfg, &mut rng);
    let n = cfg.size;
    let mut gt = MaskGrid::zeros(n, n);
    for (_, m) in &nodules {
        gt = gt.or(m)?;
    }
    let mut distractors = MaskGrid::zeros(n, n);
    let count = rng.random_range(0..=cfg.distractors_max);
    let keep_out = dilate(&dilate(&dilate(&gt)));
    for _ in 0..count {
        // thin dark structures away from the nodules
        let shape = draw_shape(cfg, &mut rng, 0.5);
        let thin = NoduleShape {
            semi_y: shape.semi_y * 0.35,
            harmonics: Vec::new(),
            ..shape
        };
        let m = thin.rasterize(n, n);
        if m.is_disjoint(&keep_out) {
            distractors = distractors.or(&m)?;
        }
    }
    let mut image = clean_image(cfg, &gt, &distractors, &mut rng);
    apply_speckle(&mut image, cfg.speckle, &mut rng);
    image.quantize();

    let id = format!("{index:05}");
    let mut points = Vec::with_capacity(nodules.len());
    for (_, m) in &nodules {
        points.push(extreme_points(m, cfg.jitter, &mut rng)?);
    }
    let annotation = PointAnnotation {
        image_id: id.clone(),
        nodules: points,
    };
    let prompt_mask = simulate_prompt_mask(&gt, cfg, &mut rng);
    let shapes = nodules.into_iter().map(|(s, _)| s).collect();
    Ok((
        Sample {
            id,
            image,
            gt,
            annotation,
            prompt_mask: Some(prompt_mask),
        },
        shapes,
    ))
}

/// Samples `start..start + count` in index order, generated in parallel.
pub fn gen_samples(cfg: &SynthConfig, start: u64, count: usize) -> Result<Vec<Sample>> {
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| gen_sample(cfg, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub synth: SynthConfig,
    pub train: usize,
    pub test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            synth: SynthConfig::default(),
            train: 200,
            test: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub split: String,
    pub synth: SynthConfig,
    /// Sample indices `first_index..first_index + count`.
    pub first_index: u64,
    pub count: usize,
}

/// Train and test splits drawn from disjoint index ranges of one generator.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = gen_samples(&cfg.synth, 0, cfg.train)?;
    let test = gen_samples(&cfg.synth, cfg.train as u64, cfg.test)?;
    Ok((train, test))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `images/`, `masks/`, `promptmasks/` (when present) and
/// `annotations.json` under `dir`.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks", "promptmasks"] {
        create_dir(&dir.join(sub))?;
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let name = format!("{}.png", s.id);
        s.image.save(&dir.join("images").join(&name))?;
        s.gt.save(&dir.join("masks").join(&name))?;
        if let Some(p) = &s.prompt_mask {
            p.save(&dir.join("promptmasks").join(&name))?;
        }
        Ok(())
    })?;
    let anns: Vec<PointAnnotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    write_annotations(&dir.join("annotations.json"), &anns)
}

/// Generates and writes `out/train` and `out/test`, each with a manifest
/// sufficient to regenerate it exactly.
pub fn write_corpus(out: &Path, cfg: &CorpusConfig) -> Result<()> {
    cfg.synth.validate()?;
    let (train, test) = gen_corpus(cfg)?;
    for (split, samples, first) in [("train", &train, 0u64), ("test", &test, cfg.train as u64)] {
        let dir = out.join(split);
        write_split(&dir, samples)?;
        let manifest = Manifest {
            format_version: 1,
            split: split.into(),
            synth: cfg.synth.clone(),
            first_index: first,
            count: samples.len(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "pgm" | "pnm")
    )
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "PNG", "jpg", "jpeg", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads a dataset laid out as `images/`, `masks/`, optional `promptmasks/`
/// and optional `annotations.json` (keyed by file stem). Images without a
/// mask are skipped with a warning; images without an annotation get exact
/// extreme points of their whole mask. Samples come back sorted by id.
pub fn load_real_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut image_paths: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    image_paths.sort();

    let ann_path = dir.join("annotations.json");
    let annotations: HashMap<String, PointAnnotation> = if ann_path.is_file() {
        read_annotations(&ann_path)?
            .into_iter()
            .map(|a| (a.image_id.clone(), a))
            .collect()
    } else {
        HashMap::new()
    };

    let mut samples = Vec::with_capacity(image_paths.len());
    for path in image_paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("unusable file name {}", path.display())))?
            .to_string();
        let Some(mask_path) = find_with_stem(&dir.join("masks"), &stem) else {
            log::warn!("skipping {}: no mask", path.display());
            continue;
        };
        let image = Raster::load(&path)?;
        let gt = MaskGrid::load(&mask_path)?;
        if gt.dims() != image.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                found: gt.dims(),
            });
        }
        let prompt_mask = match find_with_stem(&dir.join("promptmasks"), &stem) {
            Some(p) => Some(MaskGrid::load(&p)?),
            None => None,
        };
        let annotation = match annotations.get(&stem) {
            Some(a) => a.clone(),
            None => {
                if gt.is_empty() {
                    log::warn!("skipping {}: empty mask and no annotation", path.display());
                    continue;
                }
                log::warn!("{}: no annotation, using exact extreme points of the mask", path.display());
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                PointAnnotation {
                    image_id: stem.clone(),
                    nodules: vec![extreme_points(&gt, 0, &mut unused)?],
                }
            }
        };
        samples.push(Sample {
            id: stem,
            image,
            gt,
            annotation,
            prompt_mask,
        });
    }
    Ok(samples)
}

/// Mean and population std of one label's precision, over images where it is nonempty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionStat {
    pub mean: f64,
    pub std: f64,
    pub images: usize,
}

impl PrecisionStat {
    fn of(values: &[f64]) -> Self {
        let m = crate::metrics::MeanStd::of(values);
        PrecisionStat {
            mean: m.mean,
            std: m.std,
            images: values.len(),
        }
    }
}

/// One row of the label-precision table: a label source used as foreground
/// and as background reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub strategy: String,
    pub label: String,
    pub foreground: PrecisionStat,
    pub background: PrecisionStat,
}

/// Foreground/background precision of every label source over `samples`:
/// bounding box (g_b / g_o), inner quadrilateral (g_i / not g_i), prompt mask
/// and the fused high-confidence pair (X_f / X_b).
pub fn label_precision_report(samples: &[Sample]) -> Result<Vec<PrecisionRow>> {
    let mut acc: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); 4];
    let mut push = |row: usize, fg: &MaskGrid, bg: &MaskGrid, gt: &MaskGrid| -> Result<()> {
        match label_precision(fg, gt, false) {
            Ok(v) => acc[row].0.push(v),
            Err(Error::EmptyRegion(_)) => {}
            Err(e) => return Err(e),
        }
        match label_precision(bg, gt, true) {
            Ok(v) => acc[row].1.push(v),
            Err(Error::EmptyRegion(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    };
    for s in samples {
        let (h, w) = s.gt.dims();
        let (g_b, g_i, g_o) = geometric_masks(&s.annotation, h, w)?;
        push(0, &g_b, &g_o, &s.gt)?;
        push(1, &g_i, &g_i.not(), &s.gt)?;
        if let Some(prompt) = &s.prompt_mask {
            push(2, prompt, &prompt.not(), &s.gt)?;
            let bundle = fuse_labels(&g_b, &g_i, &g_o, prompt)?;
            push(3, &bundle.foreground, &bundle.background, &s.gt)?;
        }
    }
    let names = [
        ("Topological", "Ex-/Out-rectangle"),
        ("Topological", "In-Quadrilateral"),
        ("Prompted", "Prompt mask"),
        ("Ours", "High-confidence f/b"),
    ];
    Ok(names
        .iter()
        .zip(acc)
        .map(|(&(strategy, label), (fg, bg))| PrecisionRow {
            strategy: strategy.into(),
            label: label.into(),
            foreground: PrecisionStat::of(&fg),
            background: PrecisionStat::of(&bg),
        })
        .collect())
}

/// Plain-text rendering of [`label_precision_report`], percentages as mean ± std.
pub fn format_precision_table(rows: &[PrecisionRow]) -> String {
    let mut out = format!(
        "{:<12} {:<22} {:>16} {:>16}\n",
        "Strategy", "Label", "Foreground (%)", "Background (%)"
    );
    for r in rows {
        let cell = |s: &PrecisionStat| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std);
        out.push_str(&format!(
            "{:<12} {:<22} {:>16} {:>16}\n",
            r.strategy,
            r.label,
            cell(&r.foreground),
            cell(&r.background)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgen::label_precision;

    fn quiet(cfg: SynthConfig) -> SynthConfig {
        SynthConfig {
            speckle: 0.0,
            distractors_max: 0,
            ..cfg
        }
    }

    #[test]
    fn same_index_gives_identical_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_sample(&cfg, 7).unwrap(), gen_sample(&cfg, 7).unwrap());
        assert_ne!(gen_sample(&cfg, 7).unwrap().image, gen_sample(&cfg, 8).unwrap().image);
    }

    #[test]
    fn ellipse_ground_truth_matches_analytic_inside_test() {
        let cfg = quiet(SynthConfig {
            shape: ShapeFamily::Ellipse,
            ..SynthConfig::default()
        });
        for index in 0..10 {
            let (s, shapes) = gen_sample_with_shapes(&cfg, index).unwrap();
            let e = &shapes[0];
            assert!(e.harmonics.is_empty());
            let expected = MaskGrid::from_fn(64, 64, |x, y| {
                let (dx, dy) = (x as f64 - e.cx, y as f64 - e.cy);
                let (s, c) = e.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = c * dy - s * dx;
                (u / e.semi_x).powi(2) + (v / e.semi_y).powi(2) <= 1.0
            });
            assert_eq!(s.gt, expected);
        }
    }

    #[test]
    fn nodule_is_darker_before_noise() {
        let cfg = quiet(SynthConfig::default());
        for index in 0..5 {
            let mut rng = sample_rng(cfg.seed, index);
            let nodules = draw_nodules(&cfg, &mut rng);
            let gt = nodules[0].1.clone();
            let img = clean_image(&cfg, &gt, &MaskGrid::zeros(64, 64), &mut rng);
            let mean = |inside: bool| {
                let v: Vec<f64> = img
                    .pixels
                    .iter()
                    .zip(gt.cells())
                    .filter(|(_, &g)| g == inside)
                    .map(|(p, _)| *p)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean(true) < mean(false));
        }
    }

    #[test]
    fn images_are_in_unit_range_and_quantized() {
        let s = gen_sample(&SynthConfig::default(), 3).unwrap();
        for &p in &s.image.pixels {
            assert!((0.0..=1.0).contains(&p));
            assert_eq!((p * 255.0).round() / 255.0, p);
        }
    }

    #[test]
    fn exact_extreme_points_of_rectangle() {
        let gt = MaskGrid::from_fn(12, 12, |x, y| (2..=8).contains(&x) && (3..=6).contains(&y));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = extreme_points(&gt, 0, &mut rng).unwrap();
        // oracle: exhaustive scan with explicit tie rules
        let mut expect = (None, None, None, None);
        for y in 0..12 {
            for x in 0..12 {
                if !gt.get(x, y) {
                    continue;
                }
                let pt = (x as i64, y as i64);
                if expect.0.is_none_or(|(lx, ly): (i64, i64)| pt.0 < lx || (pt.0 == lx && pt.1 < ly)) {
                    expect.0 = Some(pt);
                }
                if expect.1.is_none_or(|(rx, ry): (i64, i64)| pt.0 > rx || (pt.0 == rx && pt.1 < ry)) {
                    expect.1 = Some(pt);
                }
                if expect.2.is_none_or(|(tx, ty): (i64, i64)| pt.1 < ty || (pt.1 == ty && pt.0 < tx)) {
                    expect.2 = Some(pt);
                }
                if expect.3.is_none_or(|(bx, by): (i64, i64)| pt.1 > by || (pt.1 == by && pt.0 < bx)) {
                    expect.3 = Some(pt);
                }
            }
        }
        let as_pair = |p: Point| (p.x, p.y);
        assert_eq!(as_pair(p.left), expect.0.unwrap());
        assert_eq!(as_pair(p.right), expect.1.unwrap());
        assert_eq!(as_pair(p.top), expect.2.unwrap());
        assert_eq!(as_pair(p.bottom), expect.3.unwrap());
        assert_eq!(as_pair(p.left), (2, 3));
        assert_eq!(as_pair(p.bottom), (2, 6));
        assert_eq!(extreme_points(&gt, 0, &mut rng).unwrap(), p);
    }

    #[test]
    fn single_pixel_points_coincide() {
        let gt = MaskGrid::from_fn(5, 5, |x, y| x == 2 && y == 3);
        let p = extreme_points(&gt, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.all().iter().all(|q| *q == Point::new(2, 3)));
        assert!(extreme_points(&MaskGrid::zeros(5, 5), 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn exact_points_span_the_tight_box() {
        let cfg = SynthConfig {
            jitter: 0,
            ..SynthConfig::default()
        };
        for index in 0..20 {
            let s = gen_sample(&cfg, index).unwrap();
            let n = &s.annotation.nodules[0];
            let (x0, y0, x1, y1) = s.gt.bounding_box().unwrap();
            assert_eq!(n.bounds(), (x0 as i64, y0 as i64, x1 as i64, y1 as i64));
            let boundary = s.gt.boundary();
            for p in n.all() {
                assert!(boundary.get(p.x as usize, p.y as usize));
            }
        }
    }

    #[test]
    fn jittered_points_stay_valid_and_close() {
        let cfg = SynthConfig {
            jitter: 2,
            ..SynthConfig::default()
        };
        for index in 0..30 {
            let s = gen_sample(&cfg, index).unwrap();
            s.annotation.validate(64, 64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let exact = extreme_points(&s.gt, 0, &mut rng).unwrap();
            for (a, b) in s.annotation.nodules[0].all().iter().zip(exact.all()) {
                assert!((a.x - b.x).abs() <= 2 && (a.y - b.y).abs() <= 2);
            }
        }
    }

    #[test]
    fn zero_noise_oracle_returns_ground_truth() {
        let cfg = SynthConfig {
            oracle_precision: 1.0,
            oracle_recall: 1.0,
            ..SynthConfig::default()
        };
        let s = gen_sample(&cfg, 2).unwrap();
        assert_eq!(s.prompt_mask.unwrap(), s.gt);
    }

    #[test]
    fn pure_dilation_oracle_has_full_recall() {
        let cfg = SynthConfig {
            oracle_precision: 0.9,
            oracle_recall: 1.0,
            ..SynthConfig::default()
        };
        for index in 0..10 {
            let s = gen_sample(&cfg, index).unwrap();
            assert!(s.gt.is_subset_of(s.prompt_mask.as_ref().unwrap()));
        }
    }

    #[test]
    fn oracle_hits_corpus_targets() {
        let cfg = SynthConfig::default();
        let samples = gen_samples(&cfg, 0, 200).unwrap();
        let (mut prec, mut rec) = (0.0, 0.0);
        for s in &samples {
            let p = s.prompt_mask.as_ref().unwrap();
            prec += label_precision(p, &s.gt, false).unwrap();
            rec += p.intersection_count(&s.gt).unwrap() as f64 / s.gt.count() as f64;
        }
        let n = samples.len() as f64;
        assert!((prec / n - 0.96).abs() < 0.05, "precision {}", prec / n);
        assert!((rec / n - 0.95).abs() < 0.05, "recall {}", rec / n);
    }

    #[test]
    fn multiple_nodules_are_separate() {
        let cfg = SynthConfig {
            nodules_min: 2,
            nodules_max: 3,
            ..SynthConfig::default()
        };
        for index in 0..10 {
            let s = gen_sample(&cfg, index).unwrap();
            assert!(!s.annotation.nodules.is_empty());
            s.annotation.validate(64, 64).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SynthConfig { size: 16, ..ok.clone() },
            SynthConfig { contrast: 0.0, ..ok.clone() },
            SynthConfig { oracle_precision: 0.0, ..ok.clone() },
            SynthConfig { oracle_recall: 1.5, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            train: 4,
            test: 2,
            ..CorpusConfig::default()
        };
        write_corpus(dir.path(), &cfg).unwrap();
        let (train, test) = gen_corpus(&cfg).unwrap();
        assert_eq!(load_real_dataset(&dir.path().join("train")).unwrap(), train);
        assert_eq!(load_real_dataset(&dir.path().join("test")).unwrap(), test);
        let count = std::fs::read_dir(dir.path().join("train/images")).unwrap().count();
        assert_eq!(count, 4);
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("test/manifest.json")).unwrap()).unwrap();
        assert_eq!((m.first_index, m.count), (4, 2));
    }

    #[test]
    fn ingestion_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_real_dataset(dir.path()).unwrap().is_empty());
        let s = gen_sample(&SynthConfig::default(), 0).unwrap();
        let root = dir.path();
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        s.image.save(&root.join("images/a.png")).unwrap();
        s.gt.save(&root.join("masks/a.png")).unwrap();
        s.image.save(&root.join("images/b.png")).unwrap();
        let loaded = load_real_dataset(root).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].id, "a");
        assert!(loaded[0].prompt_mask.is_none());
        assert_eq!(loaded[0].annotation.nodules.len(), 1);
        std::fs::write(root.join("images/c.png"), b"not an image").unwrap();
        s.gt.save(&root.join("masks/c.png")).unwrap();
        let err = load_real_dataset(root).unwrap_err();
        assert!(err.to_string().contains("c.png"));
    }

    #[test]
    fn fused_foreground_is_most_precise() {
        let samples = gen_samples(&SynthConfig::default(), 0, 200).unwrap();
        let rows = label_precision_report(&samples).unwrap();
        let (quad, prompt, fused) = (&rows[1], &rows[2], &rows[3]);
        assert!(fused.foreground.mean > quad.foreground.mean);
        assert!(fused.foreground.mean > prompt.foreground.mean);
        assert!(fused.background.mean > 0.995);
        let table = format_precision_table(&rows);
        assert!(table.contains("High-confidence f/b"));
    }
}
