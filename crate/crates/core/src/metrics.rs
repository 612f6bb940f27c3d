//! Overlap and boundary-distance metrics with corpus aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MaskGrid;
use crate::losses::Prediction;

/// `|A ∩ B| / |A ∪ B|`; two empty masks agree perfectly.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice coefficient, computed from the IoU so that `dsc = 2 iou / (1 + iou)`
/// holds exactly in floating point.
pub fn dsc(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    let j = iou(a, b)?;
    Ok(dice_from_iou(j))
}

fn dice_from_iou(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

/// `|A ∩ B| / |A|` with `pred` as A.
pub fn prediction_precision(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    let inter = pred.intersection_count(gt)?;
    if pred.is_empty() {
        return Err(Error::EmptyRegion("prediction"));
    }
    Ok(inter as f64 / pred.count() as f64)
}

/// Linear interpolation between order statistics; `q` in percent.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

// Stand-in for +inf that keeps parabola intersections finite.
const FAR: f64 = 1e20;

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher), in place.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
    f[..n].copy_from_slice(&d[..n]);
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `sites`. All entries are at least `FAR` when `sites` is empty.
pub fn squared_distance_transform(sites: &MaskGrid) -> Vec<f64> {
    let (h, w) = sites.dims();
    let mut grid: Vec<f64> = sites.cells().iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut v, mut z, mut d) = (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&mut f[..h], &mut v, &mut z, &mut d);
        for y in 0..h {
            grid[y * w + x] = f[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&mut f[..w], &mut v, &mut z, &mut d);
        grid[y * w..(y + 1) * w].copy_from_slice(&f[..w]);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
fn directed_boundary_distances(from: &MaskGrid, to: &MaskGrid) -> Vec<f64> {
    let dt = squared_distance_transform(&to.boundary());
    from.boundary()
        .cells()
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// Symmetric boundary Hausdorff distance at percentile `q` (`q = 100` is the
/// plain Hausdorff distance). Either mask empty yields the image diagonal;
/// both empty yields 0.
pub fn hausdorff_percentile(a: &MaskGrid, b: &MaskGrid, q: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = a.dims();
            return Ok(((h * h + w * w) as f64).sqrt());
        }
        _ => {}
    }
    let ab = percentile(&directed_boundary_distances(a, b), q).unwrap_or(0.0);
    let ba = percentile(&directed_boundary_distances(b, a), q).unwrap_or(0.0);
    Ok(ab.max(ba))
}

pub fn hd95(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    hausdorff_percentile(a, b, 95.0)
}

/// Metrics of one binarized prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub miou: f64,
    pub dsc: f64,
    /// Zero for an empty prediction.
    pub precision: f64,
    pub hd95: f64,
}

impl ImageMetrics {
    pub fn compute(pred: &MaskGrid, gt: &MaskGrid) -> Result<Self> {
        let miou = iou(pred, gt)?;
        let precision = match prediction_precision(pred, gt) {
            Ok(p) => p,
            Err(Error::EmptyRegion(_)) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(ImageMetrics {
            miou,
            dsc: dice_from_iou(miou),
            precision,
            hd95: hd95(pred, gt)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub miou: MeanStd,
    pub dsc: MeanStd,
    pub precision: MeanStd,
    pub hd95: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub summary: MetricsSummary,
}

#[derive(Serialize)]
struct CsvRow {
    image: usize,
    miou: f64,
    dsc: f64,
    precision: f64,
    hd95: f64,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let column = |f: fn(&ImageMetrics) -> f64| MeanStd::of(&per_image.iter().map(f).collect::<Vec<_>>());
        let summary = MetricsSummary {
            miou: column(|m| m.miou),
            dsc: column(|m| m.dsc),
            precision: column(|m| m.precision),
            hd95: column(|m| m.hd95),
        };
        MetricsReport { per_image, summary }
    }

    /// Per-image rows: `image,miou,dsc,precision,hd95`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (image, m) in self.per_image.iter().enumerate() {
            w.serialize(CsvRow {
                image,
                miou: m.miou,
                dsc: m.dsc,
                precision: m.precision,
                hd95: m.hd95,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `{metric: {mean, std}}`.
    pub fn summary_json(&self) -> serde_json::Value {
        let s = &self.summary;
        let entries: BTreeMap<&str, MeanStd> = [
            ("miou", s.miou),
            ("dsc", s.dsc),
            ("precision", s.precision),
            ("hd95", s.hd95),
        ]
        .into_iter()
        .collect();
        serde_json::to_value(entries).expect("plain numeric map")
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("plain numeric map");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Binarizes each prediction at `threshold` and aggregates against `gts`.
pub fn corpus_report(preds: &[Prediction], gts: &[MaskGrid], threshold: f64) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let per_image = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| ImageMetrics::compute(&p.binarize(threshold), g))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(per_image))
}
