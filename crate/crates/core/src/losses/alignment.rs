//! Location-level alignment: axis-projection dice plus foreground continuity.

use super::{clamp_prob, LossResult, Prediction, SkippedTerms};
use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// Column and row maxima of a raster with the index that attains each.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisProjections {
    /// `x[j]` = max over column `j` (length W).
    pub x: Vec<f64>,
    /// `y[i]` = max over row `i` (length H).
    pub y: Vec<f64>,
    /// Row index of the first maximum in each column.
    pub x_argmax: Vec<usize>,
    /// Column index of the first maximum in each row.
    pub y_argmax: Vec<usize>,
}

pub fn project_axes(values: &[f64], height: usize, width: usize) -> AxisProjections {
    assert_eq!(values.len(), height * width, "raster shape");
    let mut x = vec![f64::NEG_INFINITY; width];
    let mut x_argmax = vec![0; width];
    let mut y = vec![f64::NEG_INFINITY; height];
    let mut y_argmax = vec![0; height];
    for i in 0..height {
        for j in 0..width {
            let v = values[i * width + j];
            // strict comparison keeps the first index on ties
            if v > x[j] {
                x[j] = v;
                x_argmax[j] = i;
            }
            if v > y[i] {
                y[i] = v;
                y_argmax[i] = j;
            }
        }
    }
    if height == 0 {
        x.iter_mut().for_each(|v| *v = 0.0);
    }
    if width == 0 {
        y.iter_mut().for_each(|v| *v = 0.0);
    }
    AxisProjections {
        x,
        y,
        x_argmax,
        y_argmax,
    }
}

// 1 - 2 sum(min(p, t)) / (sum(p) + sum(t)) and its gradient on p.
fn soft_dice_1d(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p.min(*t)).sum();
    let size: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    if size == 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let value = 1.0 - 2.0 * inter / size;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d_inter = if p < t { 1.0 } else { 0.0 };
            -2.0 * d_inter / size + 2.0 * inter / (size * size)
        })
        .collect();
    (value, grad)
}

/// Dice between the axis projections of `m` and of the location label.
pub fn projection_loss(m: &Prediction, location: &MaskGrid) -> Result<LossResult> {
    m.ensure_dims(location)?;
    if location.is_empty() {
        return Err(Error::DegenerateLabel);
    }
    let (h, w) = m.dims();
    let pred = project_axes(&m.probs, h, w);
    let target = project_axes(&location.to_f64(), h, w);
    let (vx, gx) = soft_dice_1d(&pred.x, &target.x);
    let (vy, gy) = soft_dice_1d(&pred.y, &target.y);
    let mut grad = vec![0.0; h * w];
    for (j, g) in gx.iter().enumerate() {
        grad[pred.x_argmax[j] * w + j] += g;
    }
    for (i, g) in gy.iter().enumerate() {
        grad[i * w + pred.y_argmax[i]] += g;
    }
    Ok(LossResult::on_prediction(vx + vy, grad))
}

/// Mean of `-log m` over the high-confidence foreground; zero when it is empty.
pub fn topo_loss(m: &Prediction, foreground: &MaskGrid) -> Result<LossResult> {
    m.ensure_dims(foreground)?;
    let n = foreground.count();
    let mut grad = vec![0.0; m.probs.len()];
    if n == 0 {
        let mut r = LossResult::on_prediction(0.0, grad);
        r.skipped = SkippedTerms {
            topo: true,
            ..SkippedTerms::default()
        };
        return Ok(r);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (idx, (&p, &fg)) in m.probs.iter().zip(foreground.cells()).enumerate() {
        if fg {
            let (pc, live) = clamp_prob(p);
            value -= pc.ln();
            if live {
                grad[idx] = -inv / pc;
            }
        }
    }
    Ok(LossResult::on_prediction(value * inv, grad))
}

pub fn alignment_loss(
    m: &Prediction,
    location: &MaskGrid,
    foreground: &MaskGrid,
) -> Result<LossResult> {
    let proj = projection_loss(m, location)?;
    let topo = topo_loss(m, foreground)?;
    Ok(proj.add_scaled(&topo, 1.0))
}
