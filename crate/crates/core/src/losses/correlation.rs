//! Prototype correlation: foreground/background prototypes, rectified cosine
//! correlation maps, their complementary consistency, and agreement between
//! the fused correlation map and the prediction.

use super::{
    clamp_prob, dot, normalize, normalize_backward, CorrelationMap, FeatureMap, LossResult,
    Prediction, Prototype, PrototypeKind, SkippedTerms, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// Masked mean feature of a region with its norm, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RegionMean {
    pub mean: Vec<f64>,
    pub norm: f64,
    pub count: usize,
}

pub(crate) fn region_mean(f: &FeatureMap, region: &MaskGrid) -> Result<Option<RegionMean>> {
    f.ensure_spatial(region)?;
    let count = region.count();
    if count == 0 {
        return Ok(None);
    }
    let plane = f.plane();
    let mut mean = vec![0.0; f.channels];
    for (idx, &inside) in region.cells().iter().enumerate() {
        if inside {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += f.values[c * plane + idx];
            }
        }
    }
    let inv = 1.0 / count as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(Some(RegionMean { mean, norm, count }))
}

/// `(P_f, P_b)`: L2-normalized masked means of the two regions.
pub fn prototypes(
    f: &FeatureMap,
    foreground: &MaskGrid,
    background: &MaskGrid,
) -> Result<(Prototype, Prototype)> {
    let make = |region: &MaskGrid, kind, name| -> Result<Prototype> {
        let rm = region_mean(f, region)?.ok_or(Error::EmptyRegion(name))?;
        Ok(Prototype {
            vector: normalize(&rm.mean).0,
            kind,
        })
    };
    Ok((
        make(foreground, PrototypeKind::Foreground, "foreground prototype region")?,
        make(background, PrototypeKind::Background, "background prototype region")?,
    ))
}

/// `max(0, <F(x), P> / (|F(x)| |P| + eps))` at every position.
pub fn correlation_map(f: &FeatureMap, p: &Prototype) -> Result<CorrelationMap> {
    if p.vector.len() != f.channels {
        return Err(Error::InvalidInput(format!(
            "prototype has {} channels, features have {}",
            p.vector.len(),
            f.channels
        )));
    }
    let pn = p.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    let plane = f.plane();
    let values = (0..plane)
        .map(|idx| {
            let (mut d, mut n2) = (0.0, 0.0);
            for c in 0..f.channels {
                let v = f.values[c * plane + idx];
                d += v * p.vector[c];
                n2 += v * v;
            }
            (d / (n2.sqrt() * pn + NORM_EPS)).max(0.0)
        })
        .collect();
    Ok(CorrelationMap {
        height: f.height,
        width: f.width,
        values,
    })
}

/// Value and gradients with respect to a pair of maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPairGrad {
    pub value: f64,
    pub grad_first: Vec<f64>,
    pub grad_second: Vec<f64>,
}

fn ensure_same_map(a: &CorrelationMap, b: &CorrelationMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || a.values.len() != b.values.len() {
        return Err(Error::DimensionMismatch {
            expected: (a.height, a.width),
            found: (b.height, b.width),
        });
    }
    Ok(())
}

/// Symmetric cross-entropy between `r_f` and `1 - r_b`, averaged over positions.
///
/// Gradients are returned with respect to `r_f` and `r_b`.
pub fn correlation_consistency_loss(
    r_f: &CorrelationMap,
    r_b: &CorrelationMap,
) -> Result<MapPairGrad> {
    ensure_same_map(r_f, r_b)?;
    let n = r_f.values.len();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut value = 0.0;
    let mut grad_f = vec![0.0; n];
    let mut grad_b = vec![0.0; n];
    for i in 0..n {
        let a = r_f.values[i];
        let b = 1.0 - r_b.values[i];
        let (ac, a_live) = clamp_prob(a);
        let (bc, b_live) = clamp_prob(b);
        let (la, l1a) = (ac.ln(), (1.0 - ac).ln());
        let (lb, l1b) = (bc.ln(), (1.0 - bc).ln());
        value += -0.5 * (a * lb + (1.0 - a) * l1b) - 0.5 * (b * la + (1.0 - b) * l1a);
        let mut da = -0.5 * (lb - l1b);
        if a_live {
            da += -0.5 * (b / ac - (1.0 - b) / (1.0 - ac));
        }
        let mut db = -0.5 * (la - l1a);
        if b_live {
            db += -0.5 * (a / bc - (1.0 - a) / (1.0 - bc));
        }
        grad_f[i] = da * inv;
        // b = 1 - r_b
        grad_b[i] = -db * inv;
    }
    Ok(MapPairGrad {
        value: value * inv,
        grad_first: grad_f,
        grad_second: grad_b,
    })
}

/// `m_c = (r_f + (1 - r_b)) / 2`.
pub fn fused_correlation(r_f: &CorrelationMap, r_b: &CorrelationMap) -> Result<CorrelationMap> {
    ensure_same_map(r_f, r_b)?;
    Ok(CorrelationMap {
        height: r_f.height,
        width: r_f.width,
        values: r_f
            .values
            .iter()
            .zip(&r_b.values)
            .map(|(f, b)| 0.5 * (f + 1.0 - b))
            .collect(),
    })
}

/// Soft dice between the prediction and the fused correlation map, the latter
/// upsampled by nearest neighbour to the prediction's resolution.
///
/// Gradients are with respect to `m` (image resolution) and `m_c` (its own resolution).
pub fn correlation_seg_loss(m: &Prediction, m_c: &CorrelationMap) -> Result<MapPairGrad> {
    let mismatch = || Error::DimensionMismatch {
        expected: m.dims(),
        found: (m_c.height, m_c.width),
    };
    if m_c.height == 0 || m.height % m_c.height != 0 {
        return Err(mismatch());
    }
    let s = m.height / m_c.height;
    if m_c.width * s != m.width {
        return Err(mismatch());
    }
    let (h, w) = m.dims();
    let cell = |i: usize, j: usize| (i / s) * m_c.width + j / s;
    let mut inter = 0.0;
    let mut size = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = m.probs[i * w + j];
            let c = m_c.values[cell(i, j)];
            inter += p * c;
            size += p + c;
        }
    }
    let mut grad_m = vec![0.0; h * w];
    let mut grad_c = vec![0.0; m_c.values.len()];
    if size == 0.0 {
        return Ok(MapPairGrad {
            value: 0.0,
            grad_first: grad_m,
            grad_second: grad_c,
        });
    }
    let base = 2.0 * inter / (size * size);
    for i in 0..h {
        for j in 0..w {
            let k = cell(i, j);
            grad_m[i * w + j] = -2.0 * m_c.values[k] / size + base;
            grad_c[k] += -2.0 * m.probs[i * w + j] / size + base;
        }
    }
    Ok(MapPairGrad {
        value: 1.0 - 2.0 * inter / size,
        grad_first: grad_m,
        grad_second: grad_c,
    })
}

/// Which parts of the prototype correlation loss to evaluate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CorrelationParts {
    pub consistency: bool,
    pub segmentation: bool,
}

// Adds d(loss)/d(F) for one correlation map given d(loss)/d(r), including the
// path through the prototype, its normalization and the masked mean.
fn correlation_backward(
    f: &FeatureMap,
    region: &MaskGrid,
    rm: &RegionMean,
    proto: &[f64],
    grad_r: &[f64],
    grad_f: &mut [f64],
) {
    let plane = f.plane();
    let c = f.channels;
    let pn = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut grad_p = vec![0.0; c];
    let mut fx = vec![0.0; c];
    for idx in 0..plane {
        let g = grad_r[idx];
        if g == 0.0 {
            continue;
        }
        for (ch, v) in fx.iter_mut().enumerate() {
            *v = f.values[ch * plane + idx];
        }
        let fnorm = fx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = dot(&fx, proto);
        let denom = fnorm * pn + NORM_EPS;
        if d / denom <= 0.0 {
            continue;
        }
        let inv = 1.0 / denom;
        let k = d * inv * inv;
        for ch in 0..c {
            let dfeat = proto[ch] * inv - if fnorm > 0.0 { k * pn * fx[ch] / fnorm } else { 0.0 };
            grad_f[ch * plane + idx] += g * dfeat;
            let dproto = fx[ch] * inv - if pn > 0.0 { k * fnorm * proto[ch] / pn } else { 0.0 };
            grad_p[ch] += g * dproto;
        }
    }
    let grad_mean = normalize_backward(&rm.mean, rm.norm, &grad_p);
    let inv_count = 1.0 / rm.count as f64;
    for (idx, &inside) in region.cells().iter().enumerate() {
        if inside {
            for ch in 0..c {
                grad_f[ch * plane + idx] += grad_mean[ch] * inv_count;
            }
        }
    }
}

pub(crate) fn prototype_correlation_parts(
    f: &FeatureMap,
    m: &Prediction,
    foreground: &MaskGrid,
    background: &MaskGrid,
    parts: CorrelationParts,
) -> Result<LossResult> {
    f.scale_to(m)?;
    let (Some(fg_mean), Some(bg_mean)) = (region_mean(f, foreground)?, region_mean(f, background)?)
    else {
        return Ok(LossResult::skipped(SkippedTerms {
            correlation: true,
            ..SkippedTerms::default()
        }));
    };
    let p_f = Prototype {
        vector: normalize(&fg_mean.mean).0,
        kind: PrototypeKind::Foreground,
    };
    let p_b = Prototype {
        vector: normalize(&bg_mean.mean).0,
        kind: PrototypeKind::Background,
    };
    let r_f = correlation_map(f, &p_f)?;
    let r_b = correlation_map(f, &p_b)?;

    let n = r_f.values.len();
    let mut value = 0.0;
    let mut grad_rf = vec![0.0; n];
    let mut grad_rb = vec![0.0; n];
    let mut grad_m = None;
    if parts.consistency {
        let fe = correlation_consistency_loss(&r_f, &r_b)?;
        value += fe.value;
        grad_rf.iter_mut().zip(&fe.grad_first).for_each(|(a, b)| *a += b);
        grad_rb.iter_mut().zip(&fe.grad_second).for_each(|(a, b)| *a += b);
    }
    if parts.segmentation {
        let m_c = fused_correlation(&r_f, &r_b)?;
        let seg = correlation_seg_loss(m, &m_c)?;
        value += seg.value;
        for i in 0..n {
            grad_rf[i] += 0.5 * seg.grad_second[i];
            grad_rb[i] -= 0.5 * seg.grad_second[i];
        }
        grad_m = Some(seg.grad_first);
    }
    let mut grad_f = vec![0.0; f.values.len()];
    correlation_backward(f, foreground, &fg_mean, &p_f.vector, &grad_rf, &mut grad_f);
    correlation_backward(f, background, &bg_mean, &p_b.vector, &grad_rb, &mut grad_f);
    Ok(LossResult {
        value,
        grad_prediction: grad_m,
        grad_features: Some(grad_f),
        skipped: SkippedTerms::default(),
    })
}

/// Consistency plus segmentation agreement, with gradients through the
/// correlation maps and the prototypes back to `F`, and into `m`.
///
/// `foreground`/`background` are at feature resolution. A missing prototype
/// skips the whole term (value 0, flag set).
pub fn prototype_correlation_loss(
    f: &FeatureMap,
    m: &Prediction,
    foreground: &MaskGrid,
    background: &MaskGrid,
) -> Result<LossResult> {
    prototype_correlation_parts(
        f,
        m,
        foreground,
        background,
        CorrelationParts {
            consistency: true,
            segmentation: true,
        },
    )
}
