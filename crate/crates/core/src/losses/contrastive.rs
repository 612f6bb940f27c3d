//! Multi-scale InfoNCE over patch embeddings drawn from pure foreground and
//! pure background regions.

use rand::Rng;

use super::{dot, normalize, normalize_backward, FeatureMap, LossResult, LossWeights, SkippedTerms};
use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// One sampled `k x k` patch: its centre, the raw window mean and the normalized embedding.
#[derive(Clone, Debug)]
pub(crate) struct Patch {
    pub x: usize,
    pub y: usize,
    pub mean: Vec<f64>,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

/// Centres whose whole `k x k` window lies inside `region`, row-major.
pub(crate) fn eligible_centers(region: &MaskGrid, k: usize) -> Vec<(usize, usize)> {
    let r = k / 2;
    let (h, w) = region.dims();
    let mut out = Vec::new();
    if h < k || w < k {
        return out;
    }
    for y in r..h - r {
        for x in r..w - r {
            let inside = (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| region.get(xx, yy)));
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

pub(crate) fn window_mean(f: &FeatureMap, x: usize, y: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let inv = 1.0 / (k * k) as f64;
    (0..f.channels)
        .map(|c| {
            let mut s = 0.0;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    s += f.at(c, xx, yy);
                }
            }
            s * inv
        })
        .collect()
}

pub(crate) fn sample_patches<R: Rng + ?Sized>(
    f: &FeatureMap,
    region: &MaskGrid,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    if k % 2 == 0 {
        return Err(Error::InvalidInput(format!("patch size {k} must be odd")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    f.ensure_spatial(region)?;
    let centers = eligible_centers(region, k);
    if centers.is_empty() {
        return Ok(Vec::new());
    }
    let picked = rand::seq::index::sample(rng, centers.len(), n.min(centers.len()));
    Ok(picked
        .into_iter()
        .map(|i| {
            let (x, y) = centers[i];
            let mean = window_mean(f, x, y, k);
            let (embedding, norm) = normalize(&mean);
            Patch {
                x,
                y,
                mean,
                norm,
                embedding,
            }
        })
        .collect())
}

/// Up to `n` normalized `k x k` window means centred on pixels drawn without
/// replacement from `region` (feature resolution). An empty region yields an empty list.
pub fn sample_patch_embeddings<R: Rng + ?Sized>(
    f: &FeatureMap,
    region: &MaskGrid,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    Ok(sample_patches(f, region, k, n, rng)?
        .into_iter()
        .map(|p| p.embedding)
        .collect())
}

// Routes an embedding gradient back through normalization and the window mean.
fn scatter_patch_grad(grad_f: &mut [f64], f: &FeatureMap, patch: &Patch, k: usize, g_q: &[f64]) {
    let g_u = normalize_backward(&patch.mean, patch.norm, g_q);
    let r = k / 2;
    let inv = 1.0 / (k * k) as f64;
    let plane = f.plane();
    for (c, gc) in g_u.iter().enumerate() {
        let g = gc * inv;
        for yy in patch.y - r..=patch.y + r {
            for xx in patch.x - r..=patch.x + r {
                grad_f[c * plane + yy * f.width + xx] += g;
            }
        }
    }
}

/// Contrastive loss at feature resolution.
///
/// Per scale `k`, anchors and positives are drawn from `foreground`, negatives
/// from `background`, `samples_per_class` each. Anchor `i` pairs with positive
/// `i` and is contrasted against every negative. The result averages over
/// anchors, then over the scales that had samples.
pub fn contrastive_loss<R: Rng + ?Sized>(
    f: &FeatureMap,
    foreground: &MaskGrid,
    background: &MaskGrid,
    w: &LossWeights,
    rng: &mut R,
) -> Result<LossResult> {
    w.validate()?;
    f.ensure_spatial(foreground)?;
    f.ensure_spatial(background)?;
    let n = w.samples_per_class;
    let inv_tau = 1.0 / w.tau;
    let mut grad = vec![0.0; f.values.len()];
    let mut total = 0.0;
    let mut used_scales = 0usize;
    let mut skipped = false;

    let mut per_scale = Vec::with_capacity(w.scales.len());
    for &k in &w.scales {
        // draw all three queues before any early exit so rng consumption is input-independent
        let anchors = sample_patches(f, foreground, k, n, rng)?;
        let positives = sample_patches(f, foreground, k, n, rng)?;
        let negatives = sample_patches(f, background, k, n, rng)?;
        per_scale.push((k, anchors, positives, negatives));
    }

    let mut scale_grads: Vec<(usize, Vec<(Patch, Vec<f64>)>)> = Vec::new();
    for (k, anchors, positives, negatives) in per_scale {
        let pairs = anchors.len().min(positives.len());
        if pairs == 0 || negatives.is_empty() {
            skipped = true;
            continue;
        }
        let inv_pairs = 1.0 / pairs as f64;
        let c = f.channels;
        let mut g_anchor = vec![vec![0.0; c]; pairs];
        let mut g_pos = vec![vec![0.0; c]; pairs];
        let mut g_neg = vec![vec![0.0; c]; negatives.len()];
        let mut value = 0.0;
        let mut logits = vec![0.0; negatives.len() + 1];
        for i in 0..pairs {
            let q = &anchors[i].embedding;
            let qp = &positives[i].embedding;
            logits[0] = dot(q, qp) * inv_tau;
            for (j, neg) in negatives.iter().enumerate() {
                logits[j + 1] = dot(q, &neg.embedding) * inv_tau;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            value += lse - logits[0];
            // d/dlogit_j = softmax_j - [j == 0]
            let coef0 = ((logits[0] - lse).exp() - 1.0) * inv_pairs * inv_tau;
            for ch in 0..c {
                g_anchor[i][ch] += coef0 * qp[ch];
                g_pos[i][ch] += coef0 * q[ch];
            }
            for (j, neg) in negatives.iter().enumerate() {
                let coef = (logits[j + 1] - lse).exp() * inv_pairs * inv_tau;
                for ch in 0..c {
                    g_anchor[i][ch] += coef * neg.embedding[ch];
                    g_neg[j][ch] += coef * q[ch];
                }
            }
        }
        total += value * inv_pairs;
        used_scales += 1;
        let mut items = Vec::with_capacity(2 * pairs + negatives.len());
        items.extend(anchors.into_iter().take(pairs).zip(g_anchor));
        items.extend(positives.into_iter().take(pairs).zip(g_pos));
        items.extend(negatives.into_iter().zip(g_neg));
        scale_grads.push((k, items));
    }

    if used_scales == 0 {
        return Ok(LossResult::skipped(SkippedTerms {
            contrastive: true,
            ..SkippedTerms::default()
        }));
    }
    let inv_scales = 1.0 / used_scales as f64;
    for (k, items) in scale_grads {
        for (patch, g_q) in items {
            let g_q: Vec<f64> = g_q.iter().map(|g| g * inv_scales).collect();
            scatter_patch_grad(&mut grad, f, &patch, k, &g_q);
        }
    }
    let mut result = LossResult::on_features(total * inv_scales, grad);
    result.skipped.contrastive = skipped;
    Ok(result)
}
