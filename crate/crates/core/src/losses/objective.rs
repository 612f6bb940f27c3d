//! Weighted combination of the three losses, plus the dense pixel-wise
//! baseline objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    alignment_loss, clamp_prob, contrastive_loss, prototype_correlation_loss, FeatureMap,
    LossResult, LossWeights, Prediction, SkippedTerms,
};
use crate::error::Result;
use crate::grid::MaskGrid;
use crate::labelgen::LabelBundle;

/// Which loss terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub alignment: bool,
    pub contrastive: bool,
    pub correlation: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        alignment: true,
        contrastive: true,
        correlation: true,
    };
}

/// Unweighted component values alongside the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alignment: f64,
    pub contrastive: f64,
    pub correlation: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub result: LossResult,
    pub breakdown: LossBreakdown,
}

/// Foreground and background labels at feature resolution (min-pooled).
pub fn downsample_labels(bundle: &LabelBundle, factor: usize) -> Result<(MaskGrid, MaskGrid)> {
    Ok((
        bundle.foreground.min_pool(factor)?,
        bundle.background.min_pool(factor)?,
    ))
}

/// `L_alignment + lambda * L_cnt + beta * L_correlation` over all three terms.
pub fn total_loss<R: Rng + ?Sized>(
    m: &Prediction,
    f: &FeatureMap,
    bundle: &LabelBundle,
    w: &LossWeights,
    rng: &mut R,
) -> Result<TotalLoss> {
    weighted_objective(m, f, bundle, w, LossTerms::ALL, rng)
}

/// Like [`total_loss`] with individual terms switched off. Disabled terms are
/// not evaluated and contribute zero to both value and breakdown.
pub fn weighted_objective<R: Rng + ?Sized>(
    m: &Prediction,
    f: &FeatureMap,
    bundle: &LabelBundle,
    w: &LossWeights,
    terms: LossTerms,
    rng: &mut R,
) -> Result<TotalLoss> {
    w.validate()?;
    m.ensure_dims(&bundle.location)?;
    let factor = f.scale_to(m)?;
    let (fg, bg) = downsample_labels(bundle, factor)?;

    let mut result = LossResult {
        value: 0.0,
        grad_prediction: None,
        grad_features: None,
        skipped: SkippedTerms::default(),
    };
    let mut breakdown = LossBreakdown::default();
    if terms.alignment {
        let a = alignment_loss(m, &bundle.location, &bundle.foreground)?;
        breakdown.alignment = a.value;
        result = result.add_scaled(&a, 1.0);
    }
    if terms.contrastive {
        let c = contrastive_loss(f, &fg, &bg, w, rng)?;
        breakdown.contrastive = c.value;
        result = result.add_scaled(&c, w.lambda);
    }
    if terms.correlation {
        let c = prototype_correlation_loss(f, m, &fg, &bg)?;
        breakdown.correlation = c.value;
        result = result.add_scaled(&c, w.beta);
    }
    breakdown.total = result.value;
    Ok(TotalLoss { result, breakdown })
}

/// Mean binary cross-entropy of `m` against a dense binary target.
pub fn pixel_bce_loss(m: &Prediction, target: &MaskGrid) -> Result<LossResult> {
    m.ensure_dims(target)?;
    let n = m.probs.len().max(1) as f64;
    let mut value = 0.0;
    let grad = m
        .probs
        .iter()
        .zip(target.cells())
        .map(|(&p, &t)| {
            let (pc, live) = clamp_prob(p);
            let (v, g) = if t {
                (-pc.ln(), -1.0 / pc)
            } else {
                (-(1.0 - pc).ln(), 1.0 / (1.0 - pc))
            };
            value += v;
            if live {
                g / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossResult::on_prediction(value / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::random_instance;
    use crate::losses::{alignment_loss, contrastive_loss, gradcheck::central_difference};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_reduce_to_alignment() {
        let inst = random_instance(4);
        let w = LossWeights {
            lambda: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let total = total_loss(&inst.prediction, &inst.features, &inst.bundle, &w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let align = alignment_loss(&inst.prediction, &inst.bundle.location, &inst.bundle.foreground).unwrap();
        assert_eq!(total.result.value, align.value);
        assert_eq!(total.result.grad_prediction, align.grad_prediction);
    }

    #[test]
    fn total_is_affine_in_weights() {
        let inst = random_instance(8);
        let eval = |lambda: f64, beta: f64| {
            let w = LossWeights { lambda, beta, ..LossWeights::default() };
            total_loss(&inst.prediction, &inst.features, &inst.bundle, &w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        };
        let base = eval(0.8, 0.8);
        let dl = eval(1.3, 0.8);
        let db = eval(0.8, 0.1);
        assert!(((dl.result.value - base.result.value) / 0.5 - base.breakdown.contrastive).abs() < 1e-9);
        assert!(((base.result.value - db.result.value) / 0.7 - base.breakdown.correlation).abs() < 1e-9);
        let b = base.breakdown;
        assert!((b.total - (b.alignment + 0.8 * b.contrastive + 0.8 * b.correlation)).abs() < 1e-12);
        // slope equals the contrastive loss evaluated on its own
        let (fg, bg) = downsample_labels(&inst.bundle, 2).unwrap();
        let c = contrastive_loss(&inst.features, &fg, &bg, &LossWeights::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.value, b.contrastive);
    }

    #[test]
    fn disabled_terms_are_not_evaluated() {
        let inst = random_instance(2);
        let terms = LossTerms { alignment: false, contrastive: true, correlation: false };
        let r = weighted_objective(&inst.prediction, &inst.features, &inst.bundle, &LossWeights::default(), terms, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.result.grad_prediction.is_none());
        assert_eq!(r.breakdown.alignment, 0.0);
        assert_eq!(r.breakdown.correlation, 0.0);
    }

    #[test]
    fn bce_value_and_gradient() {
        let target = MaskGrid::from_fn(4, 4, |x, y| x + y < 4);
        let half = Prediction::new(4, 4, vec![0.5; 16]).unwrap();
        assert!((pixel_bce_loss(&half, &target).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let inst = random_instance(3);
        let t = &inst.bundle.foreground;
        let g = pixel_bce_loss(&inst.prediction, t).unwrap().grad_prediction.unwrap();
        let n = central_difference(&inst.prediction.probs, 1e-6, |v| {
            pixel_bce_loss(&Prediction::new(16, 16, v.to_vec()).unwrap(), t).unwrap().value
        });
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() / (a.abs() + b.abs()).max(1e-12) < 1e-4);
        }
    }
}
