//! Central finite-difference verification of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::contrastive::eligible_centers;
use super::correlation::{prototype_correlation_parts, CorrelationParts};
use super::{
    alignment_loss, contrastive_loss, downsample_labels, projection_loss, topo_loss, total_loss,
    FeatureMap, LossResult, LossWeights, Prediction,
};
use crate::error::{Error, Result};
use crate::grid::MaskGrid;
use crate::labelgen::{fuse_labels, geometric_masks, NodulePoints, Point, PointAnnotation, LabelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Projection,
    Topo,
    Alignment,
    Contrastive,
    CorrelationConsistency,
    CorrelationSeg,
    PrototypeCorrelation,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Projection,
        LossKind::Topo,
        LossKind::Alignment,
        LossKind::Contrastive,
        LossKind::CorrelationConsistency,
        LossKind::CorrelationSeg,
        LossKind::PrototypeCorrelation,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Projection => "projection",
            LossKind::Topo => "topo",
            LossKind::Alignment => "alignment",
            LossKind::Contrastive => "contrastive",
            LossKind::CorrelationConsistency => "correlation-consistency",
            LossKind::CorrelationSeg => "correlation-seg",
            LossKind::PrototypeCorrelation => "prototype-correlation",
            LossKind::Total => "total",
        }
    }

    fn uses_prediction(self) -> bool {
        !matches!(self, LossKind::Contrastive | LossKind::CorrelationConsistency)
    }

    fn uses_features(self) -> bool {
        !matches!(self, LossKind::Projection | LossKind::Topo | LossKind::Alignment)
    }
}

/// A small problem instance: prediction at image resolution, features at a
/// whole-number fraction of it, and a label bundle at image resolution.
#[derive(Clone, Debug)]
pub struct GradCheckInput {
    pub prediction: Prediction,
    pub features: FeatureMap,
    pub bundle: LabelBundle,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub value: f64,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

// Ridders' tableau from a starting step: (estimate, error estimate).
fn ridders(mut central: impl FnMut(f64) -> f64, h: f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 10;
    const SAFE: f64 = 2.0;
    let shrink2 = SHRINK * SHRINK;
    let mut table = [[0.0f64; LEVELS]; LEVELS];
    let mut step = h;
    table[0][0] = central(step);
    let mut best = (table[0][0], f64::INFINITY);
    for col in 1..LEVELS {
        step /= SHRINK;
        table[0][col] = central(step);
        let mut fac = shrink2;
        for row in 1..=col {
            table[row][col] = (table[row - 1][col] * fac - table[row - 1][col - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (table[row][col] - table[row - 1][col])
                .abs()
                .max((table[row][col] - table[row - 1][col - 1]).abs());
            if e <= best.1 {
                best = (table[row][col], e);
            }
        }
        if (table[col][col] - table[col - 1][col - 1]).abs() >= SAFE * best.1 {
            break;
        }
    }
    best
}

/// Central differences at every coordinate, Richardson-extrapolated over
/// shrinking steps (Ridders' scheme). Tableaus start at `h`, `h/10` and
/// `h/100`; each coordinate keeps the estimate with the smallest error
/// estimate, so neither truncation on stiff coordinates nor cancellation on
/// nearly flat ones dominates.
pub fn extrapolated_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| extrapolated_partial(&mut work, i, h, &mut f))
        .collect()
}

/// One coordinate of [`extrapolated_difference`]. `work` is restored on return.
pub fn extrapolated_partial(
    work: &mut [f64],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let x = work[i];
    let mut central = |step: f64| {
        work[i] = x + step;
        let up = f(work);
        work[i] = x - step;
        let down = f(work);
        work[i] = x;
        (up - down) / (2.0 * step)
    };
    [h, h / 10.0, h / 100.0]
        .into_iter()
        .map(|start| ridders(&mut central, start))
        .fold((0.0, f64::INFINITY), |best, r| if r.1 < best.1 { r } else { best })
        .0
}

/// Default largest step for [`finite_diff_check`].
pub const DEFAULT_STEP: f64 = 1e-2;

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// A 16x16 prediction with 4x8x8 features and a fused label bundle whose
/// foreground and background both admit 3x3 patches at feature resolution.
pub fn random_instance(seed: u64) -> GradCheckInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16usize, 16usize);
    loop {
        let mut j = |base: i64| base + rng.random_range(-1..=1i64);
        let nodule = NodulePoints {
            top: Point::new(j(2), 0),
            right: Point::new(9, j(2)),
            bottom: Point::new(j(7), 9),
            left: Point::new(0, j(7)),
        };
        let ann = PointAnnotation {
            image_id: format!("gradcheck-{seed}"),
            nodules: vec![nodule],
        };
        let (g_b, g_i, g_o) = geometric_masks(&ann, h, w).expect("valid synthetic annotation");
        let prompt = MaskGrid::from_fn(h, w, |x, y| {
            let inside = (1..=9).contains(&x) && (1..=9).contains(&y);
            let edge = inside && (x == 1 || y == 1 || x == 9 || y == 9);
            if edge {
                rng.random_bool(0.5)
            } else {
                inside
            }
        });
        let bundle = fuse_labels(&g_b, &g_i, &g_o, &prompt).expect("matching dims");
        let (fg, bg) = downsample_labels(&bundle, 2).expect("even dims");
        if eligible_centers(&fg, 3).is_empty() || eligible_centers(&bg, 3).is_empty() {
            continue;
        }
        let probs = (0..h * w).map(|_| rng.random_range(0.05..0.95)).collect();
        let values = (0..4 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        return GradCheckInput {
            prediction: Prediction::new(h, w, probs).expect("shape"),
            features: FeatureMap::new(4, 8, 8, values).expect("shape"),
            bundle,
            weights: LossWeights::default(),
        };
    }
}

/// Evaluates one named loss with a freshly seeded rng.
pub fn evaluate_loss(
    kind: LossKind,
    m: &Prediction,
    f: &FeatureMap,
    bundle: &LabelBundle,
    weights: &LossWeights,
    seed: u64,
) -> Result<LossResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_labels = || -> Result<(MaskGrid, MaskGrid)> {
        let factor = f.scale_to(m)?;
        downsample_labels(bundle, factor)
    };
    match kind {
        LossKind::Projection => projection_loss(m, &bundle.location),
        LossKind::Topo => topo_loss(m, &bundle.foreground),
        LossKind::Alignment => alignment_loss(m, &bundle.location, &bundle.foreground),
        LossKind::Contrastive => {
            let (fg, bg) = feature_labels()?;
            contrastive_loss(f, &fg, &bg, weights, &mut rng)
        }
        LossKind::CorrelationConsistency | LossKind::CorrelationSeg | LossKind::PrototypeCorrelation => {
            let (fg, bg) = feature_labels()?;
            let parts = CorrelationParts {
                consistency: kind != LossKind::CorrelationSeg,
                segmentation: kind != LossKind::CorrelationConsistency,
            };
            prototype_correlation_parts(f, m, &fg, &bg, parts)
        }
        LossKind::Total => Ok(total_loss(m, f, bundle, weights, &mut rng)?.result),
    }
}

/// Max relative error between analytic and extrapolated central-difference
/// gradients over every coordinate the loss depends on. `h` is the largest step.
pub fn finite_diff_check(
    kind: LossKind,
    input: &GradCheckInput,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let GradCheckInput {
        prediction: m,
        features: f,
        bundle,
        weights,
    } = input;
    let finite = |r: LossResult| -> Result<f64> {
        if r.value.is_finite() {
            Ok(r.value)
        } else {
            Err(Error::NonFinite(format!("{} loss", kind.name())))
        }
    };
    let base = evaluate_loss(kind, m, f, bundle, weights, seed)?;
    let value = finite(base.clone())?;
    let mut max_err: f64 = 0.0;
    let mut coordinates = 0;

    if kind.uses_prediction() {
        let analytic = base
            .grad_prediction
            .clone()
            .unwrap_or_else(|| vec![0.0; m.probs.len()]);
        let mut failure = None;
        let numeric = extrapolated_difference(&m.probs, h, |p| {
            let mp = Prediction::new(m.height, m.width, p.to_vec()).expect("shape");
            match evaluate_loss(kind, &mp, f, bundle, weights, seed).and_then(finite) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            max_err = max_err.max(relative_error(*a, *n));
        }
        coordinates += numeric.len();
    }
    if kind.uses_features() {
        let analytic = base
            .grad_features
            .clone()
            .unwrap_or_else(|| vec![0.0; f.values.len()]);
        let mut failure = None;
        let numeric = extrapolated_difference(&f.values, h, |v| {
            let fp = FeatureMap::new(f.channels, f.height, f.width, v.to_vec()).expect("shape");
            match evaluate_loss(kind, m, &fp, bundle, weights, seed).and_then(finite) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            max_err = max_err.max(relative_error(*a, *n));
        }
        coordinates += numeric.len();
    }
    Ok(GradCheckReport {
        kind,
        value,
        coordinates,
        max_rel_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::correlation::region_mean;
    use crate::losses::normalize;

    #[test]
    fn instance_has_patchable_regions() {
        for seed in 0..5 {
            let inst = random_instance(seed);
            let (fg, bg) = downsample_labels(&inst.bundle, 2).unwrap();
            assert!(!eligible_centers(&fg, 3).is_empty());
            assert!(!eligible_centers(&bg, 3).is_empty());
        }
    }

    #[test]
    fn every_kernel_passes_on_random_instances() {
        for seed in 0..3 {
            let inst = random_instance(seed);
            for kind in LossKind::ALL {
                let r = finite_diff_check(kind, &inst, DEFAULT_STEP, seed).unwrap();
                assert!(r.max_rel_error < 1e-4, "{:?} seed {seed}: {}", kind, r.max_rel_error);
            }
        }
    }

    #[test]
    fn rectified_positions_have_zero_gradient_both_ways() {
        // Positions outside both label regions are set anti-parallel to the sum of
        // the prototypes, so both correlations are rectified to zero there.
        let inst = random_instance(1);
        let (fg, bg) = downsample_labels(&inst.bundle, 2).unwrap();
        let mut f = inst.features.clone();
        let pf = normalize(&region_mean(&f, &fg).unwrap().unwrap().mean).0;
        let pb = normalize(&region_mean(&f, &bg).unwrap().unwrap().mean).0;
        let plane = f.plane();
        let outside: Vec<usize> = (0..plane).filter(|&i| !fg.cells()[i] && !bg.cells()[i]).collect();
        assert!(!outside.is_empty());
        for &idx in &outside {
            for c in 0..f.channels {
                f.values[c * plane + idx] = -(pf[c] + pb[c]);
            }
        }
        let m = &inst.prediction;
        let kind = LossKind::CorrelationConsistency;
        let analytic = evaluate_loss(kind, m, &f, &inst.bundle, &inst.weights, 0)
            .unwrap()
            .grad_features
            .unwrap();
        let numeric = central_difference(&f.values, 1e-5, |v| {
            let fp = FeatureMap::new(4, 8, 8, v.to_vec()).unwrap();
            evaluate_loss(kind, m, &fp, &inst.bundle, &inst.weights, 0).unwrap().value
        });
        for &idx in &outside {
            for c in 0..f.channels {
                assert_eq!(analytic[c * plane + idx], 0.0);
                assert_eq!(numeric[c * plane + idx], 0.0);
            }
        }
    }

    fn plain_error(inst: &GradCheckInput, h: f64) -> f64 {
        let kind = LossKind::CorrelationConsistency;
        let (m, b, w) = (&inst.prediction, &inst.bundle, &inst.weights);
        let analytic = evaluate_loss(kind, m, &inst.features, b, w, 0).unwrap().grad_features.unwrap();
        let numeric = central_difference(&inst.features.values, h, |v| {
            let fp = FeatureMap::new(4, 8, 8, v.to_vec()).unwrap();
            evaluate_loss(kind, m, &fp, b, w, 0).unwrap().value
        });
        analytic.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max)
    }

    #[test]
    fn halving_the_step_shrinks_the_error() {
        // truncation error of plain central differences is O(h^2)
        let inst = random_instance(6);
        let ratio = plain_error(&inst, 2.5e-3) / plain_error(&inst, 1.25e-3);
        assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
    }

    #[test]
    fn extrapolation_beats_plain_differences() {
        let inst = random_instance(6);
        let r = finite_diff_check(LossKind::CorrelationConsistency, &inst, DEFAULT_STEP, 0).unwrap();
        assert!(r.max_rel_error < plain_error(&inst, 1e-5));
    }

    #[test]
    fn extrapolated_difference_of_polynomial_and_exponential() {
        let x = [0.3, -1.2, 2.0];
        let d = extrapolated_difference(&x, DEFAULT_STEP, |v| v[0].powi(3) + v[1].exp() * v[2]);
        let exact = [3.0 * 0.09, (-1.2f64).exp() * 2.0, (-1.2f64).exp()];
        for (a, b) in d.iter().zip(&exact) {
            assert!(relative_error(*a, *b) < 1e-10, "{a} vs {b}");
        }
    }
}
