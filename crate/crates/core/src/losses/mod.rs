//! Training losses with hand-derived gradients.
//!
//! Every kernel returns its value together with the gradient with respect to
//! each differentiable input, so a caller can backpropagate into a network
//! without an autodiff engine. [`gradcheck`] verifies each kernel against
//! central finite differences.

pub mod alignment;
pub mod contrastive;
pub mod correlation;
pub mod gradcheck;
pub mod objective;

pub use alignment::{alignment_loss, project_axes, projection_loss, topo_loss, AxisProjections};
pub use contrastive::{contrastive_loss, sample_patch_embeddings};
pub use correlation::{
    correlation_consistency_loss, correlation_map, correlation_seg_loss, fused_correlation,
    prototype_correlation_loss, prototypes, MapPairGrad,
};
pub use gradcheck::{finite_diff_check, random_instance, GradCheckInput, LossKind};
pub use objective::{
    downsample_labels, pixel_bce_loss, total_loss, weighted_objective, LossBreakdown, LossTerms,
    TotalLoss,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// Clamp applied to probabilities before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Added to every norm in a denominator.
pub const NORM_EPS: f64 = 1e-8;

#[inline]
pub(crate) fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// Per-pixel foreground probabilities `m`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{} probabilities for a {}x{} prediction",
                probs.len(),
                width,
                height
            )));
        }
        Ok(Self {
            height,
            width,
            probs,
        })
    }

    pub fn from_mask(mask: &MaskGrid) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            probs: mask.to_f64(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn binarize(&self, threshold: f64) -> MaskGrid {
        MaskGrid::from_threshold(self.height, self.width, &self.probs, threshold)
            .expect("prediction shape is consistent")
    }

    pub(crate) fn ensure_dims(&self, mask: &MaskGrid) -> Result<()> {
        if self.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: mask.dims(),
            });
        }
        Ok(())
    }
}

/// Network features, channel-major: `values[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || values.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "{} values for a {}x{}x{} feature map",
                values.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.values[c * self.plane() + y * self.width + x]
    }

    /// Feature vector at spatial position `(x, y)`.
    pub fn vector(&self, x: usize, y: usize) -> Vec<f64> {
        let idx = y * self.width + x;
        (0..self.channels)
            .map(|c| self.values[c * self.plane() + idx])
            .collect()
    }

    pub(crate) fn ensure_spatial(&self, mask: &MaskGrid) -> Result<()> {
        if (self.height, self.width) != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: (self.height, self.width),
                found: mask.dims(),
            });
        }
        Ok(())
    }

    /// Integer factor between a prediction and this feature map.
    pub fn scale_to(&self, prediction: &Prediction) -> Result<usize> {
        let mismatch = || Error::DimensionMismatch {
            expected: prediction.dims(),
            found: (self.height, self.width),
        };
        if self.height == 0 || prediction.height % self.height != 0 {
            return Err(mismatch());
        }
        let s = prediction.height / self.height;
        if s == 0 || self.width * s != prediction.width {
            return Err(mismatch());
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeKind {
    Foreground,
    Background,
}

/// L2-normalized mean feature of a labelled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub kind: PrototypeKind,
}

/// Values in `[0, 1]` at feature resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Terms that contributed nothing because their label region was empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTerms {
    pub topo: bool,
    pub contrastive: bool,
    pub correlation: bool,
}

impl SkippedTerms {
    pub fn union(self, other: SkippedTerms) -> SkippedTerms {
        SkippedTerms {
            topo: self.topo || other.topo,
            contrastive: self.contrastive || other.contrastive,
            correlation: self.correlation || other.correlation,
        }
    }

    pub fn any(&self) -> bool {
        self.topo || self.contrastive || self.correlation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient with respect to the prediction, `None` when the loss does not depend on it.
    pub grad_prediction: Option<Vec<f64>>,
    /// Gradient with respect to the feature map, `None` when the loss does not depend on it.
    pub grad_features: Option<Vec<f64>>,
    pub skipped: SkippedTerms,
}

impl LossResult {
    pub(crate) fn on_prediction(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grad_prediction: Some(grad),
            grad_features: None,
            skipped: SkippedTerms::default(),
        }
    }

    pub(crate) fn on_features(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grad_prediction: None,
            grad_features: Some(grad),
            skipped: SkippedTerms::default(),
        }
    }

    pub(crate) fn skipped(skipped: SkippedTerms) -> Self {
        Self {
            value: 0.0,
            grad_prediction: None,
            grad_features: None,
            skipped,
        }
    }

    /// `self + weight * other`, with gradients accumulated where present.
    pub fn add_scaled(mut self, other: &LossResult, weight: f64) -> Self {
        self.value += weight * other.value;
        accumulate(&mut self.grad_prediction, &other.grad_prediction, weight);
        accumulate(&mut self.grad_features, &other.grad_features, weight);
        self.skipped = self.skipped.union(other.skipped);
        self
    }
}

fn accumulate(into: &mut Option<Vec<f64>>, from: &Option<Vec<f64>>, weight: f64) {
    if let Some(src) = from {
        match into {
            Some(dst) => dst.iter_mut().zip(src).for_each(|(d, s)| *d += weight * s),
            None => *into = Some(src.iter().map(|s| weight * s).collect()),
        }
    }
}

/// Loss weights and sampling configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Weight of the prototype correlation term.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Patch sizes used for contrastive sampling.
    pub scales: Vec<usize>,
    pub samples_per_class: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            beta: 0.8,
            tau: 0.07,
            scales: vec![1, 3],
            samples_per_class: 64,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidInput(
                "scales must be a nonempty list of odd patch sizes".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidInput("samples_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// `u / (|u| + eps)` and its norm.
pub(crate) fn normalize(u: &[f64]) -> (Vec<f64>, f64) {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = n + NORM_EPS;
    (u.iter().map(|v| v / d).collect(), n)
}

/// Pulls a gradient on `u / (|u| + eps)` back onto `u`.
pub(crate) fn normalize_backward(u: &[f64], norm: f64, grad_q: &[f64]) -> Vec<f64> {
    let d = norm + NORM_EPS;
    let dot: f64 = u.iter().zip(grad_q).map(|(a, b)| a * b).sum();
    let coef = if norm > 0.0 { dot / (norm * d * d) } else { 0.0 };
    u.iter()
        .zip(grad_q)
        .map(|(ui, gi)| gi / d - coef * ui)
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
