//! Grounder maps and the masks derived from them.
//!
//! * image-level mask `M^I`: relaxed Bernoulli on `w·M^G + b` with logistic
//!   (two-Gumbel) noise, hard threshold forward, straight-through backward;
//! * feature-level mask `M^F`: area-average to the feature grid, min-max
//!   normalize, soft threshold;
//! * inference heatmap `σ(M^G + b/w)`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{scalar::sigmoid, Graph, Matrix, SparseMap, Var};
use crate::encoders::{area_map, EmbeddingVector, GrounderMap, SpatialFeatureMap};
use crate::error::{Error, Result};

/// Added to the pooling denominator.
pub const POOL_EPS: f64 = 1e-6;

/// Trainable scalar projection in front of the Gumbel mask. `w = exp(w_hat)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenIParams {
    pub w_hat: f64,
    pub b: f64,
    pub temperature: f64,
}

impl Default for MaskGenIParams {
    fn default() -> Self {
        Self { w_hat: 0.0, b: 0.0, temperature: 0.5 }
    }
}

impl MaskGenIParams {
    /// Parameters with the given positive scale `w`; `w = 0` gives a degenerate
    /// parameter set that inference rejects.
    pub fn with_w(w: f64, b: f64, temperature: f64) -> Self {
        Self { w_hat: w.ln(), b, temperature }
    }

    pub fn w(&self) -> f64 {
        self.w_hat.exp()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("gumbel temperature must be positive".into()));
        }
        if self.b.is_nan() || self.w_hat.is_nan() {
            return Err(Error::InvalidInput("mask parameters must not be NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftThreshold {
    pub theta: f64,
    pub temperature: f64,
}

impl Default for SoftThreshold {
    fn default() -> Self {
        Self { theta: 0.5, temperature: 0.1 }
    }
}

/// How the image-level mask is emitted in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Hard `{0,1}` forward, relaxed-sample gradient.
    StraightThrough,
    /// The relaxed sample itself, forward and backward. Used for finite-difference checks.
    Relaxed,
}

/// Hard image-level mask, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Relaxed sample the hard values were thresholded from.
    pub relaxed: Vec<f64>,
}

impl BinaryMask {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Soft feature-level mask, cell-major `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("mask {height}x{width} with {} values", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("soft mask values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }
}

/// Inference heatmap, values strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationHeatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Keeps saturated sigmoids strictly inside the unit interval.
const HEATMAP_MARGIN: f64 = 1e-12;

impl LocalizationHeatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!("heatmap {height}x{width} with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("heatmap values must be finite".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Difference of two Gumbel(0,1) draws, i.e. a standard logistic sample.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            u.ln() - (-u).ln_1p()
        })
        .collect()
}

/// Draws `M^I` for one map. `noise` must hold one logistic sample per pixel.
pub fn mask_image_level_with_noise(map: &GrounderMap, params: &MaskGenIParams, noise: &[f64]) -> Result<BinaryMask> {
    params.validate()?;
    if noise.len() != map.logits().len() {
        return Err(Error::Shape("noise length does not match the map".into()));
    }
    let w = params.w();
    let relaxed: Vec<f64> = map
        .logits()
        .iter()
        .zip(noise)
        .map(|(m, n)| sigmoid((w * m + params.b + n) / params.temperature))
        .collect();
    let values = relaxed.iter().map(|&r| if r >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(BinaryMask { height: map.height(), width: map.width(), values, relaxed })
}

pub fn mask_image_level<R: Rng + ?Sized>(map: &GrounderMap, params: &MaskGenIParams, rng: &mut R) -> Result<BinaryMask> {
    let noise = logistic_noise(rng, map.logits().len());
    mask_image_level_with_noise(map, params, &noise)
}

/// Graph form of `M^I` on rows of logits `[n, H·W]`; `w` and `b` are `[1,1]` nodes.
pub fn image_level_graph(
    g: &mut Graph,
    logits: Var,
    w: Var,
    b: Var,
    noise: &Matrix,
    temperature: f64,
    mode: MaskMode,
) -> (Var, Var) {
    let z = g.scale_by(logits, w);
    let z = g.shift_by(z, b);
    let relaxed = g.relaxed_bernoulli(z, noise, temperature);
    let mask = match mode {
        MaskMode::StraightThrough => g.straight_through(relaxed),
        MaskMode::Relaxed => relaxed,
    };
    (mask, relaxed)
}

/// `M^F` at feature resolution `cells`.
pub fn mask_feature_level(map: &GrounderMap, cells: (usize, usize), threshold: SoftThreshold) -> Result<SoftMask> {
    let down = area_map(map.height(), map.width(), cells.0, cells.1)?;
    let mut pooled = vec![0.0; cells.0 * cells.1];
    down.apply(map.logits(), &mut pooled);
    SoftMask::new(cells.0, cells.1, soft_threshold(&pooled, threshold))
}

/// Min-max normalize then `σ((n − θ)/t)`; a constant input gives 0.5 everywhere.
pub fn soft_threshold(values: &[f64], threshold: SoftThreshold) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { sigmoid(((v - lo) / range - threshold.theta) / threshold.temperature) } else { 0.5 })
        .collect()
}

/// Graph form of `M^F`: `cell_logits` rows `[n, h·w]` already at feature resolution.
pub fn feature_level_graph(g: &mut Graph, cell_logits: Var, threshold: SoftThreshold) -> Var {
    g.soft_threshold_rows(cell_logits, threshold.theta, threshold.temperature)
}

/// `v^F = Σ m·f / (Σ m + ε)`.
pub fn masked_pool(features: &SpatialFeatureMap, mask: &SoftMask) -> Result<EmbeddingVector> {
    if (features.height(), features.width()) != (mask.height, mask.width) {
        return Err(Error::InvalidInput(format!(
            "mask {}x{} does not match features {}x{}",
            mask.height,
            mask.width,
            features.height(),
            features.width()
        )));
    }
    let denom = mask.values.iter().sum::<f64>() + POOL_EPS;
    let mut out = vec![0.0; features.channels()];
    for (cell, m) in mask.values.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(features.cells().row(cell)) {
            *o += m * f;
        }
    }
    EmbeddingVector::new(out.into_iter().map(|v| v / denom).collect())
}

/// Graph form: `masks [n, cells] · features [cells, d]`, each row divided by its mask sum plus ε.
pub fn masked_pool_graph(g: &mut Graph, masks: Var, features: Var) -> Var {
    let num = g.matmul(masks, features);
    let den = g.row_sums(masks);
    let den = g.add_scalar(den, POOL_EPS);
    g.div_rows(num, den)
}

/// `σ(M^G + b/w)`, deterministic.
pub fn inference_mask(map: &GrounderMap, params: &MaskGenIParams) -> Result<LocalizationHeatmap> {
    let w = params.w();
    if w == 0.0 || !w.is_finite() {
        return Err(Error::DegenerateParameter(format!("mask scale w = {w} cannot be inverted")));
    }
    let shift = params.b / w;
    let values = map
        .logits()
        .iter()
        .map(|m| sigmoid(m + shift).clamp(HEATMAP_MARGIN, 1.0 - HEATMAP_MARGIN))
        .collect();
    LocalizationHeatmap::new(map.height(), map.width(), values)
}

/// Convenience bundle for callers that already hold an upsampling map.
pub fn upsample(map: &Arc<SparseMap>, cells: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; map.out_len()];
    map.apply(cells, &mut out);
    out
}
