//! Frozen encoder stack: image encoder, spectrogram front-end, audio frame
//! encoder, text encoder and grounder.
//!
//! The default `toy` stack is built from seeded random tables. Nothing in here is
//! ever updated by training; [`FrozenStack::fingerprint`] hashes every table so a
//! run can prove it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{patchify, Graph, Matrix, SparseMap, Var};
use crate::error::{Error, Result};
use crate::lexicon::{self, BACKGROUND, MASKED, MAX_CLASSES};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Registry key of the stack implementation.
    pub kind: String,
    pub seed: u64,
    /// Shared image/text embedding width.
    pub d: usize,
    pub patch: usize,
    /// Audio frame embedding width.
    pub d_a: usize,
    /// Spectrogram bins; the FFT length is `2 * (f_bins - 1)`.
    pub f_bins: usize,
    pub hop: usize,
    /// Token embedding width of the text encoder.
    pub d_tok: usize,
    pub text_hidden: usize,
    pub max_text_len: usize,
    pub image_size: usize,
    /// Align image features and concept-word text embeddings at construction,
    /// standing in for image-text pretraining.
    pub aligned: bool,
    /// Grounder logit reached by a palette color under its own concept text.
    pub align_margin: f64,
    /// Weight of the random part of the image projection kept after alignment.
    pub align_residual: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            seed: 7,
            d: 64,
            patch: 16,
            d_a: 32,
            f_bins: 257,
            hop: 160,
            d_tok: 32,
            text_hidden: 64,
            max_text_len: 16,
            image_size: 352,
            aligned: true,
            align_margin: 4.0,
            align_residual: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn n_fft(&self) -> usize {
        2 * (self.f_bins - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("patch", self.patch),
            ("d_a", self.d_a),
            ("hop", self.hop),
            ("d_tok", self.d_tok),
            ("text_hidden", self.text_hidden),
            ("image_size", self.image_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.f_bins < 2 {
            return Err(Error::Config("encoder.f_bins must be at least 2".into()));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("encoder.max_text_len must be at least 2".into()));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config("encoder.image_size must be a multiple of encoder.patch".into()));
        }
        Ok(())
    }
}

/// RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image must have positive height and width".into()));
        }
        if pixels.len() != 3 * height * width {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel values must be finite and in [0, 1]".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for c in rgb {
            pixels.extend(std::iter::repeat(c).take(height * width));
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }
}

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClipSample {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClipSample {
    pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || !(-1.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput("audio samples must be finite and in [-1, 1]".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Magnitude spectrogram, `[f_bins, t_frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Matrix,
}

impl Spectrogram {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidInput("spectrogram needs bins and frames".into()));
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput("spectrogram values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn f_bins(&self) -> usize {
        self.values.rows()
    }

    pub fn t_frames(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Frame-major copy `[t_frames, f_bins]`.
    pub fn frames(&self) -> Matrix {
        self.values.transpose()
    }
}

/// Spatial features stored cell-major: row `y * w + x` holds the `d` channels of cell `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatureMap {
    height: usize,
    width: usize,
    cells: Matrix,
}

impl SpatialFeatureMap {
    pub fn new(height: usize, width: usize, cells: Matrix) -> Result<Self> {
        if height == 0 || width == 0 || cells.rows() != height * width {
            return Err(Error::Shape(format!(
                "feature map {height}x{width} needs {} cells, got {}",
                height * width,
                cells.rows()
            )));
        }
        if !cells.is_finite() {
            return Err(Error::InvalidInput("feature values must be finite".into()));
        }
        Ok(Self { height, width, cells })
    }

    pub fn channels(&self) -> usize {
        self.cells.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[c, h, w]` indexing.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.cells.get(y * self.width + x, c)
    }

    pub fn cells(&self) -> &Matrix {
        &self.cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding values must be finite".into()));
        }
        Ok(Self { values, normalized: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> EmbeddingVector {
        let n = self.norm().max(1e-12);
        EmbeddingVector { values: self.values.iter().map(|v| v / n).collect(), normalized: true }
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm().max(1e-12) * other.norm().max(1e-12))
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.values.clone())
    }
}

/// `[T, d_a]` frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSequence {
    values: Matrix,
}

impl FrameEmbeddingSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidInput("frame sequence needs at least one frame".into()));
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput("frame embeddings must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Token embeddings `[L, d_tok]` with the position of the audio slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    token_embeddings: Matrix,
    audio_slot_index: usize,
}

impl TokenSequence {
    pub fn new(token_embeddings: Matrix, audio_slot_index: usize) -> Result<Self> {
        if token_embeddings.rows() == 0 {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if audio_slot_index >= token_embeddings.rows() {
            return Err(Error::InvalidInput("audio slot index out of range".into()));
        }
        if !token_embeddings.is_finite() {
            return Err(Error::InvalidInput("token embeddings must be finite".into()));
        }
        Ok(Self { token_embeddings, audio_slot_index })
    }

    pub fn len(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.token_embeddings.rows() == 0
    }

    pub fn audio_slot_index(&self) -> usize {
        self.audio_slot_index
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }
}

/// Raw grounder logits at image resolution, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrounderMap {
    height: usize,
    width: usize,
    logits: Vec<f64>,
}

impl GrounderMap {
    pub fn new(height: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || logits.len() != height * width {
            return Err(Error::Shape(format!("grounder map {height}x{width} with {} logits", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grounder logits must be finite".into()));
        }
        Ok(Self { height, width, logits })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.logits[y * self.width + x]
    }
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel centers (edge-clamped), as a sparse map from
/// `[h * w]` to `[out_h * out_w]`.
pub fn bilinear_map(h: usize, w: usize, out_h: usize, out_w: usize) -> SparseMap {
    let axis = |inp: usize, out: usize, o: usize| -> [(usize, f64); 2] {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    let mut entries = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let ys = axis(h, out_h, oy);
        for ox in 0..out_w {
            let xs = axis(w, out_w, ox);
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(4);
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = (y * w + x) as u32;
                    match row.iter_mut().find(|e| e.0 == idx) {
                        Some(e) => e.1 += wgt,
                        None => row.push((idx, wgt)),
                    }
                }
            }
            entries.push(row);
        }
    }
    SparseMap::new(h * w, entries)
}

/// Block-average from `[h, w]` down to `[out_h, out_w]`; requires exact divisibility.
pub fn area_map(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<SparseMap> {
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::Shape(format!("cannot area-average {h}x{w} to {out_h}x{out_w}")));
    }
    let (by, bx) = (h / out_h, w / out_w);
    let wgt = 1.0 / (by * bx) as f64;
    let mut entries = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut row = Vec::with_capacity(by * bx);
            for y in oy * by..(oy + 1) * by {
                for x in ox * bx..(ox + 1) * bx {
                    row.push(((y * w + x) as u32, wgt));
                }
            }
            entries.push(row);
        }
    }
    Ok(SparseMap::new(h * w, entries))
}

/// Resampling operators between feature resolution and image resolution.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub cells: (usize, usize),
    pub pixels: (usize, usize),
    /// Feature cells to pixels (bilinear).
    pub up: Arc<SparseMap>,
    /// Pixels to feature cells (area average).
    pub down: Arc<SparseMap>,
    /// `down ∘ up`, the feature-resolution view of an upsampled cell map.
    pub round_trip: Arc<SparseMap>,
}

impl Resampler {
    pub fn new(cells: (usize, usize), pixels: (usize, usize)) -> Result<Self> {
        let up = bilinear_map(cells.0, cells.1, pixels.0, pixels.1);
        let down = area_map(pixels.0, pixels.1, cells.0, cells.1)?;
        let round_trip = down.compose(&up);
        Ok(Self { cells, pixels, up: Arc::new(up), down: Arc::new(down), round_trip: Arc::new(round_trip) })
    }
}

// ---------------------------------------------------------------------------
// Encoder traits

pub trait ImageEncoder: Send + Sync {
    fn patch(&self) -> usize;
    fn dim(&self) -> usize;
    /// Patch rows `[cells, 3 * patch^2]` to spatial features `[cells, d]`.
    fn spatial(&self, g: &mut Graph, patches: Var) -> Var;
    fn parameters(&self) -> Vec<(&'static str, &Matrix)>;
}

pub trait AudioEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_frames(&self, spec: &Spectrogram) -> Result<FrameEmbeddingSequence>;
    fn parameters(&self) -> Vec<(&'static str, &Matrix)>;
}

pub trait TextEncoder: Send + Sync {
    fn token_dim(&self) -> usize;
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Full sequence `[L, d_tok]` to a `[1, d]` embedding.
    fn encode(&self, g: &mut Graph, tokens: Var) -> Var;
    /// Batched `encode` of `[prefix; token_b]` for each row `b` of `tokens`
    /// (`[B, d_tok]`), with a constant prefix. Returns `[B, d]`.
    fn encode_after_prefix(&self, g: &mut Graph, prefix: &Matrix, tokens: Var) -> Var;
    fn parameters(&self) -> Vec<(&'static str, &Matrix)>;
}

pub trait Grounder: Send + Sync {
    fn dim(&self) -> usize;
    /// Projects conditions `[B, d]` so that cell logits are `spatial · projectedᵀ`.
    fn project_condition(&self, g: &mut Graph, condition: Var) -> Var;
    fn parameters(&self) -> Vec<(&'static str, &Matrix)>;
}

// ---------------------------------------------------------------------------
// Toy implementations

/// Patch embedding `tanh(patch · W_e + b_e) · W_g`.
pub struct ToyImageEncoder {
    patch: usize,
    embed: Matrix,
    bias: Matrix,
    proj: Matrix,
}

impl ToyImageEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "image-encoder");
        let fan_in = 3 * cfg.patch * cfg.patch;
        Self {
            patch: cfg.patch,
            embed: rng::gaussian(&mut r, fan_in, cfg.d, 2.0 / (fan_in as f64).sqrt()),
            bias: rng::gaussian(&mut r, 1, cfg.d, 0.5),
            proj: rng::gaussian(&mut r, cfg.d, cfg.d, 1.0 / (cfg.d as f64).sqrt()),
        }
    }
}

impl ToyImageEncoder {
    /// Hidden activations `tanh(patch · W_e + b_e)` of a patch filled with one color.
    pub fn hidden_of_color(&self, rgb: [u8; 3]) -> Vec<f64> {
        let pp = self.patch * self.patch;
        let mut patch = Vec::with_capacity(3 * pp);
        for c in rgb {
            patch.extend(std::iter::repeat(c as f64 / 255.0).take(pp));
        }
        let h = Matrix::row_vector(patch).matmul(&self.embed);
        h.data().iter().zip(self.bias.data()).map(|(x, b)| (x + b).tanh()).collect()
    }

    /// Re-solves the output projection so each row of `hidden` maps exactly to
    /// the same row of `targets`, keeping `residual` times the random
    /// projection on the orthogonal complement.
    fn fit_projection(&mut self, hidden: &Matrix, targets: &Matrix, residual: f64) -> Result<()> {
        let gram = hidden.matmul(&hidden.transpose());
        let base = hidden.matmul(&self.proj);
        let mut rhs = targets.clone();
        for (r, b) in rhs.data_mut().iter_mut().zip(base.data()) {
            *r -= residual * b;
        }
        let coef = solve(&gram, &rhs)?;
        let mut proj = hidden.transpose().matmul(&coef);
        for (p, w) in proj.data_mut().iter_mut().zip(self.proj.data()) {
            *p += residual * w;
        }
        self.proj = proj;
        Ok(())
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn patch(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.proj.cols()
    }

    fn spatial(&self, g: &mut Graph, patches: Var) -> Var {
        let we = g.constant(self.embed.clone());
        let be = g.constant(self.bias.clone());
        let wp = g.constant(self.proj.clone());
        let h = g.matmul(patches, we);
        let h = g.add_row(h, be);
        let h = g.tanh(h);
        g.matmul(h, wp)
    }

    fn parameters(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("image.embed", &self.embed), ("image.bias", &self.bias), ("image.proj", &self.proj)]
    }
}

/// Framewise `tanh(log1p(|X_t|) · W + b)`; no positional terms, so frame order
/// is preserved exactly.
pub struct ToyAudioEncoder {
    weight: Matrix,
    bias: Matrix,
}

impl ToyAudioEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "audio-encoder");
        Self {
            weight: rng::gaussian(&mut r, cfg.f_bins, cfg.d_a, 1.5 / (cfg.f_bins as f64).sqrt()),
            bias: rng::gaussian(&mut r, 1, cfg.d_a, 0.1),
        }
    }
}

impl AudioEncoder for ToyAudioEncoder {
    fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn encode_frames(&self, spec: &Spectrogram) -> Result<FrameEmbeddingSequence> {
        if spec.f_bins() != self.weight.rows() {
            return Err(Error::Shape(format!(
                "audio encoder expects {} bins, got {}",
                self.weight.rows(),
                spec.f_bins()
            )));
        }
        let frames = spec.frames().map(f64::ln_1p);
        let mut h = frames.matmul(&self.weight);
        for r in 0..h.rows() {
            for (x, b) in h.row_mut(r).iter_mut().zip(self.bias.data()) {
                *x = (*x + b).tanh();
            }
        }
        FrameEmbeddingSequence::new(h)
    }

    fn parameters(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("audio.weight", &self.weight), ("audio.bias", &self.bias)]
    }
}

/// `Z = tanh(X · W_in + pos)`, output `(Z_last + mean_rows(Z)) · W_out`.
pub struct ToyTextEncoder {
    w_in: Matrix,
    pos: Matrix,
    w_out: Matrix,
}

impl ToyTextEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "text-encoder");
        Self {
            w_in: rng::gaussian(&mut r, cfg.d_tok, cfg.text_hidden, 1.5 / (cfg.d_tok as f64).sqrt()),
            pos: rng::gaussian(&mut r, cfg.max_text_len, cfg.text_hidden, 0.3),
            w_out: rng::gaussian(&mut r, cfg.text_hidden, cfg.d, 1.0 / (cfg.text_hidden as f64).sqrt()),
        }
    }

    fn pos_rows(&self, start: usize, len: usize) -> Matrix {
        let cols = self.pos.cols();
        Matrix::from_vec(len, cols, self.pos.data()[start * cols..(start + len) * cols].to_vec())
            .expect("position slice")
    }
}

impl TextEncoder for ToyTextEncoder {
    fn token_dim(&self) -> usize {
        self.w_in.rows()
    }

    fn dim(&self) -> usize {
        self.w_out.cols()
    }

    fn max_len(&self) -> usize {
        self.pos.rows()
    }

    fn encode(&self, g: &mut Graph, tokens: Var) -> Var {
        let len = g.shape(tokens).0;
        assert!(len >= 1 && len <= self.max_len(), "sequence length out of range");
        let w_in = g.constant(self.w_in.clone());
        let w_out = g.constant(self.w_out.clone());
        let h = g.matmul(tokens, w_in);
        let h = g.add_const(h, &self.pos_rows(0, len));
        let z = g.tanh(h);
        let last = g.row(z, len - 1);
        let total = g.col_sums(z);
        let ctx = g.scale(total, 1.0 / len as f64);
        let pooled = g.add(last, ctx);
        g.matmul(pooled, w_out)
    }

    fn encode_after_prefix(&self, g: &mut Graph, prefix: &Matrix, tokens: Var) -> Var {
        let lp = prefix.rows();
        let len = lp + 1;
        assert!(len <= self.max_len(), "sequence length out of range");
        let batch = g.shape(tokens).0;
        // Prefix rows are constant, so their hidden states are too.
        let mut zp = prefix.matmul(&self.w_in);
        let pos_p = self.pos_rows(0, lp);
        let mut prefix_sum = vec![0.0; zp.cols()];
        for r in 0..lp {
            for ((x, p), s) in zp.row_mut(r).iter_mut().zip(pos_p.row(r)).zip(prefix_sum.iter_mut()) {
                *x = (*x + p).tanh();
                *s += *x;
            }
        }
        let w_in = g.constant(self.w_in.clone());
        let w_out = g.constant(self.w_out.clone());
        let h = g.matmul(tokens, w_in);
        let pos_last = g.constant(self.pos_rows(lp, 1));
        let h = g.add_row(h, pos_last);
        let z_last = g.tanh(h);
        let scaled = g.scale(z_last, 1.0 + 1.0 / len as f64);
        let ctx = Matrix::row_vector(prefix_sum.iter().map(|s| s / len as f64).collect());
        let mut ctx_rows = Matrix::zeros(batch, ctx.cols());
        for r in 0..batch {
            ctx_rows.row_mut(r).copy_from_slice(ctx.data());
        }
        let pooled = g.add_const(scaled, &ctx_rows);
        g.matmul(pooled, w_out)
    }

    fn parameters(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("text.w_in", &self.w_in), ("text.pos", &self.pos), ("text.w_out", &self.w_out)]
    }
}

/// Cell logit `⟨P · feature, condition⟩`.
pub struct ToyGrounder {
    proj: Matrix,
}

impl ToyGrounder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "grounder");
        Self { proj: rng::gaussian(&mut r, cfg.d, cfg.d, 1.0 / (cfg.d as f64).sqrt()) }
    }

    /// Plain dense similarity `⟨feature, condition⟩`.
    pub fn identity(d: usize) -> Self {
        let mut proj = Matrix::zeros(d, d);
        for i in 0..d {
            proj.set(i, i, 1.0);
        }
        Self { proj }
    }
}

impl Grounder for ToyGrounder {
    fn dim(&self) -> usize {
        self.proj.rows()
    }

    fn project_condition(&self, g: &mut Graph, condition: Var) -> Var {
        // ⟨P f, c⟩ = f · (Pᵀ c) = f · (cᵀ P)ᵀ
        let p = g.constant(self.proj.clone());
        g.matmul(condition, p)
    }

    fn parameters(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("grounder.proj", &self.proj)]
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Word token table for the text encoder: every word gets a seeded embedding.
pub struct Vocabulary {
    seed: u64,
    d_tok: usize,
    overrides: HashMap<String, Vec<f64>>,
}

impl Vocabulary {
    pub fn new(seed: u64, d_tok: usize) -> Self {
        Self { seed, d_tok, overrides: HashMap::new() }
    }

    pub fn insert(&mut self, word: &str, embedding: Vec<f64>) {
        assert_eq!(embedding.len(), self.d_tok);
        self.overrides.insert(word.to_string(), embedding);
    }

    pub fn token(&self, word: &str) -> Vec<f64> {
        if let Some(e) = self.overrides.get(word) {
            return e.clone();
        }
        let mut r = rng::stream(self.seed, &format!("word:{word}"));
        rng::gaussian(&mut r, 1, self.d_tok, 1.0 / (self.d_tok as f64).sqrt()).into_data()
    }

    /// Mean token of the words in `text` (bag of tokens).
    pub fn bag(&self, text: &str) -> Result<Vec<f64>> {
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::InvalidInput("text has no words".into()));
        }
        let mut out = vec![0.0; self.d_tok];
        for w in &ws {
            for (o, v) in out.iter_mut().zip(self.token(w)) {
                *o += v / ws.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn tokens(&self, words: &[&str]) -> Matrix {
        let rows: Vec<Vec<f64>> = words.iter().map(|w| self.token(w)).collect();
        Matrix::from_rows(&rows).expect("uniform token width")
    }

    fn fingerprint_into(&self, h: &mut Sha256) {
        let mut keys: Vec<&String> = self.overrides.keys().collect();
        keys.sort();
        for k in keys {
            h.update(k.as_bytes());
            for v in &self.overrides[k] {
                h.update(v.to_le_bytes());
            }
        }
    }
}

/// Lowercase words with surrounding punctuation stripped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------
// Stack

/// Magnitude STFT with a periodic Hann window of `n_fft` samples and no centering.
/// Frame count is `1 + (n - n_fft) / hop` for `n >= n_fft`; shorter clips are
/// zero-padded to one frame.
pub struct SpectrogramFrontEnd {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
}

impl SpectrogramFrontEnd {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let window = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
            .collect();
        Self { n_fft, hop, window }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn f_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples <= self.n_fft {
            1
        } else {
            1 + (n_samples - self.n_fft) / self.hop
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn compute(&self, clip: &AudioClipSample) -> Result<Spectrogram> {
        let x = clip.samples();
        if x.is_empty() {
            return Err(Error::InvalidInput("audio clip is empty".into()));
        }
        let frames = self.frame_count(x.len());
        let bins = self.f_bins();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(self.n_fft);
        let mut values = Matrix::zeros(bins, frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = x.get(start + i).copied().unwrap_or(0.0);
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                values.set(f, t, buf[f].norm());
            }
        }
        Spectrogram::new(values)
    }
}

/// All frozen components plus the word table.
pub struct FrozenStack {
    config: EncoderConfig,
    pub image: Box<dyn ImageEncoder>,
    pub frontend: SpectrogramFrontEnd,
    pub audio: Box<dyn AudioEncoder>,
    pub text: Box<dyn TextEncoder>,
    pub grounder: Box<dyn Grounder>,
    pub vocab: Vocabulary,
    resamplers: Mutex<HashMap<(usize, usize), Arc<Resampler>>>,
}

impl FrozenStack {
    pub fn toy(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut image = ToyImageEncoder::new(config);
        let text = ToyTextEncoder::new(config);
        let vocab = Vocabulary::new(rng::derive_seed(config.seed, "vocabulary"), config.d_tok);
        let grounder = if config.aligned {
            align_palette(&mut image, &text, &vocab, config)?;
            ToyGrounder::identity(config.d)
        } else {
            ToyGrounder::new(config)
        };
        Ok(Self {
            config: config.clone(),
            image: Box::new(image),
            frontend: SpectrogramFrontEnd::new(config.n_fft(), config.hop),
            audio: Box::new(ToyAudioEncoder::new(config)),
            text: Box::new(text),
            grounder: Box::new(grounder),
            vocab,
            resamplers: Mutex::new(HashMap::new()),
        })
    }

    /// Text embedding of `prefix + bag(text)`, the same route the caption and
    /// class-text paths take.
    pub fn concept_embedding(&self, text: &str) -> Result<EmbeddingVector> {
        let prefix = prefix_tokens(&self.vocab);
        let mut g = Graph::new();
        let t = g.constant(Matrix::row_vector(self.vocab.bag(text)?));
        let e = self.text.encode_after_prefix(&mut g, &prefix, t);
        EmbeddingVector::new(g.value(e).data().to_vec())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn patch(&self) -> usize {
        self.image.patch()
    }

    /// Feature grid for an image of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch();
        if height % p != 0 || width % p != 0 {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is not a multiple of patch {p}"
            )));
        }
        Ok((height / p, width / p))
    }

    pub fn resampler(&self, height: usize, width: usize) -> Result<Arc<Resampler>> {
        let mut cache = self.resamplers.lock().expect("resampler cache poisoned");
        if let Some(r) = cache.get(&(height, width)) {
            return Ok(Arc::clone(r));
        }
        let r = Arc::new(Resampler::new(self.grid(height, width)?, (height, width))?);
        cache.insert((height, width), Arc::clone(&r));
        Ok(r)
    }

    /// Global embedding and spatial map of an image.
    pub fn encode_image(&self, image: &ImageSample) -> Result<(EmbeddingVector, SpatialFeatureMap)> {
        let (gh, gw) = self.grid(image.height(), image.width())?;
        let patches = patchify(image.pixels(), 3, image.height(), image.width(), self.patch(), None);
        let mut g = Graph::new();
        let p = g.constant(patches);
        let s = self.image.spatial(&mut g, p);
        let spatial = g.value(s).clone();
        let global = global_pool(&spatial);
        Ok((EmbeddingVector::new(global)?, SpatialFeatureMap::new(gh, gw, spatial)?))
    }

    pub fn compute_spectrogram(&self, clip: &AudioClipSample) -> Result<Spectrogram> {
        self.frontend.compute(clip)
    }

    pub fn encode_audio_frames(&self, spec: &Spectrogram) -> Result<FrameEmbeddingSequence> {
        self.audio.encode_frames(spec)
    }

    pub fn encode_text_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddingVector> {
        if tokens.token_embeddings().cols() != self.text.token_dim() {
            return Err(Error::Shape("token width does not match the text encoder".into()));
        }
        if tokens.len() > self.text.max_len() {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds the maximum {}",
                tokens.len(),
                self.text.max_len()
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(tokens.token_embeddings().clone());
        let e = self.text.encode(&mut g, t);
        EmbeddingVector::new(g.value(e).data().to_vec())
    }

    /// Grounder logits at image resolution (`pixels`), computed per feature cell
    /// and bilinearly upsampled.
    pub fn ground(
        &self,
        spatial: &SpatialFeatureMap,
        condition: &EmbeddingVector,
        pixels: (usize, usize),
    ) -> Result<GrounderMap> {
        if condition.dim() != self.grounder.dim() || spatial.channels() != self.grounder.dim() {
            return Err(Error::Shape(format!(
                "grounder expects dimension {}, got condition {} and features {}",
                self.grounder.dim(),
                condition.dim(),
                spatial.channels()
            )));
        }
        let cells = self.ground_cells(spatial, condition)?;
        let rs = self.resampler(pixels.0, pixels.1)?;
        if rs.cells != (spatial.height(), spatial.width()) {
            return Err(Error::Shape("feature grid does not match the output resolution".into()));
        }
        let mut out = vec![0.0; pixels.0 * pixels.1];
        rs.up.apply(&cells, &mut out);
        GrounderMap::new(pixels.0, pixels.1, out)
    }

    /// Grounder logits at feature resolution, cell-major.
    pub fn ground_cells(&self, spatial: &SpatialFeatureMap, condition: &EmbeddingVector) -> Result<Vec<f64>> {
        if condition.dim() != self.grounder.dim() || spatial.channels() != self.grounder.dim() {
            return Err(Error::Shape("grounder dimension mismatch".into()));
        }
        let mut g = Graph::new();
        let c = g.constant(condition.as_row());
        let u = self.grounder.project_condition(&mut g, c);
        let s = g.constant(spatial.cells().clone());
        let ut = g.transpose(u);
        let l = g.matmul(s, ut);
        Ok(g.value(l).data().to_vec())
    }

    /// SHA-256 over every frozen table, in a fixed order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut params = self.image.parameters();
        params.extend(self.audio.parameters());
        params.extend(self.text.parameters());
        params.extend(self.grounder.parameters());
        for (name, m) in params {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        for w in self.frontend.window() {
            h.update(w.to_le_bytes());
        }
        self.vocab.fingerprint_into(&mut h);
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn prefix_tokens(vocab: &Vocabulary) -> Matrix {
    let words: Vec<&str> = lexicon::PROMPT_PREFIX.split_whitespace().collect();
    vocab.tokens(&words)
}

/// Closed-form stand-in for image-text pretraining. For every class in the
/// lexicon, the text embedding `τ_c` of its object name is computed; image
/// features of a patch in class color `c'` are then pinned to the vector whose
/// inner product with `τ_c` is `+margin` when `c = c'` and `−margin`
/// otherwise. Background patches score `−margin` against every concept and
/// masked-out (black) patches map to a nonzero vector scoring zero against
/// every concept.
fn align_palette(
    image: &mut ToyImageEncoder,
    text: &ToyTextEncoder,
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
) -> Result<()> {
    let n = MAX_CLASSES;
    let concepts: Vec<Vec<f64>> =
        (0..n).map(|c| vocab.bag(&lexicon::class_info(c).object_name())).collect::<Result<_>>()?;
    let mut g = Graph::new();
    let t = g.constant(Matrix::from_rows(&concepts)?);
    let e = text.encode_after_prefix(&mut g, &prefix_tokens(vocab), t);
    let txt = g.value(e).clone();
    // Rows of `dual` are biorthogonal to the concept embeddings.
    let dual = solve(&txt.matmul(&txt.transpose()), &txt)?;
    let m = cfg.align_margin;
    let mut y = Matrix::zeros(n + 2, n);
    for r in 0..n {
        for c in 0..n {
            y.set(r, c, if r == c { m } else { -m });
        }
    }
    for c in 0..n {
        y.set(n, c, -m);
    }
    let mut targets = y.matmul(&dual);
    let neutral = neutral_direction(&txt, cfg.seed)?;
    let scale = targets.row(n).iter().map(|v| v * v).sum::<f64>().sqrt();
    for (t, e) in targets.row_mut(n + 1).iter_mut().zip(&neutral) {
        *t = scale * e;
    }
    let mut palette: Vec<[u8; 3]> = (0..n).map(|c| lexicon::class_info(c).color).collect();
    palette.push(BACKGROUND);
    palette.push(MASKED);
    let hidden: Vec<Vec<f64>> = palette.iter().map(|&c| image.hidden_of_color(c)).collect();
    image.fit_projection(&Matrix::from_rows(&hidden)?, &targets, cfg.align_residual)
}

/// Unit vector orthogonal to every row of `rows`, from a seeded random start.
fn neutral_direction(rows: &Matrix, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, "neutral-direction");
    let mut v = rng::gaussian(&mut r, 1, rows.cols(), 1.0).into_data();
    let coef = solve(&rows.matmul(&rows.transpose()), &rows.matmul(&Matrix::row_vector(v.clone()).transpose()))?;
    let inside = coef.transpose().matmul(rows);
    for (x, p) in v.iter_mut().zip(inside.data()) {
        *x -= p;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::DegenerateParameter("no direction orthogonal to the concept span".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Solves `a · x = b` for square `a` by Gauss-Jordan elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Shape("solve needs a square system".into()));
    }
    let m = b.cols();
    let mut a = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
            .expect("non-empty range");
        let p = a.get(pivot, col);
        if p.abs() < 1e-12 {
            return Err(Error::DegenerateParameter("singular linear system".into()));
        }
        if pivot != col {
            for k in 0..n {
                let (u, v) = (a.get(col, k), a.get(pivot, k));
                a.set(col, k, v);
                a.set(pivot, k, u);
            }
            for k in 0..m {
                let (u, v) = (x.get(col, k), x.get(pivot, k));
                x.set(col, k, v);
                x.set(pivot, k, u);
            }
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col) / p;
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a.set(r, k, a.get(r, k) - f * a.get(col, k));
            }
            for k in 0..m {
                x.set(r, k, x.get(r, k) - f * x.get(col, k));
            }
        }
    }
    for r in 0..n {
        let p = a.get(r, r);
        for k in 0..m {
            x.set(r, k, x.get(r, k) / p);
        }
    }
    Ok(x)
}

/// Mean over cells of a `[cells, d]` feature matrix.
pub fn global_pool(spatial: &Matrix) -> Vec<f64> {
    let n = spatial.rows() as f64;
    let mut out = vec![0.0; spatial.cols()];
    for r in 0..spatial.rows() {
        for (o, x) in out.iter_mut().zip(spatial.row(r)) {
            *o += x / n;
        }
    }
    out
}

pub type StackFactory = fn(&EncoderConfig) -> Result<FrozenStack>;

/// Name → constructor table for frozen stacks. Only `toy` ships here; adapters
/// for pretrained weights register under their own names.
pub struct EncoderRegistry {
    factories: HashMap<String, StackFactory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut factories: HashMap<String, StackFactory> = HashMap::new();
        factories.insert("toy".into(), FrozenStack::toy);
        Self { factories }
    }
}

impl EncoderRegistry {
    pub fn register(&mut self, name: &str, factory: StackFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn build(&self, config: &EncoderConfig) -> Result<FrozenStack> {
        let f = self
            .factories
            .get(&config.kind)
            .ok_or_else(|| Error::Config(format!("unknown encoder kind '{}'", config.kind)))?;
        f(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig { patch: 4, image_size: 16, f_bins: 33, hop: 16, ..EncoderConfig::default() }
    }

    #[test]
    fn image_encoder_is_deterministic_and_shaped() {
        let stack = FrozenStack::toy(&EncoderConfig::default()).unwrap();
        let img = ImageSample::filled(352, 352, [0.0; 3]).unwrap();
        let (g1, s1) = stack.encode_image(&img).unwrap();
        let (g2, s2) = stack.encode_image(&img).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
        assert_eq!((s1.channels(), s1.height(), s1.width()), (64, 22, 22));
        assert_eq!(g1.dim(), stack.text.dim());
    }

    #[test]
    fn one_pixel_changes_embedding() {
        let stack = FrozenStack::toy(&small()).unwrap();
        let a = ImageSample::filled(16, 16, [0.3, 0.4, 0.5]).unwrap();
        let mut b = a.clone();
        b.set(1, 5, 7, 0.9);
        let (ea, _) = stack.encode_image(&a).unwrap();
        let (eb, _) = stack.encode_image(&b).unwrap();
        assert_ne!(ea.values(), eb.values());
    }

    #[test]
    fn image_rejects_bad_pixels() {
        assert!(ImageSample::new(2, 2, vec![0.5; 11]).is_err());
        assert!(ImageSample::new(1, 1, vec![0.5, 1.5, 0.0]).is_err());
        assert!(ImageSample::new(0, 1, vec![]).is_err());
        let stack = FrozenStack::toy(&small()).unwrap();
        let odd = ImageSample::filled(10, 10, [0.1; 3]).unwrap();
        assert!(stack.encode_image(&odd).is_err());
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let fe = SpectrogramFrontEnd::new(512, 160);
        let clip = AudioClipSample::new(vec![0.0; 4000], 16000).unwrap();
        let s = fe.compute(&clip).unwrap();
        assert!(s.values().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.f_bins(), 257);
        assert!(fe.compute(&AudioClipSample::new(vec![], 16000).unwrap()).is_err());
    }

    #[test]
    fn frame_count_formula() {
        let fe = SpectrogramFrontEnd::new(512, 160);
        // 10 s at 16 kHz: 1 + (160000 - 512) / 160 = 997
        assert_eq!(fe.frame_count(160_000), 997);
        let clip = AudioClipSample::new(vec![0.0; 160_000], 16000).unwrap();
        assert_eq!(fe.compute(&clip).unwrap().t_frames(), 997);
        assert_eq!(fe.frame_count(100), 1);
    }

    #[test]
    fn sinusoid_peaks_in_its_bin_and_matches_direct_dft() {
        let fe = SpectrogramFrontEnd::new(512, 160);
        let f0 = 1250.0;
        let n = 2048;
        let x: Vec<f64> = (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16000.0).sin()).collect();
        let clip = AudioClipSample::new(x.clone(), 16000).unwrap();
        let s = fe.compute(&clip).unwrap();
        let expected_bin = (f0 * 512.0 / 16000.0_f64).round() as usize;
        for t in 0..s.t_frames() {
            let argmax = (0..s.f_bins())
                .max_by(|&a, &b| s.values().get(a, t).partial_cmp(&s.values().get(b, t)).unwrap())
                .unwrap();
            assert_eq!(argmax, expected_bin);
        }
        // Direct DFT of frame 1.
        let start = 160;
        for k in [0usize, 10, expected_bin, 100, 256] {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..512 {
                let v = x[start + i] * fe.window()[i];
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / 512.0;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let mag = (re * re + im * im).sqrt();
            assert!((mag - s.values().get(k, 1)).abs() < 1e-8);
        }
    }

    #[test]
    fn audio_frames_follow_permutation() {
        let stack = FrozenStack::toy(&small()).unwrap();
        let spec = Matrix::from_vec(33, 3, (0..99).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let spec = Spectrogram::new(spec).unwrap();
        let a = stack.encode_audio_frames(&spec).unwrap();
        let b = stack.encode_audio_frames(&spec).unwrap();
        assert_eq!(a, b);
        let perm = [2usize, 0, 1];
        let mut permuted = Matrix::zeros(33, 3);
        for f in 0..33 {
            for (t, &p) in perm.iter().enumerate() {
                permuted.set(f, t, spec.values().get(f, p));
            }
        }
        let c = stack.encode_audio_frames(&Spectrogram::new(permuted).unwrap()).unwrap();
        for (t, &p) in perm.iter().enumerate() {
            assert_eq!(c.values().row(t), a.values().row(p));
        }
        let one = Spectrogram::new(Matrix::filled(33, 1, 0.2)).unwrap();
        assert_eq!(stack.encode_audio_frames(&one).unwrap().len(), 1);
    }

    #[test]
    fn text_encoder_basic_contracts() {
        let stack = FrozenStack::toy(&small()).unwrap();
        let toks = stack.vocab.tokens(&["a", "photo", "of", "a", "dog"]);
        let seq = TokenSequence::new(toks.clone(), 4).unwrap();
        let e1 = stack.encode_text_tokens(&seq).unwrap();
        let e2 = stack.encode_text_tokens(&seq).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), stack.dim());
        let mut bumped = toks.clone();
        bumped.set(4, 0, bumped.get(4, 0) + 1e-3);
        let e3 = stack.encode_text_tokens(&TokenSequence::new(bumped, 4).unwrap()).unwrap();
        assert_ne!(e1, e3);
        assert!(TokenSequence::new(Matrix::zeros(0, 32), 0).is_err());
    }

    #[test]
    fn prefix_fast_path_matches_full_sequence() {
        let stack = FrozenStack::toy(&small()).unwrap();
        let prefix = stack.vocab.tokens(&["a", "photo", "of", "a"]);
        let toks = stack.vocab.tokens(&["dog", "cat"]);
        let mut g = Graph::new();
        let t = g.constant(toks.clone());
        let fast = stack.text.encode_after_prefix(&mut g, &prefix, t);
        let fast = g.value(fast).clone();
        for b in 0..2 {
            let mut rows: Vec<Vec<f64>> = (0..4).map(|r| prefix.row(r).to_vec()).collect();
            rows.push(toks.row(b).to_vec());
            let seq = TokenSequence::new(Matrix::from_rows(&rows).unwrap(), 4).unwrap();
            let full = stack.encode_text_tokens(&seq).unwrap();
            for (x, y) in full.values().iter().zip(fast.row(b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grounder_zero_and_linear() {
        let stack = FrozenStack::toy(&small()).unwrap();
        let img = ImageSample::new(16, 16, (0..768).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let (_, spatial) = stack.encode_image(&img).unwrap();
        let zero = EmbeddingVector::new(vec![0.0; 64]).unwrap();
        let m0 = stack.ground(&spatial, &zero, (16, 16)).unwrap();
        assert!(m0.logits().iter().all(|&v| v == 0.0));
        let c = EmbeddingVector::new((0..64).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let c3 = EmbeddingVector::new(c.values().iter().map(|v| 2.5 * v).collect()).unwrap();
        let m1 = stack.ground(&spatial, &c, (16, 16)).unwrap();
        let m3 = stack.ground(&spatial, &c3, (16, 16)).unwrap();
        for (a, b) in m1.logits().iter().zip(m3.logits()) {
            assert!((2.5 * a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
        let bad = EmbeddingVector::new(vec![0.0; 5]).unwrap();
        assert!(stack.ground(&spatial, &bad, (16, 16)).is_err());
    }

    #[test]
    fn grounder_cells_follow_feature_permutation() {
        let stack = FrozenStack::toy(&EncoderConfig { aligned: false, ..small() }).unwrap();
        let cells = rng::gaussian(&mut rng::stream(1, "t"), 16, 64, 1.0);
        let map = SpatialFeatureMap::new(4, 4, cells.clone()).unwrap();
        let c = EmbeddingVector::new((0..64).map(|i| (i as f64).sin()).collect()).unwrap();
        let base = stack.ground_cells(&map, &c).unwrap();
        let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| cells.row(p).to_vec()).collect();
        let permuted = SpatialFeatureMap::new(4, 4, Matrix::from_rows(&rows).unwrap()).unwrap();
        let out = stack.ground_cells(&permuted, &c).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((out[i] - base[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_area_inverts_on_blocks() {
        let up = bilinear_map(4, 4, 16, 16);
        let mut out = vec![0.0; 256];
        up.apply(&[3.0; 16], &mut out);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let down = area_map(16, 16, 4, 4).unwrap();
        let mut back = vec![0.0; 16];
        down.apply(&out, &mut back);
        assert!(back.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(area_map(10, 10, 4, 4).is_err());
    }

    #[test]
    fn aligned_palette_scores_its_own_concept() {
        let cfg = small();
        let stack = FrozenStack::toy(&cfg).unwrap();
        let concept: Vec<EmbeddingVector> =
            (0..MAX_CLASSES).map(|c| stack.concept_embedding(&lexicon::class_info(c).object_name()).unwrap()).collect();
        let score = |rgb: [u8; 3], c: usize| {
            let img = ImageSample::filled(16, 16, rgb.map(|v| v as f64 / 255.0)).unwrap();
            let (_, s) = stack.encode_image(&img).unwrap();
            stack.ground_cells(&s, &concept[c]).unwrap()[0]
        };
        for c in 0..MAX_CLASSES {
            let own = lexicon::class_info(c).color;
            for k in 0..MAX_CLASSES {
                let expected = if k == c { cfg.align_margin } else { -cfg.align_margin };
                assert!((score(own, k) - expected).abs() < 1e-6);
            }
            assert!((score(BACKGROUND, c) + cfg.align_margin).abs() < 1e-6);
            assert!(score(MASKED, c).abs() < 1e-6);
        }
        let black = ImageSample::filled(16, 16, [0.0; 3]).unwrap();
        let (_, s) = stack.encode_image(&black).unwrap();
        assert!(s.cells().data().iter().map(|v| v * v).sum::<f64>() > 1.0);
    }

    #[test]
    fn solve_matches_known_system() {
        let a = Matrix::from_vec(3, 3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0]).unwrap();
        let x = Matrix::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
        let b = a.matmul(&x);
        let got = solve(&a, &b).unwrap();
        for (u, v) in got.data().iter().zip(x.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(solve(&Matrix::zeros(2, 2), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn fingerprint_is_stable() {
        let a = FrozenStack::toy(&small()).unwrap();
        let b = FrozenStack::toy(&small()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = FrozenStack::toy(&EncoderConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
