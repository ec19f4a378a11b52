//! The trainable localizer: frozen stack + projection + mask generator, with
//! the batched objective used by training.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_tokenizer::{PromptPrefix, ProjectionParams, ProjectionVars, DEFAULT_PREFIX};
use crate::autodiff::{Graph, Matrix, PixelPlanes, Var};
use crate::encoders::{
    global_pool, AudioClipSample, EmbeddingVector, FrozenStack, GrounderMap, ImageSample, SpatialFeatureMap,
};
use crate::error::{Error, Result};
use crate::grounding::{
    feature_level_graph, image_level_graph, inference_mask, logistic_noise, masked_pool_graph, LocalizationHeatmap,
    MaskGenIParams, MaskMode, SoftThreshold,
};
use crate::losses::{
    area_regularization_graph, cosine_matrix_graph, infonce_graph, LossBreakdown, LossFlags, LossWeights,
};

/// Everything that training updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableState {
    pub projection: ProjectionParams,
    pub mask: MaskGenIParams,
}

impl TrainableState {
    pub fn init(stack: &FrozenStack, seed: u64, gumbel_temperature: f64) -> Self {
        let cfg = stack.config();
        Self {
            projection: ProjectionParams::init(cfg.d_a, cfg.d_tok, seed),
            mask: MaskGenIParams { temperature: gumbel_temperature, ..MaskGenIParams::default() },
        }
    }

    pub fn len(&self) -> usize {
        self.projection.tensors().iter().map(|m| m.len()).sum::<usize>() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Projection tensors in declaration order, then `w_hat`, then `b`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in self.projection.tensors() {
            out.extend_from_slice(m.data());
        }
        out.push(self.mask.w_hat);
        out.push(self.mask.b);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.len(), flat.len())));
        }
        let mut at = 0;
        for m in self.projection.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        self.mask.w_hat = flat[at];
        self.mask.b = flat[at + 1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.projection.is_finite() && self.mask.w_hat.is_finite() && self.mask.b.is_finite()
    }
}

/// A training/evaluation pair with its frozen features computed once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub image: Arc<PixelPlanes>,
    /// Spatial features of the unmasked image, `[cells, d]`.
    pub spatial: Matrix,
    pub grid: (usize, usize),
    /// Audio frame embeddings `[T, d_a]`.
    pub frames: Matrix,
    /// Caption embedding, when the caption pipeline produced one.
    pub caption: Option<Vec<f64>>,
}

impl PreparedSample {
    pub fn new(stack: &FrozenStack, id: &str, image: &ImageSample, clip: &AudioClipSample) -> Result<Self> {
        let (_, spatial) = stack.encode_image(image)?;
        let spec = stack.compute_spectrogram(clip)?;
        let frames = stack.encode_audio_frames(&spec)?;
        Ok(Self {
            id: id.to_string(),
            image: Arc::new(PixelPlanes {
                channels: 3,
                height: image.height(),
                width: image.width(),
                data: image.pixels().to_vec(),
            }),
            grid: (spatial.height(), spatial.width()),
            spatial: spatial.cells().clone(),
            frames: frames.values().clone(),
            caption: None,
        })
    }

    pub fn pixels(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }

    pub fn spatial_map(&self) -> SpatialFeatureMap {
        SpatialFeatureMap::new(self.grid.0, self.grid.1, self.spatial.clone()).expect("prepared features are valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub flags: LossFlags,
    pub threshold: SoftThreshold,
    pub mask_mode: MaskMode,
    /// Adds the caption-audio term for samples that carry a caption embedding.
    pub use_captions: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            threshold: SoftThreshold::default(),
            mask_mode: MaskMode::StraightThrough,
            use_captions: false,
        }
    }
}

/// Counts of the expensive intermediate objects built in one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub feature_masks: usize,
    pub feature_pooled: usize,
    pub image_masks: usize,
    pub image_reencodes: usize,
    pub caption_pairs: usize,
}

pub struct Objective {
    pub breakdown: LossBreakdown,
    pub gradient: Vec<f64>,
    pub counts: Instrumentation,
}

/// Graph handles of one objective evaluation.
pub struct Built {
    pub total: Var,
    pub acl_i: Option<Var>,
    pub acl_f: Option<Var>,
    pub reg: Option<Var>,
    pub acl_c: Option<Var>,
    pub audio: Var,
    pub params: Vec<Var>,
    pub counts: Instrumentation,
}

pub struct Model {
    pub stack: Arc<FrozenStack>,
    pub prefix: PromptPrefix,
}

impl Model {
    pub fn new(stack: Arc<FrozenStack>) -> Self {
        let prefix = PromptPrefix::from_vocab(&stack.vocab, DEFAULT_PREFIX);
        Self { stack, prefix }
    }

    fn bind(&self, g: &mut Graph, state: &TrainableState) -> (ProjectionVars, Var, Var) {
        let p = state.projection.bind(g);
        let w_hat = g.param(Matrix::scalar(state.mask.w_hat));
        let b = g.param(Matrix::scalar(state.mask.b));
        (p, w_hat, b)
    }

    /// Raw audio-driven embeddings `[B, d]` for frame sequences.
    pub fn audio_embeddings_graph(&self, g: &mut Graph, proj: &ProjectionVars, frames: &[&Matrix]) -> Result<Var> {
        let tokens = proj.pool_batch(g, frames)?;
        Ok(self.stack.text.encode_after_prefix(g, self.prefix.embeddings(), tokens))
    }

    pub fn audio_embeddings(&self, state: &TrainableState, frames: &[&Matrix]) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = state.projection.bind(&mut g);
        let a = self.audio_embeddings_graph(&mut g, &p, frames)?;
        Ok(g.value(a).clone())
    }

    pub fn audio_embedding(&self, state: &TrainableState, frames: &Matrix) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.audio_embeddings(state, &[frames])?.into_data())
    }

    /// Grounder logits for one image under one condition.
    pub fn ground(&self, sample: &PreparedSample, condition: &EmbeddingVector) -> Result<GrounderMap> {
        self.stack.ground(&sample.spatial_map(), condition, sample.pixels())
    }

    pub fn heatmap(&self, state: &TrainableState, sample: &PreparedSample) -> Result<LocalizationHeatmap> {
        self.heatmap_for_audio(state, sample, &sample.frames)
    }

    /// Heatmap of `sample`'s image conditioned on arbitrary audio frames.
    pub fn heatmap_for_audio(
        &self,
        state: &TrainableState,
        sample: &PreparedSample,
        frames: &Matrix,
    ) -> Result<LocalizationHeatmap> {
        let a = self.audio_embedding(state, frames)?;
        inference_mask(&self.ground(sample, &a)?, &state.mask)
    }

    /// Builds the full objective on a tape. Noise for image-level masks is drawn
    /// from `rng` row by row in pair order `(i, j)`.
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        state: &TrainableState,
        batch: &[&PreparedSample],
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<Built> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::InvalidInput(format!("training batch needs at least 2 pairs, got {b}")));
        }
        settings.weights.validate()?;
        state.mask.validate()?;
        let pixels = batch[0].pixels();
        if batch.iter().any(|s| s.pixels() != pixels) {
            return Err(Error::InvalidInput("all images in a batch must share one size".into()));
        }
        let rs = self.stack.resampler(pixels.0, pixels.1)?;
        let hw = rs.cells.0 * rs.cells.1;
        let n_pix = pixels.0 * pixels.1;
        let tau = settings.weights.tau;
        let flags = settings.flags;
        let mut counts = Instrumentation::default();

        let (proj, w_hat, bias) = self.bind(g, state);
        let frames: Vec<&Matrix> = batch.iter().map(|s| &s.frames).collect();
        let audio = self.audio_embeddings_graph(g, &proj, &frames)?;
        let audio_n = g.normalize_rows(audio, 1e-12);

        // Cell logits for every (image i, audio j), row i·B + j.
        let u = self.stack.grounder.project_condition(g, audio);
        let ut = g.transpose(u);
        let spatial: Vec<Var> = batch.iter().map(|s| g.constant(s.spatial.clone())).collect();
        let per_image: Vec<Var> = spatial
            .iter()
            .map(|&s| {
                let l = g.matmul(s, ut);
                g.transpose(l)
            })
            .collect();
        let cells = g.concat_rows(&per_image);
        debug_assert_eq!(g.shape(cells), (b * b, hw));

        let acl_f = if flags.acl_f {
            let down = g.sparse(cells, &rs.round_trip);
            let masks = feature_level_graph(g, down, settings.threshold);
            counts.feature_masks = b * b;
            let pooled: Vec<Var> = (0..b)
                .map(|i| {
                    let idx: Vec<usize> = (i * b..(i + 1) * b).collect();
                    let m = g.select_rows(masks, &idx);
                    masked_pool_graph(g, m, spatial[i])
                })
                .collect();
            let pooled = g.concat_rows(&pooled);
            counts.feature_pooled = g.shape(pooled).0;
            let pooled_n = g.normalize_rows(pooled, 1e-12);
            let tile: Vec<usize> = (0..b * b).map(|k| k % b).collect();
            let audio_tiled = g.select_rows(audio_n, &tile);
            let prod = g.mul(pooled_n, audio_tiled);
            let sims = g.row_sums(prod);
            let s = g.reshape(sims, b, b);
            Some(infonce_graph(g, s, tau))
        } else {
            None
        };

        let (acl_i, reg) = if flags.acl_i || flags.reg {
            let rows: Vec<usize> = if flags.reg {
                (0..b * b).collect()
            } else {
                (0..b).map(|i| i * b + i).collect()
            };
            let chosen = g.select_rows(cells, &rows);
            let logits = g.sparse(chosen, &rs.up);
            let mut noise = Matrix::zeros(rows.len(), n_pix);
            for r in 0..rows.len() {
                noise.row_mut(r).copy_from_slice(&logistic_noise(rng, n_pix));
            }
            let w = g.exp(w_hat);
            let (mask, relaxed) =
                image_level_graph(g, logits, w, bias, &noise, state.mask.temperature, settings.mask_mode);
            counts.image_masks = rows.len();
            let acl_i = if flags.acl_i {
                let embeds: Vec<Var> = (0..b)
                    .map(|i| {
                        let r = rows.iter().position(|&k| k == i * b + i).expect("positive row present");
                        let m = g.row(mask, r);
                        let patches = g.masked_patches(m, &batch[i].image, self.stack.patch());
                        let feats = self.stack.image.spatial(g, patches);
                        let sum = g.col_sums(feats);
                        g.scale(sum, 1.0 / hw as f64)
                    })
                    .collect();
                counts.image_reencodes = embeds.len();
                let v = g.concat_rows(&embeds);
                let s = cosine_matrix_graph(g, v, audio);
                Some(infonce_graph(g, s, tau))
            } else {
                None
            };
            let reg = flags.reg.then(|| area_regularization_graph(g, relaxed, b, &settings.weights));
            (acl_i, reg)
        } else {
            (None, None)
        };

        let acl_c = if settings.use_captions {
            let idx: Vec<usize> = (0..b).filter(|&i| batch[i].caption.is_some()).collect();
            counts.caption_pairs = idx.len();
            if idx.len() >= 2 {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| batch[i].caption.clone().expect("filtered")).collect();
                let c = g.constant(Matrix::from_rows(&rows)?);
                let a = g.select_rows(audio, &idx);
                let s = cosine_matrix_graph(g, c, a);
                Some(infonce_graph(g, s, tau))
            } else {
                Some(g.constant(Matrix::scalar(0.0)))
            }
        } else {
            None
        };

        let w = &settings.weights;
        let weighted: Vec<Var> = [(acl_i, w.lambda_acl_i), (acl_f, w.lambda_acl_f), (reg, w.lambda_reg), (acl_c, w.lambda_acl_c)]
            .into_iter()
            .filter_map(|(t, l)| t.map(|t| g.scale(t, l)))
            .collect();
        let total = match weighted.split_first() {
            None => g.constant(Matrix::scalar(0.0)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
        };
        let mut params = proj.all().to_vec();
        params.push(w_hat);
        params.push(bias);
        Ok(Built { total, acl_i, acl_f, reg, acl_c, audio, params, counts })
    }

    /// Loss breakdown and flattened gradient (same order as [`TrainableState::flatten`]).
    pub fn objective<R: Rng + ?Sized>(
        &self,
        state: &TrainableState,
        batch: &[&PreparedSample],
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<Objective> {
        let mut g = Graph::new();
        let built = self.build(&mut g, state, batch, settings, rng)?;
        let read = |v: Option<Var>| v.map(|v| g.value(v).item());
        let breakdown = LossBreakdown {
            acl_i: read(built.acl_i),
            acl_f: read(built.acl_f),
            reg: read(built.reg),
            acl_c: read(built.acl_c),
            total: g.value(built.total).item(),
        };
        let grads = g.backward(built.total);
        let mut gradient = Vec::with_capacity(state.len());
        for &p in &built.params {
            let shape = g.shape(p);
            gradient.extend_from_slice(grads.get_or_zeros(p, shape).data());
        }
        Ok(Objective { breakdown, gradient, counts: built.counts })
    }

    /// Loss value only.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        state: &TrainableState,
        batch: &[&PreparedSample],
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let built = self.build(&mut g, state, batch, settings, rng)?;
        let read = |v: Option<Var>| v.map(|v| g.value(v).item());
        Ok(LossBreakdown {
            acl_i: read(built.acl_i),
            acl_f: read(built.acl_f),
            reg: read(built.reg),
            acl_c: read(built.acl_c),
            total: g.value(built.total).item(),
        })
    }
}

/// Global embedding of a spatial feature matrix as an [`EmbeddingVector`].
pub fn image_embedding(spatial: &Matrix) -> EmbeddingVector {
    EmbeddingVector::new(global_pool(spatial)).expect("finite features")
}
