//! Experiment configuration, the training loop, checkpoints, evaluation per
//! task, single-pair and multi-source localization, and the loss ablation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Graph, Matrix};
use crate::encoders::{AudioClipSample, EmbeddingVector, EncoderConfig, FrozenStack, ImageSample};
use crate::error::{Error, Result};
use crate::grounding::{inference_mask, LocalizationHeatmap};
use crate::lexicon::class_info;
use crate::llm_guidance::{caption_embedding, CaptionJob, CaptionStore, PrecomputeReport, ProviderConfig, SceneMeta};
use crate::losses::{AblationRow, LossBreakdown, LossFlags, LossWeights};
use crate::metrics::{
    detection_pr, interactive_argmax_rate, interactive_metrics, localization_report, loc_acc, multisource_metrics,
    EvalRecord, MetricReport, MultiSourceRecord, ThresholdMode,
};
use crate::model::{Model, ObjectiveSettings, PreparedSample, TrainableState};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::synthdata::{DatasetConfig, Pairing, Scene, Variant};

pub const CHECKPOINT_FORMAT: &str = "avclip-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Environment overrides take the form `AVCLIP_<SECTION>_<FIELD>=<json or string>`.
pub const ENV_PREFIX: &str = "AVCLIP_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub gumbel_temperature: f64,
    pub flags: LossFlags,
    pub llm_enabled: bool,
    /// Writes a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Linear learning-rate warmup; off by default.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            gumbel_temperature: 0.5,
            flags: LossFlags::default(),
            llm_enabled: false,
            checkpoint_every: 0,
            grad_clip: None,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config("gumbel_temperature must be positive".into()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub delta: f64,
    pub beta2: f64,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, delta: 0.5, beta2: 0.3, split: "test".into() }
    }
}

impl EvalConfig {
    pub fn fixed(&self) -> ThresholdMode {
        ThresholdMode::Fixed { threshold: self.threshold }
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed().validate()?;
        ThresholdMode::Adaptive { delta: self.delta }.validate()?;
        if !(self.beta2 > 0.0) {
            return Err(Error::Config("beta2 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_root: PathBuf::from("data"), out_dir: PathBuf::from("runs") }
    }
}

/// Everything an experiment needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub llm: ProviderConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        Self {
            encoder: EncoderConfig { image_size: data.image_size, patch: 4, ..EncoderConfig::default() },
            data,
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            llm: ProviderConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        self.llm.validate()?;
        if self.encoder.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "encoder.image_size {} differs from data.image_size {}",
                self.encoder.image_size, self.data.image_size
            )));
        }
        Ok(())
    }

    /// Reads `path` (or the defaults), applies `AVCLIP_*` environment overrides and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::format(p, e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(base, std::env::vars())
    }

    pub fn from_value(value: Value, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let parsed: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        let mut full = serde_json::to_value(&parsed)?;
        apply_env_overrides(&mut full, env)?;
        let cfg: Self = serde_json::from_value(full).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stack(&self) -> Result<FrozenStack> {
        FrozenStack::toy(&self.encoder)
    }

    pub fn settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            weights: self.loss,
            flags: self.train.flags,
            use_captions: self.train.llm_enabled,
            ..ObjectiveSettings::default()
        }
    }
}

/// Sets `section.field` for every `AVCLIP_SECTION_FIELD` variable. Values parse
/// as JSON when they can and are taken as strings otherwise.
pub fn apply_env_overrides(config: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let rest = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        let (section, field) =
            rest.split_once('_').ok_or_else(|| Error::Config(format!("{key}: expected {ENV_PREFIX}<SECTION>_<FIELD>")))?;
        let slot = config
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::Config(format!("{key}: unknown setting {section}.{field}")))?;
        *slot = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Data preparation

/// Frozen features for every scene, in order.
pub fn prepare(stack: &FrozenStack, scenes: &[&Scene]) -> Result<Vec<PreparedSample>> {
    scenes.iter().map(|s| PreparedSample::new(stack, &s.record.id, &s.image, &s.audio)).collect()
}

/// Copies caption embeddings from `store` onto matching samples; returns how many got one.
pub fn attach_captions(samples: &mut [PreparedSample], store: &CaptionStore) -> usize {
    let mut n = 0;
    for s in samples.iter_mut() {
        s.caption = store.embedding(&s.id).map(|e| e.values().to_vec());
        n += s.caption.is_some() as usize;
    }
    n
}

pub fn caption_jobs<'a>(scenes: &[&'a Scene]) -> Vec<CaptionJob<'a>> {
    scenes
        .iter()
        .map(|s| CaptionJob {
            sample_id: &s.record.id,
            image: &s.image,
            audio: &s.audio,
            meta: SceneMeta::from_record(&s.record),
        })
        .collect()
}

/// Runs the caption pipeline over `scenes`, reusing and updating the cache at `cfg.cache_path`.
pub fn precompute(stack: &FrozenStack, scenes: &[&Scene], cfg: &ProviderConfig) -> Result<(CaptionStore, PrecomputeReport)> {
    let mut store = CaptionStore::open(&cfg.cache_path)?;
    let report = crate::llm_guidance::precompute_with_config(stack, &caption_jobs(scenes), cfg, &mut store)?;
    store.save(&cfg.cache_path)?;
    Ok((store, report))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub state: TrainableState,
    pub optimizer: AdamState,
    pub config: ExperimentConfig,
    /// Fingerprint of the frozen stack the state was trained against.
    pub stack_fingerprint: String,
}

impl Checkpoint {
    /// The untrained starting point for `config`.
    pub fn init(stack: &FrozenStack, config: &ExperimentConfig) -> Self {
        let state = TrainableState::init(stack, config.train.seed, config.train.gumbel_temperature);
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: 0,
            optimizer: AdamState::new(state.len()),
            state,
            config: config.clone(),
            stack_fingerprint: stack.fingerprint(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if c.optimizer.m.len() != c.state.len() {
            return Err(Error::InvalidInput("optimizer state does not match the parameters".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    /// Rejects a checkpoint trained against different frozen weights.
    pub fn check_stack(&self, stack: &FrozenStack) -> Result<()> {
        if self.stack_fingerprint != stack.fingerprint() {
            return Err(Error::InvalidInput("checkpoint was trained against a different frozen stack".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Where a training run writes its artifacts. Every path is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Directory for the diagnostic dump written when a loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    batch: Vec<&'a str>,
    losses: &'a LossBreakdown,
    gradient_finite: bool,
    state: &'a TrainableState,
}

/// Sample order of one epoch; depends only on the seed and the epoch index.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("epoch-{epoch}")));
    order
}

fn scheduled_lr(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps > 0 && (step as usize) < cfg.warmup_steps {
        cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr
    }
}

/// Continues `start` until `until` optimizer steps have run in total (or the
/// configured budget ends). Batches and mask noise depend only on the seed and
/// step index, so a resumed run matches an uninterrupted one step for step.
pub fn train(
    model: &Model,
    data: &[PreparedSample],
    start: Checkpoint,
    until: Option<usize>,
    outputs: &TrainOutputs,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let cfg = start.config.clone();
    cfg.validate()?;
    start.check_stack(&model.stack)?;
    let tc = &cfg.train;
    let per_epoch = tc.steps_per_epoch(data.len());
    if per_epoch == 0 {
        return Err(Error::InvalidInput(format!(
            "{} training samples cannot fill a batch of {}",
            data.len(),
            tc.batch_size
        )));
    }
    if tc.llm_enabled && data.iter().all(|s| s.caption.is_none()) {
        return Err(Error::InvalidInput("llm guidance is enabled but no sample has a caption".into()));
    }
    let total = until.map_or(tc.total_steps(data.len()), |u| u.min(tc.total_steps(data.len()))) as u64;
    let settings = cfg.settings();
    // With every term disabled there is nothing to optimize, so weight decay is not applied either.
    let active = settings.flags.acl_i || settings.flags.acl_f || settings.flags.reg || settings.use_captions;
    let before = model.stack.fingerprint();
    let mut log_writer = match &outputs.log {
        Some(p) => {
            let f = fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let mut ckpt = start;
    let mut logs = Vec::new();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while ckpt.step < total {
        let step = ckpt.step;
        let epoch = step / per_epoch as u64;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(tc.seed, epoch, data.len())));
        }
        let k = (step % per_epoch as u64) as usize;
        let idx = &order.as_ref().expect("order set above").1[k * tc.batch_size..(k + 1) * tc.batch_size];
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &data[i]).collect();
        let mut noise = rng::stream(tc.seed, &format!("step-{step}"));
        let mut obj = model.objective(&ckpt.state, &batch, &settings, &mut noise)?;
        let grad_finite = obj.gradient.iter().all(|g| g.is_finite());
        if !obj.breakdown.total.is_finite() || !grad_finite {
            let dump = NanDump {
                step,
                batch: batch.iter().map(|s| s.id.as_str()).collect(),
                losses: &obj.breakdown,
                gradient_finite: grad_finite,
                state: &ckpt.state,
            };
            let mut detail = format!("batch {:?}, losses {:?}", dump.batch, obj.breakdown);
            if let Some(dir) = &outputs.dump_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(format!("nan_dump_step{step}.json"));
                fs::write(&p, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                detail = format!("{detail}; dump written to {}", p.display());
            }
            return Err(Error::NonFiniteLoss { step, detail });
        }
        if let Some(clip) = tc.grad_clip {
            let norm = obj.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                obj.gradient.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let lr = scheduled_lr(tc, step);
        if active {
            let adam = AdamConfig { lr, ..tc.adam() };
            let mut flat = ckpt.state.flatten();
            ckpt.optimizer.step(&adam, &mut flat, &obj.gradient)?;
            ckpt.state.unflatten(&flat)?;
        }
        ckpt.step += 1;
        let entry = StepLog { step, epoch, lr, losses: obj.breakdown };
        if let Some((p, w)) = log_writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(*p, e))?;
        }
        logs.push(entry);
        if let (Some(p), true) = (&outputs.checkpoint, tc.checkpoint_every > 0) {
            if ckpt.step % tc.checkpoint_every as u64 == 0 {
                ckpt.save(p)?;
            }
        }
    }
    if let Some((p, w)) = log_writer.as_mut() {
        w.flush().map_err(|e| Error::io(*p, e))?;
    }
    if model.stack.fingerprint() != before {
        return Err(Error::InvalidInput("frozen parameters changed during training".into()));
    }
    if let Some(p) = &outputs.checkpoint {
        ckpt.save(p)?;
    }
    Ok((ckpt, logs))
}

// ---------------------------------------------------------------------------
// Inference

/// Heatmap for one image/audio pair at image resolution.
pub fn localize(model: &Model, state: &TrainableState, image: &ImageSample, audio: &AudioClipSample) -> Result<LocalizationHeatmap> {
    let sample = PreparedSample::new(&model.stack, "query", image, audio)?;
    model.heatmap(state, &sample)
}

/// Image blended half-and-half with a blue-to-red rendering of the heatmap.
pub fn overlay(image: &ImageSample, heatmap: &LocalizationHeatmap) -> Result<ImageSample> {
    let (h, w) = (image.height(), image.width());
    if (heatmap.height, heatmap.width) != (h, w) {
        return Err(Error::Shape(format!(
            "heatmap {}x{} does not match image {h}x{w}",
            heatmap.height, heatmap.width
        )));
    }
    let n = h * w;
    let mut px = image.pixels().to_vec();
    for i in 0..n {
        let v = heatmap.values[i];
        let color = [v, 0.0, 1.0 - v];
        for c in 0..3 {
            px[c * n + i] = 0.5 * px[c * n + i] + 0.5 * color[c];
        }
    }
    ImageSample::new(h, w, px)
}

/// Mean re-encoded patch feature of the image with `mask` applied.
pub fn masked_image_embedding(stack: &FrozenStack, sample: &PreparedSample, mask: &[f64]) -> Result<EmbeddingVector> {
    let mut g = Graph::new();
    let m = g.constant(Matrix::from_rows(&[mask.to_vec()])?);
    let patches = g.masked_patches(m, &sample.image, stack.patch());
    let feats = stack.image.spatial(&mut g, patches);
    let cells = g.value(feats);
    let mut mean = vec![0.0; cells.cols()];
    for r in 0..cells.rows() {
        for (acc, v) in mean.iter_mut().zip(cells.row(r)) {
            *acc += v / cells.rows() as f64;
        }
    }
    EmbeddingVector::new(mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedSource {
    pub class_index: usize,
    pub score: f64,
    pub heatmap: LocalizationHeatmap,
}

/// Scores each class text by how well the image region it grounds matches the
/// audio, and returns the `k` best (ties broken by class index).
pub fn multisource_localize(
    model: &Model,
    state: &TrainableState,
    sample: &PreparedSample,
    class_texts: &[String],
    k: usize,
) -> Result<Vec<RankedSource>> {
    if k == 0 || k > class_texts.len() {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={}", class_texts.len())));
    }
    let audio = model.audio_embedding(state, &sample.frames)?;
    let mut ranked = Vec::with_capacity(class_texts.len());
    for (n, text) in class_texts.iter().enumerate() {
        let cond = caption_embedding(&model.stack, text)?;
        let heatmap = inference_mask(&model.ground(sample, &cond)?, &state.mask)?;
        let hard: Vec<f64> = heatmap.values.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let v = masked_image_embedding(&model.stack, sample, &hard)?;
        ranked.push(RankedSource { class_index: n, score: v.cosine(&audio), heatmap });
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_index.cmp(&b.class_index)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Object names of the first `k` lexicon classes, used as multi-source prompts.
pub fn class_texts(k: usize) -> Vec<String> {
    (0..k).map(|c| class_info(c).object_name()).collect()
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Single,
    Segmentation,
    Extended,
    Interactive,
    Multisource,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Single, Task::Segmentation, Task::Extended, Task::Interactive, Task::Multisource];

    pub fn variants(self) -> &'static [Variant] {
        match self {
            Task::Single | Task::Segmentation => &[Variant::Matched],
            Task::Extended => &[Variant::Matched, Variant::Silent, Variant::Mismatched],
            Task::Interactive => &[Variant::Interactive],
            Task::Multisource => &[Variant::Mixture],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Single => "single",
            Task::Segmentation => "segmentation",
            Task::Extended => "extended",
            Task::Interactive => "interactive",
            Task::Multisource => "multisource",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{s}'")))
    }

    /// Scenes of `split` this task evaluates on; errors when none are present.
    pub fn select<'a>(self, scenes: &'a [Scene], split: &str) -> Result<Vec<&'a Scene>> {
        let chosen: Vec<&Scene> = scenes
            .iter()
            .filter(|s| s.record.split == split && self.variants().contains(&s.record.variant))
            .collect();
        let has = |v: Variant| chosen.iter().any(|s| s.record.variant == v);
        let complete = match self {
            Task::Extended => has(Variant::Matched) && (has(Variant::Silent) || has(Variant::Mismatched)),
            _ => !chosen.is_empty(),
        };
        if !complete {
            return Err(Error::InvalidInput(format!(
                "split '{split}' has no {:?} records for task {}",
                self.variants(),
                self.name()
            )));
        }
        Ok(chosen)
    }
}

fn gt_bools(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&v| v > 0.5).collect()
}

/// Heatmap records for scenes, each against its sounding class.
pub fn eval_records(
    model: &Model,
    state: &TrainableState,
    scenes: &[&Scene],
    prepared: &[PreparedSample],
) -> Result<Vec<EvalRecord>> {
    scenes
        .iter()
        .zip(prepared)
        .map(|(s, p)| {
            EvalRecord::new(
                &s.record.id,
                &s.record.image_id,
                s.record.sounding_class(),
                s.record.pairing,
                model.heatmap(state, p)?,
                gt_bools(&s.target_mask()),
            )
        })
        .collect()
}

/// Inference and metrics for `task` on already-selected scenes. Multi-source
/// prompts are the object names of every class placed in the evaluated scenes.
pub fn evaluate_prepared(
    model: &Model,
    state: &TrainableState,
    task: Task,
    scenes: &[&Scene],
    prepared: &[PreparedSample],
    eval: &EvalConfig,
) -> Result<MetricReport> {
    eval.validate()?;
    if scenes.len() != prepared.len() {
        return Err(Error::Shape("scene and sample counts differ".into()));
    }
    if let Some(s) = scenes.iter().find(|s| !task.variants().contains(&s.record.variant)) {
        return Err(Error::InvalidInput(format!(
            "record {} ({:?}) does not belong to task {}",
            s.record.id,
            s.record.variant,
            task.name()
        )));
    }
    let fixed = eval.fixed();
    let mut report = match task {
        Task::Single | Task::Segmentation => {
            localization_report(&eval_records(model, state, scenes, prepared)?, eval.beta2, eval.delta)?
        }
        Task::Extended => {
            let records = eval_records(model, state, scenes, prepared)?;
            let det = detection_pr(&records, fixed)?;
            let mut r = MetricReport::default();
            r.insert("ap", det.ap);
            r.insert("max_f1", det.max_f1);
            r.insert("loc_acc", loc_acc(&records, fixed)?);
            let mean_conf = |pred: &dyn Fn(Pairing) -> bool| {
                let v: Vec<f64> = records.iter().filter(|x| pred(x.pairing)).map(|x| x.confidence).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            r.insert("mean_confidence_matched", mean_conf(&|p| p == Pairing::Matched));
            r.insert("mean_confidence_unmatched", mean_conf(&|p| p != Pairing::Matched));
            r.pr_curve = Some(det.curve);
            r
        }
        Task::Interactive => {
            let records = eval_records(model, state, scenes, prepared)?;
            let m = interactive_metrics(&records)?;
            let mut r = MetricReport::default();
            r.insert("iiou", m.iiou);
            r.insert("iauc", m.iauc);
            r.insert("iiou_adaptive", m.iiou_adaptive);
            r.insert("iauc_adaptive", m.iauc_adaptive);
            r.insert("argmax_rate", interactive_argmax_rate(&records)?);
            r.insert("groups", m.groups as f64);
            r.insert("excluded_groups", m.excluded as f64);
            r
        }
        Task::Multisource => {
            let n_classes = scenes
                .iter()
                .flat_map(|s| s.record.objects.iter().map(|o| o.class_id + 1))
                .max()
                .unwrap_or(1);
            let texts = class_texts(n_classes);
            let mut records = Vec::with_capacity(scenes.len());
            let (mut top1, mut total) = (0usize, 0usize);
            for (s, p) in scenes.iter().zip(prepared) {
                let k = s.record.audible.len().clamp(1, texts.len());
                let ranked = multisource_localize(model, state, p, &texts, k)?;
                if let (Some(best), Some(loud)) = (ranked.first(), s.record.sounding_class()) {
                    top1 += (best.class_index == loud) as usize;
                    total += 1;
                }
                let gts = s
                    .record
                    .audible
                    .iter()
                    .filter_map(|(c, _)| s.mask_of(*c).map(|m| (*c, gt_bools(m))))
                    .collect();
                let predictions = ranked.into_iter().map(|r| (r.class_index, r.heatmap)).collect();
                records.push(MultiSourceRecord { image_id: s.record.image_id.clone(), predictions, gts });
            }
            let m = multisource_metrics(&records, fixed)?;
            let mut r = MetricReport::default();
            r.insert("cap", m.cap);
            r.insert("piap", m.piap);
            r.insert("ciou_10", m.ciou_10);
            r.insert("ciou_30", m.ciou_30);
            r.insert("ciou_50", m.ciou_50);
            r.insert("auc", m.auc);
            r.insert("top1_loudest", top1 as f64 / total.max(1) as f64);
            r
        }
    };
    report.insert("records", scenes.len() as f64);
    Ok(report)
}

/// Selects the task's scenes from `eval.split`, prepares them and evaluates.
pub fn evaluate(model: &Model, state: &TrainableState, task: Task, scenes: &[Scene], eval: &EvalConfig) -> Result<MetricReport> {
    let chosen = task.select(scenes, &eval.split)?;
    let prepared = prepare(&model.stack, &chosen)?;
    evaluate_prepared(model, state, task, &chosen, &prepared, eval)
}

/// Writes `{stem}.json`, `{stem}.csv` and, when present, `{stem}_pr.csv` under `dir`.
pub fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put(format!("{stem}.json"), serde_json::to_string_pretty(report)?)?;
    put(format!("{stem}.csv"), report.summary_csv())?;
    if let Some(pr) = report.pr_csv() {
        put(format!("{stem}_pr.csv"), pr)?;
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub const ABLATION_COLUMNS: [&str; 6] = ["ciou", "auc", "ciou_adaptive", "auc_adaptive", "miou", "fscore"];

/// Trains every loss combination for every seed and evaluates the single-source task.
pub fn ablation_matrix(
    model: &Model,
    base: &ExperimentConfig,
    train_data: &[PreparedSample],
    test_scenes: &[&Scene],
    test_data: &[PreparedSample],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for row in AblationRow::ALL {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.train.flags = row.flags();
            let (ckpt, _) = train(model, train_data, Checkpoint::init(&model.stack, &cfg), None, &TrainOutputs::default())?;
            let rep = evaluate_prepared(model, &ckpt.state, Task::Single, test_scenes, test_data, &cfg.eval)?;
            let result = AblationResult { row, seed, metrics: rep.metrics };
            progress(&result);
            out.push(result);
        }
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median over seeds of `metric` for `row`.
pub fn row_median(results: &[AblationResult], row: AblationRow, metric: &str) -> f64 {
    let mut v: Vec<f64> = results.iter().filter(|r| r.row == row).filter_map(|r| r.metrics.get(metric).copied()).collect();
    median(&mut v)
}

/// One line per row A–F with the loss flags and the per-metric medians over seeds.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = format!("row,acl_i,acl_f,reg,seeds,{}\n", ABLATION_COLUMNS.join(","));
    for row in AblationRow::ALL {
        let f = row.flags();
        let seeds = results.iter().filter(|r| r.row == row).count();
        let cols: Vec<String> = ABLATION_COLUMNS.iter().map(|m| format!("{:.4}", row_median(results, row, m))).collect();
        s.push_str(&format!("{},{},{},{},{seeds},{}\n", row.label(), f.acl_i as u8, f.acl_f as u8, f.reg as u8, cols.join(",")));
    }
    s
}

/// Shared model handle for a config.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(Model::new(Arc::new(cfg.stack()?)))
}
