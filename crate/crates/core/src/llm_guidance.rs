//! Object-aware caption text for training pairs: captioners, an LLM client,
//! the prompt template, a response cache and the caption embeddings used by
//! the caption-audio contrastive term.

use std::cell::Cell;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{AudioClipSample, EmbeddingVector, FrozenStack, ImageSample};
use crate::error::{Error, Result};
use crate::lexicon::{class_info, MAX_CLASSES};
use crate::synthdata::{PlacedObject, Record};

pub const PROMPT_INSTRUCTION: &str = "Identify the primary object in the 'image caption' most likely producing the sound like given 'audio caption', excluding background sounds which is hard to infer from given 'image caption'. Keep the answer concise and focused on general concepts, such as type. Limit the response to no more than 3 words.";

/// What the stub audio captioner says about a clip with no audible class.
pub const SILENCE_PHRASE: &str = "silence";
pub const MAX_RESPONSE_WORDS: usize = 3;

/// Fills the instruction template with both captions.
pub fn build_prompt(image_caption: &str, audio_caption: &str) -> Result<String> {
    if image_caption.is_empty() || audio_caption.is_empty() {
        return Err(Error::InvalidInput("captions must be nonempty".into()));
    }
    Ok(format!("{PROMPT_INSTRUCTION}\n\nImage caption: {image_caption},\nAudio caption: {audio_caption}"))
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Failure of one provider call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderFailure {
    Timeout,
    Unreachable(String),
}

impl ProviderFailure {
    pub fn retryable(&self) -> bool {
        matches!(self, ProviderFailure::Timeout)
    }

    fn describe(&self) -> String {
        match self {
            ProviderFailure::Timeout => "timeout".into(),
            ProviderFailure::Unreachable(why) => format!("unreachable: {why}"),
        }
    }
}

pub type ProviderResult<T> = std::result::Result<T, ProviderFailure>;

/// Ground-truth scene metadata handed to stub providers. Real providers would
/// look only at pixels and samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneMeta {
    pub objects: Vec<PlacedObject>,
    pub audible: Vec<(usize, f64)>,
}

impl SceneMeta {
    pub fn from_record(r: &Record) -> Self {
        Self { objects: r.objects.clone(), audible: r.audible.clone() }
    }
}

pub trait ImageCaptioner {
    fn caption_image(&self, image: &ImageSample, meta: &SceneMeta) -> ProviderResult<String>;
}

pub trait AudioCaptioner {
    fn caption_audio(&self, clip: &AudioClipSample, meta: &SceneMeta) -> ProviderResult<String>;
}

pub trait LlmProvider {
    fn complete(&self, prompt: &str) -> ProviderResult<String>;
}

/// Deterministic captioner that reads the scene metadata.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubCaptioner;

impl ImageCaptioner for StubCaptioner {
    fn caption_image(&self, _image: &ImageSample, meta: &SceneMeta) -> ProviderResult<String> {
        if meta.objects.is_empty() {
            return Ok("a plain background".into());
        }
        let names: Vec<String> = meta.objects.iter().map(|o| format!("a {}", class_info(o.class_id).object_name())).collect();
        Ok(format!("{} on a plain background", names.join(" and ")))
    }
}

impl AudioCaptioner for StubCaptioner {
    fn caption_audio(&self, _clip: &AudioClipSample, meta: &SceneMeta) -> ProviderResult<String> {
        if meta.audible.is_empty() {
            return Ok(SILENCE_PHRASE.into());
        }
        let phrases: Vec<&str> = meta.audible.iter().map(|&(c, _)| class_info(c).sound_phrase).collect();
        Ok(phrases.join(" and "))
    }
}

/// Keyword LLM stub. It splits the image caption into object phrases, keeps
/// the one whose class matches a sound named in the audio caption, and falls
/// back to the first image-side object when nothing matches.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubLlm;

const STOP_WORDS: [&str; 10] = ["on", "in", "with", "near", "at", "under", "over", "beside", "by", "against"];
const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn caption_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let start = prompt.rfind(label)? + label.len();
    let rest = &prompt[start..];
    let end = rest.find(",\n").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Object phrases of an image caption: `a red circle and a dog on grass` →
/// `["red circle", "dog"]`.
pub fn object_phrases(image_caption: &str) -> Vec<String> {
    let lower = image_caption.to_lowercase();
    let mut out = Vec::new();
    for part in lower.split(" and ") {
        let mut words = Vec::new();
        for w in part.split(|c: char| !c.is_alphanumeric() && c != '-').filter(|w| !w.is_empty()) {
            if STOP_WORDS.contains(&w) {
                break;
            }
            if words.is_empty() && ARTICLES.contains(&w) {
                continue;
            }
            words.push(w);
        }
        if !words.is_empty() {
            out.push(words.join(" "));
        }
    }
    out
}

fn phrase_class(phrase: &str) -> Option<usize> {
    (0..MAX_CLASSES).find(|&c| class_info(c).object_name() == phrase)
}

fn heard_classes(audio_caption: &str) -> Vec<usize> {
    let lower = audio_caption.to_lowercase();
    (0..MAX_CLASSES).filter(|&c| lower.contains(class_info(c).sound_phrase)).collect()
}

/// Keeps at most `MAX_RESPONSE_WORDS` words.
pub fn trim_response(text: &str) -> String {
    text.split_whitespace().take(MAX_RESPONSE_WORDS).collect::<Vec<_>>().join(" ")
}

impl LlmProvider for StubLlm {
    fn complete(&self, prompt: &str) -> ProviderResult<String> {
        let image = caption_field(prompt, "Image caption: ").unwrap_or("");
        let audio = caption_field(prompt, "Audio caption: ").unwrap_or("");
        let phrases = object_phrases(image);
        let heard = heard_classes(audio);
        let pick = phrases
            .iter()
            .find(|p| phrase_class(p).is_some_and(|c| heard.contains(&c)))
            .or_else(|| phrases.first());
        Ok(trim_response(pick.map(String::as_str).unwrap_or("unknown")))
    }
}

/// Provider that never answers, for offline runs and failure tests.
#[derive(Clone, Debug)]
pub struct UnreachableProvider {
    pub endpoint: String,
}

impl ImageCaptioner for UnreachableProvider {
    fn caption_image(&self, _: &ImageSample, _: &SceneMeta) -> ProviderResult<String> {
        Err(ProviderFailure::Unreachable(self.endpoint.clone()))
    }
}

impl AudioCaptioner for UnreachableProvider {
    fn caption_audio(&self, _: &AudioClipSample, _: &SceneMeta) -> ProviderResult<String> {
        Err(ProviderFailure::Unreachable(self.endpoint.clone()))
    }
}

impl LlmProvider for UnreachableProvider {
    fn complete(&self, _: &str) -> ProviderResult<String> {
        Err(ProviderFailure::Unreachable(self.endpoint.clone()))
    }
}

/// Wraps a provider so its first `failures` calls time out.
#[derive(Debug)]
pub struct Flaky<P> {
    pub inner: P,
    remaining: Cell<u32>,
}

impl<P> Flaky<P> {
    pub fn new(inner: P, failures: u32) -> Self {
        Self { inner, remaining: Cell::new(failures) }
    }

    fn fail(&self) -> bool {
        let r = self.remaining.get();
        if r > 0 {
            self.remaining.set(r - 1);
            true
        } else {
            false
        }
    }
}

impl<P: LlmProvider> LlmProvider for Flaky<P> {
    fn complete(&self, prompt: &str) -> ProviderResult<String> {
        if self.fail() {
            return Err(ProviderFailure::Timeout);
        }
        self.inner.complete(prompt)
    }
}

impl<P: ImageCaptioner> ImageCaptioner for Flaky<P> {
    fn caption_image(&self, image: &ImageSample, meta: &SceneMeta) -> ProviderResult<String> {
        if self.fail() {
            return Err(ProviderFailure::Timeout);
        }
        self.inner.caption_image(image, meta)
    }
}

impl<P: AudioCaptioner> AudioCaptioner for Flaky<P> {
    fn caption_audio(&self, clip: &AudioClipSample, meta: &SceneMeta) -> ProviderResult<String> {
        if self.fail() {
            return Err(ProviderFailure::Timeout);
        }
        self.inner.caption_audio(clip, meta)
    }
}

/// Endpoint descriptor: `stub`, `unreachable` or `unreachable:<name>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Endpoint {
    Stub,
    Unreachable(String),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "stub" => Ok(Endpoint::Stub),
            None if s == "unreachable" => Ok(Endpoint::Unreachable("unreachable".into())),
            Some(("unreachable", name)) => Ok(Endpoint::Unreachable(name.into())),
            _ => Err(Error::Config(format!("unknown provider endpoint {s:?}"))),
        }
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        match e {
            Endpoint::Stub => "stub".into(),
            Endpoint::Unreachable(name) if name == "unreachable" => "unreachable".into(),
            Endpoint::Unreachable(name) => format!("unreachable:{name}"),
        }
    }
}

impl TryFrom<String> for Endpoint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub image_captioner: Endpoint,
    pub audio_captioner: Endpoint,
    pub llm: Endpoint,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub cache_path: PathBuf,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            image_captioner: Endpoint::Stub,
            audio_captioner: Endpoint::Stub,
            llm: Endpoint::Stub,
            timeout_secs: 30.0,
            max_retries: 2,
            retry_backoff_ms: 0,
            cache_path: PathBuf::from("captions.jsonl"),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("provider timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Runs `call` up to `1 + max_retries` times while failures are retryable.
pub fn with_retries<T>(
    max_retries: u32,
    backoff: Duration,
    mut call: impl FnMut() -> ProviderResult<T>,
) -> std::result::Result<T, (ProviderFailure, u32)> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if e.retryable() && attempts <= max_retries => {
                if !backoff.is_zero() {
                    std::thread::sleep(backoff);
                }
            }
            Err(e) => return Err((e, attempts)),
        }
    }
}

/// LLM client with a prompt-hash response cache and a provider call counter.
pub struct LlmClient<P> {
    provider: P,
    cache: HashMap<String, String>,
    calls: u64,
    max_retries: u32,
    backoff: Duration,
}

impl<P: LlmProvider> LlmClient<P> {
    pub fn new(provider: P, max_retries: u32) -> Self {
        Self { provider, cache: HashMap::new(), calls: 0, max_retries, backoff: Duration::ZERO }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// Number of calls that reached the provider, retries included.
    pub fn provider_calls(&self) -> u64 {
        self.calls
    }

    pub fn cached(&self, prompt: &str) -> Option<&str> {
        self.cache.get(&prompt_hash(prompt)).map(String::as_str)
    }

    pub fn seed_cache(&mut self, prompt: &str, response: &str) {
        self.cache.insert(prompt_hash(prompt), response.to_string());
    }

    pub fn query(&mut self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        let key = prompt_hash(prompt);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let provider = &self.provider;
        let calls = &mut self.calls;
        let raw = with_retries(self.max_retries, self.backoff, || {
            *calls += 1;
            provider.complete(prompt)
        })
        .map_err(|(e, n)| Error::Provider(format!("llm {} after {n} attempt(s)", e.describe())))?;
        let response = trim_response(&raw);
        if response.is_empty() {
            return Err(Error::Provider("llm returned an empty response".into()));
        }
        self.cache.insert(key, response.clone());
        Ok(response)
    }
}

/// Lowercases and strips punctuation before embedding.
pub fn normalize_caption(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Caption text through the frozen text encoder behind the prompt prefix.
pub fn caption_embedding(stack: &FrozenStack, text: &str) -> Result<EmbeddingVector> {
    let norm = normalize_caption(text);
    if norm.is_empty() {
        return Err(Error::InvalidInput("caption has no words".into()));
    }
    stack.concept_embedding(&norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub image_caption: String,
    pub audio_caption: String,
    pub llm_response: String,
    pub caption_embedding: Option<EmbeddingVector>,
    pub complete: bool,
    pub error: Option<String>,
}

impl CaptionRecord {
    fn incomplete(sample_id: &str, image_caption: String, audio_caption: String, error: String) -> Self {
        Self {
            sample_id: sample_id.into(),
            image_caption,
            audio_caption,
            llm_response: String::new(),
            caption_embedding: None,
            complete: false,
            error: Some(error),
        }
    }
}

/// One line of the cache file. The embedding is base64 of little-endian f64 bytes.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredRecord {
    sample_id: String,
    image_caption: String,
    audio_caption: String,
    llm_response: String,
    complete: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    embedding_b64: Option<String>,
}

pub fn encode_embedding(e: &EmbeddingVector) -> String {
    let bytes: Vec<u8> = e.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

pub fn decode_embedding(s: &str) -> Result<EmbeddingVector> {
    let bytes = BASE64.decode(s).map_err(|e| Error::InvalidInput(format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput("embedding byte length is not a multiple of 8".into()));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    EmbeddingVector::new(values)
}

/// Caption records keyed by sample id, persisted as JSON lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptionStore {
    records: Vec<CaptionRecord>,
    index: HashMap<String, usize>,
}

impl CaptionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, r: CaptionRecord) {
        match self.index.get(&r.sample_id) {
            Some(&i) => self.records[i] = r,
            None => {
                self.index.insert(r.sample_id.clone(), self.records.len());
                self.records.push(r);
            }
        }
    }

    pub fn get(&self, sample_id: &str) -> Option<&CaptionRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn complete_count(&self) -> usize {
        self.records.iter().filter(|r| r.complete).count()
    }

    /// Caption embedding of a complete record.
    pub fn embedding(&self, sample_id: &str) -> Option<&EmbeddingVector> {
        self.get(sample_id).filter(|r| r.complete).and_then(|r| r.caption_embedding.as_ref())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut out = Vec::new();
        for r in &self.records {
            let stored = StoredRecord {
                sample_id: r.sample_id.clone(),
                image_caption: r.image_caption.clone(),
                audio_caption: r.audio_caption.clone(),
                llm_response: r.llm_response.clone(),
                complete: r.complete,
                error: r.error.clone(),
                embedding_b64: r.caption_embedding.as_ref().map(encode_embedding),
            };
            serde_json::to_writer(&mut out, &stored)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: StoredRecord =
                serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            let caption_embedding = s.embedding_b64.as_deref().map(decode_embedding).transpose()?;
            if s.complete && (s.llm_response.is_empty() || caption_embedding.is_none()) {
                return Err(Error::format(path, format!("line {}: complete record without response", n + 1)));
            }
            store.insert(CaptionRecord {
                sample_id: s.sample_id,
                image_caption: s.image_caption,
                audio_caption: s.audio_caption,
                llm_response: s.llm_response,
                caption_embedding,
                complete: s.complete,
                error: s.error,
            });
        }
        Ok(store)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn open(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }
}

/// The three providers of the caption pipeline.
pub struct Providers<'a> {
    pub image: &'a dyn ImageCaptioner,
    pub audio: &'a dyn AudioCaptioner,
    pub llm: &'a dyn LlmProvider,
}

impl LlmProvider for &dyn LlmProvider {
    fn complete(&self, prompt: &str) -> ProviderResult<String> {
        (**self).complete(prompt)
    }
}

/// Input of one caption job.
pub struct CaptionJob<'a> {
    pub sample_id: &'a str,
    pub image: &'a ImageSample,
    pub audio: &'a AudioClipSample,
    pub meta: SceneMeta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PrecomputeReport {
    pub records: usize,
    pub complete: usize,
    pub reused: usize,
    pub llm_calls: u64,
}

/// Captions every job, reusing complete records already in `store`. Provider
/// failures after retries leave an incomplete record and never abort the pass.
pub fn precompute_captions(
    stack: &FrozenStack,
    jobs: &[CaptionJob<'_>],
    providers: &Providers<'_>,
    cfg: &ProviderConfig,
    store: &mut CaptionStore,
) -> Result<PrecomputeReport> {
    cfg.validate()?;
    let backoff = Duration::from_millis(cfg.retry_backoff_ms);
    let mut llm = LlmClient::new(providers.llm, cfg.max_retries).with_backoff(backoff);
    for r in store.records().iter().filter(|r| r.complete) {
        if let Ok(p) = build_prompt(&r.image_caption, &r.audio_caption) {
            llm.seed_cache(&p, &r.llm_response);
        }
    }
    let mut report = PrecomputeReport::default();
    for job in jobs {
        report.records += 1;
        if store.get(job.sample_id).is_some_and(|r| r.complete) {
            report.reused += 1;
            report.complete += 1;
            continue;
        }
        let image_caption = with_retries(cfg.max_retries, backoff, || providers.image.caption_image(job.image, &job.meta));
        let audio_caption = with_retries(cfg.max_retries, backoff, || providers.audio.caption_audio(job.audio, &job.meta));
        let record = match (image_caption, audio_caption) {
            (Err((e, n)), _) => CaptionRecord::incomplete(
                job.sample_id,
                String::new(),
                String::new(),
                format!("image captioner {} after {n} attempt(s)", e.describe()),
            ),
            (Ok(ti), Err((e, n))) => CaptionRecord::incomplete(
                job.sample_id,
                ti,
                String::new(),
                format!("audio captioner {} after {n} attempt(s)", e.describe()),
            ),
            (Ok(ti), Ok(ta)) => {
                let answer = build_prompt(&ti, &ta).and_then(|p| llm.query(&p));
                match answer {
                    Ok(c) => {
                        let emb = caption_embedding(stack, &c)?;
                        report.complete += 1;
                        CaptionRecord {
                            sample_id: job.sample_id.into(),
                            image_caption: ti,
                            audio_caption: ta,
                            llm_response: c,
                            caption_embedding: Some(emb),
                            complete: true,
                            error: None,
                        }
                    }
                    Err(e) => CaptionRecord::incomplete(job.sample_id, ti, ta, e.to_string()),
                }
            }
        };
        store.insert(record);
    }
    report.llm_calls = llm.provider_calls();
    Ok(report)
}

/// Builds the providers named by `cfg` and runs [`precompute_captions`].
pub fn precompute_with_config(
    stack: &FrozenStack,
    jobs: &[CaptionJob<'_>],
    cfg: &ProviderConfig,
    store: &mut CaptionStore,
) -> Result<PrecomputeReport> {
    fn pick(e: &Endpoint) -> Box<dyn ProviderAll> {
        match e {
            Endpoint::Stub => Box::new(Stubs),
            Endpoint::Unreachable(name) => Box::new(UnreachableProvider { endpoint: name.clone() }),
        }
    }
    let (i, a, l) = (pick(&cfg.image_captioner), pick(&cfg.audio_captioner), pick(&cfg.llm));
    let providers = Providers { image: i.as_image(), audio: a.as_audio(), llm: l.as_llm() };
    precompute_captions(stack, jobs, &providers, cfg, store)
}

struct Stubs;

impl ImageCaptioner for Stubs {
    fn caption_image(&self, image: &ImageSample, meta: &SceneMeta) -> ProviderResult<String> {
        StubCaptioner.caption_image(image, meta)
    }
}

impl AudioCaptioner for Stubs {
    fn caption_audio(&self, clip: &AudioClipSample, meta: &SceneMeta) -> ProviderResult<String> {
        StubCaptioner.caption_audio(clip, meta)
    }
}

impl LlmProvider for Stubs {
    fn complete(&self, prompt: &str) -> ProviderResult<String> {
        StubLlm.complete(prompt)
    }
}

trait ProviderAll: ImageCaptioner + AudioCaptioner + LlmProvider {
    fn as_image(&self) -> &dyn ImageCaptioner;
    fn as_audio(&self) -> &dyn AudioCaptioner;
    fn as_llm(&self) -> &dyn LlmProvider;
}

impl<T: ImageCaptioner + AudioCaptioner + LlmProvider> ProviderAll for T {
    fn as_image(&self) -> &dyn ImageCaptioner {
        self
    }
    fn as_audio(&self) -> &dyn AudioCaptioner {
        self
    }
    fn as_llm(&self) -> &dyn LlmProvider {
        self
    }
}
