//! Synthetic paired scenes: flat-colored shapes on a plain background, each
//! class with its own tone band, plus exact per-class masks.
//!
//! On disk a dataset looks like
//!
//! ```text
//! {root}/manifest.jsonl
//! {root}/{split}/images/{image_id}.png
//! {root}/{split}/audio/{id}.wav
//! {root}/{split}/masks/{image_id}_c{class}.png
//! ```
//!
//! The first manifest line is a header with the format version and the
//! generating config; every following line is one [`Record`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{AudioClipSample, ImageSample};
use crate::error::{Error, Result};
pub use crate::lexicon::{class_info, classes, ClassInfo, Shape, BACKGROUND, MAX_CLASSES};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "avclip-synth";
/// Standard deviation of the additive noise floor.
pub const NOISE_STD: f64 = 0.003;
/// Silent clips stay below this RMS.
pub const SILENCE_RMS_CEILING: f64 = 0.01;
pub const PEAK: f64 = 0.9;
const TONES_PER_CLASS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class_id: usize,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Top-left corner and side length in pixels; the object fits in this box.
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PlacedObject {
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.size as f64 / 2.0, self.y as f64 + self.size as f64 / 2.0)
    }

    pub fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.size || py >= self.y + self.size {
            return false;
        }
        match self.shape {
            Shape::Square => true,
            Shape::Circle => {
                let (cx, cy) = self.center();
                let r = self.size as f64 / 2.0;
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn boxes_touch(&self, other: &PlacedObject) -> bool {
        // One free pixel between boxes.
        let sep_x = self.x + self.size < other.x || other.x + other.size < self.x;
        let sep_y = self.y + self.size < other.y || other.y + other.size < self.y;
        !(sep_x || sep_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<PlacedObject>,
    /// Audible classes with their gains.
    pub audible: Vec<(usize, f64)>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.size == 0 || o.x + o.size > self.width || o.y + o.size > self.height {
                return Err(Error::InvalidInput(format!("object {i} does not fit inside the image")));
            }
            if o.class_id >= MAX_CLASSES {
                return Err(Error::InvalidInput(format!("unknown class {}", o.class_id)));
            }
            for other in &self.objects[i + 1..] {
                if other.class_id == o.class_id && o.boxes_touch(other) {
                    return Err(Error::InvalidInput(format!("objects of class {} overlap", o.class_id)));
                }
            }
        }
        for (c, g) in &self.audible {
            if *c >= MAX_CLASSES || !(*g > 0.0) {
                return Err(Error::InvalidInput("audible classes need a known id and a positive gain".into()));
            }
        }
        Ok(())
    }

    pub fn placed_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.objects.iter().map(|o| o.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Pixels are quantized to the 8-bit grid so a PNG round trip is exact.
pub fn render_scene(spec: &SceneSpec) -> Result<ImageSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut img = ImageSample::filled(h, w, BACKGROUND.map(|c| c as f64 / 255.0))?;
    for o in &spec.objects {
        for y in o.y..o.y + o.size {
            for x in o.x..o.x + o.size {
                if o.covers(x, y) {
                    for c in 0..3 {
                        img.set(c, y, x, o.color[c] as f64 / 255.0);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Row-major `[H, W]` mask (0/1) of every pixel covered by `class_id`.
pub fn class_mask(spec: &SceneSpec, class_id: usize) -> Vec<f64> {
    let mut m = vec![0.0; spec.height * spec.width];
    for o in spec.objects.iter().filter(|o| o.class_id == class_id) {
        for y in o.y..o.y + o.size {
            for x in o.x..o.x + o.size {
                if o.covers(x, y) {
                    m[y * spec.width + x] = 1.0;
                }
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioFormat {
    pub sample_rate: u32,
    pub duration_secs: f64,
}

impl Default for AudioFormat {
    fn default() -> Self {
        Self { sample_rate: 16_000, duration_secs: 1.0 }
    }
}

/// Band-limited tones for each audible class plus a seeded noise floor, peak
/// normalized to [`PEAK`] and quantized to 16-bit PCM levels.
pub fn synth_audio(spec: &SceneSpec, format: &AudioFormat) -> Result<AudioClipSample> {
    spec.validate()?;
    let n = (format.sample_rate as f64 * format.duration_secs).round() as usize;
    if n == 0 {
        return Err(Error::Config("audio duration must cover at least one sample".into()));
    }
    let sr = format.sample_rate as f64;
    let mut r = rng::stream(spec.seed, "audio");
    let mut x = vec![0.0; n];
    for &(class, gain) in &spec.audible {
        let (lo, hi) = class_info(class).band;
        for _ in 0..TONES_PER_CLASS {
            let f = r.gen_range(lo..hi);
            let phase = r.gen_range(0.0..std::f64::consts::TAU);
            let a = gain / TONES_PER_CLASS as f64;
            for (i, s) in x.iter_mut().enumerate() {
                *s += a * (std::f64::consts::TAU * f * i as f64 / sr + phase).sin();
            }
        }
    }
    if !spec.audible.is_empty() {
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let k = (PEAK - 4.0 * NOISE_STD) / peak;
            x.iter_mut().for_each(|v| *v *= k);
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    for s in x.iter_mut() {
        *s = (*s + noise.sample(&mut r)).clamp(-PEAK, PEAK);
        *s = quantize_pcm(*s);
    }
    AudioClipSample::new(x, format.sample_rate)
}

pub fn quantize_pcm(v: f64) -> f64 {
    (v * 32767.0).round() / 32767.0
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Matched,
    Silent,
    Mismatched,
    Interactive,
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Matched,
    Mismatched,
    Silent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub audio: AudioFormat,
    pub train: usize,
    pub test: usize,
    pub silent: usize,
    pub mismatched: usize,
    /// Number of interactive images; each yields one record per audible object.
    pub interactive: usize,
    pub mixture: usize,
    /// Probability that a matched scene also contains a silent object of another class.
    pub distractor_prob: f64,
    pub min_object: usize,
    pub max_object: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            image_size: 32,
            audio: AudioFormat::default(),
            train: 800,
            test: 200,
            silent: 50,
            mismatched: 50,
            interactive: 50,
            mixture: 50,
            distractor_prob: 0.5,
            min_object: 9,
            max_object: 13,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!("classes must be in 2..={MAX_CLASSES}")));
        }
        if self.min_object == 0 || self.min_object > self.max_object || 2 * self.max_object + 2 > self.image_size {
            return Err(Error::Config("object sizes must be positive and let two objects fit side by side".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must lie in [0, 1]".into()));
        }
        if self.audio.sample_rate == 0 || !(self.audio.duration_secs > 0.0) {
            return Err(Error::Config("audio format needs a positive rate and duration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBox {
    pub class_id: usize,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [usize; 4],
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image_id: String,
    pub split: String,
    pub variant: Variant,
    pub pairing: Pairing,
    pub image: String,
    pub audio: String,
    pub objects: Vec<PlacedObject>,
    /// `(class, gain)` of every class heard in the clip.
    pub audible: Vec<(usize, f64)>,
    pub ground_truth: Vec<ClassBox>,
    pub seed: u64,
}

impl Record {
    /// Class the clip is about: the loudest audible class.
    pub fn sounding_class(&self) -> Option<usize> {
        self.audible
            .iter()
            .fold(None, |best: Option<(usize, f64)>, &(c, g)| match best {
                Some((_, bg)) if bg >= g => best,
                _ => Some((c, g)),
            })
            .map(|(c, _)| c)
    }

    /// True when some audible class is also visible.
    pub fn is_matched(&self) -> bool {
        self.pairing == Pairing::Matched
    }

    pub fn box_of(&self, class_id: usize) -> Option<[usize; 4]> {
        self.ground_truth.iter().find(|b| b.class_id == class_id).map(|b| b.bbox)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
}

/// A fully materialized record.
#[derive(Clone, Debug)]
pub struct Scene {
    pub record: Record,
    pub image: ImageSample,
    pub audio: AudioClipSample,
    /// Row-major 0/1 mask per placed class.
    pub masks: Vec<(usize, Vec<f64>)>,
}

impl Scene {
    pub fn mask_of(&self, class_id: usize) -> Option<&[f64]> {
        self.masks.iter().find(|(c, _)| *c == class_id).map(|(_, m)| m.as_slice())
    }

    /// Ground-truth region of the sounding class, or an empty mask when nothing visible sounds.
    pub fn target_mask(&self) -> Vec<f64> {
        let n = self.image.height() * self.image.width();
        match (self.record.pairing, self.record.sounding_class()) {
            (Pairing::Matched, Some(c)) => self.mask_of(c).map(|m| m.to_vec()).unwrap_or_else(|| vec![0.0; n]),
            _ => vec![0.0; n],
        }
    }
}

/// Tight `(x, y, w, h)` box of a row-major mask.
pub fn tight_box(mask: &[f64], width: usize) -> Option<[usize; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (i, &m) in mask.iter().enumerate() {
        if m > 0.0 {
            let (y, x) = (i / width, i % width);
            b = Some(match b {
                None => [x, y, x, y],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
            });
        }
    }
    b.map(|[x0, y0, x1, y1]| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}

fn place_objects(cfg: &DatasetConfig, classes: &[usize], r: &mut ChaCha8Rng) -> Result<Vec<PlacedObject>> {
    for _ in 0..1000 {
        let mut placed: Vec<PlacedObject> = Vec::new();
        let mut ok = true;
        for &c in classes {
            let info = class_info(c);
            let size = r.gen_range(cfg.min_object..=cfg.max_object);
            let x = r.gen_range(0..=cfg.image_size - size);
            let y = r.gen_range(0..=cfg.image_size - size);
            let o = PlacedObject { class_id: c, shape: info.shape, color: info.color, x, y, size };
            if placed.iter().any(|p| p.boxes_touch(&o)) {
                ok = false;
                break;
            }
            placed.push(o);
        }
        if ok {
            return Ok(placed);
        }
    }
    Err(Error::Config("could not place non-overlapping objects; reduce object size".into()))
}

fn pick_other(k: usize, exclude: &[usize], r: &mut ChaCha8Rng) -> usize {
    let pool: Vec<usize> = (0..k).filter(|c| !exclude.contains(c)).collect();
    pool[r.gen_range(0..pool.len())]
}

struct Draft {
    id: String,
    image_id: String,
    split: &'static str,
    variant: Variant,
    pairing: Pairing,
    objects: Vec<PlacedObject>,
    audible: Vec<(usize, f64)>,
    seed: u64,
}

fn drafts(cfg: &DatasetConfig) -> Result<Vec<Draft>> {
    let k = cfg.classes;
    let mut out = Vec::new();
    let scene = |id: String, split: &'static str, variant: Variant, out: &mut Vec<Draft>| -> Result<()> {
        let seed = rng::derive_seed(cfg.seed, &id);
        let mut r = rng::stream(seed, "layout");
        let primary = r.gen_range(0..k);
        let (objects, audible, pairing) = match variant {
            Variant::Matched => {
                let mut cls = vec![primary];
                if r.gen_bool(cfg.distractor_prob) {
                    cls.push(pick_other(k, &cls, &mut r));
                }
                (place_objects(cfg, &cls, &mut r)?, vec![(primary, 1.0)], Pairing::Matched)
            }
            Variant::Silent => (place_objects(cfg, &[primary], &mut r)?, vec![], Pairing::Silent),
            Variant::Mismatched => {
                let heard = pick_other(k, &[primary], &mut r);
                (place_objects(cfg, &[primary], &mut r)?, vec![(heard, 1.0)], Pairing::Mismatched)
            }
            Variant::Mixture => {
                let second = pick_other(k, &[primary], &mut r);
                let objs = place_objects(cfg, &[primary, second], &mut r)?;
                (objs, vec![(primary, 1.0), (second, 0.5)], Pairing::Matched)
            }
            Variant::Interactive => {
                let second = pick_other(k, &[primary], &mut r);
                let objs = place_objects(cfg, &[primary, second], &mut r)?;
                for (n, c) in [primary, second].into_iter().enumerate() {
                    let pid = format!("{id}-p{n}");
                    out.push(Draft {
                        seed: rng::derive_seed(cfg.seed, &pid),
                        id: pid,
                        image_id: id.clone(),
                        split,
                        variant,
                        pairing: Pairing::Matched,
                        objects: objs.clone(),
                        audible: vec![(c, 1.0)],
                    });
                }
                return Ok(());
            }
        };
        out.push(Draft { image_id: id.clone(), id, split, variant, pairing, objects, audible, seed });
        Ok(())
    };
    for i in 0..cfg.train {
        scene(format!("train-{i:05}"), "train", Variant::Matched, &mut out)?;
    }
    for i in 0..cfg.test {
        scene(format!("test-{i:05}"), "test", Variant::Matched, &mut out)?;
    }
    for i in 0..cfg.silent {
        scene(format!("silent-{i:05}"), "test", Variant::Silent, &mut out)?;
    }
    for i in 0..cfg.mismatched {
        scene(format!("mismatched-{i:05}"), "test", Variant::Mismatched, &mut out)?;
    }
    for i in 0..cfg.interactive {
        scene(format!("interactive-{i:05}"), "test", Variant::Interactive, &mut out)?;
    }
    for i in 0..cfg.mixture {
        scene(format!("mixture-{i:05}"), "test", Variant::Mixture, &mut out)?;
    }
    Ok(out)
}

fn materialize(cfg: &DatasetConfig, d: Draft) -> Result<Scene> {
    let spec = SceneSpec {
        height: cfg.image_size,
        width: cfg.image_size,
        objects: d.objects.clone(),
        audible: d.audible.clone(),
        seed: d.seed,
    };
    let image = render_scene(&spec)?;
    let audio = synth_audio(&spec, &cfg.audio)?;
    let masks: Vec<(usize, Vec<f64>)> = spec.placed_classes().into_iter().map(|c| (c, class_mask(&spec, c))).collect();
    let ground_truth = masks
        .iter()
        .map(|(c, m)| ClassBox {
            class_id: *c,
            bbox: tight_box(m, cfg.image_size).expect("placed classes have pixels"),
            mask: format!("{}/masks/{}_c{}.png", d.split, d.image_id, c),
        })
        .collect();
    let record = Record {
        image: format!("{}/images/{}.png", d.split, d.image_id),
        audio: format!("{}/audio/{}.wav", d.split, d.id),
        id: d.id,
        image_id: d.image_id,
        split: d.split.to_string(),
        variant: d.variant,
        pairing: d.pairing,
        objects: d.objects,
        audible: d.audible,
        ground_truth,
        seed: d.seed,
    };
    Ok(Scene { record, image, audio, masks })
}

/// Builds every scene in memory, in manifest order.
pub fn generate(cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    drafts(cfg)?.into_iter().map(|d| materialize(cfg, d)).collect()
}

pub struct Dataset {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        Ok(Self { config: cfg.clone(), scenes: generate(cfg)? })
    }

    pub fn select(&self, split: &str, variant: Variant) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| s.record.split == split && s.record.variant == variant).collect()
    }
}

/// Writes payloads and `manifest.jsonl` under `root`.
pub fn make_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Vec<Record>> {
    let scenes = generate(cfg)?;
    write_scenes(root, cfg, &scenes)?;
    Ok(scenes.into_iter().map(|s| s.record).collect())
}

pub fn write_scenes(root: &Path, cfg: &DatasetConfig, scenes: &[Scene]) -> Result<()> {
    for split in ["train", "test"] {
        for sub in ["images", "audio", "masks"] {
            let dir = root.join(split).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut written_images = std::collections::HashSet::new();
    for s in scenes {
        if written_images.insert(s.record.image_id.clone()) {
            write_png_rgb(&root.join(&s.record.image), &s.image)?;
            for gt in &s.record.ground_truth {
                let m = s.mask_of(gt.class_id).expect("mask for every box");
                write_png_mask(&root.join(&gt.mask), m, s.image.height(), s.image.width())?;
            }
        }
        write_wav(&root.join(&s.record.audio), &s.audio)?;
    }
    let path = root.join("manifest.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION, config: cfg.clone() };
    let mut write_line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(&path, e));
    write_line(serde_json::to_string(&header)?)?;
    for s in scenes {
        write_line(serde_json::to_string(&s.record)?)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<(ManifestHeader, Vec<Record>)> {
    let path = root.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(&path, "manifest is empty"))?
        .map_err(|e| Error::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest {} v{}", header.format, header.version)));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    Ok((header, records))
}

/// Loads a dataset written by [`make_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let (header, records) = read_manifest(root)?;
    let mut scenes = Vec::with_capacity(records.len());
    for record in records {
        let image = read_png_rgb(&root.join(&record.image))?;
        let audio = read_wav(&root.join(&record.audio))?;
        let mut masks = Vec::new();
        for gt in &record.ground_truth {
            masks.push((gt.class_id, read_png_mask(&root.join(&gt.mask))?.2));
        }
        scenes.push(Scene { record, image, audio, masks });
    }
    Ok(Dataset { config: header.config, scenes })
}

// ---------------------------------------------------------------------------
// File formats

fn png_encoder<'a>(path: &Path, file: &'a mut BufWriter<fs::File>, w: usize, h: usize, color: png::ColorType) -> Result<png::Writer<&'a mut BufWriter<fs::File>>> {
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_png_rgb(path: &Path, img: &ImageSample) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((img.get(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    let mut file = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut wr = png_encoder(path, &mut file, w, h, png::ColorType::Rgb)?;
    wr.write_image_data(&buf).map_err(|e| Error::format(path, e.to_string()))?;
    wr.finish().map_err(|e| Error::format(path, e.to_string()))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn write_png_mask(path: &Path, mask: &[f64], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m > 0.0 { 255 } else { 0 }).collect();
    write_png_gray(path, &buf, h, w)
}

pub fn write_png_gray(path: &Path, buf: &[u8], h: usize, w: usize) -> Result<()> {
    let mut file = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut wr = png_encoder(path, &mut file, w, h, png::ColorType::Grayscale)?;
    wr.write_image_data(buf).map_err(|e| Error::format(path, e.to_string()))?;
    wr.finish().map_err(|e| Error::format(path, e.to_string()))?;
    file.flush().map_err(|e| Error::io(path, e))
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNG is supported"));
    }
    Ok((info, buf))
}

pub fn read_png_rgb(path: &Path) -> Result<ImageSample> {
    let (info, buf) = read_png(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let ch = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let mut pixels = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if ch >= 3 { c } else { 0 };
            pixels[c * h * w + i] = buf[i * ch + src] as f64 / 255.0;
        }
    }
    ImageSample::new(h, w, pixels)
}

/// Returns `(height, width, values)` with values in `{0, 1}` (any nonzero byte counts as on).
pub fn read_png_mask(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "mask must be 8-bit grayscale"));
    }
    Ok((info.height as usize, info.width as usize, buf.iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect()))
}

pub fn write_wav(path: &Path, clip: &AudioClipSample) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::format(path, e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in clip.samples() {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16).map_err(err)?;
    }
    w.finalize().map_err(err)
}

pub fn read_wav(path: &Path) -> Result<AudioClipSample> {
    let err = |e: hound::Error| Error::format(path, e.to_string());
    let mut r = hound::WavReader::open(path).map_err(err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "expected mono 16-bit PCM"));
    }
    let samples: std::result::Result<Vec<i16>, _> = r.samples::<i16>().collect();
    let samples = samples.map_err(err)?.into_iter().map(|s| (s as f64 / 32767.0).max(-1.0)).collect();
    AudioClipSample::new(samples, spec.sample_rate)
}

/// Absolute path helper for manifest-relative paths.
pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}
