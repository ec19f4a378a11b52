//! `avclip` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avclip::harness::{
    ablation_csv, ablation_matrix, build_model, class_texts, evaluate, localize, multisource_localize, overlay,
    precompute, prepare, train, write_report, Checkpoint, ExperimentConfig, Task, TrainOutputs,
};
use avclip::llm_guidance::CaptionStore;
use avclip::metrics::write_heatmap;
use avclip::model::PreparedSample;
use avclip::synthdata::{load_dataset, make_dataset, read_png_rgb, read_wav, write_png_rgb, Dataset, Variant};
use avclip::{Error, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "avclip", version, about = "Sound source localization on synthetic audio-visual scenes")]
struct Cli {
    /// JSON experiment config; `AVCLIP_<SECTION>_<FIELD>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under `paths.data_root`.
    GenData,
    /// Caption the training scenes and cache the LLM responses.
    PrecomputeCaptions,
    /// Train and write `checkpoint.json` and `train_log.jsonl` under `paths.out_dir`.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one task.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "single")]
        task: String,
        /// Report directory; defaults to `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Localize the sound of one image/audio pair.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Output stem; writes `<out>.avh` and `<out>.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank class prompts for a mixture and keep the top k.
    Multisource {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Number of lexicon classes to use as prompts; defaults to `data.classes`.
        #[arg(long)]
        classes: Option<usize>,
        /// Directory for `<rank>_<class>.avh` heatmaps.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate loss combinations A-F and write `ablation.csv`.
    Ablation {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(&cfg.paths.data_root)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, avclip::model::Model)> {
    let ckpt = Checkpoint::load(path)?;
    let model = build_model(&ckpt.config)?;
    ckpt.check_stack(&model.stack)?;
    Ok((ckpt, model))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let out_dir = cfg.paths.out_dir.clone();
    match cli.command {
        Command::GenData => {
            let records = make_dataset(&cfg.paths.data_root, &cfg.data)?;
            emit(json!({"data_root": cfg.paths.data_root, "records": records.len()}));
        }
        Command::PrecomputeCaptions => {
            let model = build_model(&cfg)?;
            let ds = dataset(&cfg)?;
            let scenes = ds.select("train", Variant::Matched);
            let (_, report) = precompute(&model.stack, &scenes, &cfg.llm)?;
            emit(json!({"cache": cfg.llm.cache_path, "report": report}));
        }
        Command::Train { resume } => {
            let start = match resume {
                Some(p) => Checkpoint::load(&p)?,
                None => {
                    let model = build_model(&cfg)?;
                    Checkpoint::init(&model.stack, &cfg)
                }
            };
            let model = build_model(&start.config)?;
            let ds = dataset(&start.config)?;
            let scenes = ds.select("train", Variant::Matched);
            let mut data = prepare(&model.stack, &scenes)?;
            if start.config.train.llm_enabled {
                let store = CaptionStore::load(&start.config.llm.cache_path)?;
                avclip::harness::attach_captions(&mut data, &store);
            }
            let outputs = TrainOutputs {
                checkpoint: Some(out_dir.join("checkpoint.json")),
                log: Some(out_dir.join("train_log.jsonl")),
                dump_dir: Some(out_dir.clone()),
            };
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let (ckpt, logs) = train(&model, &data, start, None, &outputs)?;
            emit(json!({
                "checkpoint": outputs.checkpoint,
                "steps": ckpt.step,
                "final_loss": logs.last().map(|l| l.losses.total),
            }));
        }
        Command::Evaluate { checkpoint, task, out } => {
            let task = Task::parse(&task)?;
            let (ckpt, model) = load_checkpoint(&checkpoint)?;
            let ds = dataset(&cfg)?;
            let report = evaluate(&model, &ckpt.state, task, &ds.scenes, &cfg.eval)?;
            let files = write_report(&out.unwrap_or(out_dir), task.name(), &report)?;
            emit(json!({"task": task.name(), "metrics": report.metrics, "files": files}));
        }
        Command::Localize { checkpoint, image, audio, out } => {
            let (ckpt, model) = load_checkpoint(&checkpoint)?;
            let img = read_png_rgb(&image)?;
            let heat = localize(&model, &ckpt.state, &img, &read_wav(&audio)?)?;
            let raw = out.with_extension("avh");
            let png = out.with_extension("png");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_heatmap(&raw, &heat)?;
            write_png_rgb(&png, &overlay(&img, &heat)?)?;
            emit(json!({"heatmap": raw, "overlay": png, "height": heat.height, "width": heat.width}));
        }
        Command::Multisource { checkpoint, image, audio, k, classes, out } => {
            let (ckpt, model) = load_checkpoint(&checkpoint)?;
            let img = read_png_rgb(&image)?;
            let sample = PreparedSample::new(&model.stack, "query", &img, &read_wav(&audio)?)?;
            let texts = class_texts(classes.unwrap_or(ckpt.config.data.classes));
            let ranked = multisource_localize(&model, &ckpt.state, &sample, &texts, k)?;
            let mut items = Vec::new();
            for (rank, r) in ranked.iter().enumerate() {
                let file = match &out {
                    Some(dir) => {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        let p = dir.join(format!("{rank}_c{}.avh", r.class_index));
                        write_heatmap(&p, &r.heatmap)?;
                        Some(p)
                    }
                    None => None,
                };
                items.push(json!({"class": r.class_index, "text": texts[r.class_index], "score": r.score, "heatmap": file}));
            }
            emit(json!({"top": items}));
        }
        Command::Ablation { seeds } => {
            let model = build_model(&cfg)?;
            let ds = dataset(&cfg)?;
            let train_data = prepare(&model.stack, &ds.select("train", Variant::Matched))?;
            let test = Task::Single.select(&ds.scenes, &cfg.eval.split)?;
            let test_data = prepare(&model.stack, &test)?;
            let results = ablation_matrix(&model, &cfg, &train_data, &test, &test_data, &seeds, |r| {
                eprintln!("{}", json!({"row": r.row.label(), "seed": r.seed, "metrics": r.metrics}));
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let path = out_dir.join("ablation.csv");
            std::fs::write(&path, ablation_csv(&results)).map_err(|e| Error::io(&path, e))?;
            emit(json!({"ablation": path}));
        }
    }
    Ok(())
}
