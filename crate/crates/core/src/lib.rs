//! Audio-visual sound source localization by grounding audio-driven prompts in
//! a frozen vision-language stack.

pub mod audio_tokenizer;
pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod lexicon;
pub mod llm_guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
