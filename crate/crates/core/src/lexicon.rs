//! Shared vocabulary of the synthetic world: object classes, their colors and
//! tone bands, and the words used to talk about them.

use serde::{Deserialize, Serialize};

/// Background fill of every synthetic scene.
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
/// Fixed text placed before the audio slot or a caption token.
pub const PROMPT_PREFIX: &str = "a photo of a";
/// Pixel value left behind by masking.
pub const MASKED: [u8; 3] = [0, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
        }
    }
}

/// Fixed description of one object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub shape: Shape,
    pub color_name: &'static str,
    pub color: [u8; 3],
    /// Tone band in Hz.
    pub band: (f64, f64),
    /// What the stub audio captioner says about this class.
    pub sound_phrase: &'static str,
}

impl ClassInfo {
    /// Short object name, e.g. `red circle`.
    pub fn object_name(&self) -> String {
        format!("{} {}", self.color_name, self.shape.name())
    }
}

const CLASS_TABLE: [(Shape, &str, [u8; 3], (f64, f64), &str); 8] = [
    (Shape::Circle, "red", [220, 30, 30], (600.0, 1000.0), "a low humming tone"),
    (Shape::Square, "green", [30, 200, 40], (2100.0, 2500.0), "a steady mid-frequency tone"),
    (Shape::Circle, "blue", [30, 60, 230], (3600.0, 4000.0), "a bright whistling tone"),
    (Shape::Square, "yellow", [235, 215, 20], (5100.0, 5500.0), "a shrill high beeping tone"),
    (Shape::Square, "magenta", [210, 40, 200], (6400.0, 6800.0), "a piercing squeal"),
    (Shape::Circle, "cyan", [20, 210, 210], (1300.0, 1500.0), "a soft buzzing tone"),
    (Shape::Circle, "orange", [240, 130, 20], (2850.0, 3050.0), "a clear ringing tone"),
    (Shape::Square, "white", [250, 250, 250], (4350.0, 4550.0), "a thin chirping tone"),
];

pub const MAX_CLASSES: usize = CLASS_TABLE.len();

pub fn class_info(id: usize) -> ClassInfo {
    let (shape, color_name, color, band, sound_phrase) = CLASS_TABLE[id];
    ClassInfo { id, shape, color_name, color, band, sound_phrase }
}

pub fn classes(k: usize) -> Vec<ClassInfo> {
    (0..k).map(class_info).collect()
}

