//! Procedural dataset of colored shapes on a dark background, used to
//! train the toy model. Generation is fully determined by the config.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::derive_rng;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

pub const IMAGE_SHAPE: (usize, usize, usize) = (3, 32, 32);

const BACKGROUND: f64 = 0.08;

const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.85]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("magenta", [0.80, 0.20, 0.75]),
    ("cyan", [0.20, 0.80, 0.80]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesDatasetConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for ShapesDatasetConfig {
    fn default() -> Self {
        Self { n: 256, seed: 1 }
    }
}

pub struct ShapeSample {
    pub image: Array3<f64>,
    pub class_id: usize,
    pub color_id: usize,
    pub prompt: String,
}

pub struct ShapesDataset {
    pub config: ShapesDatasetConfig,
    pub samples: Vec<ShapeSample>,
}

impl ShapesDataset {
    pub fn generate(config: &ShapesDatasetConfig) -> ShapesDataset {
        let samples = (0..config.n)
            .map(|i| {
                // Classes cycle so every class has examples at any n.
                let class_id = i % CLASS_NAMES.len();
                let mut rng = derive_rng(config.seed, &["dataset", &i.to_string()]);
                let color_id = rng.random_range(0..COLORS.len());
                let cx: f64 = rng.random_range(11.0..21.0);
                let cy: f64 = rng.random_range(11.0..21.0);
                let radius: f64 = rng.random_range(5.0..10.0);
                let brightness: f64 = rng.random_range(0.85..1.0);
                let (color_name, base) = COLORS[color_id];
                let color = [
                    base[0] * brightness,
                    base[1] * brightness,
                    base[2] * brightness,
                ];
                ShapeSample {
                    image: render(class_id, color, cx, cy, radius),
                    class_id,
                    color_id,
                    prompt: format!(
                        "a {color_name} {} on a dark background",
                        CLASS_NAMES[class_id]
                    ),
                }
            })
            .collect();
        ShapesDataset {
            config: *config,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn render(class_id: usize, color: [f64; 3], cx: f64, cy: f64, radius: f64) -> Array3<f64> {
    let (channels, height, width) = IMAGE_SHAPE;
    let mut image = Array3::from_elem((channels, height, width), BACKGROUND);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Signed distance to the boundary, shifted half a pixel so
            // edges come out antialiased instead of binary.
            let coverage = match class_id {
                0 => soft(radius - (dx * dx + dy * dy).sqrt()),
                1 => soft(0.85 * radius - dx.abs().max(dy.abs())),
                _ => {
                    let half_width = 0.9 * radius * (dy + radius) / (2.0 * radius);
                    soft(half_width - dx.abs()) * soft(radius - dy) * soft(dy + radius)
                }
            };
            if coverage > 0.0 {
                for c in 0..channels {
                    image[[c, y, x]] = BACKGROUND + coverage * (color[c] - BACKGROUND);
                }
            }
        }
    }
    image
}

fn soft(signed: f64) -> f64 {
    (signed + 0.5).clamp(0.0, 1.0)
}
