//! Synthetic moving-shape RGB clips with simulated events.
//!
//! Each class is a (shape, direction) motion program. A sample renders
//! `frames + 1` images of a bright shape translating over a dark background,
//! simulates events over every consecutive pair, and keeps the first
//! `frames` images as the RGB clip. Events from the last transition fall
//! after the final frame stamp and therefore bin into the last frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{simulate_dvs, EventStream, VideoClip};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
}

impl Direction {
    fn unit(self) -> (f64, f64) {
        match self {
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionClass {
    pub shape: Shape,
    pub direction: Direction,
}

impl MotionClass {
    /// Human-readable label, e.g. `"square moving right"`.
    pub fn label(&self) -> String {
        let shape = match self.shape {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Bar => "bar",
        };
        let dir = match self.direction {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Up => "up",
            Direction::Down => "down",
        };
        format!("{shape} moving {dir}")
    }
}

/// All motion classes in index order: shapes outer, directions inner.
pub fn class_catalogue() -> Vec<MotionClass> {
    let mut out = Vec::new();
    for shape in [Shape::Square, Shape::Disc, Shape::Bar] {
        for direction in [Direction::Right, Direction::Left, Direction::Up, Direction::Down] {
            out.push(MotionClass { shape, direction });
        }
    }
    out
}

/// How RGB frames are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RgbMode {
    /// The moving shape is visible in the RGB frames.
    #[default]
    Rendered,
    /// Every RGB frame is the same flat gray image; only events carry motion.
    Blank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Square sensor side in pixels.
    pub resolution: usize,
    /// RGB frames per clip (N).
    pub frames: usize,
    pub dvs_threshold: f64,
    pub frame_interval_us: i64,
    pub rgb_mode: RgbMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            samples_per_class: 16,
            resolution: 32,
            frames: 3,
            dvs_threshold: 0.2,
            frame_interval_us: 33_333,
            rgb_mode: RgbMode::Rendered,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let max = class_catalogue().len();
        if self.classes < 2 || self.classes > max {
            return Err(Error::contract(format!(
                "synthetic data needs between 2 and {max} classes, got {}",
                self.classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::contract("samples_per_class must be positive"));
        }
        if self.frames == 0 {
            return Err(Error::contract("clips need at least one frame"));
        }
        if self.resolution < 8 || self.resolution > u16::MAX as usize {
            return Err(Error::contract("resolution must lie in [8, 65535]"));
        }
        if !(self.dvs_threshold > 0.0) {
            return Err(Error::contract("dvs_threshold must be positive"));
        }
        if self.frame_interval_us < 2 {
            return Err(Error::contract("frame_interval_us must be at least 2"));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        class_catalogue()[..self.classes].iter().map(MotionClass::label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub clip: VideoClip,
    pub events: EventStream,
    pub label: usize,
}

const SUPERSAMPLE: usize = 4;

fn coverage(shape: Shape, direction: Direction, cx: f64, cy: f64, size: f64, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let (dx, dy) = (x - cx, y - cy);
            let inside = match shape {
                Shape::Square => dx.abs() <= size / 2.0 && dy.abs() <= size / 2.0,
                Shape::Disc => dx * dx + dy * dy <= size * size / 4.0,
                Shape::Bar => {
                    // Thin along the motion axis, long across it.
                    let (along, across) = match direction {
                        Direction::Left | Direction::Right => (dx, dy),
                        Direction::Up | Direction::Down => (dy, dx),
                    };
                    along.abs() <= size * 0.2 && across.abs() <= size * 0.8
                }
            };
            if inside {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn render_sample(spec: &SynthSpec, class: MotionClass, label: usize, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let res = spec.resolution as f64;
    let background = rng.random_range(0.05..0.2);
    let brightness = rng.random_range(0.7..1.0);
    let tint: [f64; 3] = [
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
    ];
    let size = res * rng.random_range(0.15..0.2);
    let speed = res * rng.random_range(0.06..0.1);
    let steps = spec.frames as f64;
    let travel = speed * steps;
    let margin = size / 2.0 + 1.0;
    let (ux, uy) = class.direction.unit();

    // Along-axis start keeps the whole path inside the frame when possible.
    let span_lo = margin;
    let span_hi = (res - margin - travel).max(span_lo);
    let along0 = rng.random_range(span_lo..=span_hi);
    let across = rng.random_range(margin..=(res - margin).max(margin));
    let (start_x, start_y) = match class.direction {
        Direction::Right => (along0, across),
        Direction::Left => (res - along0, across),
        Direction::Down => (across, along0),
        Direction::Up => (across, res - along0),
    };

    let w = spec.resolution;
    let mut rendered = Vec::with_capacity(spec.frames + 1);
    for k in 0..=spec.frames {
        let cx = start_x + ux * speed * k as f64;
        let cy = start_y + uy * speed * k as f64;
        let mut img = Image::filled(w, w, 3, background);
        for py in 0..w {
            for px in 0..w {
                let c = coverage(class.shape, class.direction, cx, cy, size, px, py);
                if c > 0.0 {
                    for (ch, t) in tint.iter().enumerate() {
                        img.set(px, py, ch, background + c * (brightness * t - background));
                    }
                }
            }
        }
        rendered.push(img);
    }
    let stamps: Vec<i64> = (0..=spec.frames as i64).map(|k| k * spec.frame_interval_us).collect();
    let full = VideoClip::new(rendered, stamps.clone())?;
    let events = simulate_dvs(&full, spec.dvs_threshold)?;

    let rgb_frames = match spec.rgb_mode {
        RgbMode::Rendered => full.frames()[..spec.frames].to_vec(),
        RgbMode::Blank => vec![Image::filled(w, w, 3, 0.5); spec.frames],
    };
    let clip = VideoClip::new(rgb_frames, stamps[..spec.frames].to_vec())?;
    Ok(SynthSample { clip, events, label })
}

/// Generates `classes × samples_per_class` samples, grouped by class,
/// deterministically from `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let catalogue = class_catalogue();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (label, class) in catalogue[..spec.classes].iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            out.push(render_sample(spec, *class, label, &mut rng)?);
        }
    }
    Ok(out)
}
