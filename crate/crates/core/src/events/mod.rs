//! Event-camera data: streams of `[x, y, t, p]` quadruples, their file
//! formats, conversion to per-frame event images and a log-intensity DVS
//! simulator.

mod dvs;
mod io;
mod stack;

pub use dvs::simulate_dvs;
pub use io::{
    parse_events, read_binary, read_csv, write_binary, write_csv, write_events, EventFormat,
    BINARY_MAGIC, BINARY_VERSION,
};
pub use stack::{frame_index, stack_counts, stack_events, EventCounts};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// File encoding: 1 = ON, 0 = OFF.
    pub fn as_bit(self) -> u8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::On),
            0 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

/// One event: pixel column/row, microsecond timestamp, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventPoint {
    pub x: u16,
    pub y: u16,
    pub t: i64,
    pub p: Polarity,
}

/// Sensor resolution as `(width, height)`.
pub type Resolution = (u16, u16);

/// Events sorted by timestamp (stable with respect to input order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    resolution: Resolution,
    events: Vec<EventPoint>,
}

impl EventStream {
    /// Validates coordinates and timestamps, then stably sorts by `t`.
    pub fn new(resolution: Resolution, mut events: Vec<EventPoint>) -> Result<Self> {
        let (w, h) = resolution;
        if w == 0 || h == 0 {
            return Err(Error::Validation("sensor resolution must be positive".into()));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= w || e.y >= h {
                return Err(Error::Validation(format!(
                    "event {i} at ({}, {}) lies outside the {w}x{h} sensor",
                    e.x, e.y
                )));
            }
            if e.t < 0 {
                return Err(Error::Validation(format!("event {i} has negative timestamp {}", e.t)));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream { resolution, events })
    }

    pub fn empty(resolution: Resolution) -> Self {
        EventStream {
            resolution,
            events: Vec::new(),
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// RGB frames with strictly increasing microsecond timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Image>,
    timestamps: Vec<i64>,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>, timestamps: Vec<i64>) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::contract(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("frame timestamps must be strictly increasing"));
        }
        if let Some(first) = frames.first() {
            for f in &frames {
                if f.channels() != 3 || f.width() != first.width() || f.height() != first.height() {
                    return Err(Error::contract("clip frames must share size and have 3 channels"));
                }
            }
        }
        Ok(VideoClip { frames, timestamps })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames in reverse order, keeping the original timestamps.
    pub fn time_reversed(&self) -> VideoClip {
        VideoClip {
            frames: self.frames.iter().rev().cloned().collect(),
            timestamps: self.timestamps.clone(),
        }
    }

    pub fn truncated(&self, n: usize) -> Result<VideoClip> {
        VideoClip::new(self.frames[..n.min(self.len())].to_vec(), self.timestamps[..n.min(self.len())].to_vec())
    }
}

/// Two-channel (ON count, OFF count) event images, normalized per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrameSequence {
    frames: Vec<Image>,
}

impl EventFrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if frames.iter().any(|f| f.channels() != 2) {
            return Err(Error::contract("event frames have exactly 2 channels"));
        }
        Ok(EventFrameSequence { frames })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Same shape, all zeros.
    pub fn zeroed(&self) -> Self {
        EventFrameSequence {
            frames: self
                .frames
                .iter()
                .map(|f| Image::filled(f.width(), f.height(), 2, 0.0))
                .collect(),
        }
    }

    /// Three-channel view for the patch embedder: `[ON, OFF, (ON + OFF) / 2]`.
    pub fn to_three_channel(&self) -> Vec<Image> {
        self.frames
            .iter()
            .map(|f| {
                let mut data = Vec::with_capacity(f.width() * f.height() * 3);
                for px in f.data().chunks_exact(2) {
                    data.extend_from_slice(&[px[0], px[1], 0.5 * (px[0] + px[1])]);
                }
                Image::new(f.width(), f.height(), 3, data).expect("consistent size")
            })
            .collect()
    }
}
