//! Binning events into per-frame ON/OFF count images.

use super::{EventFrameSequence, EventStream, Polarity, Resolution};
use crate::error::{Error, Result};
use crate::image::Image;

/// Raw per-pixel counts for one frame window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventCounts {
    pub width: usize,
    pub height: usize,
    pub on: Vec<u32>,
    pub off: Vec<u32>,
}

impl EventCounts {
    fn new(width: usize, height: usize) -> Self {
        EventCounts {
            width,
            height,
            on: vec![0; width * height],
            off: vec![0; width * height],
        }
    }

    pub fn total(&self) -> u64 {
        self.on.iter().chain(&self.off).map(|&c| c as u64).sum()
    }

    pub fn max(&self) -> u32 {
        self.on.iter().chain(&self.off).copied().max().unwrap_or(0)
    }

    /// Two-channel image divided by the frame's own max count.
    pub fn normalized(&self) -> Image {
        let max = self.max();
        let norm = |c: u32| if max == 0 { 0.0 } else { c as f64 / max as f64 };
        let mut data = Vec::with_capacity(self.on.len() * 2);
        for (&on, &off) in self.on.iter().zip(&self.off) {
            data.extend_from_slice(&[norm(on), norm(off)]);
        }
        Image::new(self.width, self.height, 2, data).expect("consistent size")
    }
}

/// Frame index for timestamp `t`: the largest `j` with `ts[j] <= t`, clamped
/// to the first frame for earlier events.
pub fn frame_index(clip_timestamps: &[i64], t: i64) -> usize {
    clip_timestamps.partition_point(|&ts| ts <= t).saturating_sub(1)
}

/// Accumulates counts per frame window.
pub fn stack_counts(
    stream: &EventStream,
    clip_timestamps: &[i64],
    resolution: Resolution,
) -> Result<Vec<EventCounts>> {
    if clip_timestamps.is_empty() {
        return Err(Error::contract("stack_events needs at least one frame timestamp"));
    }
    if clip_timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("frame timestamps must be strictly increasing"));
    }
    let (w, h) = (resolution.0 as usize, resolution.1 as usize);
    let mut frames = vec![EventCounts::new(w, h); clip_timestamps.len()];
    for (i, e) in stream.events().iter().enumerate() {
        if e.x as usize >= w || e.y as usize >= h {
            return Err(Error::Validation(format!(
                "event {i} at ({}, {}) lies outside {w}x{h}",
                e.x, e.y
            )));
        }
        let f = &mut frames[frame_index(clip_timestamps, e.t)];
        let px = e.y as usize * w + e.x as usize;
        match e.p {
            Polarity::On => f.on[px] += 1,
            Polarity::Off => f.off[px] += 1,
        }
    }
    Ok(frames)
}

/// Event images aligned with the given frame timestamps.
pub fn stack_events(
    stream: &EventStream,
    clip_timestamps: &[i64],
    resolution: Resolution,
) -> Result<EventFrameSequence> {
    let counts = stack_counts(stream, clip_timestamps, resolution)?;
    EventFrameSequence::new(counts.iter().map(EventCounts::normalized).collect())
}
