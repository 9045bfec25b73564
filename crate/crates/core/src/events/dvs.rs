//! Log-intensity event simulator.

use super::{EventPoint, EventStream, Polarity, VideoClip};
use crate::error::{Error, Result};

/// Offset inside the logarithm so black pixels stay finite.
pub const LOG_OFFSET: f64 = 1e-3;

// Guards floor(|Δ| / threshold) against ratios like 2.9999999999999996.
const RATIO_GUARD: f64 = 1e-9;

/// Emits `floor(|Δ log I| / threshold)` events per pixel and consecutive
/// frame pair, where `I` is the channel mean and `Δ` the change between the
/// two frames. Timestamps are spread evenly inside the open interval between
/// the two frame stamps.
pub fn simulate_dvs(clip: &VideoClip, threshold: f64) -> Result<EventStream> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::contract(format!("DVS threshold must be positive, got {threshold}")));
    }
    if clip.len() < 2 {
        return Err(Error::contract("DVS simulation needs at least two frames"));
    }
    let first = &clip.frames()[0];
    let (w, h) = (first.width(), first.height());
    let resolution = (
        u16::try_from(w).map_err(|_| Error::contract("frame too wide"))?,
        u16::try_from(h).map_err(|_| Error::contract("frame too tall"))?,
    );
    let log_frames: Vec<Vec<f64>> = clip
        .frames()
        .iter()
        .map(|f| {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| (f.luminance(x, y) + LOG_OFFSET).ln())
                .collect()
        })
        .collect();

    let mut events = Vec::new();
    for k in 0..clip.len() - 1 {
        let (t0, t1) = (clip.timestamps()[k], clip.timestamps()[k + 1]);
        let span = (t1 - t0) as f64;
        for y in 0..h {
            for x in 0..w {
                let delta = log_frames[k + 1][y * w + x] - log_frames[k][y * w + x];
                let n = (delta.abs() / threshold + RATIO_GUARD).floor() as usize;
                if n == 0 {
                    continue;
                }
                let p = if delta > 0.0 { Polarity::On } else { Polarity::Off };
                for i in 0..n {
                    let frac = (i + 1) as f64 / (n + 1) as f64;
                    events.push(EventPoint {
                        x: x as u16,
                        y: y as u16,
                        t: t0 + (span * frac).floor() as i64,
                        p,
                    });
                }
            }
        }
    }
    EventStream::new(resolution, events)
}
