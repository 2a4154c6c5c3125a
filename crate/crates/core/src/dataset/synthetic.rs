//! Synthetic US-like video corpus.
//!
//! Each video is a smoothly drifting, video-specific background texture (the
//! "organ" seen through a moving probe) plus a ring-shaped pathology pattern
//! that is visible only inside one temporal window `[T − w, T + w]`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameRef, Image, ImageShape, LabeledImage, LabeledImageSet, Provenance, Video, VideoCorpus};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub height: usize,
    pub width: usize,
    /// AR(1) coefficient of the probe velocity, in `[0, 1)`; higher is smoother.
    pub smoothness: f64,
    /// Scale of the probe velocity, in image widths per frame.
    pub drift: f64,
    /// Pathology window half-width `w`; the window spans `2w + 1` frames.
    pub window_half_width: usize,
    pub pattern_amplitude: f64,
    /// Depth in `[0, 1)` of the slow per-wave amplitude modulation of the background.
    pub modulation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 8,
            min_frames: 40,
            max_frames: 80,
            height: 16,
            width: 16,
            smoothness: 0.9,
            drift: 0.03,
            window_half_width: 8,
            pattern_amplitude: 0.3,
            modulation: 0.5,
            noise: 0.03,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: &str| Err(Error::config(format!("synthetic.{key}"), reason));
        if self.num_videos == 0 {
            return err("num_videos", "must be ≥ 1");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return err("min_frames", "need 1 ≤ min_frames ≤ max_frames");
        }
        if self.height < 4 || self.width < 4 {
            return err("height", "images must be at least 4×4");
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return err("smoothness", "must lie in [0, 1)");
        }
        if 2 * self.window_half_width + 1 > self.min_frames {
            return err(
                "window_half_width",
                "pathology window (2w + 1 frames) is wider than the shortest video",
            );
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return err("drift", "must be ≥ 0");
        }
        if !(0.0..1.0).contains(&self.modulation) {
            return err("modulation", "must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.pattern_amplitude >= 0.0) {
            return err("noise", "noise and pattern_amplitude must be ≥ 0");
        }
        Ok(())
    }
}

/// Pathology window of one video, 1-based inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyWindow {
    pub video_id: String,
    pub start: usize,
    pub end: usize,
}

/// Per-video ground truth. Only tests and downstream labeling read this.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pub windows: Vec<PathologyWindow>,
}

impl GroundTruth {
    pub fn window(&self, video_id: &str) -> Option<&PathologyWindow> {
        self.windows.iter().find(|w| w.video_id == video_id)
    }

    pub fn is_visible(&self, video_id: &str, frame: usize) -> bool {
        self.window(video_id)
            .is_some_and(|w| (w.start..=w.end).contains(&frame))
    }

    /// Tab-separated `video_id  start  end` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("video_id\twindow_start\twindow_end\n");
        for w in &self.windows {
            out.push_str(&format!("{}\t{}\t{}\n", w.video_id, w.start, w.end));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Wave {
    amplitude: f64,
    fx: f64,
    fy: f64,
    phase: f64,
    /// Temporal modulation of the amplitude: slices of the organ come and go.
    rate: f64,
    offset: f64,
}

/// Generates the corpus and its ground-truth table. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(VideoCorpus, GroundTruth)> {
    spec.validate()?;
    let shape = ImageShape::new(spec.height, spec.width, 1);
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut truth = GroundTruth::default();
    for v in 0..spec.num_videos {
        let mut rng = stream(spec.seed, Stream::Synthetic, v as u64);
        let id = format!("vid{v:03}");
        let frames = rng.random_range(spec.min_frames..=spec.max_frames);
        let w = spec.window_half_width;
        let center = rng.random_range(w + 1..=frames - w);
        let window = PathologyWindow {
            video_id: id.clone(),
            start: center - w,
            end: center + w,
        };
        let images = render_video(spec, frames, &window, &mut rng);
        let refs = images.into_iter().map(|im| FrameRef::Memory(Arc::new(im))).collect();
        videos.push(Video::new(id, refs, shape)?);
        truth.windows.push(window);
    }
    Ok((VideoCorpus::new(videos, shape, Provenance::Synthetic)?, truth))
}

fn render_video(spec: &SyntheticSpec, frames: usize, window: &PathologyWindow, rng: &mut impl Rng) -> Vec<Image> {
    let (h, w) = (spec.height, spec.width);
    let base = rng.random_range(0.35..0.55);
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.6..2.2);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Wave {
                amplitude: rng.random_range(0.04..0.12),
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                rate: rng.random_range(0.02..0.08),
                offset: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    // Probe trajectory: smoothly varying velocity, position in image fractions.
    let step = Normal::new(0.0, spec.drift.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut vel = [step.sample(rng), step.sample(rng)];
    let mut pos = [0.0f64, 0.0f64];
    let mut traj = Vec::with_capacity(frames);
    for _ in 0..frames {
        traj.push(pos);
        for d in 0..2 {
            vel[d] = spec.smoothness * vel[d] + (1.0 - spec.smoothness) * step.sample(rng) * 3.0;
            pos[d] += vel[d];
        }
    }

    // Pathology anchor in pixel space; it follows the probe motion.
    let anchor = [
        rng.random_range(0.35..0.65) * h as f64,
        rng.random_range(0.35..0.65) * w as f64,
    ];
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");

    (0..frames)
        .map(|t| {
            let p = traj[t];
            let mut data = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 / w as f64 + p[1];
                    let vv = y as f64 / h as f64 + p[0];
                    let mut val = base;
                    for wave in &waves {
                        let amp = wave.amplitude * (1.0 + spec.modulation * (wave.rate * t as f64 + wave.offset).sin());
                        val += amp * (std::f64::consts::TAU * (wave.fx * u + wave.fy * vv) + wave.phase).sin();
                    }
                    data[y * w + x] = val;
                }
            }
            let frame = t + 1;
            if (window.start..=window.end).contains(&frame) {
                let cy = (anchor[0] - p[0] * h as f64 * 0.5).clamp(3.0, h as f64 - 4.0);
                let cx = (anchor[1] - p[1] * w as f64 * 0.5).clamp(3.0, w as f64 - 4.0);
                for y in 0..h {
                    for x in 0..w {
                        let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        data[y * w + x] += spec.pattern_amplitude * (-(r - 2.0).powi(2) / 0.8).exp();
                    }
                }
            }
            if spec.noise > 0.0 {
                data.iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Image {
                shape: ImageShape::new(h, w, 1),
                data,
            }
        })
        .collect()
}

/// Builds a binary `absent`/`present` labeled set from a synthetic corpus: up to
/// `per_class` frames drawn from inside and outside each video's window. Patient
/// id is the video id.
pub fn labeled_frames(
    corpus: &VideoCorpus,
    truth: &GroundTruth,
    per_class: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    let mut rng = stream(seed, Stream::Synthetic, u64::MAX);
    let mut items = Vec::new();
    for v in corpus.videos() {
        let win = truth.window(&v.id).ok_or_else(|| Error::Video {
            video: v.id.clone(),
            reason: "no ground-truth window".into(),
        })?;
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (1..=v.len()).partition(|j| (win.start..=win.end).contains(j));
        for (label, pool) in [(0, &outside), (1, &inside)] {
            let take = per_class.min(pool.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            for j in picked {
                items.push(LabeledImage {
                    image: v.frame(j)?,
                    label,
                    patient_id: v.id.clone(),
                });
            }
        }
    }
    LabeledImageSet::new(items, vec!["absent".into(), "present".into()])
}
