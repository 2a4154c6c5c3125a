//! Frame sampler: one anchor, one temporally close positive and `k` temporally
//! distant intra-video negatives per draw.
//!
//! Intervals that run past the video are clipped to `[1, M]` before sampling,
//! so every draw is uniform over the feasible set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Video;
use crate::error::{Error, Result};

/// Anchor re-draws allowed when the negative support is empty.
pub const MAX_ANCHOR_DRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Positive window half-width δ.
    pub delta: usize,
    /// Intra-video negatives per anchor.
    pub k: usize,
    /// Smallest exclusion zone Δ_l used by the curriculum.
    pub delta_low: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            delta: 3,
            k: 3,
            delta_low: 7,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::config("sampler.delta", "must be ≥ 1"));
        }
        if self.k == 0 {
            return Err(Error::config("sampler.k", "must be ≥ 1"));
        }
        if self.delta_low < self.delta {
            return Err(Error::config("sampler.delta_low", "must be ≥ sampler.delta"));
        }
        Ok(())
    }
}

/// Frame indices (1-based) drawn from one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTuple {
    pub video_id: String,
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    /// Exclusion zone Δ in force for this draw.
    pub exclusion: usize,
}

/// A union of at most two closed index ranges, as produced by removing one
/// interval from another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Support {
    left: Option<(usize, usize)>,
    right: Option<(usize, usize)>,
}

impl Support {
    fn range(lo: usize, hi: usize) -> Option<(usize, usize)> {
        (lo <= hi).then_some((lo, hi))
    }

    fn span(r: Option<(usize, usize)>) -> usize {
        r.map_or(0, |(lo, hi)| hi - lo + 1)
    }

    pub fn len(&self) -> usize {
        Self::span(self.left) + Self::span(self.right)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        [self.left, self.right]
            .into_iter()
            .flatten()
            .any(|(lo, hi)| (lo..=hi).contains(&i))
    }

    /// The `n`-th smallest member (0-based).
    pub fn nth(&self, n: usize) -> Option<usize> {
        let l = Self::span(self.left);
        if n < l {
            self.left.map(|(lo, _)| lo + n)
        } else if n - l < Self::span(self.right) {
            self.right.map(|(lo, _)| lo + n - l)
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        [self.left, self.right]
            .into_iter()
            .flatten()
            .flat_map(|(lo, hi)| lo..=hi)
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Closed ranges making up the set, for display.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        [self.left, self.right].into_iter().flatten().collect()
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let n = rng.random_range(0..self.len());
        self.nth(n).expect("index drawn below len")
    }
}

/// `([a − δ, a + δ] ∩ [1, M]) \ {a}`.
pub fn positive_support(anchor: usize, delta: usize, frames: usize) -> Result<Support> {
    check_anchor(anchor, frames)?;
    let s = Support {
        left: Support::range(anchor.saturating_sub(delta).max(1), anchor - 1),
        right: Support::range(anchor + 1, (anchor + delta).min(frames)),
    };
    if s.is_empty() {
        return Err(Error::EmptyPositiveSupport { frames });
    }
    Ok(s)
}

/// Unchecked variant: `[1, M] \ [a − Δ, a + Δ]`, possibly empty.
pub fn negative_candidates(anchor: usize, exclusion: usize, frames: usize) -> Support {
    Support {
        left: anchor
            .checked_sub(exclusion + 1)
            .and_then(|hi| Support::range(1, hi)),
        right: Support::range(anchor + exclusion + 1, frames),
    }
}

/// `[1, M] \ [a − Δ, a + Δ]`.
pub fn negative_support(anchor: usize, exclusion: usize, frames: usize) -> Result<Support> {
    check_anchor(anchor, frames)?;
    if exclusion == 0 {
        return Err(Error::Invalid("exclusion zone Δ must be ≥ 1".into()));
    }
    let s = negative_candidates(anchor, exclusion, frames);
    if s.is_empty() {
        return Err(Error::EmptyNegativeSupport {
            anchor,
            exclusion,
            frames,
        });
    }
    Ok(s)
}

fn check_anchor(anchor: usize, frames: usize) -> Result<()> {
    if anchor == 0 || anchor > frames {
        return Err(Error::Invalid(format!("anchor {anchor} outside [1, {frames}]")));
    }
    Ok(())
}

/// Draws one tuple from `video` with exclusion zone `exclusion` (Δ).
///
/// The anchor is re-drawn up to [`MAX_ANCHOR_DRAWS`] times when it leaves no
/// room for negatives. Negatives are drawn i.i.d. with replacement. With
/// `k = 0` only the anchor/positive pair is drawn and Δ is not constrained.
pub fn sample_tuple(video: &Video, exclusion: usize, config: &SamplerConfig, rng: &mut impl Rng) -> Result<SampleTuple> {
    let frames = video.len();
    if frames < 2 {
        return Err(Error::EmptyPositiveSupport { frames });
    }
    if config.delta > frames / 4 {
        log::debug!(
            "video `{}`: δ = {} is not small relative to M = {frames}",
            video.id,
            config.delta
        );
    }
    let exclusion = exclusion.max(1);
    for _ in 0..MAX_ANCHOR_DRAWS {
        let anchor = rng.random_range(1..=frames);
        let neg = negative_candidates(anchor, exclusion, frames);
        if config.k > 0 && neg.is_empty() {
            continue;
        }
        let positive = positive_support(anchor, config.delta, frames)?.sample(rng);
        let negatives = (0..config.k).map(|_| neg.sample(rng)).collect();
        return Ok(SampleTuple {
            video_id: video.id.clone(),
            anchor,
            positive,
            negatives,
            exclusion,
        });
    }
    Err(Error::SamplerExhausted {
        video: video.id.clone(),
        frames,
        exclusion,
        attempts: MAX_ANCHOR_DRAWS,
    })
}

/// Empirical index histograms from repeated draws, for auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerHistogram {
    pub anchor: Vec<u64>,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
    pub violations: u64,
}

/// Counts (1-based index `i` at slot `i − 1`) over `draws` tuples from a video of length `frames`.
pub fn histogram(
    frames: usize,
    exclusion: usize,
    config: &SamplerConfig,
    draws: usize,
    rng: &mut impl Rng,
) -> Result<SamplerHistogram> {
    let shape = crate::dataset::ImageShape::new(1, 1, 1);
    let blank = std::sync::Arc::new(crate::dataset::Image::zeros(shape));
    let refs = vec![crate::dataset::FrameRef::Memory(blank); frames];
    let video = Video::new("audit", refs, shape)?;
    let mut h = SamplerHistogram {
        anchor: vec![0; frames],
        positive: vec![0; frames],
        negative: vec![0; frames],
        violations: 0,
    };
    for _ in 0..draws {
        let t = sample_tuple(&video, exclusion, config, rng)?;
        h.anchor[t.anchor - 1] += 1;
        h.positive[t.positive - 1] += 1;
        if t.positive == t.anchor || t.positive.abs_diff(t.anchor) > config.delta {
            h.violations += 1;
        }
        for n in t.negatives {
            h.negative[n - 1] += 1;
            if n.abs_diff(t.anchor) <= t.exclusion {
                h.violations += 1;
            }
        }
    }
    Ok(h)
}
