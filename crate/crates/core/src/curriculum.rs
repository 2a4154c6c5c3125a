//! Hardness schedule for negatives.
//!
//! `Proposed` trains on cross-video negatives only for the first `ρE` epochs,
//! then adds intra-video negatives with the exclusion zone Δ cosine-annealed
//! from `Δ_h = ⌈M/5⌉` down to `Δ_l`. `Anti` runs the same schedule backwards
//! (close negatives first, cross-only at the end). `Control` keeps both
//! negative types throughout and draws Δ uniformly each step.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMode {
    #[default]
    Proposed,
    Anti,
    Control,
}

impl std::str::FromStr for CurriculumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "anti" => Ok(Self::Anti),
            "control" => Ok(Self::Control),
            other => Err(Error::config("curriculum.mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CurriculumMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Proposed => "proposed",
            Self::Anti => "anti",
            Self::Control => "control",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CrossOnly,
    Full,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CrossOnly => "cross_only",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Taken from the trainer's epoch count when run through a config file.
    #[serde(skip)]
    pub total_epochs: usize,
    /// Fraction ρ of epochs spent in the cross-only phase.
    pub warmup_fraction: f64,
    /// Taken from the sampler's `delta_low` when run through a config file.
    #[serde(skip)]
    pub delta_low: usize,
    pub mode: CurriculumMode,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            total_epochs: 60,
            warmup_fraction: 0.2,
            delta_low: 7,
            mode: CurriculumMode::Proposed,
        }
    }
}

/// Schedule snapshot for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub epoch: usize,
    pub phase: Phase,
    /// Fraction λ ∈ [0, 1] of the way from Δ_l (0) to Δ_h (1). `None` in control mode.
    pub lambda: Option<f64>,
}

/// `Δ_h = ⌈M/5⌉`.
pub fn delta_high(frames: usize) -> usize {
    frames.div_ceil(5)
}

/// `round(Δ_l + (Δ_h − Δ_l)·½(1 + cos πt))`, clamped to `[Δ_l, Δ_h]`.
pub fn annealed_delta(t: f64, delta_low: usize, delta_high: usize) -> usize {
    if delta_high <= delta_low {
        return delta_low;
    }
    let span = (delta_high - delta_low) as f64;
    let offset = span * 0.5 * (1.0 + (PI * t.clamp(0.0, 1.0)).cos());
    // f64::round sends ties away from zero, i.e. away from Δ_l since offset ≥ 0.
    (delta_low + offset.round() as usize).clamp(delta_low, delta_high)
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("curriculum.total_epochs", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("curriculum.warmup_fraction", "must lie in [0, 1)"));
        }
        if self.delta_low == 0 {
            return Err(Error::config("curriculum.delta_low", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Number of cross-only epochs: the count of epochs `e` with `e < ρE`.
    pub fn cross_only_epochs(&self) -> usize {
        let raw = self.warmup_fraction * self.total_epochs as f64;
        // Guard against 0.2 × 60 landing a hair above 12.
        let w = (raw - 1e-9).ceil().max(0.0) as usize;
        w.min(self.total_epochs.saturating_sub(1))
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        let w = self.cross_only_epochs();
        match self.mode {
            CurriculumMode::Proposed if epoch < w => Phase::CrossOnly,
            CurriculumMode::Anti if epoch >= self.total_epochs - w => Phase::CrossOnly,
            _ => Phase::Full,
        }
    }

    /// Annealing progress `t ∈ [0, 1]` for the epoch (0 = easiest, 1 = hardest),
    /// or `None` in control mode.
    pub fn progress(&self, epoch: usize) -> Option<f64> {
        let w = self.cross_only_epochs();
        let full = self.total_epochs - w;
        let ratio = |i: usize| {
            if full <= 1 {
                0.0
            } else {
                i.min(full - 1) as f64 / (full - 1) as f64
            }
        };
        match self.mode {
            CurriculumMode::Proposed => Some(ratio(epoch.saturating_sub(w))),
            CurriculumMode::Anti if epoch >= full => Some(0.0),
            // Counting down keeps the Δ sequence an exact mirror of the proposed one.
            CurriculumMode::Anti => Some(ratio(full - 1 - epoch)),
            CurriculumMode::Control => None,
        }
    }

    pub fn state(&self, epoch: usize) -> CurriculumState {
        CurriculumState {
            epoch,
            phase: self.phase(epoch),
            lambda: self.progress(epoch).map(|t| 0.5 * (1.0 + (PI * t).cos())),
        }
    }

    /// Exclusion zone Δ for a video of `frames` frames at `epoch`. Control mode draws from `rng`.
    pub fn delta_at(&self, epoch: usize, frames: usize, rng: &mut impl Rng) -> usize {
        let high = delta_high(frames);
        if high < self.delta_low {
            log::warn!(
                "video with M = {frames} has Δ_h = {high} < Δ_l = {}; using Δ_l",
                self.delta_low
            );
            return self.delta_low;
        }
        match self.progress(epoch) {
            Some(t) => annealed_delta(t, self.delta_low, high),
            None => rng.random_range(self.delta_low..=high),
        }
    }
}
