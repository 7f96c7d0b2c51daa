//! Frame-level rewards: a thresholded-centroid tracker, the motion-alignment
//! reward built on it, and a blob-integrity quality proxy.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scene::{cell_center, render_frame, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Offset in squared unit-square distance.
    pub alpha: f64,
    pub lambda: f64,
    /// Peak of the quality proxy.
    pub quality_weight: f64,
    /// Minimum positive intensity mass for a frame to be trackable.
    pub floor: f64,
    /// Cells below this fraction of the frame max are ignored by the tracker.
    pub threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.05, lambda: 40.0, quality_weight: 5.0, floor: 1.0, threshold: 0.2 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.lambda > 0.0) {
            return Err(Error::invalid(format!("reward alpha and lambda must be > 0, got {} and {}", self.alpha, self.lambda)));
        }
        if !(self.quality_weight >= 0.0 && self.floor >= 0.0 && (0.0..1.0).contains(&self.threshold)) {
            return Err(Error::invalid("reward quality weight/floor must be >= 0 and threshold in [0, 1)"));
        }
        Ok(())
    }

    /// Upper bound of [`terminal_reward`].
    pub fn max_reward(&self) -> f64 {
        self.quality_weight + self.lambda * self.alpha
    }
}

/// Intensity-weighted centroid over cells at or above `threshold · max`, or
/// `None` when the frame's positive mass is below the floor.
pub fn track_position(frame: &Tensor, cfg: &RewardConfig) -> Option<Point> {
    let side = frame.shape()[0];
    let d = frame.data();
    let mass: f64 = d.iter().map(|v| v.max(0.0)).sum();
    let max = frame.max();
    if mass < cfg.floor || mass == 0.0 || max <= 0.0 {
        return None;
    }
    let cut = cfg.threshold * max;
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for (i, &w) in d.iter().enumerate() {
        if w >= cut {
            let p = cell_center(i / side, i % side, side);
            sx += w * p.x;
            sy += w * p.y;
            s += w;
        }
    }
    Some(Point::new(sx / s, sy / s))
}

/// `λ·max(0, α − d²)`.
pub fn motion_from_dist2(d2: f64, cfg: &RewardConfig) -> f64 {
    cfg.lambda * (cfg.alpha - d2).max(0.0)
}

pub fn motion_reward(frame: &Tensor, target: Point, cfg: &RewardConfig) -> f64 {
    track_position(frame, cfg).map_or(0.0, |p| motion_from_dist2(p.dist2(&target), cfg))
}

fn quality_at(frame: &Tensor, tracked: Option<Point>, cfg: &RewardConfig) -> f64 {
    let Some(p) = tracked else { return 0.0 };
    let side = frame.shape()[0];
    let clean = render_frame(p, side);
    let sq: f64 = frame.data().iter().zip(clean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    cfg.quality_weight * (-sq / (side * side) as f64).exp()
}

/// `w·exp(−‖f − render(track(f))‖² / S²)`; untrackable frames score 0.
pub fn quality_reward(frame: &Tensor, cfg: &RewardConfig) -> f64 {
    quality_at(frame, track_position(frame, cfg), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub tracked: Option<Point>,
    pub motion: f64,
    pub quality: f64,
    pub total: f64,
}

/// Quality plus motion, for a frame at its final denoising step.
pub fn terminal_reward(frame: &Tensor, target: Point, cfg: &RewardConfig) -> RewardBreakdown {
    let tracked = track_position(frame, cfg);
    let motion = tracked.map_or(0.0, |p| motion_from_dist2(p.dist2(&target), cfg));
    let quality = quality_at(frame, tracked, cfg);
    RewardBreakdown { tracked, motion, quality, total: motion + quality }
}

/// A terminal-frame scorer. Implementations must be pure.
pub trait RewardModel: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, frame: &Tensor, target: Point) -> RewardBreakdown;
}

/// Quality plus motion (the default).
pub struct BlobReward(pub RewardConfig);

/// Motion term only; quality is reported but not added.
pub struct MotionOnlyReward(pub RewardConfig);

impl RewardModel for BlobReward {
    fn name(&self) -> &str {
        "blob"
    }

    fn score(&self, frame: &Tensor, target: Point) -> RewardBreakdown {
        terminal_reward(frame, target, &self.0)
    }
}

impl RewardModel for MotionOnlyReward {
    fn name(&self) -> &str {
        "motion"
    }

    fn score(&self, frame: &Tensor, target: Point) -> RewardBreakdown {
        let r = terminal_reward(frame, target, &self.0);
        RewardBreakdown { total: r.motion, ..r }
    }
}

type Factory = Box<dyn Fn(&RewardConfig) -> Arc<dyn RewardModel> + Send + Sync>;

/// Named reward scorers, selected by the `reward` config key.
pub struct RewardRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for RewardRegistry {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("blob", |c| Arc::new(BlobReward(c.clone())));
        r.register("motion", |c| Arc::new(MotionOnlyReward(c.clone())));
        r
    }
}

impl RewardRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&RewardConfig) -> Arc<dyn RewardModel> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, cfg: &RewardConfig) -> Result<Arc<dyn RewardModel>> {
        cfg.validate()?;
        let f = self.factories.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::invalid(format!("unknown reward model {name:?} (known: {})", known.join(", ")))
        })?;
        Ok(f(cfg))
    }
}
