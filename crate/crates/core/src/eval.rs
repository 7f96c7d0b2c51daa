//! Evaluation metrics, latency benchmarking and the ablation runner.
//!
//! Absolute video-quality numbers (FID, FVD, aesthetic scores) have no analog
//! here. Reports carry the desk-scale substitutes instead: mean terminal
//! reward, mean motion reward (motion consistency), tracked-trajectory RMSE in
//! cells, and tracked-velocity smoothness (motion smoothness).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distill::{self_rollout, RolloutMode};
use crate::error::{Error, Result};
use crate::flow::NoiseSchedule;
use crate::nets::{FrameCond, MaskMode, VelocityNet};
use crate::rewards::{terminal_reward, RewardConfig};
use crate::rng::derive;
use crate::scene::{Point, SceneClip};
use crate::teacher::teacher_sample;

/// How videos are produced for evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    /// Frame-by-frame causal generation over the given schedule.
    Student { net: &'a VelocityNet, schedule: &'a NoiseSchedule },
    /// Joint bidirectional sampling with `steps` uniform Euler steps.
    Teacher { net: &'a VelocityNet, steps: usize },
}

impl Generator<'_> {
    pub fn generate(&self, conds: &[FrameCond], seed: u64) -> Result<Vec<Tensor>> {
        match *self {
            Generator::Student { net, schedule } => Ok(self_rollout(net, conds, schedule, seed, RolloutMode::Infer)?.frames),
            Generator::Teacher { net, steps } => Ok(teacher_sample(net, conds, steps, seed)?.frames),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Generator::Student { .. } => "student-ar",
            Generator::Teacher { .. } => "teacher-bidirectional",
        }
    }
}

/// Conditions and initial-draw seed for evaluation clip `i`; shared by every
/// generator so that teacher and student see identical inputs.
pub fn eval_inputs(clip: &SceneClip, seed: u64, i: usize) -> Result<(Vec<FrameCond>, u64)> {
    let conds = FrameCond::for_controls(&clip.controls(), seed, &[0xe7a1, i as u64])?;
    Ok((conds, derive(seed, &[0xe7a2, i as u64])))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generator: String,
    pub clips: usize,
    pub frames: usize,
    pub mean_reward: f64,
    pub mean_motion_reward: f64,
    pub mean_quality_reward: f64,
    /// Untrackable frames count as one full side of error.
    pub rmse_cells: f64,
    /// Mean squared second difference of tracked positions, in cells².
    pub smoothness: f64,
    pub untrackable_fraction: f64,
    pub frame_ms: f64,
}

#[derive(Default)]
struct Accum {
    frames: usize,
    reward: f64,
    motion: f64,
    quality: f64,
    sq_err: f64,
    untracked: usize,
    second_diff: f64,
    triples: usize,
}

impl Accum {
    fn add_video(&mut self, frames: &[Tensor], targets: &[Point], cfg: &RewardConfig) {
        let side = frames.first().map_or(1, |f| f.shape()[0]) as f64;
        let mut tracked = Vec::with_capacity(frames.len());
        for (f, p) in frames.iter().zip(targets) {
            let r = terminal_reward(f, *p, cfg);
            self.frames += 1;
            self.reward += r.total;
            self.motion += r.motion;
            self.quality += r.quality;
            match r.tracked {
                Some(q) => self.sq_err += q.dist2(p) * side * side,
                None => {
                    self.sq_err += side * side;
                    self.untracked += 1;
                }
            }
            tracked.push(r.tracked);
        }
        for w in tracked.windows(3) {
            if let [Some(a), Some(b), Some(c)] = w {
                let dx = (a.x - 2.0 * b.x + c.x) * side;
                let dy = (a.y - 2.0 * b.y + c.y) * side;
                self.second_diff += dx * dx + dy * dy;
                self.triples += 1;
            }
        }
    }

    fn report(&self, generator: &str, clips: usize, secs: f64) -> EvalReport {
        let n = self.frames.max(1) as f64;
        EvalReport {
            generator: generator.into(),
            clips,
            frames: self.frames,
            mean_reward: self.reward / n,
            mean_motion_reward: self.motion / n,
            mean_quality_reward: self.quality / n,
            rmse_cells: (self.sq_err / n).sqrt(),
            smoothness: if self.triples > 0 { self.second_diff / self.triples as f64 } else { 0.0 },
            untrackable_fraction: self.untracked as f64 / n,
            frame_ms: 1e3 * secs / n,
        }
    }
}

/// Scores already-generated videos against their target positions.
pub fn score_videos(videos: &[(Vec<Tensor>, Vec<Point>)], cfg: &RewardConfig) -> EvalReport {
    let mut acc = Accum::default();
    for (frames, targets) in videos {
        acc.add_video(frames, targets, cfg);
    }
    acc.report("given", videos.len(), 0.0)
}

/// Generates every clip's video from its controls and scores it.
pub fn evaluate(generator: Generator<'_>, clips: &[&SceneClip], cfg: &RewardConfig, seed: u64) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    cfg.validate()?;
    let mut acc = Accum::default();
    let mut secs = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let (conds, s) = eval_inputs(clip, seed, i)?;
        let start = Instant::now();
        let frames = generator.generate(&conds, s)?;
        secs += start.elapsed().as_secs_f64();
        acc.add_video(&frames, &clip.positions, cfg);
    }
    Ok(acc.report(generator.kind(), clips.len(), secs))
}

/// Mean squared error of one video against another, per pixel.
pub fn video_mse(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut sq = 0.0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        sq += x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        n += x.len();
    }
    sq / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: String,
    pub runs: usize,
    pub warmup: usize,
    /// Median wall-clock until the first frame is final.
    pub first_frame_ms: f64,
    /// Median wall-clock per frame over the whole video.
    pub per_frame_ms: f64,
    /// Single-frame velocity evaluations before the first frame is final.
    pub first_frame_evals: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Latency of one generator on fixed conditions: `warmup` discarded runs, then
/// the median over `runs`. The teacher's first frame is only final after the
/// whole joint solve, so its first-frame time is the full video time.
pub fn bench_latency(generator: Generator<'_>, conds: &[FrameCond], runs: usize, warmup: usize, seed: u64) -> Result<LatencyReport> {
    if runs == 0 || conds.is_empty() {
        return Err(Error::invalid("latency benchmark needs at least one run and one frame"));
    }
    let frames = conds.len() as f64;
    let mut first = Vec::with_capacity(runs);
    let mut total = Vec::with_capacity(runs);
    for r in 0..warmup + runs {
        let (f, t) = match generator {
            Generator::Student { net, schedule } => {
                let start = Instant::now();
                self_rollout(net, &conds[..1], schedule, seed, RolloutMode::Infer)?;
                let f = start.elapsed().as_secs_f64();
                let start = Instant::now();
                self_rollout(net, conds, schedule, seed, RolloutMode::Infer)?;
                (f, start.elapsed().as_secs_f64())
            }
            Generator::Teacher { .. } => {
                let start = Instant::now();
                generator.generate(conds, seed)?;
                let t = start.elapsed().as_secs_f64();
                (t, t)
            }
        };
        if r >= warmup {
            first.push(1e3 * f);
            total.push(1e3 * t / frames);
        }
    }
    let first_frame_evals = match generator {
        Generator::Student { schedule, .. } => schedule.steps(),
        Generator::Teacher { steps, .. } => steps * conds.len(),
    };
    Ok(LatencyReport {
        mode: generator.kind().into(),
        runs,
        warmup,
        first_frame_ms: median(first),
        per_frame_ms: median(total),
        first_frame_evals,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Evaluates the four variants on the same clips and seed: the full pipeline,
/// the student before reinforcement learning, the teacher-forcing student and
/// the teacher itself.
pub fn ablate(
    full: &VelocityNet,
    without_rl: &VelocityNet,
    without_self_rollout: &VelocityNet,
    teacher: &VelocityNet,
    teacher_steps: usize,
    schedule: &NoiseSchedule,
    clips: &[&SceneClip],
    cfg: &RewardConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let teacher = teacher.with_mask(MaskMode::Bidirectional);
    let rows = [
        ("full", Generator::Student { net: full, schedule }),
        ("w/o RL", Generator::Student { net: without_rl, schedule }),
        ("w/o Self-Rollout", Generator::Student { net: without_self_rollout, schedule }),
        ("teacher", Generator::Teacher { net: &teacher, steps: teacher_steps }),
    ];
    rows.into_iter()
        .map(|(name, g)| Ok(AblationRow { variant: name.into(), report: evaluate(g, clips, cfg, seed)? }))
        .collect()
}

/// Whether the motion-reward ordering of an ablation holds: full ≥ w/o RL,
/// and w/o Self-Rollout strictly below both other students.
pub fn ablation_ordering_holds(rows: &[AblationRow]) -> bool {
    let get = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.report.mean_motion_reward);
    match (get("full"), get("w/o RL"), get("w/o Self-Rollout")) {
        (Some(full), Some(no_rl), Some(no_sr)) => full >= no_rl && no_sr < full && no_sr < no_rl,
        _ => false,
    }
}

/// Plain-text rendering of an ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<18} {:>12} {:>12} {:>10} {:>12} {:>10}\n",
        "variant", "motion", "reward", "rmse", "smoothness", "frame ms"
    );
    for r in rows {
        let p = &r.report;
        s += &format!(
            "{:<18} {:>12.4} {:>12.4} {:>10.3} {:>12.4} {:>10.3}\n",
            r.variant, p.mean_motion_reward, p.mean_reward, p.rmse_cells, p.smoothness, p.frame_ms
        );
    }
    s
}
