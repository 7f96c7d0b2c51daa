//! Distilling the bidirectional teacher into the three-step causal student.
//!
//! Training follows the inference chain exactly (Self-Rollout): every frame is
//! denoised from its own initial draw through all schedule steps with the
//! student, and its clean result is committed to the KV cache before the next
//! frame starts. One step per frame is flagged for supervision; the loss there
//! is a side computation and never alters the chain. Three objectives are
//! provided: distribution matching against the teacher's score, endpoint
//! regression onto the teacher's many-step samples, and the teacher-forcing
//! ablation that supervises on ground-truth histories instead.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{AdamW, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{initial_noise, interpolate, ode_step, score_from_velocity, NoiseSchedule};
use crate::logging::LogSink;
use crate::nets::{Bound, FrameCond, KvCache, MaskMode, VelocityNet};
use crate::rng::{derive, normal_tensor, stream};
use crate::scene::{Dataset, SceneClip};
use crate::teacher::{flow_matching_step, teacher_sample, Example};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Flags one supervision step per frame.
    Train,
    Infer,
}

/// Everything recorded while generating one frame.
#[derive(Clone, Debug)]
pub struct RolloutFrameTrace {
    pub frame: usize,
    /// `x_{m,0..N}`; the first entry is the frame's initial draw.
    pub states: Vec<Tensor>,
    /// Supervision step, train mode only.
    pub flagged: Option<usize>,
    /// Cache occupants when the frame started.
    pub cache_frames: Vec<usize>,
    pub slot: Tensor,
}

/// Supervision step for frame `m` of the rollout keyed by `seed`. Drawn from a
/// stream of its own so that flagging never perturbs the generation draws.
pub fn flagged_step(seed: u64, m: usize, steps: usize) -> usize {
    stream(seed, &[0xf1a6, m as u64]).random_range(0..steps)
}

fn require_causal(net: &VelocityNet) -> Result<()> {
    if net.mask() != MaskMode::Causal {
        return Err(Error::invalid("the student must use causal attention"));
    }
    Ok(())
}

/// Denoises frame `cond.frame` from `x0` through every schedule step and
/// commits the clean result.
pub fn self_rollout_frame(
    net: &VelocityNet,
    cond: &FrameCond,
    cache: &mut KvCache,
    schedule: &NoiseSchedule,
    x0: Tensor,
    seed: u64,
    mode: RolloutMode,
) -> Result<(Tensor, RolloutFrameTrace)> {
    require_causal(net)?;
    cache.check_before(cond.frame)?;
    let steps = schedule.steps();
    let flagged = (mode == RolloutMode::Train).then(|| flagged_step(seed, cond.frame, steps));
    let cache_frames = cache.frames();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0);
    for n in 0..steps {
        let x = &states[n];
        let v = net.frame_velocity(x, cond, schedule.time(n), cache)?;
        let next = ode_step(x, &v, schedule.dt(n));
        states.push(next);
    }
    let clean = states[steps].clone();
    net.commit(cache, &clean, cond, steps, steps)?;
    Ok((clean, RolloutFrameTrace { frame: cond.frame, states, flagged, cache_frames, slot: cond.slot.clone() }))
}

/// A whole generated video with the cache as it stood before each frame.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub frames: Vec<Tensor>,
    pub traces: Vec<RolloutFrameTrace>,
    pub caches: Vec<KvCache>,
}

/// Frame-by-frame generation; initial draws come from [`initial_noise`].
pub fn self_rollout(net: &VelocityNet, conds: &[FrameCond], schedule: &NoiseSchedule, seed: u64, mode: RolloutMode) -> Result<Rollout> {
    let side = net.config().side;
    let mut cache = net.new_cache();
    let mut out = Rollout { frames: Vec::new(), traces: Vec::new(), caches: Vec::new() };
    for (m, cond) in conds.iter().enumerate() {
        if cond.frame != m {
            return Err(Error::invalid(format!("condition {m} is labelled frame {}", cond.frame)));
        }
        out.caches.push(cache.clone());
        let (clean, trace) = self_rollout_frame(net, cond, &mut cache, schedule, initial_noise(seed, m, side), seed, mode)?;
        out.frames.push(clean);
        out.traces.push(trace);
    }
    Ok(out)
}

/// Frame-by-frame generation whose history is `truth` instead of the
/// student's own frames: each frame is denoised as in [`self_rollout`], then
/// the ground-truth frame is committed in its place.
pub fn forced_rollout(net: &VelocityNet, conds: &[FrameCond], truth: &[Tensor], schedule: &NoiseSchedule, seed: u64, mode: RolloutMode) -> Result<Rollout> {
    if truth.len() != conds.len() {
        return Err(Error::invalid(format!("{} ground-truth frames for {} conditions", truth.len(), conds.len())));
    }
    let side = net.config().side;
    let caches = ground_truth_caches(net, truth, conds, schedule.steps())?;
    let mut out = Rollout { frames: Vec::new(), traces: Vec::new(), caches: Vec::new() };
    for (m, (cond, cache)) in conds.iter().zip(caches).enumerate() {
        let mut scratch = cache.clone();
        let (clean, trace) = self_rollout_frame(net, cond, &mut scratch, schedule, initial_noise(seed, m, side), seed, mode)?;
        out.frames.push(clean);
        out.traces.push(trace);
        out.caches.push(cache);
    }
    Ok(out)
}

/// Student estimate of the clean frame at the flagged step,
/// `x̂ = x_n + (1 − t_n)·v_θ(x_n)`, with state and cache held fixed.
fn flagged_estimate_on(
    tape: &mut Tape,
    net: &VelocityNet,
    b: &Bound,
    trace: &RolloutFrameTrace,
    cache: &KvCache,
    cond: &FrameCond,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let n = trace.flagged.ok_or_else(|| Error::invalid("trace has no flagged step"))?;
    let t = schedule.time(n);
    let x = trace.states[n].reshape(&[1, trace.states[n].len()])?;
    let ctx = cache.on_tape(tape);
    let xv = tape.constant(x.clone());
    let (v, _) = net.frame_on(tape, b, xv, cond, t, &ctx)?;
    let moving = tape.scale(v, 1.0 - t)?;
    tape.add(xv, moving)
}

/// DMD update direction on a student output `x̂`, given real and fake
/// velocities at the re-noised point `x_t` (time `t`).
///
/// The direction is the score difference `s_fake − s_real`, rescaled by
/// `(1 − t)²/t` so it reads as a clean-sample difference, then divided by the
/// mean absolute gap between `x̂` and the real model's clean estimate.
pub fn dmd_direction(x_hat: &Tensor, x_t: &Tensor, v_real: &Tensor, v_fake: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("re-noise time must lie in (0, 1), got {t}")));
    }
    let s_real = score_from_velocity(x_t, v_real, t)?;
    let s_fake = score_from_velocity(x_t, v_fake, t)?;
    let w = (1.0 - t) * (1.0 - t) / t;
    let gap = x_hat.data().iter().zip(x_t.data().iter().zip(v_real.data())).map(|(h, (x, v))| (h - (x + (1.0 - t) * v)).abs()).sum::<f64>()
        / x_hat.len() as f64;
    let data: Vec<f64> = s_fake
        .data()
        .iter()
        .zip(s_real.data())
        .map(|(f, r)| if gap > 0.0 { w * (f - r) / gap } else { 0.0 })
        .collect();
    Tensor::new(x_hat.shape().to_vec(), data)
}

/// Per-frame DMD directions for a student video re-noised to `t` with `noise`.
pub fn dmd_generator_grad(
    x_hat: &[Tensor],
    conds: &[FrameCond],
    t: f64,
    noise: &[Tensor],
    teacher: &VelocityNet,
    fake: Option<&VelocityNet>,
) -> Result<Vec<Tensor>> {
    let fake = fake.ok_or_else(|| Error::invalid("DMD needs an initialised fake-score net"))?;
    let xt = x_hat.iter().zip(noise).map(|(x, z)| Ok(interpolate(x, z, t)?.x_t)).collect::<Result<Vec<_>>>()?;
    let real = teacher.video_velocity(&xt, conds, t)?;
    let fake = fake.video_velocity(&xt, conds, t)?;
    x_hat.iter().zip(&xt).zip(real.iter().zip(&fake)).map(|((h, x), (r, f))| dmd_direction(h, x, r, f, t)).collect()
}

/// Flow matching on student-generated videos, stepping the fake net only.
pub fn fake_score_train_step(fake: &mut VelocityNet, opt: &AdamW, videos: &[Example<'_>], rng: &mut impl Rng) -> Result<f64> {
    flow_matching_step(fake, opt, videos, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Distribution matching on self-rolled-out videos.
    Dmd,
    /// Endpoint regression onto teacher samples.
    Regression,
    /// Distribution matching with ground-truth history in the cache; the
    /// ablation without Self-Rollout.
    TeacherForcing,
}

/// What the cache holds while a training video is generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum History {
    SelfRollout,
    GroundTruth,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Dmd => "dmd",
            Objective::Regression => "regression",
            Objective::TeacherForcing => "teacher-forcing",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dmd" => Ok(Objective::Dmd),
            "regression" => Ok(Objective::Regression),
            "teacher-forcing" => Ok(Objective::TeacherForcing),
            _ => Err(Error::invalid(format!("unknown distillation objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub objective: Objective,
    pub schedule: NoiseSchedule,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub fake_lr: f64,
    /// Fake-net updates per student update.
    pub fake_steps: usize,
    pub renoise_min: f64,
    pub renoise_max: f64,
    /// Teacher sampler steps for regression targets and validation.
    pub teacher_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dmd,
            schedule: NoiseSchedule::paper_default(),
            steps: 600,
            batch: 4,
            lr: 3e-4,
            fake_lr: 1e-3,
            fake_steps: 2,
            renoise_min: 0.1,
            renoise_max: 0.9,
            teacher_steps: 32,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 || self.teacher_steps == 0 {
            return Err(Error::invalid("distill batch, eval interval and teacher steps must be >= 1"));
        }
        if !(0.0 < self.renoise_min && self.renoise_min < self.renoise_max && self.renoise_max < 1.0) {
            return Err(Error::invalid("re-noise range must satisfy 0 < min < max < 1"));
        }
        Ok(())
    }
}

/// A control set, the seed of its initial draws, and the teacher's sample.
#[derive(Clone, Debug)]
pub struct TeacherPair {
    pub conds: Vec<FrameCond>,
    pub seed: u64,
    pub target: Vec<Tensor>,
}

/// Teacher samples for `clips`, keyed by `(seed, tag, clip index)`.
pub fn teacher_pairs(teacher: &VelocityNet, clips: &[&SceneClip], seed: u64, tag: u64, steps: usize) -> Result<Vec<TeacherPair>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let conds = FrameCond::for_controls(&clip.controls(), seed, &[tag, i as u64])?;
            let s = derive(seed, &[tag, i as u64, 1]);
            let target = teacher_sample(teacher, &conds, steps, s)?.frames;
            Ok(TeacherPair { conds, seed: s, target })
        })
        .collect()
}

/// Mean per-pixel squared error of the student's video against the teacher's,
/// under matched conditions and initial draws.
pub fn pair_error(student: &VelocityNet, pairs: &[TeacherPair], schedule: &NoiseSchedule) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no teacher pairs"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for p in pairs {
        let r = self_rollout(student, &p.conds, schedule, p.seed, RolloutMode::Infer)?;
        for (a, b) in r.frames.iter().zip(&p.target) {
            total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            count += a.len();
        }
    }
    Ok(total / count as f64)
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

fn apply(net: &mut VelocityNet, opt: &AdamW, tape: Tape, loss: Option<Var>) -> Result<f64> {
    let loss = loss.ok_or_else(|| Error::invalid("empty training batch"))?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.keyed_like(net.params());
    net.params_mut().adamw_step(&grads, opt)?;
    Ok(value)
}

fn clip_conds(clip: &SceneClip, seed: u64, step: u64, i: usize) -> Result<Vec<FrameCond>> {
    FrameCond::for_controls(&clip.controls(), seed, &[0xd15, step, i as u64])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub fake_loss: Option<f64>,
}

/// One DMD round: Self-Rollout videos, `fake_steps` fake-net updates on them,
/// then one student update with surrogate `½·MSE(x̂, sg(x̂ − g))`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_step(
    student: &mut VelocityNet,
    fake: &mut VelocityNet,
    teacher: &VelocityNet,
    opt: &AdamW,
    fake_opt: &AdamW,
    clips: &[&SceneClip],
    cfg: &DistillConfig,
    history: History,
    step: u64,
) -> Result<StepStats> {
    if clips.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let seed = cfg.seed;
    let conds = clips.iter().enumerate().map(|(i, c)| clip_conds(c, seed, step, i)).collect::<Result<Vec<_>>>()?;
    let rollouts = conds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = derive(seed, &[0xd16, step, i as u64]);
            match history {
                History::SelfRollout => self_rollout(student, c, &cfg.schedule, s, RolloutMode::Train),
                History::GroundTruth => forced_rollout(student, c, &clips[i].frames, &cfg.schedule, s, RolloutMode::Train),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let videos: Vec<Example<'_>> = rollouts.iter().zip(&conds).map(|(r, c)| (r.frames.as_slice(), c.as_slice())).collect();
    let mut fake_loss = 0.0;
    for k in 0..cfg.fake_steps {
        fake_loss = fake_score_train_step(fake, fake_opt, &videos, &mut stream(seed, &[0xd18, step, k as u64]))?;
    }

    let side = student.config().side;
    let mut tape = Tape::new();
    let b = student.bind(&mut tape);
    let mut total = None;
    for (i, (r, c)) in rollouts.iter().zip(&conds).enumerate() {
        let hats = r
            .traces
            .iter()
            .zip(&r.caches)
            .zip(c)
            .map(|((tr, cache), cond)| flagged_estimate_on(&mut tape, student, &b, tr, cache, cond, &cfg.schedule))
            .collect::<Result<Vec<_>>>()?;
        let values = hats.iter().map(|h| tape.value(*h).reshape(&[side, side])).collect::<Result<Vec<_>>>()?;
        let mut rng = stream(seed, &[0xd17, step, i as u64]);
        let t = rng.random_range(cfg.renoise_min..cfg.renoise_max);
        let noise: Vec<Tensor> = values.iter().map(|_| normal_tensor(&mut rng, &[side, side])).collect();
        let g = dmd_generator_grad(&values, c, t, &noise, teacher, Some(fake))?;
        let scale = 0.5 / (hats.len() * clips.len()) as f64;
        for ((h, v), g) in hats.iter().zip(&values).zip(&g) {
            let target = Tensor::new(vec![1, v.len()], v.data().iter().zip(g.data()).map(|(a, b)| a - b).collect())?;
            let target = tape.constant(target);
            let l = tape.mse(*h, target)?;
            let l = tape.scale(l, scale)?;
            total = accumulate(&mut tape, total, l)?;
        }
    }
    let loss = apply(student, opt, tape, total)?;
    Ok(StepStats { loss, fake_loss: (cfg.fake_steps > 0).then_some(fake_loss) })
}

/// Differentiable three-step chain for every frame, regressed onto the
/// teacher's sample. The cache comes from the student's own (untaped) rollout
/// of the same video, so it is held fixed.
pub fn endpoint_regression_step(student: &mut VelocityNet, opt: &AdamW, pairs: &[&TeacherPair], schedule: &NoiseSchedule) -> Result<f64> {
    let side = student.config().side;
    let mut tape = Tape::new();
    let b = student.bind(&mut tape);
    let mut total = None;
    for p in pairs {
        let r = self_rollout(student, &p.conds, schedule, p.seed, RolloutMode::Infer)?;
        let scale = 1.0 / (p.conds.len() * pairs.len()) as f64;
        for (m, (cond, cache)) in p.conds.iter().zip(&r.caches).enumerate() {
            let ctx = cache.on_tape(&mut tape);
            let mut x = tape.constant(initial_noise(p.seed, m, side).reshape(&[1, side * side])?);
            for n in 0..schedule.steps() {
                let (v, _) = student.frame_on(&mut tape, &b, x, cond, schedule.time(n), &ctx)?;
                let dx = tape.scale(v, schedule.dt(n))?;
                x = tape.add(x, dx)?;
            }
            let target = tape.constant(p.target[m].reshape(&[1, side * side])?);
            let l = tape.mse(x, target)?;
            let l = tape.scale(l, scale)?;
            total = accumulate(&mut tape, total, l)?;
        }
    }
    apply(student, opt, tape, total)
}

/// Cache before each frame when the history is the ground truth.
pub fn ground_truth_caches(net: &VelocityNet, frames: &[Tensor], conds: &[FrameCond], steps: usize) -> Result<Vec<KvCache>> {
    let mut cache = net.new_cache();
    let mut out = Vec::with_capacity(frames.len());
    for (frame, cond) in frames.iter().zip(conds) {
        out.push(cache.clone());
        net.commit(&mut cache, frame, cond, steps, steps)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DistillReport {
    pub steps: u64,
    pub train_loss: Vec<f64>,
    /// `(step, mean squared error against the teacher on validation clips)`.
    pub val_error: Vec<(u64, f64)>,
}

/// Initialises the student from the teacher's weights under a causal mask and
/// trains it with `cfg.objective`.
pub fn distill(teacher: &VelocityNet, data: &Dataset, cfg: &DistillConfig, log: &mut dyn LogSink) -> Result<(VelocityNet, DistillReport)> {
    cfg.validate()?;
    let train = data.train();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training clips"));
    }
    let teacher = teacher.with_mask(MaskMode::Bidirectional);
    let mut student = teacher.with_mask(MaskMode::Causal);
    let mut fake = teacher.with_mask(MaskMode::Bidirectional);
    let opt = AdamW::with_lr(cfg.lr);
    let fake_opt = AdamW::with_lr(cfg.fake_lr);
    let start = Instant::now();
    let phase = format!("distill-{}", cfg.objective);

    let val_pairs = teacher_pairs(&teacher, &data.val(), cfg.seed, 0x7a1, cfg.teacher_steps)?;
    let train_pairs = match cfg.objective {
        Objective::Regression => teacher_pairs(&teacher, &train, cfg.seed, 0x7a2, cfg.teacher_steps)?,
        _ => Vec::new(),
    };

    let mut report = DistillReport::default();
    let validate = |student: &VelocityNet, step: u64, report: &mut DistillReport, log: &mut dyn LogSink| -> Result<()> {
        if val_pairs.is_empty() {
            return Ok(());
        }
        let e = pair_error(student, &val_pairs, &cfg.schedule)?;
        report.val_error.push((step, e));
        log.log(json!({"phase": phase, "step": step, "val_error": e, "wall_clock": start.elapsed().as_secs_f64()}));
        Ok(())
    };
    validate(&student, 0, &mut report, log)?;

    for step in 0..cfg.steps as u64 {
        let idx = sample(&mut stream(cfg.seed, &[0xb47, step]), train.len(), cfg.batch.min(train.len())).into_vec();
        let clips: Vec<&SceneClip> = idx.iter().map(|&i| train[i]).collect();
        let stats = match cfg.objective {
            Objective::Dmd => dmd_step(&mut student, &mut fake, &teacher, &opt, &fake_opt, &clips, cfg, History::SelfRollout, step)?,
            Objective::Regression => {
                let pairs: Vec<&TeacherPair> = idx.iter().map(|&i| &train_pairs[i]).collect();
                StepStats { loss: endpoint_regression_step(&mut student, &opt, &pairs, &cfg.schedule)?, fake_loss: None }
            }
            Objective::TeacherForcing => {
                dmd_step(&mut student, &mut fake, &teacher, &opt, &fake_opt, &clips, cfg, History::GroundTruth, step)?
            }
        };
        report.train_loss.push(stats.loss);
        report.steps = step + 1;
        let mut rec = json!({"phase": phase, "step": step, "loss": stats.loss, "wall_clock": start.elapsed().as_secs_f64()});
        if let Some(f) = stats.fake_loss {
            rec["fake_loss"] = f.into();
        }
        log.log(rec);
        if (step + 1) % cfg.eval_every as u64 == 0 || step + 1 == cfg.steps as u64 {
            validate(&student, step + 1, &mut report, log)?;
        }
    }
    Ok((student, report))
}
