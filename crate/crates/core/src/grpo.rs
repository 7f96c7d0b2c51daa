//! Group-relative policy optimisation over the (frame, step) decision process.
//!
//! A state is a frame index, a step index, the frame's control and the video
//! snapshot; the action is the next denoised state. Every step is a
//! deterministic Euler step except one randomly chosen step per frame, which
//! follows the marginal-preserving SDE and so has a Gaussian transition
//! density. Rewards arrive only when a frame is fully denoised. The objective
//! sums over those stochastic steps alone: deterministic transitions have no
//! density and hence no importance ratio.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{AdamW, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Generator};
use crate::flow::{initial_noise, ode_step, sde_step, NoiseSchedule, SdeCoefficients, SdeStepRecord};
use crate::logging::LogSink;
use crate::nets::{Bound, FrameCond, MaskMode, TapedCache, VelocityNet};
use crate::rewards::{RewardBreakdown, RewardConfig, RewardModel, RewardRegistry};
use crate::rng::{derive, stream};
use crate::scene::{Dataset, Point, SceneClip, TrajectoryFamily};

#[derive(Clone, Debug)]
pub struct GrpoConfig {
    /// Videos per control set.
    pub group: usize,
    /// Control sets per iteration.
    pub groups_per_iter: usize,
    pub clip: f64,
    pub beta: f64,
    pub sigma: f64,
    pub iterations: usize,
    pub lr: f64,
    /// All members of a group start from the same initial draws, so rewards
    /// differ only through the stochastic steps.
    pub shared_init: bool,
    pub reward: String,
    pub reward_cfg: RewardConfig,
    /// Trajectory family to train and evaluate on; `None` means all.
    pub task: Option<TrajectoryFamily>,
    pub schedule: NoiseSchedule,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group: 8,
            groups_per_iter: 8,
            clip: 0.2,
            beta: 0.3,
            sigma: 0.4,
            iterations: 200,
            lr: 1e-5,
            shared_init: true,
            reward: "blob".into(),
            reward_cfg: RewardConfig::default(),
            task: Some(TrajectoryFamily::Line),
            schedule: NoiseSchedule::paper_default(),
            eval_every: 50,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group < 2 {
            return Err(Error::invalid(format!("group size must be >= 2, got {}", self.group)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::invalid(format!("clip width must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.beta >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::invalid("beta and sigma must be >= 0"));
        }
        if self.schedule.steps() < 2 {
            return Err(Error::invalid("selective stochasticity needs at least two schedule steps"));
        }
        if self.groups_per_iter == 0 || self.eval_every == 0 {
            return Err(Error::invalid("groups per iteration and eval interval must be >= 1"));
        }
        Ok(())
    }
}

/// Conditions for one video together with the target positions they encode.
#[derive(Clone, Debug)]
pub struct ControlSet {
    pub conds: Vec<FrameCond>,
    pub targets: Vec<Point>,
}

impl ControlSet {
    pub fn for_clip(clip: &SceneClip, seed: u64, path: &[u64]) -> Result<Self> {
        Ok(Self { conds: FrameCond::for_controls(&clip.controls(), seed, path)?, targets: clip.positions.clone() })
    }
}

/// One frame of a sampled trajectory.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame: usize,
    /// `x_{m,0..N}`.
    pub states: Vec<Tensor>,
    pub stochastic: SdeStepRecord,
    pub reward: RewardBreakdown,
}

#[derive(Clone, Debug)]
pub struct RolloutTrajectory {
    pub frames: Vec<FrameRecord>,
}

/// The video snapshot at `(m, n)`: final frames before `m`, the in-flight
/// state of frame `m`, untouched initial draws after it.
#[derive(Clone, Debug)]
pub struct MdpState {
    pub frame: usize,
    pub step: usize,
    pub time: f64,
    pub video: Vec<Tensor>,
}

impl RolloutTrajectory {
    pub fn clean_frames(&self) -> Vec<Tensor> {
        self.frames.iter().map(|f| f.states.last().expect("non-empty chain").clone()).collect()
    }

    pub fn state(&self, m: usize, n: usize, schedule: &NoiseSchedule) -> MdpState {
        let last = schedule.steps();
        let video = self
            .frames
            .iter()
            .map(|f| match f.frame.cmp(&m) {
                std::cmp::Ordering::Less => f.states[last].clone(),
                std::cmp::Ordering::Equal => f.states[n].clone(),
                std::cmp::Ordering::Greater => f.states[0].clone(),
            })
            .collect();
        MdpState { frame: m, step: n, time: schedule.time(n), video }
    }
}

/// Samples `cfg.group` videos for one control set under `policy`. Member `i`
/// draws its stochastic step and noise for frame `m` from stream
/// `(seed, i, m)`, so nothing about frame `m` depends on later controls.
pub fn rollout_group(policy: &VelocityNet, set: &ControlSet, cfg: &GrpoConfig, reward: &dyn RewardModel, seed: u64) -> Result<Vec<RolloutTrajectory>> {
    cfg.validate()?;
    if policy.mask() != MaskMode::Causal {
        return Err(Error::invalid("the policy must use causal attention"));
    }
    let side = policy.config().side;
    let steps = cfg.schedule.steps();
    (0..cfg.group)
        .map(|i| {
            let init_seed = if cfg.shared_init { derive(seed, &[0x1717]) } else { derive(seed, &[0x1717, i as u64]) };
            let mut cache = policy.new_cache();
            let mut frames = Vec::with_capacity(set.conds.len());
            for (m, (cond, target)) in set.conds.iter().zip(&set.targets).enumerate() {
                let mut rng = stream(seed, &[0x5de, i as u64, m as u64]);
                let chosen = rng.random_range(0..steps - 1);
                let mut states = vec![initial_noise(init_seed, m, side)];
                let mut record = None;
                for n in 0..steps {
                    let x = &states[n];
                    let t = cfg.schedule.time(n);
                    let v = policy.frame_velocity(x, cond, t, &cache)?;
                    let next = if n == chosen {
                        let (next, rec) = sde_step(x, &v, t, cfg.schedule.dt(n), cfg.sigma, n, &mut rng)?;
                        record = Some(rec);
                        next
                    } else {
                        ode_step(x, &v, cfg.schedule.dt(n))
                    };
                    states.push(next);
                }
                policy.commit(&mut cache, &states[steps], cond, steps, steps)?;
                let reward = reward.score(&states[steps], *target);
                frames.push(FrameRecord { frame: m, states, stochastic: record.expect("one stochastic step"), reward });
            }
            Ok(RolloutTrajectory { frames })
        })
        .collect()
}

/// Per-frame group advantages `(R_i − mean)/std` with population std. Frames
/// whose rewards do not vary get advantage 0; their count is returned.
pub fn compute_advantages(rewards: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, usize)> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::invalid("advantages need a group of at least two"));
    }
    let frames = rewards[0].len();
    if rewards.iter().any(|r| r.len() != frames) {
        return Err(Error::invalid("ragged reward matrix"));
    }
    let mut adv = vec![vec![0.0; frames]; g];
    let mut flat = 0;
    for m in 0..frames {
        let mean = rewards.iter().map(|r| r[m]).sum::<f64>() / g as f64;
        let var = rewards.iter().map(|r| (r[m] - mean).powi(2)).sum::<f64>() / g as f64;
        let std = var.sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            flat += 1;
            continue;
        }
        for (a, r) in adv.iter_mut().zip(rewards) {
            a[m] = (r[m] - mean) / std;
        }
    }
    Ok((adv, flat))
}

/// The clipped surrogate term `min(r·Â, clip(r, 1−ε, 1+ε)·Â)` on plain numbers.
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// One control set's sampled group with its advantages.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub set: ControlSet,
    pub trajectories: Vec<RolloutTrajectory>,
    pub advantages: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub terms: usize,
    pub clip_fraction: f64,
    pub kl: f64,
    pub mean_ratio: f64,
}

/// Means of the reference policy at each trajectory's stochastic steps, with
/// the reference's own cache over the recorded clean frames.
fn reference_means(reference: &VelocityNet, batch: &GroupBatch, cfg: &GrpoConfig) -> Result<Vec<Vec<Tensor>>> {
    let steps = cfg.schedule.steps();
    batch
        .trajectories
        .iter()
        .map(|traj| {
            let mut cache = reference.new_cache();
            traj.frames
                .iter()
                .zip(&batch.set.conds)
                .map(|(f, cond)| {
                    let n = f.stochastic.step;
                    let t = cfg.schedule.time(n);
                    let v = reference.frame_velocity(&f.states[n], cond, t, &cache)?;
                    let mean = SdeCoefficients::new(t, cfg.schedule.dt(n), cfg.sigma)?.mean(&f.states[n], &v);
                    reference.commit(&mut cache, &f.states[steps], cond, steps, steps)?;
                    Ok(mean)
                })
                .collect()
        })
        .collect()
}

/// The negated GRPO objective on `tape`. The policy re-evaluates each recorded
/// stochastic transition, attending to keys/values it recomputes from the
/// recorded clean frames, so gradients also reach the cache.
pub fn grpo_loss_on(
    tape: &mut Tape,
    policy: &VelocityNet,
    b: &Bound,
    batches: &[GroupBatch],
    reference: Option<&VelocityNet>,
    cfg: &GrpoConfig,
) -> Result<(Var, LossStats)> {
    let steps = cfg.schedule.steps();
    let pixels = policy.config().pixels();
    let mut total: Option<Var> = None;
    let mut stats = LossStats::default();
    let terms: usize = batches.iter().map(|g| g.trajectories.iter().map(|t| t.frames.len()).sum::<usize>()).sum();
    if terms == 0 {
        return Err(Error::invalid("no stochastic steps to optimise"));
    }
    let norm = 1.0 / terms as f64;
    let mut clipped = 0usize;
    for batch in batches {
        let ref_means = match (reference, cfg.beta > 0.0) {
            (Some(r), true) => Some(reference_means(r, batch, cfg)?),
            (None, true) => return Err(Error::invalid("KL regularisation needs a reference policy")),
            _ => None,
        };
        for (i, (traj, adv)) in batch.trajectories.iter().zip(&batch.advantages).enumerate() {
            let mut cache = TapedCache::new(policy.config().capacity);
            for (m, (f, cond)) in traj.frames.iter().zip(&batch.set.conds).enumerate() {
                let rec = &f.stochastic;
                let n = rec.step;
                let t = cfg.schedule.time(n);
                let coef = SdeCoefficients::new(t, cfg.schedule.dt(n), cfg.sigma)?;
                let ctx = cache.context();
                let x = f.states[n].reshape(&[1, pixels])?;
                let xv = tape.constant(x.clone());
                let (v, _) = policy.frame_on(tape, b, xv, cond, t, &ctx)?;
                let mean = coef.mean_on_tape(tape, &x, v)?;
                let sample = tape.constant(rec.sample.reshape(&[1, pixels])?);
                let logp = tape.gaussian_log_density(sample, mean, coef.scale)?;
                let old = rec.log_density.ok_or_else(|| Error::invalid("recorded step is deterministic"))?;
                let diff = tape.value(logp).item() - old;
                if !diff.exp().is_finite() {
                    return Err(Error::NonFiniteRatio { trajectory: i, frame: m });
                }
                let old = tape.constant(Tensor::scalar(old));
                let log_ratio = tape.sub(logp, old)?;
                let ratio = tape.exp(log_ratio)?;
                let r = tape.value(ratio).item();
                stats.mean_ratio += r * norm;
                if (r - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                let a = adv[m];
                let unclipped = tape.scale(ratio, a)?;
                let c = tape.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
                let c = tape.scale(c, a)?;
                let term = tape.min(unclipped, c)?;
                let mut term = tape.scale(term, -norm)?;
                if let Some(rm) = &ref_means {
                    let mu_ref = tape.constant(rm[i][m].reshape(&[1, pixels])?);
                    let sq = tape.mse(mean, mu_ref)?;
                    // mse averages over pixels; KL sums them
                    let kl = tape.scale(sq, pixels as f64 / (2.0 * coef.scale * coef.scale))?;
                    stats.kl += tape.value(kl).item() * norm;
                    let kl = tape.scale(kl, cfg.beta * norm)?;
                    term = tape.add(term, kl)?;
                }
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
                let clean = tape.constant(f.states[steps].reshape(&[1, pixels])?);
                let kv = policy.commit_on(tape, b, clean, cond, &ctx)?;
                cache.push(f.frame, kv);
            }
        }
    }
    stats.terms = terms;
    stats.clip_fraction = clipped as f64 / terms as f64;
    Ok((total.expect("terms > 0"), stats))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub iteration: u64,
    pub mean_reward: f64,
    pub mean_motion_reward: f64,
    pub mean_quality_reward: f64,
    pub mean_abs_advantage: f64,
    pub zero_std_frames: usize,
    pub clip_fraction: f64,
    pub kl: f64,
    pub loss: f64,
    pub wall_clock: f64,
}

/// Holds the policy being trained, its frozen reference and the optimizer.
pub struct GrpoTrainer {
    pub policy: VelocityNet,
    pub reference: VelocityNet,
    pub cfg: GrpoConfig,
    opt: AdamW,
    reward: Arc<dyn RewardModel>,
}

impl GrpoTrainer {
    pub fn new(policy: VelocityNet, cfg: GrpoConfig, registry: &RewardRegistry) -> Result<Self> {
        cfg.validate()?;
        if policy.mask() != MaskMode::Causal {
            return Err(Error::invalid("the policy must use causal attention"));
        }
        let reward = registry.build(&cfg.reward, &cfg.reward_cfg)?;
        let reference = policy.clone();
        let opt = AdamW { weight_decay: 0.0, ..AdamW::with_lr(cfg.lr) };
        Ok(Self { policy, reference, cfg, opt, reward })
    }

    pub fn reward_model(&self) -> &dyn RewardModel {
        self.reward.as_ref()
    }

    /// Snapshot, sample, score, one gradient step.
    pub fn iteration(&mut self, sets: &[ControlSet], it: u64) -> Result<GrpoMetrics> {
        let start = Instant::now();
        let old = self.policy.clone();
        let mut batches = Vec::with_capacity(sets.len());
        let mut m = GrpoMetrics { iteration: it, ..Default::default() };
        let mut count = 0usize;
        for (j, set) in sets.iter().enumerate() {
            let trajectories = rollout_group(&old, set, &self.cfg, self.reward.as_ref(), derive(self.cfg.seed, &[0x6e2, it, j as u64]))?;
            let rewards: Vec<Vec<f64>> = trajectories.iter().map(|t| t.frames.iter().map(|f| f.reward.total).collect()).collect();
            let (advantages, flat) = compute_advantages(&rewards)?;
            m.zero_std_frames += flat;
            for (t, a) in trajectories.iter().zip(&advantages) {
                for (f, a) in t.frames.iter().zip(a) {
                    m.mean_reward += f.reward.total;
                    m.mean_motion_reward += f.reward.motion;
                    m.mean_quality_reward += f.reward.quality;
                    m.mean_abs_advantage += a.abs();
                    count += 1;
                }
            }
            batches.push(GroupBatch { set: set.clone(), trajectories, advantages });
        }
        let n = count.max(1) as f64;
        m.mean_reward /= n;
        m.mean_motion_reward /= n;
        m.mean_quality_reward /= n;
        m.mean_abs_advantage /= n;

        let mut tape = Tape::new();
        let b = self.policy.bind(&mut tape);
        let (loss, stats) = grpo_loss_on(&mut tape, &self.policy, &b, &batches, Some(&self.reference), &self.cfg)?;
        m.loss = tape.value(loss).item();
        m.clip_fraction = stats.clip_fraction;
        m.kl = stats.kl;
        let grads = tape.backward(loss)?.keyed_like(self.policy.params());
        self.policy.params_mut().adamw_step(&grads, &self.opt)?;
        m.wall_clock = start.elapsed().as_secs_f64();
        Ok(m)
    }
}

/// Clips of the configured task family in one split.
pub fn task_clips<'a>(clips: &[&'a SceneClip], task: Option<TrajectoryFamily>) -> Vec<&'a SceneClip> {
    clips.iter().copied().filter(|c| task.is_none_or(|f| c.family == f)).collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GrpoReport {
    pub metrics: Vec<GrpoMetrics>,
    /// `(iteration, held-out evaluation)`.
    pub held_out: Vec<(u64, EvalReport)>,
}

/// Runs `cfg.iterations` iterations on training clips of the task family,
/// evaluating on held-out clips of the same family every `eval_every`.
pub fn train_grpo(policy: VelocityNet, data: &Dataset, cfg: &GrpoConfig, log: &mut dyn LogSink) -> Result<(VelocityNet, GrpoReport)> {
    let mut trainer = GrpoTrainer::new(policy, cfg.clone(), &RewardRegistry::default())?;
    let train = task_clips(&data.train(), cfg.task);
    let val = task_clips(&data.val(), cfg.task);
    if train.is_empty() {
        return Err(Error::invalid("no training clips for the GRPO task"));
    }
    let start = Instant::now();
    let mut report = GrpoReport::default();
    let held_out = |net: &VelocityNet, it: u64, report: &mut GrpoReport, log: &mut dyn LogSink| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let e = evaluate(Generator::Student { net, schedule: &cfg.schedule }, &val, &cfg.reward_cfg, cfg.seed)?;
        log.log(json!({"phase": "grpo-eval", "iteration": it, "held_out": e, "wall_clock": start.elapsed().as_secs_f64()}));
        report.held_out.push((it, e));
        Ok(())
    };
    held_out(&trainer.policy, 0, &mut report, log)?;
    for it in 0..cfg.iterations as u64 {
        let idx = sample(&mut stream(cfg.seed, &[0x6e0, it]), train.len(), cfg.groups_per_iter.min(train.len())).into_vec();
        let sets = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| ControlSet::for_clip(train[k], cfg.seed, &[0x6e1, it, j as u64]))
            .collect::<Result<Vec<_>>>()?;
        let mut m = trainer.iteration(&sets, it)?;
        m.wall_clock = start.elapsed().as_secs_f64();
        log.log(json!({
            "iteration": m.iteration,
            "mean_reward": m.mean_reward,
            "mean_motion_reward": m.mean_motion_reward,
            "mean_quality_reward": m.mean_quality_reward,
            "mean_abs_advantage": m.mean_abs_advantage,
            "zero_std_frames": m.zero_std_frames,
            "clip_fraction": m.clip_fraction,
            "kl": m.kl,
            "wall_clock": m.wall_clock,
        }));
        report.metrics.push(m);
        if (it + 1) % cfg.eval_every as u64 == 0 || it + 1 == cfg.iterations as u64 {
            held_out(&trainer.policy, it + 1, &mut report, log)?;
        }
    }
    Ok((trainer.policy, report))
}
