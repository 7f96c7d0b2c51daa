//! Controlled flow matching for the bidirectional teacher, and its many-step
//! joint sampler.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{AdamW, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{initial_noise, interpolate, ode_step, NoiseSchedule};
use crate::logging::LogSink;
use crate::nets::{stack_frames, Bound, FrameCond, VelocityNet};
use crate::rng::{normal_tensor, stream};
use crate::scene::{Dataset, SceneClip};

/// One training video: clean frames and their conditions.
pub type Example<'a> = (&'a [Tensor], &'a [FrameCond]);

/// Mean squared error between the net's joint velocity at `(x_t, t)` and the
/// target `x_data − x_noise`, over all frames and pixels.
pub fn flow_matching_loss_on(
    tape: &mut Tape,
    net: &VelocityNet,
    b: &Bound,
    frames: &[Tensor],
    conds: &[FrameCond],
    noise: &[Tensor],
    t: f64,
) -> Result<Var> {
    if frames.len() != conds.len() || frames.len() != noise.len() {
        return Err(Error::invalid("frames, conditions and noise must have equal length"));
    }
    let mut xt = Vec::with_capacity(frames.len());
    let mut target = Vec::with_capacity(frames.len());
    for (x1, x0) in frames.iter().zip(noise) {
        let s = interpolate(x1, x0, t)?;
        xt.push(s.x_t);
        target.push(s.v_target);
    }
    let p = net.config().pixels();
    let x = tape.constant(stack_frames(&xt.iter().collect::<Vec<_>>(), p)?);
    let y = tape.constant(stack_frames(&target.iter().collect::<Vec<_>>(), p)?);
    let v = net.video_on(tape, b, x, conds, t)?;
    tape.mse(v, y)
}

/// One optimizer step of flow matching on a batch of videos, with a single
/// shared `t ~ U[0, 1)` per video and fresh noise per frame.
pub fn flow_matching_step(net: &mut VelocityNet, opt: &AdamW, batch: &[Example<'_>], rng: &mut impl Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let side = net.config().side;
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let mut total: Option<Var> = None;
    for (frames, conds) in batch {
        let t: f64 = rng.random_range(0.0..1.0);
        let noise: Vec<Tensor> = frames.iter().map(|_| normal_tensor(rng, &[side, side])).collect();
        let l = flow_matching_loss_on(&mut tape, net, &b, frames, conds, &noise, t)?;
        let l = tape.scale(l, 1.0 / batch.len() as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.unwrap();
    let loss = tape.value(total).item();
    let grads = tape.backward(total)?.keyed_like(net.params());
    net.params_mut().adamw_step(&grads, opt)?;
    Ok(loss)
}

/// Conditions for clip `i` at optimizer step `step`; slot noise is redrawn
/// every step.
fn clip_conds(clip: &SceneClip, seed: u64, step: u64, i: u64) -> Result<Vec<FrameCond>> {
    FrameCond::for_controls(&clip.controls(), seed, &[0x5107, step, i])
}

/// Flow-matching step on ground-truth clips.
pub fn teacher_train_step(net: &mut VelocityNet, opt: &AdamW, clips: &[&SceneClip], seed: u64, step: u64) -> Result<f64> {
    let conds = clips
        .iter()
        .enumerate()
        .map(|(i, c)| clip_conds(c, seed, step, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<Example<'_>> = clips.iter().zip(&conds).map(|(c, k)| (c.frames.as_slice(), k.as_slice())).collect();
    flow_matching_step(net, opt, &batch, &mut stream(seed, &[0x7ea, step]))
}

/// Flow-matching loss on held-out clips with draws fixed by `seed`, so that
/// successive evaluations are comparable.
pub fn validation_loss(net: &VelocityNet, clips: &[&SceneClip], seed: u64, draws: usize) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let side = net.config().side;
    let mut total = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let conds = clip_conds(clip, seed, u64::MAX, i as u64)?;
        let mut rng = stream(seed, &[0x7a1, i as u64]);
        for d in 0..draws {
            // stratified times keep the estimate low-variance
            let t = (d as f64 + rng.random_range(0.0..1.0)) / draws as f64;
            let noise: Vec<Tensor> = clip.frames.iter().map(|_| normal_tensor(&mut rng, &[side, side])).collect();
            let mut tape = Tape::new();
            let b = net.bind_frozen(&mut tape);
            let l = flow_matching_loss_on(&mut tape, net, &b, &clip.frames, &conds, &noise, t)?;
            total += tape.value(l).item();
        }
    }
    Ok(total / (clips.len() * draws) as f64)
}

#[derive(Clone, Debug)]
pub struct TeacherSample {
    pub frames: Vec<Tensor>,
    /// Per-frame velocity evaluations performed before any frame was final.
    pub velocity_evals: usize,
}

/// Joint Euler integration of all frames from the given initial draws.
pub fn teacher_sample_from(net: &VelocityNet, conds: &[FrameCond], x0: Vec<Tensor>, schedule: &NoiseSchedule) -> Result<TeacherSample> {
    let mut xs = x0;
    let mut evals = 0;
    for n in 0..schedule.steps() {
        let v = net.video_velocity(&xs, conds, schedule.time(n))?;
        evals += xs.len();
        let dt = schedule.dt(n);
        xs = xs.iter().zip(&v).map(|(x, v)| ode_step(x, v, dt)).collect();
    }
    Ok(TeacherSample { frames: xs, velocity_evals: evals })
}

/// `K`-step uniform-grid sample; initial draws come from [`initial_noise`].
pub fn teacher_sample(net: &VelocityNet, conds: &[FrameCond], steps: usize, seed: u64) -> Result<TeacherSample> {
    let side = net.config().side;
    let x0 = (0..conds.len()).map(|m| initial_noise(seed, m, side)).collect();
    teacher_sample_from(net, conds, x0, &NoiseSchedule::uniform(steps)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch: 4, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: u64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
}

/// Trains `net` on the training split; logs every step and every epoch.
pub fn train_teacher(net: &mut VelocityNet, data: &Dataset, cfg: &TeacherTrainConfig, log: &mut dyn LogSink) -> Result<TeacherReport> {
    let train = data.train();
    let val = data.val();
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training clips"));
    }
    let opt = AdamW::with_lr(cfg.lr);
    let start = Instant::now();
    let mut report = TeacherReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[0xe90c, epoch as u64]));
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let clips: Vec<&SceneClip> = chunk.iter().map(|&i| train[i]).collect();
            let loss = teacher_train_step(net, &opt, &clips, cfg.seed, report.steps)?;
            log.log(json!({"phase": "teacher", "step": report.steps, "loss": loss, "wall_clock": start.elapsed().as_secs_f64()}));
            report.steps += 1;
            sum += loss;
            count += 1;
        }
        report.epoch_train_loss.push(sum / count as f64);
        if !val.is_empty() {
            let v = validation_loss(net, &val, cfg.seed, 4)?;
            report.epoch_val_loss.push(v);
            log.log(json!({"phase": "teacher", "epoch": epoch, "val_loss": v, "wall_clock": start.elapsed().as_secs_f64()}));
        }
    }
    Ok(report)
}
