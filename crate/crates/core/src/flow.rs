//! Flow-matching dynamics under one convention: time runs from noise (`t = 0`)
//! to data (`t = 1`), `x_t = t·x_data + (1 − t)·x_noise` and the target
//! velocity is `x_data − x_noise`.
//!
//! The stochastic sampler adds diffusion `σ dW` and compensates the drift with
//! `(σ²/2)·∇log p_t`, where for the linear interpolant
//! `∇log p_t(x) = −(x − t·v)/(1 − t)`. The score is singular at `t = 1`, so
//! stochastic steps are only allowed for `t ≤ T_CLAMP`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_log_density, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::normal;

/// Raw timesteps of the three-step schedule, counting down from 1000.
pub const DEFAULT_RAW_TIMESTEPS: [f64; 4] = [1000.0, 755.0, 522.0, 0.0];

const RAW_MAX: f64 = 1000.0;

/// Largest time at which the score may be evaluated.
pub const T_CLAMP: f64 = 0.999;

/// Ordered denoising times on `[0, 1]`, ascending toward data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    raw: Vec<f64>,
    times: Vec<f64>,
}

impl NoiseSchedule {
    /// Maps descending raw timesteps `1000 = s_0 > … > s_N = 0` to
    /// `t_n = 1 − s_n/1000`.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::invalid("schedule needs at least two timesteps"));
        }
        if raw[0] != RAW_MAX || *raw.last().unwrap() != 0.0 {
            return Err(Error::invalid(format!("schedule must start at 1000 and end at 0, got {raw:?}")));
        }
        if raw.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!("schedule must be strictly descending, got {raw:?}")));
        }
        // (1000 − s)/1000 is exact in the numerator for integral s.
        let times = raw.iter().map(|s| (RAW_MAX - s) / RAW_MAX).collect();
        Ok(Self { raw: raw.to_vec(), times })
    }

    /// Parses a comma-separated list such as `"1000,755,522,0"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let raw = spec
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| Error::invalid(format!("schedule entry {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(&raw)
    }

    /// `steps` equal increments from 0 to 1.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("uniform schedule needs at least one step"));
        }
        let raw: Vec<f64> = (0..=steps).map(|k| RAW_MAX * (steps - k) as f64 / steps as f64).collect();
        Self::from_raw(&raw)
    }

    pub fn paper_default() -> Self {
        Self::from_raw(&DEFAULT_RAW_TIMESTEPS).expect("valid default schedule")
    }

    /// Number of denoising steps N.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn time(&self, n: usize) -> f64 {
        self.times[n]
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    pub fn dts(&self) -> Vec<f64> {
        (0..self.steps()).map(|n| self.dt(n)).collect()
    }

    /// Inverse of [`NoiseSchedule::from_raw`] on the stored times.
    pub fn denormalize(&self) -> Vec<f64> {
        self.times
            .iter()
            .map(|t| {
                let s = RAW_MAX * (1.0 - t);
                if (s - s.round()).abs() < 1e-9 {
                    s.round()
                } else {
                    s
                }
            })
            .collect()
    }

    pub fn to_spec_string(&self) -> String {
        self.raw.iter().map(|s| format!("{s}")).collect::<Vec<_>>().join(",")
    }
}

/// One point of the linear interpolant with its regression target.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x_noise: Tensor,
    pub x_data: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

pub fn interpolate(x_data: &Tensor, x_noise: &Tensor, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    if x_data.shape() != x_noise.shape() {
        return Err(Error::Shape { op: "interpolate", shapes: vec![x_data.shape().to_vec(), x_noise.shape().to_vec()] });
    }
    let x_t = zip(x_data, x_noise, |d, n| t * d + (1.0 - t) * n);
    let v_target = zip(x_data, x_noise, |d, n| d - n);
    Ok(FlowSample { x_noise: x_noise.clone(), x_data: x_data.clone(), t, x_t, v_target })
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Initial draw `x_{m,0}` for frame `m` of the video generated under `seed`.
/// Teacher and student use the same draws, which is what "matched initial
/// noise" means throughout the crate.
pub fn initial_noise(seed: u64, frame: usize, side: usize) -> Tensor {
    crate::rng::normal_tensor(&mut crate::rng::stream(seed, &[0x1a1e, frame as u64]), &[side, side])
}

/// Explicit Euler step `x + v·Δt`.
pub fn ode_step(x: &Tensor, v: &Tensor, dt: f64) -> Tensor {
    zip(x, v, |x, v| x + v * dt)
}

/// `∇log p_t(x) = −(x − t·v)/(1 − t)`.
pub fn score_from_velocity(x: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    if t > T_CLAMP {
        return Err(Error::invalid(format!("score undefined at t = {t} (> {T_CLAMP})")));
    }
    Ok(zip(x, v, |x, v| -(x - t * v) / (1.0 - t)))
}

/// The stochastic update's mean is affine in `(x, v)`:
/// `mean = x_coef·x + v_coef·v`, which equals
/// `x + [v + (σ²/2)·score(x, v, t)]·Δt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdeCoefficients {
    pub x_coef: f64,
    pub v_coef: f64,
    /// Standard deviation of the transition, `σ·√Δt`.
    pub scale: f64,
}

impl SdeCoefficients {
    pub fn new(t: f64, dt: f64, sigma: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!("noise scale must be >= 0, got {sigma}")));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("step must be positive, got {dt}")));
        }
        if sigma == 0.0 {
            return Ok(Self { x_coef: 1.0, v_coef: dt, scale: 0.0 });
        }
        if t > T_CLAMP {
            return Err(Error::invalid(format!("stochastic step at t = {t} exceeds clamp {T_CLAMP}")));
        }
        let k = sigma * sigma / (2.0 * (1.0 - t));
        Ok(Self { x_coef: 1.0 - k * dt, v_coef: dt * (1.0 + k * t), scale: sigma * dt.sqrt() })
    }

    pub fn mean(&self, x: &Tensor, v: &Tensor) -> Tensor {
        // Written as x·a + v·b in the same order as `mean_on_tape`, so both
        // paths round identically.
        zip(x, v, |x, v| self.x_coef * x + v * self.v_coef)
    }

    /// Differentiable mean for a fixed state `x` and a recorded velocity var.
    pub fn mean_on_tape(&self, tape: &mut Tape, x: &Tensor, v: Var) -> Result<Var> {
        let fixed = tape.constant(x.map(|x| self.x_coef * x));
        let moving = tape.scale(v, self.v_coef)?;
        tape.add(fixed, moving)
    }
}

/// Record of one transition taken by [`sde_step`].
#[derive(Clone, Debug)]
pub struct SdeStepRecord {
    pub step: usize,
    pub sigma: f64,
    pub mean: Tensor,
    pub scale: f64,
    pub sample: Tensor,
    /// `None` for the deterministic (σ = 0) case.
    pub log_density: Option<f64>,
}

impl SdeStepRecord {
    pub fn is_deterministic(&self) -> bool {
        self.log_density.is_none()
    }
}

/// Euler–Maruyama step of the marginal-preserving SDE.
pub fn sde_step(
    x: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma: f64,
    step: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, SdeStepRecord)> {
    let c = SdeCoefficients::new(t, dt, sigma)?;
    let mean = c.mean(x, v);
    if sigma == 0.0 {
        let rec = SdeStepRecord { step, sigma, mean: mean.clone(), scale: 0.0, sample: mean.clone(), log_density: None };
        return Ok((mean, rec));
    }
    let noise: Vec<f64> = (0..mean.len()).map(|_| normal(rng)).collect();
    let mut sample = mean.clone();
    sample.data_mut().iter_mut().zip(&noise).for_each(|(s, e)| *s += c.scale * e);
    let lp = gaussian_log_density(sample.data(), mean.data(), c.scale);
    let rec = SdeStepRecord { step, sigma, mean, scale: c.scale, sample: sample.clone(), log_density: Some(lp) };
    Ok((sample, rec))
}

/// Diagonal-Gaussian log-density of `sample` summed over elements.
pub fn transition_log_density(sample: &Tensor, mean: &Tensor, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("transition scale must be > 0, got {scale}")));
    }
    if sample.shape() != mean.shape() {
        return Err(Error::Shape { op: "transition_log_density", shapes: vec![sample.shape().to_vec(), mean.shape().to_vec()] });
    }
    Ok(gaussian_log_density(sample.data(), mean.data(), scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::stream;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn paper_schedule_normalizes_exactly() {
        let sch = NoiseSchedule::paper_default();
        assert_eq!(sch.times(), &[0.0, 0.245, 0.478, 1.0]);
        assert_eq!(sch.steps(), 3);
        assert_eq!(sch.denormalize(), DEFAULT_RAW_TIMESTEPS.to_vec());
    }

    #[test]
    fn small_schedules() {
        assert_eq!(NoiseSchedule::from_raw(&[1000.0, 0.0]).unwrap().times(), &[0.0, 1.0]);
        assert_eq!(NoiseSchedule::from_raw(&[1000.0, 500.0, 0.0]).unwrap().dts(), vec![0.5, 0.5]);
        assert_eq!(NoiseSchedule::parse("1000, 755,522,0").unwrap(), NoiseSchedule::paper_default());
    }

    #[test]
    fn non_monotone_schedule_rejected() {
        assert!(NoiseSchedule::from_raw(&[1000.0, 522.0, 755.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_raw(&[900.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_raw(&[1000.0, 10.0]).is_err());
    }

    #[test]
    fn interpolate_endpoints() {
        let f = interpolate(&s(1.0), &s(0.0), 0.5).unwrap();
        assert_eq!(f.x_t.item(), 0.5);
        assert_eq!(f.v_target.item(), 1.0);
        assert_eq!(interpolate(&s(3.0), &s(-2.0), 0.0).unwrap().x_t.item(), -2.0);
        assert_eq!(interpolate(&s(3.0), &s(-2.0), 1.0).unwrap().x_t.item(), 3.0);
        assert!(interpolate(&s(1.0), &s(0.0), 1.5).is_err());
    }

    #[test]
    fn euler_examples() {
        assert_eq!(ode_step(&s(0.0), &s(1.0), 0.245).item(), 0.245);
        assert_eq!(ode_step(&s(0.3), &s(0.0), 0.7).item(), 0.3);
        assert_eq!(ode_step(&s(1.0), &s(-1.0), 0.5).item(), 0.5);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_velocity(&s(0.4), &s(0.8), 0.5).unwrap().item(), 0.0);
        assert_eq!(score_from_velocity(&s(1.0), &s(0.0), 0.0).unwrap().item(), -1.0);
        assert_eq!(score_from_velocity(&s(0.5), &s(1.0), 0.5).unwrap().item(), 0.0);
        assert!(score_from_velocity(&s(0.5), &s(1.0), 0.9995).is_err());
    }

    #[test]
    fn sde_examples() {
        let mut rng = stream(0, &[]);
        let (x, rec) = sde_step(&s(0.0), &s(1.0), 0.0, 0.245, 0.0, 0, &mut rng).unwrap();
        assert!(x.bit_eq(&ode_step(&s(0.0), &s(1.0), 0.245)));
        assert!(rec.is_deterministic());
        // score at (0, 1, t=0) is 0, so the mean is the Euler point.
        let c = SdeCoefficients::new(0.0, 0.245, 0.4).unwrap();
        assert_eq!(c.mean(&s(0.0), &s(1.0)).item(), 0.245);
        assert!((SdeCoefficients::new(0.3, 0.25, 0.4).unwrap().scale - 0.2).abs() < 1e-15);
        assert!(SdeCoefficients::new(0.9995, 0.0005, 0.4).is_err());
    }

    #[test]
    fn coefficient_form_matches_literal_update() {
        let mut rng = stream(3, &[]);
        for _ in 0..200 {
            let t: f64 = rng.random_range(0.0..0.99);
            let dt: f64 = rng.random_range(0.001..0.5);
            let sigma: f64 = rng.random_range(0.0..1.5);
            let x = Tensor::vector((0..5).map(|_| normal(&mut rng)).collect());
            let v = Tensor::vector((0..5).map(|_| normal(&mut rng)).collect());
            let score = score_from_velocity(&x, &v, t).unwrap();
            let literal: Vec<f64> = (0..5)
                .map(|i| x.data()[i] + (v.data()[i] + 0.5 * sigma * sigma * score.data()[i]) * dt)
                .collect();
            let mean = SdeCoefficients::new(t, dt, sigma).unwrap().mean(&x, &v);
            for (a, b) in mean.data().iter().zip(&literal) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_density_values() {
        let lp = transition_log_density(&s(0.0), &s(0.0), 1.0).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        let d = 6;
        let sigma: f64 = 0.3;
        let x = Tensor::vector(vec![0.2; d]);
        let lp = transition_log_density(&x, &x, sigma).unwrap();
        let closed = -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!((lp - closed).abs() < 1e-12);
        assert!(transition_log_density(&x, &x, 0.0).is_err());
    }

    #[test]
    fn log_density_gradient_wrt_mean() {
        let sample = Tensor::vector(vec![0.3, -1.2, 0.8]);
        let mean = Tensor::vector(vec![0.1, -0.7, 1.1]);
        let report = gradcheck::check_inputs(&[mean.clone()], 1e-5, |tape, v| {
            let s = tape.constant(sample.clone());
            tape.gaussian_log_density(s, v[0], 0.37)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let mut tape = Tape::new();
        let s = tape.constant(sample.clone());
        let m = tape.input(sample.clone()).unwrap();
        let lp = tape.gaussian_log_density(s, m, 0.37).unwrap();
        let g = tape.backward(lp).unwrap().wrt(m).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
}
