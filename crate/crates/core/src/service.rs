//! Live, frame-by-frame generation sessions.
//!
//! A session owns a KV cache and generates one frame per submitted control
//! point with the student's inference path. The cache before every frame is
//! kept, so any frame can be regenerated after rolling back to it. Frame `m`
//! of a session with seed `s` and unmodified history equals frame `m` of
//! `self_rollout(net, FrameCond::for_controls(controls, s, &[]), schedule, s)`
//! bit for bit.
//!
//! [`SessionManager`] is the transport-independent server state: sessions are
//! isolated behind their own locks, model parameters are shared read-only.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::distill::{self_rollout_frame, RolloutMode};
use crate::error::Error;
use crate::flow::{initial_noise, NoiseSchedule};
use crate::nets::{FrameCond, KvCache, MaskMode, VelocityNet};
use crate::rewards::{terminal_reward, RewardConfig};
use crate::rng::{derive, normal_tensor, stream, StreamRng};
use crate::scene::{render_frame, ControlSignal, Point};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("invalid control: {0}")]
    InvalidControl(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot roll back: {0}")]
    Rollback(String),
    #[error(transparent)]
    Internal(#[from] Error),
}

impl SessionError {
    /// Machine-readable error code for transport payloads.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::UnknownCheckpoint(_) => "unknown_checkpoint",
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::InvalidControl(_) => "invalid_control",
            SessionError::InvalidRequest(_) => "invalid_request",
            SessionError::Rollback(_) => "rollback_out_of_range",
            SessionError::Internal(_) => "internal",
        }
    }
}

type SResult<T> = std::result::Result<T, SessionError>;

/// One generated frame with what produced it.
#[derive(Clone, Debug, Serialize)]
pub struct FrameEntry {
    pub frame: usize,
    pub control: Point,
    #[serde(skip)]
    pub pixels: Tensor,
    pub tracked: Option<Point>,
    pub motion_reward: f64,
    pub reward: f64,
    pub latency_ms: f64,
    /// Seed of the frame's initial draw.
    pub noise_seed: u64,
}

fn check_point(p: Point) -> SResult<Point> {
    if p.x.is_finite() && p.y.is_finite() && p.in_unit_square() {
        Ok(p)
    } else {
        Err(SessionError::InvalidControl(format!("({}, {}) is not a point of the unit square", p.x, p.y)))
    }
}

pub struct Session {
    id: String,
    checkpoint: String,
    net: Arc<VelocityNet>,
    schedule: NoiseSchedule,
    reward: RewardConfig,
    seed: u64,
    reference: Tensor,
    cache: KvCache,
    /// Cache before frame `m`.
    snapshots: Vec<KvCache>,
    /// Slot noise of frame `m`, drawn in order from the session stream.
    slots: Vec<Tensor>,
    slot_rng: StreamRng,
    history: Vec<FrameEntry>,
    regenerations: u64,
}

impl Session {
    /// Opens a session and generates frame 0 at `start`. The reference frame
    /// defaults to the blob rendered at `start`.
    pub fn create(
        id: String,
        checkpoint: String,
        net: Arc<VelocityNet>,
        schedule: NoiseSchedule,
        reward: RewardConfig,
        seed: u64,
        start: Point,
        reference: Option<Tensor>,
    ) -> SResult<Self> {
        if net.mask() != MaskMode::Causal {
            return Err(SessionError::InvalidRequest(format!("checkpoint `{checkpoint}` is not a causal student")));
        }
        let side = net.config().side;
        let start = check_point(start)?;
        let reference = match reference {
            Some(r) if r.shape() != [side, side] => {
                return Err(SessionError::InvalidRequest(format!("reference frame must be {side}x{side}, got {:?}", r.shape())))
            }
            Some(r) if !r.is_finite() => return Err(SessionError::InvalidRequest("reference frame has non-finite values".into())),
            Some(r) => r,
            None => render_frame(start, side),
        };
        let cache = net.new_cache();
        let mut s = Self {
            id,
            checkpoint,
            net,
            schedule,
            reward,
            seed,
            reference,
            cache,
            snapshots: Vec::new(),
            slots: Vec::new(),
            slot_rng: stream(seed, &[]),
            history: Vec::new(),
            regenerations: 0,
        };
        s.generate(start, seed)?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn history(&self) -> &[FrameEntry] {
        &self.history
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Generates the next frame from the current cache.
    fn generate(&mut self, point: Point, noise_seed: u64) -> SResult<&FrameEntry> {
        let m = self.history.len();
        let side = self.net.config().side;
        if self.slots.len() == m {
            self.slots.push(normal_tensor(&mut self.slot_rng, &[side, side]));
        }
        let control = ControlSignal::new(m, point, side, (m == 0).then(|| self.reference.clone()))?;
        let cond = FrameCond::new(&control, Some(&self.slots[m]))?;
        self.snapshots.truncate(m);
        self.snapshots.push(self.cache.clone());
        let start = Instant::now();
        let (frame, _) =
            self_rollout_frame(&self.net, &cond, &mut self.cache, &self.schedule, initial_noise(noise_seed, m, side), noise_seed, RolloutMode::Infer)?;
        let latency_ms = 1e3 * start.elapsed().as_secs_f64();
        let r = terminal_reward(&frame, point, &self.reward);
        self.history.push(FrameEntry {
            frame: m,
            control: point,
            pixels: frame,
            tracked: r.tracked,
            motion_reward: r.motion,
            reward: r.total,
            latency_ms,
            noise_seed,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn next_frame(&mut self, point: Point) -> SResult<&FrameEntry> {
        let point = check_point(point)?;
        self.generate(point, self.seed)
    }

    /// Rolls back to the cache before `frame` (default: the latest frame),
    /// drops that frame and everything after it, and generates it again with
    /// `point`. Without `noise_seed` the initial draw is fresh.
    pub fn regenerate(&mut self, point: Point, frame: Option<usize>, noise_seed: Option<u64>) -> SResult<&FrameEntry> {
        let point = check_point(point)?;
        let last = self.history.len().checked_sub(1).ok_or_else(|| SessionError::Rollback("no frames generated".into()))?;
        let m = frame.unwrap_or(last);
        if m > last {
            return Err(SessionError::Rollback(format!("frame {m} has not been generated (latest is {last})")));
        }
        self.regenerations += 1;
        let noise_seed = noise_seed.unwrap_or_else(|| derive(self.seed, &[0x4e6e, m as u64, self.regenerations]));
        self.cache = self.snapshots[m].clone();
        self.history.truncate(m);
        self.generate(point, noise_seed)
    }
}

/// Server state: named read-only models and the open sessions.
pub struct SessionManager {
    models: BTreeMap<String, Arc<VelocityNet>>,
    schedule: NoiseSchedule,
    reward: RewardConfig,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(schedule: NoiseSchedule, reward: RewardConfig) -> Self {
        Self { models: BTreeMap::new(), schedule, reward, sessions: Mutex::new(BTreeMap::new()), next_id: AtomicU64::new(1) }
    }

    /// Registers a student under `id`; the network is used with causal attention.
    pub fn add_model(&mut self, id: impl Into<String>, net: VelocityNet) {
        self.models.insert(id.into(), Arc::new(net.with_mask(MaskMode::Causal)));
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn reward(&self) -> &RewardConfig {
        &self.reward
    }

    fn session(&self, id: &str) -> SResult<Arc<Mutex<Session>>> {
        let map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.get(id).cloned().ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    /// Creates a session and returns its id with frame 0.
    pub fn create(&self, checkpoint: &str, start: Point, reference: Option<Tensor>, seed: u64) -> SResult<(String, FrameEntry)> {
        let net = self.models.get(checkpoint).cloned().ok_or_else(|| SessionError::UnknownCheckpoint(checkpoint.to_string()))?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let s = Session::create(id.clone(), checkpoint.to_string(), net, self.schedule.clone(), self.reward.clone(), seed, start, reference)?;
        let first = s.history()[0].clone();
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok((id, first))
    }

    /// Runs `f` with the session locked; requests to one session queue here.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> SResult<T>) -> SResult<T> {
        let s = self.session(id)?;
        let mut guard = s.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut guard)
    }

    pub fn next_frame(&self, id: &str, point: Point) -> SResult<FrameEntry> {
        self.with_session(id, |s| s.next_frame(point).cloned())
    }

    pub fn regenerate(&self, id: &str, point: Point, frame: Option<usize>, noise_seed: Option<u64>) -> SResult<FrameEntry> {
        self.with_session(id, |s| s.regenerate(point, frame, noise_seed).cloned())
    }

    pub fn history(&self, id: &str) -> SResult<Vec<FrameEntry>> {
        self.with_session(id, |s| Ok(s.history().to_vec()))
    }

    pub fn delete(&self, id: &str) -> SResult<()> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).remove(id).map(|_| ()).ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::self_rollout;
    use crate::nets::NetConfig;

    fn small() -> NetConfig {
        NetConfig { side: 6, width: 8, layers: 1, hidden: 8, capacity: 3 }
    }

    fn manager() -> SessionManager {
        let mut m = SessionManager::new(NoiseSchedule::paper_default(), RewardConfig::default());
        m.add_model("student", VelocityNet::new(small(), MaskMode::Causal, 1).unwrap());
        m
    }

    fn path(n: usize) -> Vec<Point> {
        (0..n).map(|k| Point::new(0.2 + 0.05 * k as f64, 0.6 - 0.03 * k as f64)).collect()
    }

    #[test]
    fn session_matches_offline_rollout() {
        let mgr = manager();
        let pts = path(6);
        let (id, f0) = mgr.create("student", pts[0], None, 9).unwrap();
        let mut frames = vec![f0.pixels];
        for p in &pts[1..] {
            frames.push(mgr.next_frame(&id, *p).unwrap().pixels);
        }
        let net = VelocityNet::new(small(), MaskMode::Causal, 1).unwrap();
        let controls = ControlSignal::for_trajectory(&pts, 6).unwrap();
        let conds = FrameCond::for_controls(&controls, 9, &[]).unwrap();
        let offline = self_rollout(&net, &conds, &NoiseSchedule::paper_default(), 9, RolloutMode::Infer).unwrap();
        assert!(frames.iter().zip(&offline.frames).all(|(a, b)| a.bit_eq(b)));
        // capacity 3 after 6 commits
        mgr.with_session(&id, |s| {
            assert_eq!(s.cache().frames(), vec![3, 4, 5]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn identical_inputs_give_identical_first_frames() {
        let mgr = manager();
        let (a, fa) = mgr.create("student", Point::new(0.4, 0.4), None, 3).unwrap();
        let (b, fb) = mgr.create("student", Point::new(0.4, 0.4), None, 3).unwrap();
        assert_ne!(a, b);
        assert!(fa.pixels.bit_eq(&fb.pixels));
        assert_eq!(fa.frame, 0);
        assert!(fa.latency_ms >= 0.0);
    }

    #[test]
    fn regenerate_rolls_back_one_commit() {
        let mgr = manager();
        let pts = path(5);
        let (id, _) = mgr.create("student", pts[0], None, 4).unwrap();
        for p in &pts[1..] {
            mgr.next_frame(&id, *p).unwrap();
        }
        let before = mgr.history(&id).unwrap();
        let occupancy = mgr.with_session(&id, |s| Ok(s.cache().frames())).unwrap();
        // same control and the recorded draw: the same frame
        let same = mgr.regenerate(&id, pts[4], None, Some(before[4].noise_seed)).unwrap();
        assert!(same.pixels.bit_eq(&before[4].pixels));
        assert_eq!(mgr.with_session(&id, |s| Ok(s.cache().frames())).unwrap(), occupancy);
        // a new control replaces only the last frame
        let moved = mgr.regenerate(&id, Point::new(0.8, 0.8), None, None).unwrap();
        assert_ne!(moved.noise_seed, before[4].noise_seed);
        let after = mgr.history(&id).unwrap();
        assert_eq!(after.len(), 5);
        assert!(after[..4].iter().zip(&before[..4]).all(|(a, b)| a.pixels.bit_eq(&b.pixels)));
        assert!(!after[4].pixels.bit_eq(&before[4].pixels));
        assert_eq!(after[4].control, Point::new(0.8, 0.8));
    }

    #[test]
    fn deeper_rollback_truncates_the_future() {
        let mgr = manager();
        let pts = path(5);
        let (id, _) = mgr.create("student", pts[0], None, 5).unwrap();
        for p in &pts[1..] {
            mgr.next_frame(&id, *p).unwrap();
        }
        let before = mgr.history(&id).unwrap();
        let f = mgr.regenerate(&id, pts[2], Some(2), Some(5)).unwrap();
        assert_eq!(f.frame, 2);
        assert!(f.pixels.bit_eq(&before[2].pixels));
        assert_eq!(mgr.history(&id).unwrap().len(), 3);
        // the regenerated history continues exactly like the original one
        let f3 = mgr.next_frame(&id, pts[3]).unwrap();
        assert!(f3.pixels.bit_eq(&before[3].pixels));
        assert!(matches!(mgr.regenerate(&id, pts[0], Some(9), None), Err(SessionError::Rollback(_))));
    }

    #[test]
    fn errors_carry_codes() {
        let mgr = manager();
        let e = mgr.create("nope", Point::new(0.5, 0.5), None, 0).unwrap_err();
        assert_eq!(e.code(), "unknown_checkpoint");
        assert_eq!(mgr.next_frame("s999", Point::new(0.5, 0.5)).unwrap_err().code(), "unknown_session");
        let (id, _) = mgr.create("student", Point::new(0.5, 0.5), None, 0).unwrap();
        assert_eq!(mgr.next_frame(&id, Point::new(1.5, 0.5)).unwrap_err().code(), "invalid_control");
        assert_eq!(mgr.next_frame(&id, Point::new(f64::NAN, 0.5)).unwrap_err().code(), "invalid_control");
        let e = mgr.create("student", Point::new(0.5, 0.5), Some(Tensor::zeros(&[2, 2])), 0).unwrap_err();
        assert_eq!(e.code(), "invalid_request");
        mgr.delete(&id).unwrap();
        assert_eq!(mgr.delete(&id).unwrap_err().code(), "unknown_session");
        assert_eq!(mgr.len(), 0);
    }

    #[test]
    fn future_controls_cannot_leak() {
        // frame m is fixed once generated; a second session that later diverges
        // agrees on every frame before the divergence
        let mgr = manager();
        let pts = path(4);
        let (a, _) = mgr.create("student", pts[0], None, 8).unwrap();
        let (b, _) = mgr.create("student", pts[0], None, 8).unwrap();
        for p in &pts[1..3] {
            mgr.next_frame(&a, *p).unwrap();
            mgr.next_frame(&b, *p).unwrap();
        }
        mgr.next_frame(&a, Point::new(0.9, 0.1)).unwrap();
        mgr.next_frame(&b, pts[3]).unwrap();
        let (ha, hb) = (mgr.history(&a).unwrap(), mgr.history(&b).unwrap());
        assert!(ha[..3].iter().zip(&hb[..3]).all(|(x, y)| x.pixels.bit_eq(&y.pixels)));
    }
}
