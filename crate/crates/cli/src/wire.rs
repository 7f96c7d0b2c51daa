//! JSON bodies of the session API.
//!
//! Frames travel as base64 of their row-major little-endian doubles together
//! with the shape, so a decoded frame is bit-identical to the generated one.
//! Noise seeds are decimal strings because JSON numbers lose precision above
//! 2^53.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use dragflow_core::scene::Point;
use dragflow_core::service::FrameEntry;
use dragflow_core::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub shape: Vec<usize>,
    pub data: String,
}

impl FramePayload {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Tensor, String> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| format!("frame data is not base64: {e}"))?;
        if bytes.len() % 8 != 0 {
            return Err(format!("frame data has {} bytes, not a multiple of 8", bytes.len()));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub checkpoint: String,
    /// Blob position of frame 0; defaults to the tracked position of `reference`.
    #[serde(default)]
    pub position: Option<Point>,
    #[serde(default)]
    pub reference: Option<FramePayload>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NextFrame {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Regenerate {
    pub x: f64,
    pub y: f64,
    /// Frame to roll back to; the latest frame when absent.
    #[serde(default)]
    pub frame: Option<usize>,
    /// Replays a recorded initial draw; a fresh one when absent.
    #[serde(default)]
    pub noise_seed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResponse {
    pub session: String,
    pub frame: usize,
    pub control: Point,
    pub tracked: Option<Point>,
    pub motion_reward: f64,
    pub reward: f64,
    pub latency_ms: f64,
    pub noise_seed: String,
    pub pixels: FramePayload,
}

impl FrameResponse {
    pub fn new(session: &str, e: &FrameEntry) -> Self {
        Self {
            session: session.to_string(),
            frame: e.frame,
            control: e.control,
            tracked: e.tracked,
            motion_reward: e.motion_reward,
            reward: e.reward,
            latency_ms: e.latency_ms,
            noise_seed: e.noise_seed.to_string(),
            pixels: FramePayload::encode(&e.pixels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub session: String,
    pub frames: Vec<FrameResponse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub checkpoints: Vec<String>,
    /// Denoising times of the student schedule.
    pub schedule: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}
