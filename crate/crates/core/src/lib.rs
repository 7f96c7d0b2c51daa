//! Few-step autoregressive flow-matching video generation with trajectory
//! control, at desk scale.
//!
//! The pipeline: a bidirectional teacher velocity field is fit with controlled
//! flow matching ([`teacher`]), distilled into a three-step causal student that
//! generates frame by frame over a bounded KV cache ([`distill`]), then
//! fine-tuned with group-relative policy optimisation where exactly one
//! denoising step per frame is made stochastic ([`grpo`]). Scenes are single
//! Gaussian blobs moving along smooth trajectories ([`scene`]); rewards come
//! from a centroid tracker and a blob-integrity proxy ([`rewards`]).

pub mod autodiff;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod logging;
pub mod nets;
pub mod rewards;
pub mod rng;
pub mod scene;
pub mod service;
pub mod teacher;

pub use autodiff::{AdamW, Checkpoint, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use flow::NoiseSchedule;
pub use nets::{FrameCond, KvCache, MaskMode, NetConfig, VelocityNet};
pub use scene::{ControlSignal, Dataset, SceneClip};
