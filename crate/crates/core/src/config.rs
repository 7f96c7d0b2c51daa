//! Flat `key = value` run configuration.
//!
//! One file configures every stage. Lines are `key = value`; `#` starts a
//! comment; blank lines are ignored. Unknown and repeated keys are errors.
//! Command-line overrides use the same keys and are applied after the file.
//! [`reference_markdown`] renders the key table that `docs/config.md` holds.

use std::fmt::Write as _;
use std::path::Path;

use crate::distill::{DistillConfig, Objective};
use crate::error::{Error, Result};
use crate::flow::NoiseSchedule;
use crate::grpo::GrpoConfig;
use crate::nets::NetConfig;
use crate::rewards::RewardConfig;
use crate::scene::TrajectoryFamily;
use crate::teacher::TeacherTrainConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub count: usize,
    /// M; clips hold M + 1 frames.
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub teacher: TeacherTrainConfig,
    /// Uniform Euler steps K of the teacher sampler.
    pub teacher_steps: usize,
    pub distill: DistillConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub schedule: NoiseSchedule,
    pub latency_runs: usize,
    pub latency_warmup: usize,
    pub serve_addr: String,
    pub runs_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig { count: 1000, frames: 15 },
            net: NetConfig::default(),
            teacher: TeacherTrainConfig::default(),
            teacher_steps: 32,
            distill: DistillConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            schedule: NoiseSchedule::paper_default(),
            latency_runs: 20,
            latency_warmup: 3,
            serve_addr: "127.0.0.1:7878".into(),
            runs_dir: "runs".into(),
        }
    }
}

struct Key {
    name: &'static str,
    kind: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

macro_rules! key {
    ($name:literal, $ty:ty, $kind:literal, $doc:literal, $($field:ident).+) => {
        Key {
            name: $name,
            kind: $kind,
            doc: $doc,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = num::<$ty>(v)?;
                Ok(())
            },
        }
    };
}

fn family_name(f: Option<TrajectoryFamily>) -> String {
    f.map_or_else(|| "all".to_string(), |f| f.name().to_string())
}

fn bool_value(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

const KEYS: &[Key] = &[
    key!("seed", u64, "u64", "Master seed; every stage derives its streams from it.", seed),
    key!("data.count", usize, "usize", "Clips in the synthetic corpus (90/10 train/validation split).", data.count),
    key!("data.frames", usize, "usize", "M: each clip has M + 1 frames.", data.frames),
    key!("net.side", usize, "usize", "Frame side S in cells.", net.side),
    key!("net.width", usize, "usize", "Token width.", net.width),
    key!("net.layers", usize, "usize", "Attention blocks.", net.layers),
    key!("net.hidden", usize, "usize", "MLP hidden width.", net.hidden),
    key!("net.cache_capacity", usize, "usize", "KV-cache capacity in frames.", net.capacity),
    Key {
        name: "schedule",
        kind: "list",
        doc: "Student timesteps, descending from 1000 to 0, comma-separated.",
        get: |c| c.schedule.to_spec_string(),
        set: |c, v| {
            c.schedule = NoiseSchedule::parse(v).map_err(|e| e.to_string())?;
            Ok(())
        },
    },
    key!("teacher.epochs", usize, "usize", "Passes over the training split.", teacher.epochs),
    key!("teacher.batch", usize, "usize", "Clips per teacher step.", teacher.batch),
    key!("teacher.lr", f64, "f64", "AdamW learning rate for the teacher.", teacher.lr),
    key!("teacher.sample_steps", usize, "usize", "K: Euler steps of the teacher sampler (targets, evaluation, latency).", teacher_steps),
    Key {
        name: "distill.objective",
        kind: "enum",
        doc: "dmd, regression or teacher-forcing (DMD with ground-truth history).",
        get: |c| c.distill.objective.to_string(),
        set: |c, v| {
            c.distill.objective = v.parse::<Objective>().map_err(|e| e.to_string())?;
            Ok(())
        },
    },
    key!("distill.steps", usize, "usize", "Student updates.", distill.steps),
    key!("distill.batch", usize, "usize", "Clips per student update.", distill.batch),
    key!("distill.lr", f64, "f64", "AdamW learning rate for the student.", distill.lr),
    key!("distill.fake_lr", f64, "f64", "AdamW learning rate for the fake-score net.", distill.fake_lr),
    key!("distill.fake_steps", usize, "usize", "Fake-score updates per student update.", distill.fake_steps),
    key!("distill.renoise_min", f64, "f64", "Lower bound of the DMD re-noise time.", distill.renoise_min),
    key!("distill.renoise_max", f64, "f64", "Upper bound of the DMD re-noise time.", distill.renoise_max),
    key!("distill.eval_every", usize, "usize", "Validation interval in updates.", distill.eval_every),
    key!("grpo.group", usize, "usize", "G: videos per control set.", grpo.group),
    key!("grpo.groups_per_iter", usize, "usize", "Control sets per iteration.", grpo.groups_per_iter),
    key!("grpo.clip", f64, "f64", "Clip width epsilon.", grpo.clip),
    key!("grpo.beta", f64, "f64", "KL weight toward the frozen reference policy.", grpo.beta),
    key!("grpo.sigma", f64, "f64", "Diffusion coefficient of the stochastic step.", grpo.sigma),
    key!("grpo.iterations", usize, "usize", "GRPO iterations.", grpo.iterations),
    key!("grpo.lr", f64, "f64", "AdamW learning rate (no weight decay).", grpo.lr),
    Key {
        name: "grpo.shared_init",
        kind: "bool",
        doc: "Group members share the frames' initial draws.",
        get: |c| c.grpo.shared_init.to_string(),
        set: |c, v| {
            c.grpo.shared_init = bool_value(v)?;
            Ok(())
        },
    },
    Key {
        name: "grpo.reward",
        kind: "string",
        doc: "Registered reward model: blob (quality + motion) or motion.",
        get: |c| c.grpo.reward.clone(),
        set: |c, v| {
            c.grpo.reward = v.to_string();
            Ok(())
        },
    },
    Key {
        name: "grpo.task",
        kind: "enum",
        doc: "Trajectory family trained and evaluated: line, arc, sine, spline or all.",
        get: |c| family_name(c.grpo.task),
        set: |c, v| {
            c.grpo.task = if v == "all" { None } else { Some(v.parse::<TrajectoryFamily>().map_err(|e| e.to_string())?) };
            Ok(())
        },
    },
    key!("grpo.eval_every", usize, "usize", "Held-out evaluation interval in iterations.", grpo.eval_every),
    key!("reward.alpha", f64, "f64", "Motion offset alpha (squared unit-square distance).", reward.alpha),
    key!("reward.lambda", f64, "f64", "Motion scale lambda.", reward.lambda),
    key!("reward.quality_weight", f64, "f64", "Peak of the quality proxy.", reward.quality_weight),
    key!("reward.floor", f64, "f64", "Minimum positive intensity mass for a trackable frame.", reward.floor),
    key!("reward.threshold", f64, "f64", "Tracker threshold as a fraction of the frame maximum.", reward.threshold),
    key!("latency.runs", usize, "usize", "Timed runs; the median is reported.", latency_runs),
    key!("latency.warmup", usize, "usize", "Discarded warm-up runs.", latency_warmup),
    Key {
        name: "serve.addr",
        kind: "string",
        doc: "Bind address of the session server.",
        get: |c| c.serve_addr.clone(),
        set: |c, v| {
            c.serve_addr = v.to_string();
            Ok(())
        },
    },
    Key {
        name: "runs_dir",
        kind: "string",
        doc: "Parent directory of run directories.",
        get: |c| c.runs_dir.clone(),
        set: |c, v| {
            c.runs_dir = v.to_string();
            Ok(())
        },
    },
];

/// Splits config text into `(line, key, value)` entries.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some((first, ..)) = out.iter().find(|(_, key, _)| key == k) {
            return Err(Error::Config(format!("line {}: key `{k}` repeats line {first}", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS.iter().find(|k| k.name == key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        (k.set)(self, value).map_err(|e| Error::Config(format!("`{key}` = {value:?}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Defaults, then `text`, then `overrides` (each `key=value`).
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        for (line, k, v) in parse_lines(text)? {
            c.set(&k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not `key=value`")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.count == 0 || self.data.frames == 0 {
            return Err(Error::Config("data.count and data.frames must be >= 1".into()));
        }
        if self.teacher_steps == 0 || self.latency_runs == 0 {
            return Err(Error::Config("teacher.sample_steps and latency.runs must be >= 1".into()));
        }
        self.net.validate()?;
        self.reward.validate()?;
        self.distill_config().validate()?;
        self.grpo_config().validate()
    }

    /// Every key with its current value, in table order; parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    pub fn teacher_config(&self) -> TeacherTrainConfig {
        TeacherTrainConfig { seed: self.seed, ..self.teacher.clone() }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig { seed: self.seed, schedule: self.schedule.clone(), teacher_steps: self.teacher_steps, ..self.distill.clone() }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig { seed: self.seed, schedule: self.schedule.clone(), reward_cfg: self.reward.clone(), ..self.grpo.clone() }
    }
}

/// The reference page for every key: type, default and meaning.
pub fn reference_markdown() -> String {
    let d = RunConfig::default();
    let mut s = String::from(
        "# Configuration reference\n\n\
         Generated from the key table in `crates/core/src/config.rs`; do not edit by hand.\n\n\
         Files are flat `key = value` lines; `#` starts a comment. Unknown or repeated keys are rejected.\n\
         Flags of the form `--set key=value` override the file.\n\n\
         | key | type | default | meaning |\n|---|---|---|---|\n",
    );
    for k in KEYS {
        let _ = writeln!(s, "| `{}` | {} | `{}` | {} |", k.name, k.kind, (k.get)(&d), k.doc);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        let back = RunConfig::from_text(&d.to_text(), &[]).unwrap();
        assert_eq!(back.to_text(), d.to_text());
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\nseed = 7\n\ngrpo.iterations = 12  # trailing\ngrpo.task = all\ndistill.objective = teacher-forcing\n";
        let c = RunConfig::from_text(text, &["seed=9".into(), "schedule=1000,500,0".into()]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.grpo.iterations, 12);
        assert_eq!(c.grpo.task, None);
        assert_eq!(c.distill.objective, Objective::TeacherForcing);
        assert_eq!(c.schedule.steps(), 2);
        assert_eq!(c.grpo_config().seed, 9);
        assert_eq!(c.distill_config().schedule.steps(), 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_text("seed = 1\ngrpo.gruop = 4\n", &[]).unwrap_err().to_string();
        assert!(e.contains("grpo.gruop") && e.contains("line 2"), "{e}");
        let e = RunConfig::from_text("", &["nope=1".into()]).unwrap_err().to_string();
        assert!(e.contains("nope"), "{e}");
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(RunConfig::from_text("seed 1\n", &[]).is_err());
        assert!(RunConfig::from_text("seed = one\n", &[]).is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n", &[]).is_err());
        assert!(RunConfig::from_text("grpo.group = 1\n", &[]).is_err());
        assert!(RunConfig::from_text("grpo.shared_init = yes\n", &[]).is_err());
        assert!(RunConfig::from_text("schedule = 1000,200,500,0\n", &[]).is_err());
    }

    #[test]
    fn reference_lists_every_key() {
        let r = reference_markdown();
        for k in KEYS {
            assert!(r.contains(&format!("`{}`", k.name)));
        }
    }

    #[test]
    fn checked_in_reference_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md");
        let want = reference_markdown();
        if std::env::var_os("UPDATE_CONFIG_DOCS").is_some() {
            std::fs::write(&path, &want).unwrap();
        }
        let have = std::fs::read_to_string(&path).unwrap_or_default();
        assert_eq!(have, want, "docs/config.md is stale; rerun with UPDATE_CONFIG_DOCS=1");
    }
}
