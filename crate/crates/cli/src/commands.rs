//! Subcommands. Each one loads the run configuration, creates a run
//! directory, and writes its checkpoints, logs and reports there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dragflow_core::config::RunConfig;
use dragflow_core::distill::distill;
use dragflow_core::eval::{ablate, ablation_ordering_holds, ablation_table, bench_latency, eval_inputs, evaluate, EvalReport, Generator};
use dragflow_core::grpo::train_grpo;
use dragflow_core::logging::{JsonlLog, LogSink};
use dragflow_core::rewards::terminal_reward;
use dragflow_core::scene::{Point, SceneClip, TrajectoryFamily};
use dragflow_core::service::SessionManager;
use dragflow_core::teacher::train_teacher;
use dragflow_core::{Checkpoint, ControlSignal, Dataset, FrameCond, MaskMode, VelocityNet};
use serde_json::{json, Value};

use crate::wire::FramePayload;

#[derive(Parser, Debug)]
#[command(name = "dragflow", version, about = "Trajectory-controlled few-step video generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Exact run directory; by default a fresh `<runs_dir>/<timestamp>-s<seed>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArg {
    /// Dataset file from `gen-data`; built from the configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the synthetic clip corpus.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Output file; `<run>/data.bin` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the bidirectional teacher with flow matching.
    TrainTeacher {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Distill a teacher into the few-step causal student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// dmd, regression or teacher-forcing; overrides `distill.objective`.
        #[arg(long)]
        objective: Option<String>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a student with group-relative policy optimization.
    Grpo {
        #[arg(long)]
        student: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Restrict to one trajectory family.
        #[arg(long)]
        family: Option<String>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// First-frame and per-frame latency of a student and/or a teacher.
    BenchLatency {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the four ablation variants on the same clips.
    Ablate {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        without_rl: PathBuf,
        #[arg(long)]
        without_self_rollout: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Serve live generation sessions over HTTP.
    Serve {
        /// `ID=PATH` or `PATH` (id = file stem); repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Overrides `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate one video along a trajectory.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Control points `x,y;x,y;...`; a sampled trajectory when absent.
        #[arg(long)]
        points: Option<String>,
        /// Family of the sampled trajectory.
        #[arg(long, default_value = "line")]
        family: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainTeacher { common, .. }
            | Command::Distill { common, .. }
            | Command::Grpo { common, .. }
            | Command::Eval { common, .. }
            | Command::BenchLatency { common, .. }
            | Command::Ablate { common, .. }
            | Command::Serve { common, .. }
            | Command::Generate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Grpo { .. } => "grpo",
            Command::Eval { .. } => "eval",
            Command::BenchLatency { .. } => "bench-latency",
            Command::Ablate { .. } => "ablate",
            Command::Serve { .. } => "serve",
            Command::Generate { .. } => "generate",
        }
    }
}

/// Loads the configuration: defaults, the file, `--seed`, then `--set`.
pub fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides: Vec<String> = extra.to_vec();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(common.set.iter().cloned());
    Ok(RunConfig::from_text(&text, &overrides)?)
}

/// A run's output directory.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(common: &Common, cfg: &RunConfig, command: &str) -> Result<Self> {
        let path = match &common.run_dir {
            Some(p) => p.clone(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                let base = Path::new(&cfg.runs_dir).join(format!("{stamp}-s{}", cfg.seed));
                let mut path = base.clone();
                let mut k = 2;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                path
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join("config.txt"), cfg.to_text())?;
        std::fs::write(path.join("command.txt"), format!("{command}\n"))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log(&self) -> Result<JsonlLog> {
        Ok(JsonlLog::create(&self.file("log.jsonl"))?)
    }

    /// Appends `record` to `report.jsonl` and `text` to `summary.txt`, and
    /// prints the text.
    pub fn report(&self, record: Value, text: &str) -> Result<()> {
        JsonlLog::create(&self.file("report.jsonl"))?.log(record);
        let mut summary = std::fs::read_to_string(self.file("summary.txt")).unwrap_or_default();
        summary += text;
        if !text.ends_with('\n') {
            summary.push('\n');
        }
        std::fs::write(self.file("summary.txt"), summary)?;
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
        Ok(())
    }
}

pub fn load_net(path: &Path) -> Result<VelocityNet> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(VelocityNet::from_checkpoint(&ck)?)
}

fn save_net(net: &VelocityNet, kind: &str, meta: BTreeMap<String, Value>, path: &Path) -> Result<()> {
    net.to_checkpoint(kind, meta).save(path).with_context(|| format!("writing checkpoint {}", path.display()))
}

fn load_data(arg: &DataArg, cfg: &RunConfig) -> Result<Dataset> {
    let data = match &arg.data {
        Some(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?,
        None => Dataset::build(cfg.data.count, cfg.data.frames, cfg.net.side, cfg.seed)?,
    };
    if data.side != cfg.net.side {
        bail!("dataset frames are {0}x{0} but net.side = {1}", data.side, cfg.net.side);
    }
    Ok(data)
}

fn generator<'a>(net: &'a VelocityNet, cfg: &'a RunConfig) -> Generator<'a> {
    match net.mask() {
        MaskMode::Bidirectional => Generator::Teacher { net, steps: cfg.teacher_steps },
        MaskMode::Causal => Generator::Student { net, schedule: &cfg.schedule },
    }
}

pub fn eval_text(name: &str, r: &EvalReport) -> String {
    format!(
        "{name} ({}; {} clips, {} frames)\n  mean reward        {:.4}\n  mean motion reward {:.4}\n  mean quality       {:.4}\n  trajectory rmse    {:.3} cells\n  smoothness         {:.4} cells^2\n  untrackable        {:.4}\n  frame wall-clock   {:.3} ms\n",
        r.generator,
        r.clips,
        r.frames,
        r.mean_reward,
        r.mean_motion_reward,
        r.mean_quality_reward,
        r.rmse_cells,
        r.smoothness,
        r.untrackable_fraction,
        r.frame_ms
    )
}

fn parse_points(s: &str) -> Result<Vec<Point>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, y) = p.split_once(',').with_context(|| format!("point {p:?} is not `x,y`"))?;
            Ok(Point::new(x.trim().parse()?, y.trim().parse()?))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let command = cli.command;
    let common = command.common().clone();
    let extra: Vec<String> = match &command {
        Command::GenData { count, frames, .. } => {
            count.map(|c| format!("data.count={c}")).into_iter().chain(frames.map(|f| format!("data.frames={f}"))).collect()
        }
        Command::Distill { objective: Some(o), .. } => vec![format!("distill.objective={o}")],
        Command::Serve { addr: Some(a), .. } => vec![format!("serve.addr={a}")],
        _ => Vec::new(),
    };
    let cfg = load_config(&common, &extra)?;
    let run = RunDir::create(&common, &cfg, command.name())?;
    eprintln!("run directory {}", run.path.display());
    match command {
        Command::GenData { out, .. } => {
            let data = Dataset::build(cfg.data.count, cfg.data.frames, cfg.net.side, cfg.seed)?;
            let out = out.unwrap_or_else(|| run.file("data.bin"));
            let index = data.save(&out)?;
            run.report(
                json!({"command": "gen-data", "path": out, "index": index, "clips": data.clips.len(), "frames_per_clip": cfg.data.frames + 1}),
                &format!("wrote {} clips of {} frames to {}\n", data.clips.len(), cfg.data.frames + 1, out.display()),
            )?;
        }
        Command::TrainTeacher { data, .. } => {
            let data = load_data(&data, &cfg)?;
            let mut net = VelocityNet::new(cfg.net.clone(), MaskMode::Bidirectional, cfg.seed)?;
            let report = train_teacher(&mut net, &data, &cfg.teacher_config(), &mut run.log()?)?;
            let path = run.file("teacher.ckpt");
            save_net(&net, "teacher", BTreeMap::from([("seed".into(), json!(cfg.seed))]), &path)?;
            let eval = evaluate(generator(&net, &cfg), &data.val(), &cfg.reward, cfg.seed)?;
            run.report(
                json!({"command": "train-teacher", "checkpoint": path, "train": report, "eval": eval}),
                &format!("teacher checkpoint {}\n{}", path.display(), eval_text("teacher on val", &eval)),
            )?;
        }
        Command::Distill { teacher, data, .. } => {
            let data = load_data(&data, &cfg)?;
            let teacher = load_net(&teacher)?;
            let dcfg = cfg.distill_config();
            let (student, report) = distill(&teacher, &data, &dcfg, &mut run.log()?)?;
            let path = run.file(&format!("student-{}.ckpt", dcfg.objective));
            let meta = BTreeMap::from([("seed".into(), json!(cfg.seed)), ("objective".into(), json!(dcfg.objective.to_string()))]);
            save_net(&student, "student", meta, &path)?;
            let eval = evaluate(generator(&student, &cfg), &data.val(), &cfg.reward, cfg.seed)?;
            run.report(
                json!({"command": "distill", "checkpoint": path, "objective": dcfg.objective.to_string(), "train": report, "eval": eval}),
                &format!("student checkpoint {} ({})\n{}", path.display(), dcfg.objective, eval_text("student on val", &eval)),
            )?;
        }
        Command::Grpo { student, data, .. } => {
            let data = load_data(&data, &cfg)?;
            let student = load_net(&student)?;
            let (policy, report) = train_grpo(student, &data, &cfg.grpo_config(), &mut run.log()?)?;
            let path = run.file("policy.ckpt");
            save_net(&policy, "student", BTreeMap::from([("seed".into(), json!(cfg.seed)), ("objective".into(), json!("grpo"))]), &path)?;
            let mut text = format!("policy checkpoint {}\nheld-out mean motion reward by iteration\n", path.display());
            for (it, e) in &report.held_out {
                text += &format!("  {it:>5}  {:.4}  rmse {:.3}\n", e.mean_motion_reward, e.rmse_cells);
            }
            if let (Some(first), Some(last)) = (report.held_out.first(), report.held_out.last()) {
                let rel = (last.1.mean_motion_reward - first.1.mean_motion_reward) / first.1.mean_motion_reward.abs().max(1e-12);
                text += &format!("relative change {:+.2}%\n", 100.0 * rel);
            }
            run.report(json!({"command": "grpo", "checkpoint": path, "report": report}), &text)?;
        }
        Command::Eval { checkpoint, split, family, data, .. } => {
            let data = load_data(&data, &cfg)?;
            let net = load_net(&checkpoint)?;
            let clips = match split.as_str() {
                "val" => data.val(),
                "train" => data.train(),
                other => bail!("unknown split `{other}` (train or val)"),
            };
            let family: Option<TrajectoryFamily> = family.map(|f| f.parse()).transpose()?;
            let clips: Vec<&SceneClip> = clips.into_iter().filter(|c| family.is_none_or(|f| c.family == f)).collect();
            if clips.is_empty() {
                bail!("no clips selected");
            }
            let eval = evaluate(generator(&net, &cfg), &clips, &cfg.reward, cfg.seed)?;
            run.report(
                json!({"command": "eval", "checkpoint": checkpoint, "split": split, "eval": eval}),
                &eval_text(&format!("{} on {split}", checkpoint.display()), &eval),
            )?;
        }
        Command::BenchLatency { student, teacher, data, .. } => {
            if student.is_none() && teacher.is_none() {
                bail!("give --student, --teacher or both");
            }
            let data = load_data(&data, &cfg)?;
            let clip = data.val().first().copied().context("dataset has no validation clips")?;
            let (conds, seed) = eval_inputs(clip, cfg.seed, 0)?;
            let mut reports = Vec::new();
            for (path, mask) in [(student, MaskMode::Causal), (teacher, MaskMode::Bidirectional)] {
                if let Some(path) = path {
                    let net = load_net(&path)?.with_mask(mask);
                    reports.push(bench_latency(generator(&net, &cfg), &conds, cfg.latency_runs, cfg.latency_warmup, seed)?);
                }
            }
            let mut text = String::new();
            for r in &reports {
                text += &format!(
                    "{:<22} first frame {:>10.3} ms ({} velocity evaluations), per frame {:>8.3} ms\n",
                    r.mode, r.first_frame_ms, r.first_frame_evals, r.per_frame_ms
                );
            }
            let ratio = (reports.len() == 2).then(|| reports[1].first_frame_ms / reports[0].first_frame_ms);
            if let Some(ratio) = ratio {
                text += &format!("teacher / student first-frame latency {ratio:.1}x\n");
            }
            run.report(json!({"command": "bench-latency", "reports": reports, "first_frame_ratio": ratio}), &text)?;
        }
        Command::Ablate { full, without_rl, without_self_rollout, teacher, data, .. } => {
            let data = load_data(&data, &cfg)?;
            let nets = [&full, &without_rl, &without_self_rollout].map(|p| load_net(p).map(|n| n.with_mask(MaskMode::Causal)));
            let [full, no_rl, no_sr] = nets;
            let teacher = load_net(&teacher)?;
            let rows = ablate(&full?, &no_rl?, &no_sr?, &teacher, cfg.teacher_steps, &cfg.schedule, &data.val(), &cfg.reward, cfg.seed)?;
            let holds = ablation_ordering_holds(&rows);
            let text = format!("{}ordering full >= w/o RL > w/o Self-Rollout: {}\n", ablation_table(&rows), if holds { "holds" } else { "violated" });
            run.report(json!({"command": "ablate", "rows": rows, "ordering_holds": holds}), &text)?;
        }
        Command::Serve { checkpoints, .. } => {
            let mut manager = SessionManager::new(cfg.schedule.clone(), cfg.reward.clone());
            for spec in &checkpoints {
                let (id, path) = match spec.split_once('=') {
                    Some((id, path)) => (id.to_string(), PathBuf::from(path)),
                    None => {
                        let p = PathBuf::from(spec);
                        let id = p.file_stem().and_then(|s| s.to_str()).context("checkpoint path has no file name")?.to_string();
                        (id, p)
                    }
                };
                manager.add_model(id, load_net(&path)?);
            }
            tokio::runtime::Runtime::new()?.block_on(crate::http::serve(Arc::new(manager), &cfg.serve_addr))?;
        }
        Command::Generate { checkpoint, points, family, .. } => {
            let net = load_net(&checkpoint)?;
            let side = net.config().side;
            let points = match points {
                Some(p) => parse_points(&p)?,
                None => SceneClip::generate(family.parse()?, cfg.data.frames, side, cfg.seed)?.positions,
            };
            if points.is_empty() {
                bail!("no control points");
            }
            let controls = ControlSignal::for_trajectory(&points, side)?;
            let conds = FrameCond::for_controls(&controls, cfg.seed, &[])?;
            let frames = generator(&net, &cfg).generate(&conds, cfg.seed)?;
            let mut text = format!("{} frames from {}\n  frame  control          tracked          motion\n", frames.len(), checkpoint.display());
            let mut records = Vec::new();
            for (m, (f, p)) in frames.iter().zip(&points).enumerate() {
                let r = terminal_reward(f, *p, &cfg.reward);
                let tracked = r.tracked.map_or("untrackable".to_string(), |t| format!("({:.3}, {:.3})", t.x, t.y));
                text += &format!("  {m:>5}  ({:.3}, {:.3})   {tracked:<16} {:.4}\n", p.x, p.y, r.motion);
                records.push(json!({"frame": m, "control": p, "tracked": r.tracked, "motion_reward": r.motion, "reward": r.total, "pixels": FramePayload::encode(f)}));
            }
            let path = run.file("video.json");
            std::fs::write(&path, serde_json::to_string(&records)?)?;
            run.report(json!({"command": "generate", "checkpoint": checkpoint, "video": path}), &text)?;
        }
    }
    Ok(())
}
