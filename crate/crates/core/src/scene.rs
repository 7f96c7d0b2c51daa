//! Synthetic controllable scenes: one Gaussian blob moving along a smooth
//! trajectory, rendered on a small square grid, with the per-frame control
//! point encoded as a "bright spot" heatmap.
//!
//! Coordinates live in the unit square; `x` runs along columns and `y` along
//! rows, and cell `(row, col)` has its center at `((col + ½)/S, (row + ½)/S)`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive, stream};

pub const DEFAULT_SIDE: usize = 16;
/// Frames per clip minus one (clips hold `M + 1` frames).
pub const DEFAULT_M: usize = 15;
pub const BLOB_STD_CELLS: f64 = 1.5;
pub const CONTROL_STD_CELLS: f64 = 1.0;
pub const DOMAIN_MIN: f64 = 0.1;
pub const DOMAIN_MAX: f64 = 0.9;
pub const MAX_STEP: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    fn lerp(a: Point, b: Point, s: f64) -> Point {
        Point::new(a.x + (b.x - a.x) * s, a.y + (b.y - a.y) * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryFamily {
    Line,
    Arc,
    Sine,
    Spline,
    Stationary,
}

/// Families a dataset cycles through, in order.
pub const DATASET_FAMILIES: [TrajectoryFamily; 4] =
    [TrajectoryFamily::Line, TrajectoryFamily::Arc, TrajectoryFamily::Sine, TrajectoryFamily::Spline];

impl TrajectoryFamily {
    pub fn tag(self) -> u8 {
        match self {
            Self::Line => 0,
            Self::Arc => 1,
            Self::Sine => 2,
            Self::Spline => 3,
            Self::Stationary => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Self::Line,
            1 => Self::Arc,
            2 => Self::Sine,
            3 => Self::Spline,
            4 => Self::Stationary,
            _ => return Err(Error::Format(format!("unknown trajectory family tag {tag}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Line => "line",
            Self::Arc => "arc",
            Self::Sine => "sine",
            Self::Spline => "spline",
            Self::Stationary => "stationary",
        }
    }
}

impl fmt::Display for TrajectoryFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Line, Self::Arc, Self::Sine, Self::Spline, Self::Stationary]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown trajectory family {s:?}")))
    }
}

fn uniform_point(rng: &mut impl Rng) -> Point {
    Point::new(rng.random_range(DOMAIN_MIN..=DOMAIN_MAX), rng.random_range(DOMAIN_MIN..=DOMAIN_MAX))
}

fn clamp_to_domain(p: Point) -> Point {
    Point::new(p.x.clamp(DOMAIN_MIN, DOMAIN_MAX), p.y.clamp(DOMAIN_MIN, DOMAIN_MAX))
}

/// Equally spaced points from `from` to `to` (`frames + 1` of them).
pub fn line_trajectory(from: Point, to: Point, frames: usize) -> Vec<Point> {
    (0..=frames).map(|m| Point::lerp(from, to, m as f64 / frames.max(1) as f64)).collect()
}

fn catmull_rom(p0: Point, p1: Point, p2: Point, p3: Point, s: f64) -> Point {
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (-a + c) * s + (2.0 * a - 5.0 * b + 4.0 * c - d) * s * s + (-a + 3.0 * b - 3.0 * c + d) * s * s * s)
    };
    Point::new(f(p0.x, p1.x, p2.x, p3.x), f(p0.y, p1.y, p2.y, p3.y))
}

/// Shrinks a path toward its first point until no step exceeds [`MAX_STEP`].
/// The domain is convex and the anchor lies inside it, so the path stays inside.
fn limit_steps(path: &mut [Point]) {
    let max = path.windows(2).map(|w| w[0].dist(&w[1])).fold(0.0, f64::max);
    if max > MAX_STEP {
        let k = MAX_STEP / max * (1.0 - 1e-9);
        let anchor = path[0];
        for p in path.iter_mut() {
            *p = Point::lerp(anchor, *p, k);
        }
    }
}

/// `frames + 1` positions inside `[0.1, 0.9]²` with steps of at most 0.15.
pub fn sample_trajectory(family: TrajectoryFamily, frames: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
    if frames < 1 {
        return Err(Error::invalid("trajectory needs at least one step (M >= 1)"));
    }
    let steps = frames as f64;
    let mut path: Vec<Point> = match family {
        TrajectoryFamily::Stationary => vec![uniform_point(rng); frames + 1],
        TrajectoryFamily::Line => {
            let (a, b) = (uniform_point(rng), uniform_point(rng));
            line_trajectory(a, b, frames)
        }
        TrajectoryFamily::Arc => {
            let c = Point::new(rng.random_range(0.3..=0.7), rng.random_range(0.3..=0.7));
            let room = (c.x - DOMAIN_MIN).min(DOMAIN_MAX - c.x).min(c.y - DOMAIN_MIN).min(DOMAIN_MAX - c.y);
            let r = rng.random_range(0.1..=room.max(0.1));
            let start = rng.random_range(0.0..2.0 * PI);
            let sweep = rng.random_range(PI / 3.0..=PI) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (0..=frames)
                .map(|m| {
                    let a = start + sweep * m as f64 / steps;
                    clamp_to_domain(Point::new(c.x + r * a.cos(), c.y + r * a.sin()))
                })
                .collect()
        }
        TrajectoryFamily::Sine => {
            let amp = rng.random_range(0.05..=0.2);
            let y0 = rng.random_range(DOMAIN_MIN + amp..=DOMAIN_MAX - amp);
            let (mut x0, mut x1) = (rng.random_range(0.1..=0.3), rng.random_range(0.7..=0.9));
            if rng.random_bool(0.5) {
                std::mem::swap(&mut x0, &mut x1);
            }
            let cycles = rng.random_range(0.5..=1.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..=frames)
                .map(|m| {
                    let s = m as f64 / steps;
                    Point::new(x0 + (x1 - x0) * s, y0 + amp * (2.0 * PI * cycles * s + phase).sin())
                })
                .collect()
        }
        TrajectoryFamily::Spline => {
            let w: Vec<Point> = (0..4).map(|_| uniform_point(rng)).collect();
            // Pad the ends by reflection so the curve passes through all waypoints.
            let first = Point::new(2.0 * w[0].x - w[1].x, 2.0 * w[0].y - w[1].y);
            let last = Point::new(2.0 * w[3].x - w[2].x, 2.0 * w[3].y - w[2].y);
            let ctrl = [first, w[0], w[1], w[2], w[3], last];
            let segments = 3.0;
            (0..=frames)
                .map(|m| {
                    let u = m as f64 / steps * segments;
                    let seg = (u.floor() as usize).min(2);
                    let s = u - seg as f64;
                    clamp_to_domain(catmull_rom(ctrl[seg], ctrl[seg + 1], ctrl[seg + 2], ctrl[seg + 3], s))
                })
                .collect()
        }
    };
    limit_steps(&mut path);
    Ok(path)
}

fn gaussian_spot(pos: Point, side: usize, std_cells: f64) -> Tensor {
    let s = side as f64;
    let inv = s * s / (2.0 * std_cells * std_cells);
    let mut data = Vec::with_capacity(side * side);
    for row in 0..side {
        let cy = (row as f64 + 0.5) / s;
        for col in 0..side {
            let cx = (col as f64 + 0.5) / s;
            let d2 = (cx - pos.x).powi(2) + (cy - pos.y).powi(2);
            data.push((-d2 * inv).exp());
        }
    }
    Tensor::new(vec![side, side], data).expect("finite")
}

/// Ground-truth frame: isotropic blob, std 1.5 cells, peak 1.
pub fn render_frame(pos: Point, side: usize) -> Tensor {
    gaussian_spot(pos, side, BLOB_STD_CELLS)
}

/// Control heatmap: the same renderer with std 1.0 cells.
pub fn encode_control(pos: Point, side: usize) -> Tensor {
    gaussian_spot(pos, side, CONTROL_STD_CELLS)
}

/// Cell containing a unit-square position, as `(row, col)`.
pub fn cell_of(pos: Point, side: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * side as f64).floor() as usize).min(side - 1);
    (idx(pos.y), idx(pos.x))
}

pub fn cell_center(row: usize, col: usize, side: usize) -> Point {
    Point::new((col as f64 + 0.5) / side as f64, (row as f64 + 0.5) / side as f64)
}

/// `(row, col)` of the largest value; ties resolve to the first in row-major order.
pub fn argmax_cell(frame: &Tensor) -> (usize, usize) {
    let side = frame.shape()[1];
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for (i, v) in frame.data().iter().enumerate() {
        if *v > best {
            best = *v;
            at = i;
        }
    }
    (at / side, at % side)
}

/// Per-frame conditioning: target point, its heatmap, and the reference frame
/// at `m = 0` only.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    pub frame: usize,
    pub target: Point,
    pub heatmap: Tensor,
    pub reference: Option<Tensor>,
}

impl ControlSignal {
    pub fn new(frame: usize, target: Point, side: usize, reference: Option<Tensor>) -> Result<Self> {
        if !target.in_unit_square() || !target.x.is_finite() || !target.y.is_finite() {
            return Err(Error::invalid(format!("control point {target:?} outside the unit square")));
        }
        if (frame == 0) != reference.is_some() {
            return Err(Error::invalid("reference frame must be present exactly at frame 0"));
        }
        Ok(Self { frame, target, heatmap: encode_control(target, side), reference })
    }

    /// Controls for a whole trajectory; the reference is the frame-0 rendering.
    pub fn for_trajectory(points: &[Point], side: usize) -> Result<Vec<ControlSignal>> {
        let reference = render_frame(points[0], side);
        Self::for_trajectory_with_reference(points, side, reference)
    }

    pub fn for_trajectory_with_reference(points: &[Point], side: usize, reference: Tensor) -> Result<Vec<ControlSignal>> {
        points
            .iter()
            .enumerate()
            .map(|(m, p)| ControlSignal::new(m, *p, side, (m == 0).then(|| reference.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneClip {
    pub family: TrajectoryFamily,
    pub seed: u64,
    pub positions: Vec<Point>,
    pub frames: Vec<Tensor>,
}

impl SceneClip {
    pub fn generate(family: TrajectoryFamily, frames: usize, side: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[]);
        let positions = sample_trajectory(family, frames, &mut rng)?;
        Ok(Self::from_positions(family, seed, positions, side))
    }

    pub fn from_positions(family: TrajectoryFamily, seed: u64, positions: Vec<Point>, side: usize) -> Self {
        let frames = positions.iter().map(|p| render_frame(*p, side)).collect();
        Self { family, seed, positions, frames }
    }

    pub fn side(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn controls(&self) -> Vec<ControlSignal> {
        ControlSignal::for_trajectory(&self.positions, self.side()).expect("clip positions are valid controls")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// A persisted collection of clips with a fixed train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub frames: usize,
    pub clips: Vec<SceneClip>,
    pub splits: Vec<Split>,
}

pub const DATASET_MAGIC: &[u8; 8] = b"DRAGDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    index: usize,
    family: TrajectoryFamily,
    seed: u64,
    split: Split,
    start: Point,
    end: Point,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    side: usize,
    frames_per_clip: usize,
    count: usize,
    clips: Vec<IndexEntry>,
}

/// Number of validation clips for a dataset of `count`.
pub fn val_count(count: usize) -> usize {
    if count >= 2 {
        (count / 10).max(1)
    } else {
        0
    }
}

impl Dataset {
    /// `count` clips cycling through [`DATASET_FAMILIES`]; one tenth held out.
    pub fn build(count: usize, frames: usize, side: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("dataset needs at least one clip"));
        }
        let clips = (0..count)
            .map(|i| {
                let family = DATASET_FAMILIES[i % DATASET_FAMILIES.len()];
                SceneClip::generate(family, frames, side, derive(seed, &[i as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut stream(seed, &[u64::MAX]));
        let mut splits = vec![Split::Train; count];
        for &i in order.iter().take(val_count(count)) {
            splits[i] = Split::Val;
        }
        Ok(Self { side, frames, clips, splits })
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &SceneClip> {
        self.clips.iter().zip(&self.splits).filter(move |(_, s)| **s == which).map(|(c, _)| c)
    }

    pub fn train(&self) -> Vec<&SceneClip> {
        self.split(Split::Train).collect()
    }

    pub fn val(&self) -> Vec<&SceneClip> {
        self.split(Split::Val).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [DATASET_VERSION, self.side as u32, self.frames as u32, self.clips.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (clip, split) in self.clips.iter().zip(&self.splits) {
            w.write_all(&[clip.family.tag(), matches!(split, Split::Val) as u8])?;
            w.write_all(&clip.seed.to_le_bytes())?;
            for p in &clip.positions {
                w.write_all(&p.x.to_le_bytes())?;
                w.write_all(&p.y.to_le_bytes())?;
            }
            for f in &clip.frames {
                for v in f.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        if cur.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = cur.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let side = cur.u32()? as usize;
        let frames = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        if side == 0 || frames == 0 {
            return Err(Error::Format("empty grid or clip length".into()));
        }
        let mut clips = Vec::with_capacity(count);
        let mut splits = Vec::with_capacity(count);
        for _ in 0..count {
            let head = cur.take(2)?;
            let family = TrajectoryFamily::from_tag(head[0])?;
            let split = match head[1] {
                0 => Split::Train,
                1 => Split::Val,
                t => return Err(Error::Format(format!("unknown split tag {t}"))),
            };
            let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            let positions = (0..=frames)
                .map(|_| Ok(Point::new(cur.f64()?, cur.f64()?)))
                .collect::<Result<Vec<_>>>()?;
            let stored = (0..=frames)
                .map(|_| {
                    let data = (0..side * side).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                    Tensor::new(vec![side, side], data)
                })
                .collect::<Result<Vec<_>>>()?;
            clips.push(SceneClip { family, seed, positions, frames: stored });
            splits.push(split);
        }
        if cur.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last clip".into()));
        }
        Ok(Self { side, frames, clips, splits })
    }

    /// Writes the binary container to `path` and a JSON index next to it.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let index_path = index_path(path);
        let index = IndexFile {
            version: DATASET_VERSION,
            side: self.side,
            frames_per_clip: self.frames + 1,
            count: self.clips.len(),
            clips: self
                .clips
                .iter()
                .zip(&self.splits)
                .enumerate()
                .map(|(index, (c, s))| IndexEntry {
                    index,
                    family: c.family,
                    seed: c.seed,
                    split: *s,
                    start: c.positions[0],
                    end: *c.positions.last().unwrap(),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&index)?;
        std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
        Ok(index_path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self.bytes.get(self.at..self.at + n).ok_or_else(|| Error::Format("truncated dataset".into()))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".index.json");
    path.with_file_name(name)
}
