//! Velocity-field transformers over one token per frame.
//!
//! The same parameter layout serves the bidirectional teacher, the fake-score
//! net and the causal student; only the attention mask differs. A token is the
//! affine embedding of the noisy frame plus a conditioning row (control
//! heatmap, reference-or-noise slot, sinusoidal time and frame-index features).
//! Each block is a residual single-head attention followed by a residual GELU
//! MLP; the output head adds a learned per-token multiple of the input frame.
//!
//! Every forward pass runs on a [`Tape`], including pure inference, so rollout
//! and gradient replay go through literally the same arithmetic.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream};
use crate::scene::ControlSignal;

pub const TIME_FEATURES: usize = 16;
pub const FRAME_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Bidirectional,
    Causal,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Bidirectional => "bidirectional",
            MaskMode::Causal => "causal",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(MaskMode::Bidirectional),
            "causal" => Ok(MaskMode::Causal),
            _ => Err(Error::invalid(format!("unknown mask mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub side: usize,
    pub width: usize,
    pub layers: usize,
    pub hidden: usize,
    /// KV-cache capacity in frames.
    pub capacity: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { side: 16, width: 32, layers: 2, hidden: 64, capacity: 7 }
    }
}

impl NetConfig {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn cond_width(&self) -> usize {
        2 * self.pixels() + TIME_FEATURES + FRAME_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.width == 0 || self.layers == 0 || self.hidden == 0 || self.capacity == 0 {
            return Err(Error::invalid(format!("net dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (p, d, h) = (self.pixels(), self.width, self.hidden);
        let mut v = vec![
            ("embed.x".to_string(), vec![d, p]),
            ("embed.c".to_string(), vec![d, self.cond_width()]),
            ("embed.b".to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                v.push((format!("block{l}.{w}"), vec![d, d]));
            }
            v.push((format!("block{l}.mlp1.w"), vec![h, d]));
            v.push((format!("block{l}.mlp1.b"), vec![h]));
            v.push((format!("block{l}.mlp2.w"), vec![d, h]));
            v.push((format!("block{l}.mlp2.b"), vec![d]));
        }
        v.push(("out.w".to_string(), vec![p, d]));
        v.push(("out.b".to_string(), vec![p]));
        v.push(("skip.w".to_string(), vec![1, d]));
        v.push(("skip.b".to_string(), vec![1]));
        v
    }
}

/// Sinusoidal features of the flow time `t ∈ [0, 1]`.
pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = PI * 2f64.powi(k as i32 - 1);
        out[2 * k] = (w * t).sin();
        out[2 * k + 1] = (w * t).cos();
    }
    out
}

/// Sinusoidal features of the frame index (periods 16 and 64 frames).
pub fn frame_embedding(m: usize) -> [f64; FRAME_FEATURES] {
    let m = m as f64;
    let (a, b) = (2.0 * PI * m / 16.0, 2.0 * PI * m / 64.0);
    [a.sin(), a.cos(), b.sin(), b.cos()]
}

/// Conditioning for one frame token: heatmap plus the reference slot, which
/// holds the reference frame at `m = 0` and a recorded noise draw otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCond {
    pub frame: usize,
    pub heatmap: Tensor,
    pub slot: Tensor,
}

impl FrameCond {
    pub fn new(control: &ControlSignal, slot_noise: Option<&Tensor>) -> Result<Self> {
        let slot = match (&control.reference, slot_noise) {
            (Some(r), _) => r.clone(),
            (None, Some(n)) => n.clone(),
            (None, None) => return Err(Error::invalid(format!("frame {} needs a slot noise draw", control.frame))),
        };
        if slot.shape() != control.heatmap.shape() {
            return Err(Error::Shape { op: "frame_cond", shapes: vec![slot.shape().to_vec(), control.heatmap.shape().to_vec()] });
        }
        Ok(Self { frame: control.frame, heatmap: control.heatmap.clone(), slot })
    }

    /// Conditions for a whole video, drawing slot noise for frames after the
    /// first from `(seed, path)`.
    pub fn for_controls(controls: &[ControlSignal], seed: u64, path: &[u64]) -> Result<Vec<FrameCond>> {
        let mut rng = stream(seed, path);
        controls
            .iter()
            .map(|c| {
                let noise = normal_tensor(&mut rng, c.heatmap.shape());
                FrameCond::new(c, Some(&noise))
            })
            .collect()
    }

    fn row(&self, t: f64) -> Vec<f64> {
        let mut r = Vec::with_capacity(2 * self.heatmap.len() + TIME_FEATURES + FRAME_FEATURES);
        r.extend_from_slice(self.heatmap.data());
        r.extend_from_slice(self.slot.data());
        r.extend_from_slice(&time_embedding(t));
        r.extend_from_slice(&frame_embedding(self.frame));
        r
    }
}

/// Per-layer key/value rows of one token.
pub type TokenKv = Vec<(Var, Var)>;

struct BlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    m1w: Var,
    m1b: Var,
    m2w: Var,
    m2b: Var,
}

/// Parameters placed on a tape, either as differentiable leaves or constants.
pub struct Bound {
    ex: Var,
    ec: Var,
    eb: Var,
    blocks: Vec<BlockVars>,
    ow: Var,
    ob: Var,
    sw: Var,
    sb: Var,
}

#[derive(Clone, Debug)]
struct CacheEntry {
    frame: usize,
    kv: Vec<(Arc<Tensor>, Arc<Tensor>)>,
}

/// Keys and values of committed clean frames, oldest first, evicting the
/// oldest beyond capacity.
#[derive(Clone, Debug)]
pub struct KvCache {
    capacity: usize,
    entries: VecDeque<CacheEntry>,
}

impl KvCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frame indices of the occupants, oldest first.
    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    /// Rejects a cache that is not strictly in the past of frame `m`.
    pub fn check_before(&self, m: usize) -> Result<()> {
        match self.entries.back() {
            Some(e) if e.frame >= m => Err(Error::Cache(format!("cache holds frame {} but query is frame {m}", e.frame))),
            _ => Ok(()),
        }
    }

    fn push(&mut self, entry: CacheEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.frame != last.frame + 1 {
                return Err(Error::Cache(format!("commit of frame {} after frame {}", entry.frame, last.frame)));
            }
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Occupants as tape constants, oldest first.
    pub fn on_tape(&self, tape: &mut Tape) -> Vec<TokenKv> {
        self.entries
            .iter()
            .map(|e| e.kv.iter().map(|(k, v)| (tape.constant_shared(k.clone()), tape.constant_shared(v.clone()))).collect())
            .collect()
    }

    /// Keys of layer `l` for every occupant; test and inspection hook.
    pub fn keys(&self, l: usize) -> Vec<&Tensor> {
        self.entries.iter().map(|e| e.kv[l].0.as_ref()).collect()
    }

    pub fn bit_eq(&self, other: &KvCache) -> bool {
        self.capacity == other.capacity
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.frame == b.frame && a.kv.iter().zip(&b.kv).all(|(x, y)| x.0.bit_eq(&y.0) && x.1.bit_eq(&y.1))
            })
    }
}

/// A cache whose keys and values live on a tape, so gradients reach the
/// parameters that produced them.
pub struct TapedCache {
    capacity: usize,
    entries: VecDeque<(usize, TokenKv)>,
}

impl TapedCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, frame: usize, kv: TokenKv) {
        self.entries.push_back((frame, kv));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn context(&self) -> Vec<TokenKv> {
        self.entries.iter().map(|(_, kv)| kv.clone()).collect()
    }
}

fn to_row(x: &Tensor) -> Result<Tensor> {
    x.reshape(&[1, x.len()])
}

#[derive(Clone, Debug)]
pub struct VelocityNet {
    cfg: NetConfig,
    mask: MaskMode,
    params: ParamStore,
}

impl VelocityNet {
    pub fn new(cfg: NetConfig, mask: MaskMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (i, (name, shape)) in cfg.shapes().into_iter().enumerate() {
            let value = if name == "skip.b" {
                Tensor::filled(&shape, -1.0)
            } else if name == "skip.w" || shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let std = 1.0 / (shape[1] as f64).sqrt();
                normal_tensor(&mut stream(seed, &[i as u64]), &shape).map(|v| v * std)
            };
            params.insert(name, value)?;
        }
        Ok(Self { cfg, mask, params })
    }

    pub fn from_params(cfg: NetConfig, mask: MaskMode, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.shapes();
        if shapes.len() != params.len() {
            return Err(Error::KeyMismatch(format!("expected {} parameters, found {}", shapes.len(), params.len())));
        }
        for (name, shape) in shapes {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Shape { op: "from_params", shapes: vec![shape, t.shape().to_vec()] }),
                None => return Err(Error::KeyMismatch(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, mask, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn mask(&self) -> MaskMode {
        self.mask
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same weights (fresh optimizer state) under another attention mask.
    pub fn with_mask(&self, mask: MaskMode) -> Self {
        Self { cfg: self.cfg.clone(), mask, params: self.params.snapshot() }
    }

    /// Parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |tape, name, p| tape.param(name, p.shared(name).unwrap()))
    }

    /// Parameters as constants; for frozen nets and pure inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |tape, name, p| tape.constant_shared(p.shared(name).unwrap()))
    }

    fn bind_with(&self, tape: &mut Tape, f: impl Fn(&mut Tape, &str, &ParamStore) -> Var) -> Bound {
        let p = &self.params;
        let mut g = |n: &str| f(tape, n, p);
        let (ex, ec, eb) = (g("embed.x"), g("embed.c"), g("embed.b"));
        let blocks = (0..self.cfg.layers)
            .map(|l| BlockVars {
                wq: g(&format!("block{l}.wq")),
                wk: g(&format!("block{l}.wk")),
                wv: g(&format!("block{l}.wv")),
                wo: g(&format!("block{l}.wo")),
                m1w: g(&format!("block{l}.mlp1.w")),
                m1b: g(&format!("block{l}.mlp1.b")),
                m2w: g(&format!("block{l}.mlp2.w")),
                m2b: g(&format!("block{l}.mlp2.b")),
            })
            .collect();
        let (ow, ob, sw, sb) = (g("out.w"), g("out.b"), g("skip.w"), g("skip.b"));
        Bound { ex, ec, eb, blocks, ow, ob, sw, sb }
    }

    /// Core pass over `rows` tokens. `x` is `[rows, S²]`; `ctx` are earlier
    /// tokens' keys/values (visible to every row); `causal` restricts row `i`
    /// to rows `≤ i` among the new tokens.
    fn pass(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        cond: Tensor,
        ctx: &[TokenKv],
        causal: bool,
    ) -> Result<(Var, TokenKv)> {
        let rows = tape.shape(x)[0];
        let tk = ctx.len() + rows;
        let mask: Vec<bool> =
            (0..rows).flat_map(|i| (0..tk).map(move |j| !causal || j < ctx.len() + i + 1)).collect();
        let cond = tape.constant(cond);
        let hx = tape.affine(x, b.ex, None)?;
        let hc = tape.affine(cond, b.ec, Some(b.eb))?;
        let mut h = tape.add(hx, hc)?;
        let mut kv = Vec::with_capacity(self.cfg.layers);
        for (l, blk) in b.blocks.iter().enumerate() {
            let q = tape.affine(h, blk.wq, None)?;
            let k = tape.affine(h, blk.wk, None)?;
            let v = tape.affine(h, blk.wv, None)?;
            let mut keys: Vec<Var> = ctx.iter().map(|c| c[l].0).collect();
            let mut vals: Vec<Var> = ctx.iter().map(|c| c[l].1).collect();
            keys.push(k);
            vals.push(v);
            let a = tape.attention(q, &keys, &vals, mask.clone())?;
            let a = tape.affine(a, blk.wo, None)?;
            h = tape.add(h, a)?;
            let m = tape.affine(h, blk.m1w, Some(blk.m1b))?;
            let m = tape.gelu(m)?;
            let m = tape.affine(m, blk.m2w, Some(blk.m2b))?;
            h = tape.add(h, m)?;
            kv.push((k, v));
        }
        let out = tape.affine(h, b.ow, Some(b.ob))?;
        let gate = tape.affine(h, b.sw, Some(b.sb))?;
        let skip = tape.mul(x, gate)?;
        Ok((tape.add(out, skip)?, kv))
    }

    fn cond_rows(&self, conds: &[&FrameCond], t: f64) -> Result<Tensor> {
        let w = self.cfg.cond_width();
        let mut data = Vec::with_capacity(conds.len() * w);
        for c in conds {
            if c.heatmap.len() != self.cfg.pixels() {
                return Err(Error::Shape { op: "cond", shapes: vec![c.heatmap.shape().to_vec(), vec![self.cfg.side; 2]] });
            }
            data.extend(c.row(t));
        }
        Tensor::new(vec![conds.len(), w], data)
    }

    /// Joint velocity for all frames of a video at a shared time `t`, under
    /// this net's mask. `x` is `[F, S²]`.
    pub fn video_on(&self, tape: &mut Tape, b: &Bound, x: Var, conds: &[FrameCond], t: f64) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape != [conds.len(), self.cfg.pixels()] {
            return Err(Error::Shape { op: "video_velocity", shapes: vec![shape, vec![conds.len(), self.cfg.pixels()]] });
        }
        let refs: Vec<&FrameCond> = conds.iter().collect();
        let cond = self.cond_rows(&refs, t)?;
        Ok(self.pass(tape, b, x, cond, &[], self.mask == MaskMode::Causal)?.0)
    }

    /// Velocity fields for every frame of a video (teacher / fake-score net).
    pub fn video_velocity(&self, xs: &[Tensor], conds: &[FrameCond], t: f64) -> Result<Vec<Tensor>> {
        if xs.len() != conds.len() {
            return Err(Error::invalid(format!("{} frames but {} controls", xs.len(), conds.len())));
        }
        let rows: Vec<&Tensor> = xs.iter().collect();
        let stacked = stack_frames(&rows, self.cfg.pixels())?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(stacked);
        let v = self.video_on(&mut tape, &b, x, conds, t)?;
        unstack_frames(tape.value(v), self.cfg.side)
    }

    /// Single-frame query against earlier tokens' keys/values. `x` is `[1, S²]`.
    pub fn frame_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        cond: &FrameCond,
        t: f64,
        ctx: &[TokenKv],
    ) -> Result<(Var, TokenKv)> {
        if ctx.len() > self.cfg.capacity {
            return Err(Error::Cache(format!("context of {} frames exceeds capacity {}", ctx.len(), self.cfg.capacity)));
        }
        let cond = self.cond_rows(&[cond], t)?;
        self.pass(tape, b, x, cond, ctx, false)
    }

    /// Student velocity for frame `cond.frame` given the cache of earlier
    /// clean frames. The cache is not modified.
    pub fn frame_velocity(&self, x: &Tensor, cond: &FrameCond, t: f64, cache: &KvCache) -> Result<Tensor> {
        cache.check_before(cond.frame)?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let ctx = cache.on_tape(&mut tape);
        let xv = tape.constant(to_row(x)?);
        let (v, _) = self.frame_on(&mut tape, &b, xv, cond, t, &ctx)?;
        tape.value(v).reshape(x.shape())
    }

    /// Keys/values of a clean frame's token (time 1), on the tape.
    pub fn commit_on(&self, tape: &mut Tape, b: &Bound, clean: Var, cond: &FrameCond, ctx: &[TokenKv]) -> Result<TokenKv> {
        Ok(self.frame_on(tape, b, clean, cond, 1.0, ctx)?.1)
    }

    /// Appends the clean frame `x_{m,N}` to the cache. `step` must equal the
    /// schedule length `steps`.
    pub fn commit(&self, cache: &mut KvCache, clean: &Tensor, cond: &FrameCond, step: usize, steps: usize) -> Result<()> {
        if step != steps {
            return Err(Error::Cache(format!("commit at step {step} of {steps}: only fully denoised frames enter the cache")));
        }
        cache.check_before(cond.frame)?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let ctx = cache.on_tape(&mut tape);
        let xv = tape.constant(to_row(clean)?);
        let kv = self.commit_on(&mut tape, &b, xv, cond, &ctx)?;
        let kv = kv.into_iter().map(|(k, v)| (Arc::new(tape.value(k).clone()), Arc::new(tape.value(v).clone()))).collect();
        cache.push(CacheEntry { frame: cond.frame, kv })
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.capacity)
    }

    /// From-scratch causal pass: clean frames `0..m` at time 1 followed by the
    /// noisy frame `m` at time `t`; returns the last token's velocity.
    pub fn causal_from_scratch(&self, clean: &[Tensor], conds: &[FrameCond], x: &Tensor, t: f64) -> Result<Tensor> {
        let m = clean.len();
        if conds.len() != m + 1 {
            return Err(Error::invalid("need one condition per clean frame plus the query frame"));
        }
        let mut rows: Vec<&Tensor> = clean.iter().collect();
        rows.push(x);
        let stacked = stack_frames(&rows, self.cfg.pixels())?;
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let xv = tape.constant(stacked);
        let w = self.cfg.cond_width();
        let mut data = Vec::with_capacity((m + 1) * w);
        for (i, c) in conds.iter().enumerate() {
            data.extend(c.row(if i < m { 1.0 } else { t }));
        }
        let cond = Tensor::new(vec![m + 1, w], data)?;
        let (v, _) = self.pass(&mut tape, &b, xv, cond, &[], true)?;
        let last = tape.value(v).row(m).to_vec();
        Tensor::new(x.shape().to_vec(), last)
    }

    pub fn to_checkpoint(&self, kind: &str, extra: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        let mut meta = extra;
        meta.insert("kind".into(), kind.into());
        meta.insert("mask".into(), self.mask.to_string().into());
        meta.insert("net".into(), serde_json::to_value(&self.cfg).expect("plain struct"));
        Checkpoint { meta, params: self.params.snapshot() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_value(
            ck.meta.get("net").cloned().ok_or_else(|| Error::Format("checkpoint lacks net config".into()))?,
        )?;
        let mask: MaskMode = ck
            .meta
            .get("mask")
            .and_then(|m| m.as_str())
            .ok_or_else(|| Error::Format("checkpoint lacks mask mode".into()))?
            .parse()?;
        Self::from_params(cfg, mask, ck.params.snapshot())
    }
}

/// Stacks `[S, S]` frames into `[F, S²]` rows.
pub fn stack_frames(frames: &[&Tensor], pixels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * pixels);
    for f in frames {
        if f.len() != pixels {
            return Err(Error::Shape { op: "stack_frames", shapes: vec![f.shape().to_vec(), vec![pixels]] });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), pixels], data)
}

/// Splits `[F, S²]` rows back into `[S, S]` frames.
pub fn unstack_frames(rows: &Tensor, side: usize) -> Result<Vec<Tensor>> {
    (0..rows.rows()).map(|r| Tensor::new(vec![side, side], rows.row(r).to_vec())).collect()
}
