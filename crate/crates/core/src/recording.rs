//! Episodes replayed from timestamped vehicle-track recordings instead of a
//! live simulation. Waiting moves a cursor through the recording; committing
//! resolves through safety labels attached to time intervals, because a
//! recording cannot react to the ego the way simulated drivers do.
//!
//! Recordings are plain line-oriented text (one frame per line) with a label
//! sidecar file, so real captures can be appended and diffed. This module
//! also synthesizes recordings from the simulator: traffic is run with no
//! ego, sampled above the simulation rate with sensor-like position noise,
//! and auto-labeled by rolling a ghost ego forward from every tick against
//! the true states.

use crate::env::{decision_reward, Action, Environment, Outcome, StepResult};
use crate::geom::{Obb, Vec2};
use crate::grid::{encode_entities, Entity, Grid};
use crate::net::QNetwork;
use crate::rl::{train, LearningCurve, TrainConfig, TrainError};
use crate::scenario::{ScenarioSpec, DT};
use crate::sim::SimEnv;
use crate::stats::derive_seed;
use crate::transfer::Budgets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const RECORDING_HEADER: &str = "junction-recording v1";
pub const LABELS_HEADER: &str = "junction-labels v1";

/// One tracked vehicle in one frame.
#[derive(Clone, Copy, Debug)]
pub struct TrackState {
    pub id: u64,
    pub pos: Vec2,
    pub vel: Vec2,
    pub heading: Vec2,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub t: f64,
    pub tracks: Vec<TrackState>,
}

/// Half-open interval [t0, t1) sharing one safety verdict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelSpan {
    pub t0: f64,
    pub t1: f64,
    pub safe: bool,
}

/// A timestamped traffic capture over one intersection, plus its safety
/// labels. Immutable once built; any number of episodes can replay it.
#[derive(Clone, Debug)]
pub struct Recording {
    /// Intersection geometry; traffic parameters are unused during replay
    /// and stay at their defaults when loaded from a file.
    pub spec: ScenarioSpec,
    /// Capture rate in Hz, above the simulation rate 1/DT.
    pub rate: f64,
    pub frames: Vec<Frame>,
    pub labels: Vec<LabelSpan>,
}

const TIME_TOL: f64 = 1e-6;

impl Recording {
    pub fn start_time(&self) -> f64 {
        self.frames.first().map(|f| f.t).unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.frames.last().map(|f| f.t).unwrap_or(0.0)
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Safety verdict at instant `t` (clamped into the labeled span).
    pub fn safe_at(&self, t: f64) -> bool {
        let i = self.labels.partition_point(|l| l.t0 <= t);
        self.labels[i.saturating_sub(1).min(self.labels.len() - 1)].safe
    }

    /// Checks every structural invariant; errors describe the violation.
    pub fn validate(&self) -> Result<(), RecordingError> {
        let fail = |reason: String| Err(RecordingError::Invalid(reason));
        if self.frames.is_empty() {
            return fail("no frames".into());
        }
        if !(self.rate > 1.0 / DT) {
            return fail(format!("sample rate {} Hz not above the simulation rate {} Hz", self.rate, 1.0 / DT));
        }
        for w in self.frames.windows(2) {
            if w[1].t <= w[0].t {
                return fail(format!("frame timestamps not strictly increasing at t={}", w[1].t));
            }
        }
        if self.labels.is_empty() {
            return fail("no label spans".into());
        }
        for l in &self.labels {
            if l.t1 <= l.t0 {
                return fail(format!("label span [{}, {}) is empty or reversed", l.t0, l.t1));
            }
        }
        for w in self.labels.windows(2) {
            if (w[1].t0 - w[0].t1).abs() > TIME_TOL {
                return fail(format!(
                    "label spans leave a gap or overlap between t={} and t={}",
                    w[0].t1, w[1].t0
                ));
            }
        }
        let first = self.labels.first().unwrap();
        let last = self.labels.last().unwrap();
        if (first.t0 - self.start_time()).abs() > TIME_TOL || (last.t1 - self.end_time()).abs() > TIME_TOL {
            return fail(format!(
                "labels cover [{}, {}] but frames span [{}, {}]",
                first.t0,
                last.t1,
                self.start_time(),
                self.end_time()
            ));
        }
        self.spec.validate().map_err(|e| RecordingError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("invalid recording: {0}")]
    Invalid(String),
    #[error("recording spans {have:.1} s but episodes need {need:.1} s after the latest start")]
    TooShort { have: f64, need: f64 },
}

fn fmt_vec2(v: Vec2) -> String {
    format!("{},{}", v.x, v.y)
}

fn polyline_points(p: &crate::geom::Polyline) -> String {
    p.points().iter().map(|&v| fmt_vec2(v)).collect::<Vec<_>>().join(" ")
}

/// Writes `path` (the frame file) and its `.jlab` label sidecar. Numbers use
/// the shortest representation that parses back to the same value, so a
/// save/load cycle is lossless.
pub fn save_recording(rec: &Recording, path: &Path) -> Result<(), RecordingError> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source| RecordingError::Io { path: p.clone(), source }
    };
    let mut s = String::new();
    s.push_str(RECORDING_HEADER);
    s.push('\n');
    s.push_str(&format!("scenario {}\n", rec.spec.name));
    s.push_str(&format!("rate {}\n", rec.rate));
    s.push_str(&format!("speed-limit {}\n", rec.spec.speed_limit));
    s.push_str(&format!("max-steps {}\n", rec.spec.max_steps));
    s.push_str(&format!(
        "ego {} {} {}\n",
        rec.spec.ego_length, rec.spec.ego_width, rec.spec.ego_accel
    ));
    s.push_str(&format!(
        "grid {} {} {}\n",
        rec.spec.grid.behind, rec.spec.grid.ahead, rec.spec.grid.half_span
    ));
    s.push_str(&format!(
        "zone {} {} {} {}\n",
        rec.spec.conflict_zone.min.x,
        rec.spec.conflict_zone.min.y,
        rec.spec.conflict_zone.max.x,
        rec.spec.conflict_zone.max.y
    ));
    s.push_str(&format!("ego-path {}\n", polyline_points(&rec.spec.ego_path)));
    for lane in &rec.spec.lanes {
        s.push_str(&format!("lane {} {} {}\n", lane.name, lane.width, polyline_points(&lane.center)));
    }
    for f in &rec.frames {
        s.push_str(&format!("frame {}", f.t));
        for tr in &f.tracks {
            s.push_str(&format!(
                " {}:{},{},{},{},{},{}",
                tr.id, tr.pos.x, tr.pos.y, tr.vel.x, tr.vel.y, tr.heading.x, tr.heading.y
            ));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))?;

    let lab_path = path.with_extension("jlab");
    let mut s = String::new();
    s.push_str(LABELS_HEADER);
    s.push('\n');
    for l in &rec.labels {
        s.push_str(&format!("{} {} {}\n", if l.safe { "safe" } else { "unsafe" }, l.t0, l.t1));
    }
    fs::write(&lab_path, s).map_err(io_err(&lab_path))?;
    Ok(())
}

struct Parser<'a> {
    path: &'a Path,
    line: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, reason: impl Into<String>) -> RecordingError {
        RecordingError::Format {
            path: self.path.to_path_buf(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn f64(&self, tok: &str, what: &str) -> Result<f64, RecordingError> {
        tok.parse::<f64>().map_err(|_| self.err(format!("bad {what} '{tok}'")))
    }

    fn vec2(&self, tok: &str, what: &str) -> Result<Vec2, RecordingError> {
        let (x, y) = tok
            .split_once(',')
            .ok_or_else(|| self.err(format!("bad {what} '{tok}' (expected x,y)")))?;
        Ok(Vec2 { x: self.f64(x, what)?, y: self.f64(y, what)? })
    }

    fn points(&self, toks: &[&str], what: &str) -> Result<Vec<Vec2>, RecordingError> {
        if toks.len() < 2 {
            return Err(self.err(format!("{what} needs at least 2 points")));
        }
        toks.iter().map(|t| self.vec2(t, what)).collect()
    }

    fn set<T>(&self, slot: &mut Option<T>, v: T, key: &str) -> Result<(), RecordingError> {
        if slot.is_some() {
            return Err(self.err(format!("duplicate '{key}'")));
        }
        *slot = Some(v);
        Ok(())
    }
}

/// Loads a recording from `path` and its `.jlab` sidecar, then validates it.
pub fn load_recording(path: &Path) -> Result<Recording, RecordingError> {
    use crate::geom::{Aabb, Polyline};
    use crate::scenario::{GridWindow, Lane, TrafficParams};

    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| RecordingError::Io { path: p.to_path_buf(), source })
    };
    let text = read(path)?;
    let mut p = Parser { path, line: 0 };

    let mut name = None;
    let mut rate = None;
    let mut speed_limit = None;
    let mut max_steps = None;
    let mut ego = None;
    let mut grid = None;
    let mut zone = None;
    let mut ego_path = None;
    let mut lanes: Vec<Lane> = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        p.line = i + 1;
        if p.line == 1 {
            if raw != RECORDING_HEADER {
                return Err(p.err(format!("expected header '{RECORDING_HEADER}', found '{raw}'")));
            }
            continue;
        }
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "scenario" if toks.len() == 2 => p.set(&mut name, toks[1].to_string(), "scenario")?,
            "rate" if toks.len() == 2 => {
                let v = p.f64(toks[1], "rate")?;
                p.set(&mut rate, v, "rate")?
            }
            "speed-limit" if toks.len() == 2 => {
                let v = p.f64(toks[1], "speed limit")?;
                p.set(&mut speed_limit, v, "speed-limit")?
            }
            "max-steps" if toks.len() == 2 => {
                let v = toks[1].parse::<u32>().map_err(|_| p.err(format!("bad step cap '{}'", toks[1])))?;
                p.set(&mut max_steps, v, "max-steps")?
            }
            "ego" if toks.len() == 4 => {
                let v = (
                    p.f64(toks[1], "ego length")?,
                    p.f64(toks[2], "ego width")?,
                    p.f64(toks[3], "ego acceleration")?,
                );
                p.set(&mut ego, v, "ego")?
            }
            "grid" if toks.len() == 4 => {
                let v = GridWindow {
                    behind: p.f64(toks[1], "grid behind")?,
                    ahead: p.f64(toks[2], "grid ahead")?,
                    half_span: p.f64(toks[3], "grid half-span")?,
                };
                p.set(&mut grid, v, "grid")?
            }
            "zone" if toks.len() == 5 => {
                let v = Aabb {
                    min: Vec2 { x: p.f64(toks[1], "zone")?, y: p.f64(toks[2], "zone")? },
                    max: Vec2 { x: p.f64(toks[3], "zone")?, y: p.f64(toks[4], "zone")? },
                };
                p.set(&mut zone, v, "zone")?
            }
            "ego-path" => {
                let pts = p.points(&toks[1..], "ego-path")?;
                let pl = Polyline::new(pts).map_err(|e| p.err(format!("ego-path: {e}")))?;
                p.set(&mut ego_path, pl, "ego-path")?
            }
            "lane" if toks.len() >= 4 => {
                let width = p.f64(toks[2], "lane width")?;
                let pts = p.points(&toks[3..], "lane centerline")?;
                let center = Polyline::new(pts).map_err(|e| p.err(format!("lane: {e}")))?;
                lanes.push(Lane { name: toks[1].to_string(), width, center });
            }
            "frame" if toks.len() >= 2 => {
                let t = p.f64(toks[1], "frame time")?;
                let mut tracks = Vec::with_capacity(toks.len() - 2);
                for tok in &toks[2..] {
                    let (id_s, rest) = tok
                        .split_once(':')
                        .ok_or_else(|| p.err(format!("bad track '{tok}' (expected id:fields)")))?;
                    let id = id_s.parse::<u64>().map_err(|_| p.err(format!("bad track id '{id_s}'")))?;
                    let f: Vec<&str> = rest.split(',').collect();
                    if f.len() != 6 {
                        return Err(p.err(format!("track '{tok}' has {} fields, expected 6", f.len())));
                    }
                    tracks.push(TrackState {
                        id,
                        pos: Vec2 { x: p.f64(f[0], "track x")?, y: p.f64(f[1], "track y")? },
                        vel: Vec2 { x: p.f64(f[2], "track vx")?, y: p.f64(f[3], "track vy")? },
                        heading: Vec2 { x: p.f64(f[4], "track hx")?, y: p.f64(f[5], "track hy")? },
                    });
                }
                frames.push(Frame { t, tracks });
            }
            other => return Err(p.err(format!("unknown or malformed line '{other} ...'"))),
        }
    }
    let missing = |what: &str| RecordingError::Format {
        path: path.to_path_buf(),
        line: 0,
        reason: format!("missing '{what}'"),
    };
    let (ego_length, ego_width, ego_accel) = ego.ok_or_else(|| missing("ego"))?;
    let spec = ScenarioSpec {
        name: name.ok_or_else(|| missing("scenario"))?,
        lanes,
        ego_path: ego_path.ok_or_else(|| missing("ego-path"))?,
        conflict_zone: zone.ok_or_else(|| missing("zone"))?,
        speed_limit: speed_limit.ok_or_else(|| missing("speed-limit"))?,
        max_steps: max_steps.ok_or_else(|| missing("max-steps"))?,
        traffic: TrafficParams::default(),
        grid: grid.ok_or_else(|| missing("grid"))?,
        ego_length,
        ego_width,
        ego_accel,
    };
    let rate = rate.ok_or_else(|| missing("rate"))?;

    let lab_path = path.with_extension("jlab");
    let text = read(&lab_path)?;
    let mut p = Parser { path: &lab_path, line: 0 };
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        p.line = i + 1;
        if p.line == 1 {
            if raw != LABELS_HEADER {
                return Err(p.err(format!("expected header '{LABELS_HEADER}', found '{raw}'")));
            }
            continue;
        }
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(p.err(format!("expected '<safe|unsafe> <t0> <t1>', found '{line}'")));
        }
        let safe = match toks[0] {
            "safe" => true,
            "unsafe" => false,
            other => return Err(p.err(format!("bad verdict '{other}'"))),
        };
        labels.push(LabelSpan { t0: p.f64(toks[1], "t0")?, t1: p.f64(toks[2], "t1")?, safe });
    }

    let rec = Recording { spec, rate, frames, labels };
    rec.validate()?;
    Ok(rec)
}

/// Replays a recording with the simulator's decision contract: waiting
/// advances a cursor in simulation-tick units, committing resolves through
/// the safety label at the cursor, and the step cap matches the scenario's.
///
/// Observations come from one frame drawn uniformly from the current
/// [cursor, cursor + DT) window, redrawn after every decision.
#[derive(Clone, Debug)]
pub struct ReplayEnv {
    rec: Arc<Recording>,
    /// Frame indices whose timestamps leave a full episode of tail.
    eligible_starts: Vec<usize>,
    rng: ChaCha8Rng,
    start_t: f64,
    ticks: u32,
    obs_frame: usize,
    outcome: Option<Outcome>,
}

impl ReplayEnv {
    pub fn new(rec: Arc<Recording>) -> Result<ReplayEnv, RecordingError> {
        rec.validate()?;
        let need = rec.spec.max_steps as f64 * DT;
        let latest = rec.end_time() - need;
        let eligible_starts: Vec<usize> = (0..rec.frames.len())
            .filter(|&i| rec.frames[i].t <= latest + TIME_TOL)
            .collect();
        if eligible_starts.is_empty() {
            return Err(RecordingError::TooShort { have: rec.duration(), need });
        }
        Ok(ReplayEnv {
            rec,
            eligible_starts,
            rng: ChaCha8Rng::seed_from_u64(0),
            start_t: 0.0,
            ticks: 0,
            obs_frame: 0,
            outcome: None,
        })
    }

    pub fn recording(&self) -> &Arc<Recording> {
        &self.rec
    }

    /// Decision-time cursor: episode start plus elapsed whole ticks.
    pub fn cursor(&self) -> f64 {
        self.start_t + self.ticks as f64 * DT
    }

    fn draw_obs_frame(&mut self) {
        let frames = &self.rec.frames;
        let cursor = self.cursor();
        let lo = frames.partition_point(|f| f.t < cursor - TIME_TOL);
        let hi = frames.partition_point(|f| f.t < cursor + DT - TIME_TOL);
        self.obs_frame = if lo < hi {
            self.rng.gen_range(lo..hi)
        } else {
            // Window past the capture; fall back to the last frame at or
            // before the cursor.
            lo.saturating_sub(1).min(frames.len() - 1)
        };
    }
}

impl Environment for ReplayEnv {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = self.rng.gen_range(0..self.eligible_starts.len());
        self.start_t = self.rec.frames[self.eligible_starts[pick]].t;
        self.ticks = 0;
        self.outcome = None;
        self.draw_obs_frame();
    }

    fn observe(&self) -> Grid {
        let spec = &self.rec.spec;
        let ego_pos = spec.ego_path.point_at(0.0);
        let ego_heading = spec.ego_path.tangent_at(0.0);
        let entities: Vec<Entity> = self.rec.frames[self.obs_frame]
            .tracks
            .iter()
            .map(|tr| Entity { pos: tr.pos, vel: tr.vel, heading: tr.heading })
            .collect();
        encode_entities(&spec.grid, ego_pos, ego_heading, spec.speed_limit, &entities)
    }

    fn act(&mut self, action: Action) -> StepResult {
        assert!(self.outcome.is_none(), "act called on a terminal episode");
        match action.wait_ticks() {
            None => {
                self.outcome = Some(if self.rec.safe_at(self.cursor()) {
                    Outcome::Success
                } else {
                    Outcome::Collision
                });
            }
            Some(k) => {
                self.ticks += k;
                if self.ticks >= self.rec.spec.max_steps
                    || self.cursor() > self.rec.end_time() + TIME_TOL
                {
                    self.outcome = Some(Outcome::Timeout);
                } else {
                    self.draw_obs_frame();
                }
            }
        }
        StepResult { reward: decision_reward(self.outcome), outcome: self.outcome }
    }

    fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }
}

/// Sampling parameters for synthetic recordings.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisConfig {
    /// Capture rate in Hz; must exceed the simulation rate 1/DT.
    pub sample_rate: f64,
    /// Standard deviation of the per-frame Gaussian position noise (m).
    pub noise_sigma: f64,
}

impl Default for SynthesisConfig {
    fn default() -> SynthesisConfig {
        SynthesisConfig { sample_rate: 25.0, noise_sigma: 0.3 }
    }
}

/// Rolls a ghost ego committing at `start_tick` forward against the true
/// per-tick states, mirroring the simulator's committed-ego dynamics and
/// outcome checks. Ticks past the end of `states` see an empty road: the
/// recording is the whole world, so vehicles it no longer contains cannot
/// collide. Returns true when the ego finishes without any rectangle
/// overlap. The horizon is the rollout's own completion, not the step cap.
fn ghost_go_is_safe(spec: &ScenarioSpec, states: &[Vec<TrackState>], start_tick: usize) -> bool {
    let path_len = spec.ego_path.length();
    let veh_len = spec.traffic.vehicle_length;
    let veh_wid = spec.traffic.vehicle_width;
    let empty: Vec<TrackState> = Vec::new();
    let mut v = 0.0;
    let mut s = 0.0;
    let mut entered = false;
    let mut k = start_tick;
    loop {
        v = (v + spec.ego_accel * DT).min(spec.speed_limit);
        s += v * DT;
        k += 1;
        let ego = spec.ego_obb_at(s);
        let traffic = states.get(k).unwrap_or(&empty);
        if traffic.iter().any(|tr| ego.overlaps(&Obb::new(tr.pos, tr.heading, veh_len, veh_wid))) {
            return false;
        }
        let in_zone = ego.overlaps_aabb(&spec.conflict_zone);
        entered |= in_zone;
        if (entered && !in_zone) || s >= path_len {
            return true;
        }
    }
}

/// Runs ego-free traffic for `duration_s` seconds and captures it as a
/// recording: frames at `cfg.sample_rate` built by extrapolating the most
/// recent tick state and adding Gaussian position noise (velocities and
/// headings stay true), labels from ghost rollouts at every tick, merged
/// into covering spans.
///
/// Panics if `duration_s < 30`, the sample rate is not above the simulation
/// rate, or the noise deviation is not finite and non-negative.
pub fn synthesize_recording(
    spec: &ScenarioSpec,
    duration_s: f64,
    cfg: SynthesisConfig,
    seed: u64,
) -> Recording {
    assert!(duration_s >= 30.0, "recordings shorter than 30 s are not useful");
    assert!(cfg.sample_rate > 1.0 / DT, "sample rate must exceed the simulation rate");
    assert!(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite());

    let mut sim = SimEnv::new(spec.clone());
    sim.seed_empty(derive_seed(seed, "traffic"));
    let ticks = (duration_s / DT).ceil() as usize;
    let mut states: Vec<Vec<TrackState>> = Vec::with_capacity(ticks + 1);
    let snapshot = |sim: &SimEnv| {
        sim.vehicles()
            .map(|v| TrackState { id: v.id, pos: v.pos, vel: v.vel, heading: v.heading })
            .collect::<Vec<_>>()
    };
    states.push(snapshot(&sim));
    for _ in 0..ticks {
        sim.advance_traffic();
        states.push(snapshot(&sim));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise"));
    let noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
    let n_frames = (duration_s * cfg.sample_rate).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for j in 0..n_frames {
        let t = j as f64 / cfg.sample_rate;
        // Tolerant floor so tick-aligned frames read the exact tick state.
        let k = (((t + TIME_TOL) / DT).floor() as usize).min(ticks);
        let frac = (t - k as f64 * DT).max(0.0);
        let tracks = states[k]
            .iter()
            .map(|tr| TrackState {
                id: tr.id,
                pos: tr.pos
                    + tr.vel * frac
                    + Vec2 { x: noise.sample(&mut noise_rng), y: noise.sample(&mut noise_rng) },
                vel: tr.vel,
                heading: if tr.vel.norm() > 1e-9 { tr.vel.normalized() } else { tr.heading },
            })
            .collect();
        frames.push(Frame { t, tracks });
    }
    let end_t = frames.last().unwrap().t;

    let mut labels: Vec<LabelSpan> = Vec::new();
    let mut k = 0usize;
    while (k as f64) * DT < end_t - TIME_TOL {
        let safe = ghost_go_is_safe(spec, &states, k);
        let t0 = k as f64 * DT;
        let t1 = ((k + 1) as f64 * DT).min(end_t);
        match labels.last_mut() {
            Some(last) if last.safe == safe => last.t1 = t1,
            _ => labels.push(LabelSpan { t0, t1, safe }),
        }
        k += 1;
    }
    labels.last_mut().expect("at least one label span").t1 = end_t;

    Recording { spec: spec.clone(), rate: cfg.sample_rate, frames, labels }
}

#[derive(Debug, Error)]
pub enum Sim2RealError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Recording(#[from] RecordingError),
}

/// Curves from one training run on the training recording, evaluated
/// throughout on both recordings.
pub struct RecordingRun {
    pub net: QNetwork<f32>,
    pub on_train: LearningCurve,
    pub on_test: LearningCurve,
}

pub struct Sim2RealOutcome {
    pub scratch: RecordingRun,
    pub pretrained: RecordingRun,
}

/// Audits a finished recording-transfer run against the orderings it is
/// expected to show: pretraining reaches 90% on the training recording in at
/// most 0.6x the iterations scratch needs, and both runs score strictly lower
/// on the held-out recording than on the one they trained on. Returns one
/// line per violated expectation.
pub fn check_sim2real(out: &Sim2RealOutcome) -> Vec<String> {
    let mut fails = Vec::new();
    let threshold = 0.9;
    match (out.pretrained.on_train.first_reaching(threshold), out.scratch.on_train.first_reaching(threshold)) {
        (Some(p), Some(s)) => {
            if p as f64 > 0.6 * s as f64 {
                fails.push(format!(
                    "pretrained run first reached {threshold} at iteration {p}, past 0.6x the scratch run's {s}"
                ));
            }
        }
        (Some(_), None) => {}
        (None, _) => fails.push(format!("pretrained run never reached {threshold} on the training recording")),
    }
    for (name, run) in [("scratch", &out.scratch), ("pretrained", &out.pretrained)] {
        let (tr, te) = (run.on_train.asymptote(), run.on_test.asymptote());
        if te >= tr {
            fails.push(format!(
                "{name} run shows no train/test gap: test asymptote {te:.3} >= train asymptote {tr:.3}"
            ));
        }
    }
    fails
}

/// Trains two networks on the training recording (one from scratch, one
/// pretrained in the simulator) and evaluates both on the training and test
/// recordings throughout. The runs share evaluation seed streams, so the
/// four curves are pairwise comparable; identical recordings passed as train
/// and test produce identical curve pairs.
pub fn sim2real_experiment(
    sim_spec: &ScenarioSpec,
    train_rec: Arc<Recording>,
    test_rec: Arc<Recording>,
    budgets: &Budgets,
    template: &TrainConfig,
    master_seed: u64,
) -> Result<Sim2RealOutcome, Sim2RealError> {
    let eval_seed = derive_seed(master_seed, "eval/sim2real");
    let run = |init: QNetwork<f32>, seed_key: &str| -> Result<RecordingRun, Sim2RealError> {
        let mut env = ReplayEnv::new(train_rec.clone())?;
        // One tag for both so identical recordings replay identical episodes.
        let evals =
            [("rec", ReplayEnv::new(train_rec.clone())?), ("rec", ReplayEnv::new(test_rec.clone())?)];
        let cfg = TrainConfig {
            iterations: budgets.finetune_steps(),
            seed: derive_seed(master_seed, seed_key),
            eval_seed,
            ..template.clone()
        };
        let mut out = train(&mut env, &evals, init, &cfg)?;
        let on_test = out.curves.pop().unwrap();
        let on_train = out.curves.pop().unwrap();
        Ok(RecordingRun { net: out.net, on_train, on_test })
    };

    let scratch = run(
        QNetwork::new(derive_seed(master_seed, "init/sim2real/scratch")),
        "train/sim2real/scratch",
    )?;

    let mut sim = SimEnv::new(sim_spec.clone());
    let no_evals: &[(&str, SimEnv)] = &[];
    let pre_cfg = TrainConfig {
        iterations: budgets.pretrain_steps(),
        seed: derive_seed(master_seed, "train/sim2real/pretrain"),
        eval_seed,
        ..template.clone()
    };
    let pre = train(
        &mut sim,
        no_evals,
        QNetwork::new(derive_seed(master_seed, "init/sim2real/pretrain")),
        &pre_cfg,
    )?
    .net;
    let pretrained = run(pre, "train/sim2real/finetune")?;

    Ok(Sim2RealOutcome { scratch, pretrained })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{builtin, ScenarioId};
    use approx::assert_relative_eq;

    fn flat_recording(duration: f64, labels: Vec<LabelSpan>) -> Recording {
        let rate = 25.0;
        let n = (duration * rate) as usize + 1;
        let frames = (0..n).map(|j| Frame { t: j as f64 / rate, tracks: vec![] }).collect();
        Recording { spec: builtin(ScenarioId::Left), rate, frames, labels }
    }

    fn all_safe(duration: f64) -> Recording {
        flat_recording(duration, vec![LabelSpan { t0: 0.0, t1: duration, safe: true }])
    }

    #[test]
    fn wait_advances_cursor_in_exact_ticks() {
        let rec = Arc::new(all_safe(25.0));
        let mut env = ReplayEnv::new(rec).unwrap();
        env.reset(4);
        let t0 = env.cursor();
        env.act(Action::Wait8);
        assert_eq!(env.cursor() - t0, 1.6);
        env.act(Action::Wait1);
        assert_relative_eq!(env.cursor() - t0, 1.8, epsilon = 1e-12);
    }

    #[test]
    fn go_resolves_through_labels() {
        let rec = Arc::new(flat_recording(
            30.0,
            vec![
                LabelSpan { t0: 0.0, t1: 6.0, safe: true },
                LabelSpan { t0: 6.0, t1: 30.0, safe: false },
            ],
        ));
        let mut env = ReplayEnv::new(rec.clone()).unwrap();
        env.reset(0);
        env.start_t = 0.0; // pin the episode for the test
        let r = env.act(Action::Go);
        assert_eq!(r.outcome, Some(Outcome::Success));
        assert_eq!(r.reward, 1.0);

        let mut env = ReplayEnv::new(rec).unwrap();
        env.reset(0);
        env.start_t = 0.0;
        env.ticks = 40; // cursor 8.0, inside the unsafe span
        let r = env.act(Action::Go);
        assert_eq!(r.outcome, Some(Outcome::Collision));
        assert_eq!(r.reward, -1.0);
    }

    #[test]
    fn unsafe_everywhere_means_any_go_collides() {
        let rec = Arc::new(flat_recording(
            30.0,
            vec![LabelSpan { t0: 0.0, t1: 30.0, safe: false }],
        ));
        for seed in 0..10 {
            let mut env = ReplayEnv::new(rec.clone()).unwrap();
            env.reset(seed);
            assert_eq!(env.act(Action::Go).outcome, Some(Outcome::Collision));
        }
    }

    #[test]
    fn waiting_out_the_cap_times_out() {
        let rec = Arc::new(all_safe(40.0));
        let mut env = ReplayEnv::new(rec).unwrap();
        env.reset(9);
        let mut total = 0.0;
        let mut decisions = 0;
        loop {
            let r = env.act(Action::Wait8);
            total += r.reward;
            decisions += 1;
            if let Some(o) = r.outcome {
                assert_eq!(o, Outcome::Timeout);
                break;
            }
        }
        assert_eq!(decisions, 13);
        assert_relative_eq!(total, -0.13, epsilon = 1e-6);
        assert_eq!(env.ticks, 104);
    }

    #[test]
    fn observation_frames_stay_inside_the_window() {
        let rec = Arc::new(all_safe(25.0));
        let mut env = ReplayEnv::new(rec.clone()).unwrap();
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..50 {
            env.reset(seed);
            let t = rec.frames[env.obs_frame].t;
            assert!(
                t >= env.cursor() - 1e-9 && t < env.cursor() + DT - 1e-9,
                "frame at {t} outside [{}, {})",
                env.cursor(),
                env.cursor() + DT
            );
            distinct.insert(env.obs_frame - env.eligible_starts[0]);
        }
        // 5 frames fit in one window; the draw should not be constant.
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn short_recordings_are_rejected() {
        let rec = Arc::new(all_safe(15.0));
        match ReplayEnv::new(rec) {
            Err(RecordingError::TooShort { need, .. }) => assert_eq!(need, 20.0),
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn synthesized_left_minute_has_plausible_track_count() {
        let rec = synthesize_recording(&builtin(ScenarioId::Left), 60.0, SynthesisConfig::default(), 42);
        rec.validate().unwrap();
        assert_eq!(rec.frames.len(), 1501);
        let mut ids = std::collections::HashSet::new();
        for f in &rec.frames {
            for tr in &f.tracks {
                ids.insert(tr.id);
            }
        }
        // Two lanes at 0.2 vehicles per second for a minute: about 24.
        assert!(
            (10..=38).contains(&ids.len()),
            "expected roughly 24 tracks, found {}",
            ids.len()
        );
        assert!(rec.labels.iter().any(|l| l.safe), "no safe span in a minute of traffic");
        assert!(rec.labels.iter().any(|l| !l.safe), "no unsafe span in a minute of traffic");
    }

    #[test]
    fn empty_traffic_is_labeled_safe_everywhere() {
        let mut spec = builtin(ScenarioId::Left);
        spec.traffic.depart_prob = 0.0;
        let rec = synthesize_recording(&spec, 30.0, SynthesisConfig::default(), 1);
        assert_eq!(rec.labels.len(), 1);
        assert!(rec.labels[0].safe);
        assert!(rec.frames.iter().all(|f| f.tracks.is_empty()));
    }

    #[test]
    fn labels_match_rollouts_recomputed_from_noiseless_frames() {
        let cfg = SynthesisConfig { sample_rate: 25.0, noise_sigma: 0.0 };
        let spec = builtin(ScenarioId::Left);
        let rec = synthesize_recording(&spec, 32.0, cfg, 7);
        // Tick states can be reconstructed from every 5th frame when the
        // noise is off (25 Hz against a 5 Hz simulation).
        let states: Vec<Vec<TrackState>> =
            rec.frames.iter().step_by(5).map(|f| f.tracks.clone()).collect();
        for span in &rec.labels {
            let k0 = (span.t0 / DT).round() as usize;
            let k1 = ((span.t1 - 1e-9) / DT).ceil() as usize;
            for k in k0..k1 {
                assert_eq!(
                    ghost_go_is_safe(&rec.spec, &states, k),
                    span.safe,
                    "tick {k} disagrees with span [{}, {})",
                    span.t0,
                    span.t1
                );
            }
        }
    }

    #[test]
    fn save_load_round_trips_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let rec = synthesize_recording(&builtin(ScenarioId::Forward), 30.0, SynthesisConfig::default(), 3);
        let p1 = dir.path().join("a.jrec");
        save_recording(&rec, &p1).unwrap();
        let loaded = load_recording(&p1).unwrap();
        let p2 = dir.path().join("b.jrec");
        save_recording(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read(p1.with_extension("jlab")).unwrap(),
            fs::read(p2.with_extension("jlab")).unwrap()
        );
        assert_eq!(loaded.frames.len(), rec.frames.len());
        assert_eq!(loaded.labels, rec.labels);
    }

    #[test]
    fn format_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let rec = all_safe(25.0);
        let path = dir.path().join("r.jrec");
        save_recording(&rec, &path).unwrap();

        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replace(RECORDING_HEADER, "junk v9");
        let bad = dir.path().join("bad.jrec");
        fs::write(&bad, &text).unwrap();
        save_recording(&rec, &bad).ok();
        fs::write(&bad, &text).unwrap();
        match load_recording(&bad) {
            Err(RecordingError::Format { line: 1, .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }

        let text = fs::read_to_string(&path).unwrap() + "frame notatime\n";
        fs::write(&bad, &text).unwrap();
        match load_recording(&bad) {
            Err(RecordingError::Format { line, reason, .. }) => {
                assert!(reason.contains("frame time"), "{reason}");
                assert!(line > 1);
            }
            other => panic!("expected frame error, got {other:?}"),
        }
    }

    #[test]
    fn label_invariants_are_enforced() {
        let mut rec = all_safe(25.0);
        rec.labels = vec![
            LabelSpan { t0: 0.0, t1: 10.0, safe: true },
            LabelSpan { t0: 12.0, t1: 25.0, safe: false },
        ];
        assert!(matches!(rec.validate(), Err(RecordingError::Invalid(r)) if r.contains("gap")));

        let mut rec = all_safe(25.0);
        rec.labels[0].t1 = 20.0;
        assert!(matches!(rec.validate(), Err(RecordingError::Invalid(r)) if r.contains("cover")));

        let mut rec = all_safe(25.0);
        rec.rate = 4.0;
        assert!(matches!(rec.validate(), Err(RecordingError::Invalid(r)) if r.contains("rate")));
    }
}
