//! The learning loop: epsilon-greedy acting, precomputed discounted returns,
//! a uniform replay buffer, and mean-squared-error regression of the taken
//! action's Q-value onto the observed return.
//!
//! Episodes here are short and always reach a terminal outcome, so instead of
//! bootstrapped targets with a lagging network, each decision is trained on
//! the full discounted return to the end of its episode, computed when the
//! episode is ingested. One gradient step is taken per decision collected,
//! after an initial buffer-fill phase.

use crate::env::{run_episode, Action, Environment, Episode};
use crate::grid::{CompactGrid, Grid, CHANNELS, COLS, ROWS};
use crate::net::QNetwork;
use crate::rmsprop::{NonFiniteGradient, RmsProp};
use crate::stats::derive_seed;
use ndarray::{Array2, Array4, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid {field}: {reason}")]
pub struct InvalidConfig {
    pub field: &'static str,
    pub reason: String,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> InvalidConfig {
    InvalidConfig { field, reason: reason.into() }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub batch: usize,
    /// Gradient steps to take; one "iteration" is one [`train_step`].
    pub iterations: u32,
    pub eval_every: u32,
    /// Greedy episodes per evaluation checkpoint.
    pub eval_episodes: u32,
    pub replay_capacity: usize,
    /// Experiences collected before the first gradient step.
    pub warmup: usize,
    /// Seeds training randomness: episode seeds, exploration, batch sampling.
    pub seed: u64,
    /// Seeds the evaluation episode streams, independently of training.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            gamma: 0.99,
            epsilon: 0.05,
            batch: 60,
            iterations: 10_000,
            eval_every: 250,
            eval_episodes: 100,
            replay_capacity: 100_000,
            warmup: 1000,
            seed: 0,
            eval_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("{} not in (0, 1]", self.gamma)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(invalid("epsilon", format!("{} not in [0, 1]", self.epsilon)));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be >= 1"));
        }
        if self.replay_capacity < self.batch {
            return Err(invalid("replay_capacity", "must hold at least one batch"));
        }
        if self.warmup > self.replay_capacity {
            return Err(invalid("warmup", "exceeds replay capacity; training would never start"));
        }
        Ok(())
    }
}

/// Per-step discounted returns-to-terminal: `out[t] = sum_k gamma^(k-t) r_k`.
pub fn discounted_returns(rewards: &[f32], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] as f64 + gamma * acc;
        out[i] = acc;
    }
    out
}

/// One decision's worth of training signal.
#[derive(Clone, Debug)]
pub struct Experience {
    pub state: CompactGrid,
    pub action: u8,
    /// Discounted return to terminal from this decision.
    pub ret: f32,
}

/// FIFO ring of experiences with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    data: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0);
        ReplayBuffer { data: VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.data[i]
    }

    pub fn push(&mut self, e: Experience) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(e);
    }

    /// `k` independent uniform draws over the current contents.
    pub fn sample_indices(&self, rng: &mut impl Rng, k: usize) -> Vec<usize> {
        (0..k).map(|_| rng.gen_range(0..self.data.len())).collect()
    }
}

/// Bounds implied by the reward scheme: at worst 100 step costs and a
/// collision, at best an immediate success.
const RETURN_BOUNDS: (f64, f64) = (-2.0, 1.0);

/// Converts a finished episode into experiences with precomputed returns and
/// pushes them in temporal order.
pub fn ingest_trajectory(buffer: &mut ReplayBuffer, episode: &Episode, gamma: f64) {
    let rewards: Vec<f32> = episode.decisions.iter().map(|d| d.reward).collect();
    let returns = discounted_returns(&rewards, gamma);
    for (d, &ret) in episode.decisions.iter().zip(&returns) {
        assert!(
            ret >= RETURN_BOUNDS.0 && ret <= RETURN_BOUNDS.1,
            "return {ret} outside {RETURN_BOUNDS:?}"
        );
        buffer.push(Experience {
            state: CompactGrid::from_dense(&d.state),
            action: d.action.index() as u8,
            ret: ret as f32,
        });
    }
}

/// Greedy argmax with ties broken toward the lowest action index.
pub fn argmax_action(q: ArrayView1<'_, f32>) -> Action {
    let mut best = 0;
    for i in 1..q.len() {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::from_index(best).unwrap()
}

/// Epsilon-greedy action choice. One uniform draw decides exploration; the
/// exploratory action costs a second draw, so the stream stays aligned
/// whether or not the network agrees with exploration.
pub fn select_action(net: &QNetwork<f32>, state: &Grid, epsilon: f64, rng: &mut impl Rng) -> Action {
    if rng.gen::<f64>() < epsilon {
        Action::from_index(rng.gen_range(0..Action::COUNT)).unwrap()
    } else {
        argmax_action(net.forward_one(state).view())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("replay buffer holds {have} experiences, need {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error(transparent)]
    NonFinite(#[from] NonFiniteGradient),
    #[error(transparent)]
    Config(#[from] InvalidConfig),
}

/// Mean squared error of the taken actions' Q-values against their stored
/// returns, plus the matching output gradient and the forward cache needed
/// to backpropagate it. Only the taken action's output receives loss
/// gradient.
pub fn batch_loss(
    net: &QNetwork<f32>,
    batch: &[&Experience],
) -> (f32, crate::net::Cache<f32>, Array2<f32>) {
    let b = batch.len();
    let mut x = Array4::zeros((b, CHANNELS, ROWS, COLS));
    for (i, e) in batch.iter().enumerate() {
        e.state.write_dense(&mut x.index_axis_mut(Axis(0), i));
    }
    let (q, cache) = net.forward_cached(x);
    let mut dq = Array2::zeros((b, Action::COUNT));
    let mut loss = 0.0f64;
    for (i, e) in batch.iter().enumerate() {
        let a = e.action as usize;
        let err = q[[i, a]] - e.ret;
        loss += (err as f64).powi(2);
        dq[[i, a]] = 2.0 * err / b as f32;
    }
    ((loss / b as f64) as f32, cache, dq)
}

/// One gradient step on a uniformly sampled batch. Returns the pre-update
/// loss.
pub fn train_step(
    net: &mut QNetwork<f32>,
    opt: &mut RmsProp<f32>,
    buffer: &ReplayBuffer,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<f32, TrainError> {
    if buffer.len() < batch {
        return Err(TrainError::BufferTooSmall { have: buffer.len(), need: batch });
    }
    let idx = buffer.sample_indices(rng, batch);
    let exps: Vec<&Experience> = idx.iter().map(|&i| buffer.get(i)).collect();
    let (loss, cache, dq) = batch_loss(net, &exps);
    let grads = net.backward(&cache, &dq);
    opt.step(&mut net.params, &grads)?;
    Ok(loss)
}

/// Outcome frequencies over a set of greedy evaluation episodes.
#[derive(Clone, Copy, Debug)]
pub struct EvalOutcome {
    pub episodes: u32,
    pub successes: u32,
    pub collisions: u32,
    pub timeouts: u32,
}

impl EvalOutcome {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
    pub fn collision_rate(&self) -> f64 {
        self.collisions as f64 / self.episodes as f64
    }
    pub fn timeout_rate(&self) -> f64 {
        self.timeouts as f64 / self.episodes as f64
    }
}

/// Runs `episodes` greedy episodes on clones of `proto`, stepping all live
/// episodes in lockstep so Q-values are computed in batches. Episode seeds
/// derive from `(eval_seed, tag, index)`, making the result a pure function
/// of its arguments.
pub fn evaluate<E: Environment + Clone>(
    net: &QNetwork<f32>,
    proto: &E,
    episodes: u32,
    eval_seed: u64,
    tag: &str,
) -> EvalOutcome {
    let mut envs: Vec<E> = (0..episodes)
        .map(|i| {
            let mut e = proto.clone();
            e.reset(derive_seed(eval_seed, &format!("{tag}/{i}")));
            e
        })
        .collect();
    let mut done = vec![false; envs.len()];
    let mut tally = EvalOutcome { episodes, successes: 0, collisions: 0, timeouts: 0 };
    loop {
        let alive: Vec<usize> = (0..envs.len()).filter(|&i| !done[i]).collect();
        if alive.is_empty() {
            break;
        }
        let mut x = Array4::zeros((alive.len(), CHANNELS, ROWS, COLS));
        for (b, &i) in alive.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(&envs[i].observe());
        }
        let q = net.forward(&x);
        for (b, &i) in alive.iter().enumerate() {
            let step = envs[i].act(argmax_action(q.row(b)));
            if let Some(outcome) = step.outcome {
                done[i] = true;
                match outcome {
                    crate::env::Outcome::Success => tally.successes += 1,
                    crate::env::Outcome::Collision => tally.collisions += 1,
                    crate::env::Outcome::Timeout => tally.timeouts += 1,
                }
            }
        }
    }
    tally
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct CurvePoint {
    pub iteration: u32,
    pub episodes: u32,
    pub train_loss: f32,
    pub eval_success_rate: f64,
    pub eval_collision_rate: f64,
    pub eval_timeout_rate: f64,
    /// Wall-clock since training began. In-memory profiling aid only:
    /// excluded from every serialized form so reruns with equal seeds
    /// produce byte-identical artifacts.
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub const CSV_HEADER: &'static str =
        "iteration,episodes,train_loss,eval_success_rate,eval_collision_rate,eval_timeout_rate";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.iteration,
                p.episodes,
                p.train_loss,
                p.eval_success_rate,
                p.eval_collision_rate,
                p.eval_timeout_rate
            ));
        }
        s
    }

    /// Success-rate advantage over `baseline` at the first evaluation
    /// checkpoint (before any gradient step of either run).
    pub fn jumpstart_vs(&self, baseline: &LearningCurve) -> f64 {
        self.points[0].eval_success_rate - baseline.points[0].eval_success_rate
    }

    /// Mean success rate over the final 20% of checkpoints.
    pub fn asymptote(&self) -> f64 {
        let n = self.points.len();
        let k = (n as f64 * 0.2).ceil().max(1.0) as usize;
        self.points[n - k..].iter().map(|p| p.eval_success_rate).sum::<f64>() / k as f64
    }

    /// Iteration of the first checkpoint whose success rate reaches
    /// `threshold`, if any does.
    pub fn first_reaching(&self, threshold: f64) -> Option<u32> {
        self.points.iter().find(|p| p.eval_success_rate >= threshold).map(|p| p.iteration)
    }
}

pub struct TrainOutput {
    pub net: QNetwork<f32>,
    pub opt: RmsProp<f32>,
    /// One curve per evaluation environment, in input order.
    pub curves: Vec<LearningCurve>,
    pub episodes: u32,
    /// Gradient steps skipped because of non-finite gradients.
    pub skipped_steps: u32,
}

/// Trains `init` on `env` for `cfg.iterations` gradient steps, interleaving
/// one episode of collection with one step per collected decision. The
/// network is evaluated greedily on every environment in `eval_protos` at
/// iteration 0, every `eval_every` steps, and at the final iteration.
///
/// Everything is driven by `cfg.seed`/`cfg.eval_seed`: rerunning with equal
/// configs reproduces the output exactly (wall-clock fields aside).
pub fn train<E: Environment + Clone>(
    env: &mut E,
    eval_protos: &[(&str, E)],
    init: QNetwork<f32>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut net = init;
    let mut opt = RmsProp::standard();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-rng"));
    let started = Instant::now();
    let mut curves = vec![LearningCurve::default(); eval_protos.len()];
    let mut episodes = 0u32;
    let mut iteration = 0u32;
    let mut last_loss = f32::NAN;
    let mut skipped = 0u32;

    record_point(&mut curves, eval_protos, &net, cfg, 0, 0, last_loss, started);

    'outer: while iteration < cfg.iterations {
        let ep_seed = derive_seed(cfg.seed, &format!("episode/{episodes}"));
        let episode = run_episode(env, ep_seed, |state| {
            select_action(&net, state, cfg.epsilon, &mut rng)
        });
        let collected = episode.decisions.len();
        ingest_trajectory(&mut buffer, &episode, cfg.gamma);
        episodes += 1;
        if buffer.len() < cfg.warmup {
            continue;
        }
        for _ in 0..collected {
            if iteration >= cfg.iterations {
                break 'outer;
            }
            match train_step(&mut net, &mut opt, &buffer, cfg.batch, &mut rng) {
                Ok(loss) => last_loss = loss,
                Err(TrainError::BufferTooSmall { .. }) => break,
                Err(TrainError::NonFinite(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
            iteration += 1;
            if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
                record_point(&mut curves, eval_protos, &net, cfg, iteration, episodes, last_loss, started);
            }
        }
    }
    Ok(TrainOutput { net, opt, curves, episodes, skipped_steps: skipped })
}

#[allow(clippy::too_many_arguments)]
fn record_point<E: Environment + Clone>(
    curves: &mut [LearningCurve],
    eval_protos: &[(&str, E)],
    net: &QNetwork<f32>,
    cfg: &TrainConfig,
    iteration: u32,
    episodes: u32,
    train_loss: f32,
    started: Instant,
) {
    for (k, (tag, proto)) in eval_protos.iter().enumerate() {
        let o = evaluate(net, proto, cfg.eval_episodes, cfg.eval_seed, &format!("{tag}/{iteration}"));
        curves[k].points.push(CurvePoint {
            iteration,
            episodes,
            train_loss,
            eval_success_rate: o.success_rate(),
            eval_collision_rate: o.collision_rate(),
            eval_timeout_rate: o.timeout_rate(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
}
