//! Transfer experiments between intersection tasks: copying a trained
//! network to a new task unchanged, fine-tuning it there against a
//! seed-matched scratch baseline, and sending the fine-tuned network back to
//! its original task to measure what it forgot.
//!
//! Everything derives from one master seed, keyed by protocol and task
//! *names* so results are stable under task-list reordering. All networks
//! evaluated on a given task share that task's evaluation episode stream,
//! which makes cross-source comparisons paired rather than independent.

use crate::checkpoint::save_checkpoint;
use crate::net::QNetwork;
use crate::rl::{
    evaluate, train, EvalOutcome, InvalidConfig, LearningCurve, TrainConfig, TrainError,
};
use crate::scenario::{builtin, ScenarioId};
use crate::sim::SimEnv;
use crate::stats::{binomial_se, derive_seed, wilson_interval};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    DirectCopy,
    FineTune,
    ReverseTransfer,
    Scratch,
}

impl Protocol {
    pub const ALL: [Protocol; 4] =
        [Protocol::DirectCopy, Protocol::FineTune, Protocol::ReverseTransfer, Protocol::Scratch];

    /// Stem of this protocol's CSV file.
    pub fn file_stem(self) -> &'static str {
        match self {
            Protocol::DirectCopy => "direct_copy",
            Protocol::FineTune => "fine_tune",
            Protocol::ReverseTransfer => "reverse_transfer",
            Protocol::Scratch => "scratch",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Protocol, String> {
        match s.to_ascii_lowercase().as_str() {
            "direct_copy" | "direct-copy" | "direct" => Ok(Protocol::DirectCopy),
            "fine_tune" | "fine-tune" | "finetune" => Ok(Protocol::FineTune),
            "reverse_transfer" | "reverse-transfer" | "reverse" => Ok(Protocol::ReverseTransfer),
            "scratch" => Ok(Protocol::Scratch),
            other => Err(format!(
                "unknown protocol '{other}' (expected direct-copy, fine-tune, reverse-transfer, or scratch)"
            )),
        }
    }
}

/// Training budgets in gradient steps, before scaling. `scale` shrinks all
/// of them uniformly so the full matrix fits on a desktop; the reported
/// trends are orderings and signs, which survive scaling.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Budgets {
    pub direct: u32,
    pub pretrain: u32,
    pub finetune: u32,
    pub scale: f64,
}

impl Default for Budgets {
    fn default() -> Budgets {
        Budgets { direct: 25_000, pretrain: 10_000, finetune: 25_000, scale: 0.4 }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        for (field, v) in [
            ("budgets.direct", self.direct),
            ("budgets.pretrain", self.pretrain),
            ("budgets.finetune", self.finetune),
        ] {
            if v == 0 {
                return Err(InvalidConfig { field, reason: "must be >= 1".into() });
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(InvalidConfig {
                field: "budgets.scale",
                reason: format!("{} not a positive finite number", self.scale),
            });
        }
        Ok(())
    }

    fn apply(&self, n: u32) -> u32 {
        ((n as f64) * self.scale).round().max(1.0) as u32
    }

    pub fn direct_steps(&self) -> u32 {
        self.apply(self.direct)
    }

    pub fn pretrain_steps(&self) -> u32 {
        self.apply(self.pretrain)
    }

    pub fn finetune_steps(&self) -> u32 {
        self.apply(self.finetune)
    }
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub tasks: Vec<ScenarioId>,
    pub protocols: Vec<Protocol>,
    pub budgets: Budgets,
    pub master_seed: u64,
    /// Episodes for each final (reported) evaluation.
    pub final_episodes: u32,
    /// Base settings for every training run; `iterations`, `seed` and
    /// `eval_seed` are overridden per cell.
    pub template: TrainConfig,
}

impl Default for MatrixConfig {
    fn default() -> MatrixConfig {
        MatrixConfig {
            tasks: ScenarioId::ALL.to_vec(),
            protocols: Protocol::ALL.to_vec(),
            budgets: Budgets::default(),
            master_seed: 0,
            final_episodes: 500,
            template: TrainConfig::default(),
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        if self.tasks.len() < 2 {
            return Err(InvalidConfig {
                field: "tasks",
                reason: format!("need at least 2, got {}", self.tasks.len()),
            });
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(a) {
                return Err(InvalidConfig {
                    field: "tasks",
                    reason: format!("duplicate task '{}'", a.name()),
                });
            }
        }
        if self.protocols.is_empty() {
            return Err(InvalidConfig { field: "protocols", reason: "need at least 1".into() });
        }
        if self.final_episodes == 0 {
            return Err(InvalidConfig { field: "final_episodes", reason: "must be >= 1".into() });
        }
        self.budgets.validate()?;
        self.template.validate()
    }

    /// Every network evaluated on `task` draws episodes from this stream, so
    /// rates on the same task are directly comparable.
    pub fn eval_seed_for(&self, task: ScenarioId) -> u64 {
        derive_seed(self.master_seed, &format!("eval/{}", task.name()))
    }

    fn train_cfg(&self, iterations: u32, seed_key: &str, target: ScenarioId) -> TrainConfig {
        TrainConfig {
            iterations,
            seed: derive_seed(self.master_seed, seed_key),
            eval_seed: self.eval_seed_for(target),
            ..self.template.clone()
        }
    }

    fn init_net(&self, key: &str) -> QNetwork<f32> {
        QNetwork::new(derive_seed(self.master_seed, key))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferReport {
    pub protocol: Protocol,
    pub source: String,
    pub target: String,
    pub episodes: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Success-rate advantage over the scratch baseline at the first
    /// evaluation checkpoint. Curve-bearing protocols only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jumpstart: Option<f64>,
    /// Mean success over the final 20% of curve checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asymptote: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<LearningCurve>,
}

impl TransferReport {
    fn from_eval(
        protocol: Protocol,
        source: &str,
        target: &str,
        o: EvalOutcome,
        curve: Option<LearningCurve>,
        jumpstart: Option<f64>,
    ) -> TransferReport {
        let (ci_low, success_rate, ci_high) = wilson_interval(o.successes, o.episodes);
        TransferReport {
            protocol,
            source: source.to_string(),
            target: target.to_string(),
            episodes: o.episodes,
            successes: o.successes,
            success_rate,
            ci_low,
            ci_high,
            jumpstart,
            asymptote: curve.as_ref().map(LearningCurve::asymptote),
            curve,
        }
    }

    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.source,
            self.target,
            self.success_rate,
            self.ci_low,
            self.ci_high,
            self.episodes,
            opt(self.jumpstart),
            opt(self.asymptote)
        )
    }
}

pub const REPORT_CSV_HEADER: &str =
    "source,target,success_rate,ci_low,ci_high,episodes,jumpstart,asymptote";

fn reports_csv(reports: &[&TransferReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Result of sending a fine-tuned network back to its source task.
/// `returned_rate` is the fine-tuned network, `fresh_rate` a network trained
/// only on the source, `direct_rate` a network trained only on the target,
/// all evaluated on the source task over the same episode stream.
#[derive(Clone, Debug, Serialize)]
pub struct ReverseReport {
    pub source: String,
    pub target: String,
    pub episodes: u32,
    pub returned_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fresh_rate: f64,
    pub direct_rate: f64,
    /// Whether fresh >= returned >= direct held for this pair.
    pub expected_order: bool,
}

impl ReverseReport {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},,",
            self.source, self.target, self.returned_rate, self.ci_low, self.ci_high, self.episodes
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellFailure {
    pub protocol: Protocol,
    pub source: String,
    pub target: String,
    pub error: String,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReverseMeans {
    pub returned: f64,
    pub fresh: f64,
    pub direct: f64,
}

#[derive(Debug, Serialize)]
pub struct MatrixSummary {
    pub master_seed: u64,
    pub budgets: Budgets,
    pub scaled_steps: [u32; 3],
    pub tasks: Vec<String>,
    pub protocols: Vec<String>,
    pub final_episodes: u32,
    pub reports: Vec<TransferReport>,
    pub reverse: Vec<ReverseReport>,
    pub failures: Vec<CellFailure>,
    /// Mean fine-tune jumpstart over source != target cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_offdiag_jumpstart: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reverse: Option<ReverseMeans>,
}

/// Audits the direct-copy block of a finished matrix: on every task, no
/// mismatched source may beat the matched network beyond two standard errors
/// of the rate difference, and the two-lane task must transfer to the
/// multi-lane one better than any single-lane source does. Applies only when
/// direct-copy cells are present; returns one line per violation.
pub fn check_diagonal_dominance(s: &MatrixSummary) -> Vec<String> {
    let mut fails = Vec::new();
    let direct: Vec<&TransferReport> =
        s.reports.iter().filter(|r| r.protocol == Protocol::DirectCopy).collect();
    let cell = |src: &str, tgt: &str| direct.iter().find(|r| r.source == src && r.target == tgt);
    if direct.is_empty() {
        return fails;
    }
    for tgt in &s.tasks {
        let Some(diag) = cell(tgt, tgt) else { continue };
        let se_d = binomial_se(diag.success_rate, diag.episodes);
        for src in &s.tasks {
            if src == tgt {
                continue;
            }
            let Some(off) = cell(src, tgt) else { continue };
            let band = 2.0 * (se_d.powi(2) + binomial_se(off.success_rate, off.episodes).powi(2)).sqrt();
            if off.success_rate > diag.success_rate + band {
                fails.push(format!(
                    "on {tgt}, source {src} scores {:.3}, beating the matched network's {:.3} beyond the 2-SE band {band:.3}",
                    off.success_rate, diag.success_rate
                ));
            }
        }
    }
    if let Some(two_lane) = cell("left2", "challenge") {
        for src in ["right", "left", "forward"] {
            if let Some(single) = cell(src, "challenge") {
                if single.success_rate >= two_lane.success_rate {
                    fails.push(format!(
                        "on challenge, single-lane source {src} scores {:.3}, not below left2's {:.3}",
                        single.success_rate, two_lane.success_rate
                    ));
                }
            }
        }
    }
    fails
}

/// Audits the fine-tune block: the jumpstart (success-rate lead over a
/// seed-matched scratch run at the first evaluation checkpoint) must be
/// positive in at least three quarters of the cross-task pairs.
pub fn check_jumpstart(s: &MatrixSummary) -> Vec<String> {
    let offdiag_jumps: Vec<f64> = s
        .reports
        .iter()
        .filter(|r| r.protocol == Protocol::FineTune && r.source != r.target)
        .filter_map(|r| r.jumpstart)
        .collect();
    let mut fails = Vec::new();
    if !offdiag_jumps.is_empty() {
        let positive = offdiag_jumps.iter().filter(|&&j| j > 0.0).count();
        let need = (offdiag_jumps.len() as f64 * 0.75).ceil() as usize;
        if positive < need {
            fails.push(format!(
                "fine-tuning jumpstart positive in only {positive} of {} cross-task pairs, need {need}",
                offdiag_jumps.len()
            ));
        }
    }
    fails
}

/// Audits the reverse-transfer block: returning a fine-tuned network to its
/// source must score strictly between a fresh source network and a
/// target-only network on the aggregate means.
pub fn check_reverse_ordering(s: &MatrixSummary) -> Vec<String> {
    let mut fails = Vec::new();
    if let Some(m) = &s.mean_reverse {
        if !(m.returned < m.fresh) {
            fails.push(format!(
                "mean returned rate {:.3} not below the mean fresh-source rate {:.3}",
                m.returned, m.fresh
            ));
        }
        if !(m.returned > m.direct) {
            fails.push(format!(
                "mean returned rate {:.3} not above the mean target-only rate {:.3}",
                m.returned, m.direct
            ));
        }
    }
    fails
}

/// Audits a finished matrix against the orderings the experiments are
/// expected to show; each check applies only when its protocol ran. Returns
/// one line per violated expectation, so empty means consistent.
///
/// The expectations, in order: no cell failed, then everything
/// [`check_diagonal_dominance`], [`check_jumpstart`], and
/// [`check_reverse_ordering`] enforce.
pub fn check_matrix(s: &MatrixSummary) -> Vec<String> {
    let mut fails = Vec::new();
    for f in &s.failures {
        fails.push(format!("{} {}->{} failed: {}", f.protocol, f.source, f.target, f.error));
    }
    fails.extend(check_diagonal_dominance(s));
    fails.extend(check_jumpstart(s));
    fails.extend(check_reverse_ordering(s));
    fails
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(transparent)]
    Config(#[from] InvalidConfig),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("saving checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: crate::checkpoint::CheckpointError },
}

fn write_file(path: &Path, contents: &str) -> Result<(), MatrixError> {
    fs::write(path, contents).map_err(|source| MatrixError::Io { path: path.to_path_buf(), source })
}

/// Greedy evaluation of a network on a task it was not trained for (or the
/// matrix diagonal, when `source == target`). No parameter updates happen.
pub fn direct_copy_eval(
    net: &QNetwork<f32>,
    source: ScenarioId,
    target: ScenarioId,
    episodes: u32,
    eval_seed: u64,
) -> TransferReport {
    let o = evaluate(net, &SimEnv::new(builtin(target)), episodes, eval_seed, "final");
    TransferReport::from_eval(Protocol::DirectCopy, source.name(), target.name(), o, None, None)
}

/// Evaluates three networks on the source task over one episode stream:
/// the network fine-tuned away and brought back, a network trained only on
/// the source, and a network trained only on the target.
pub fn reverse_transfer_eval(
    source: ScenarioId,
    target: ScenarioId,
    finetuned: &QNetwork<f32>,
    fresh_source: &QNetwork<f32>,
    target_only: &QNetwork<f32>,
    episodes: u32,
    eval_seed: u64,
) -> ReverseReport {
    let env = SimEnv::new(builtin(source));
    let returned = evaluate(finetuned, &env, episodes, eval_seed, "final");
    let fresh = evaluate(fresh_source, &env, episodes, eval_seed, "final");
    let direct = evaluate(target_only, &env, episodes, eval_seed, "final");
    let (ci_low, returned_rate, ci_high) = wilson_interval(returned.successes, returned.episodes);
    let fresh_rate = fresh.success_rate();
    let direct_rate = direct.success_rate();
    ReverseReport {
        source: source.name().to_string(),
        target: target.name().to_string(),
        episodes,
        returned_rate,
        ci_low,
        ci_high,
        fresh_rate,
        direct_rate,
        expected_order: fresh_rate >= returned_rate && returned_rate >= direct_rate,
    }
}

fn train_plain(
    cfg: &MatrixConfig,
    task: ScenarioId,
    iterations: u32,
    seed_key: &str,
    init: QNetwork<f32>,
) -> Result<QNetwork<f32>, TrainError> {
    let mut env = SimEnv::new(builtin(task));
    let no_evals: &[(&str, SimEnv)] = &[];
    let tc = cfg.train_cfg(iterations, seed_key, task);
    Ok(train(&mut env, no_evals, init, &tc)?.net)
}

fn train_with_curve(
    cfg: &MatrixConfig,
    task: ScenarioId,
    iterations: u32,
    seed_key: &str,
    init: QNetwork<f32>,
) -> Result<(QNetwork<f32>, LearningCurve), TrainError> {
    let mut env = SimEnv::new(builtin(task));
    let evals = [("curve", SimEnv::new(builtin(task)))];
    let tc = cfg.train_cfg(iterations, seed_key, task);
    let mut out = train(&mut env, &evals, init, &tc)?;
    Ok((out.net, out.curves.pop().unwrap()))
}

fn final_eval(cfg: &MatrixConfig, net: &QNetwork<f32>, task: ScenarioId) -> EvalOutcome {
    evaluate(
        net,
        &SimEnv::new(builtin(task)),
        cfg.final_episodes,
        cfg.eval_seed_for(task),
        "final",
    )
}

pub struct FineTuneOutcome {
    pub net: QNetwork<f32>,
    pub report: TransferReport,
    pub scratch: TransferReport,
}

/// Pretrains on `source`, fine-tunes on `target`, and trains a fresh
/// scratch baseline on `target`; both curves share the evaluation schedule
/// and episode stream, so their difference at the first checkpoint is the
/// jumpstart.
pub fn fine_tune(
    cfg: &MatrixConfig,
    source: ScenarioId,
    target: ScenarioId,
) -> Result<FineTuneOutcome, TrainError> {
    let s = source.name();
    let t = target.name();
    let pre = train_plain(
        cfg,
        source,
        cfg.budgets.pretrain_steps(),
        &format!("train/pretrain/{s}"),
        cfg.init_net(&format!("init/pretrain/{s}")),
    )?;
    let (scratch_net, scratch_curve) = train_with_curve(
        cfg,
        target,
        cfg.budgets.finetune_steps(),
        &format!("train/scratch/{t}"),
        cfg.init_net(&format!("init/scratch/{t}")),
    )?;
    let (net, curve) = train_with_curve(
        cfg,
        target,
        cfg.budgets.finetune_steps(),
        &format!("train/finetune/{s}/{t}"),
        pre,
    )?;
    let jumpstart = curve.jumpstart_vs(&scratch_curve);
    let report = TransferReport::from_eval(
        Protocol::FineTune,
        s,
        t,
        final_eval(cfg, &net, target),
        Some(curve),
        Some(jumpstart),
    );
    let scratch = TransferReport::from_eval(
        Protocol::Scratch,
        t,
        t,
        final_eval(cfg, &scratch_net, target),
        Some(scratch_curve),
        None,
    );
    Ok(FineTuneOutcome { net, report, scratch })
}

/// Runs the requested protocols over every task pair, writing one CSV per
/// protocol, per-run learning curves, checkpoints, and a JSON summary into
/// `out_dir`. Cells that fail are recorded in the summary and the run
/// continues. Rerunning with the same config reproduces every output file
/// byte for byte.
pub fn run_matrix(cfg: &MatrixConfig, out_dir: &Path) -> Result<MatrixSummary, MatrixError> {
    cfg.validate()?;
    let ckpt_dir = out_dir.join("checkpoints");
    let curve_dir = out_dir.join("curves");
    for d in [out_dir, &ckpt_dir, &curve_dir] {
        fs::create_dir_all(d).map_err(|source| MatrixError::Io { path: d.to_path_buf(), source })?;
    }

    let tasks = &cfg.tasks;
    let n = tasks.len();
    let has = |p: Protocol| cfg.protocols.contains(&p);
    let need_direct = has(Protocol::DirectCopy) || has(Protocol::ReverseTransfer);
    let need_finetune = has(Protocol::FineTune) || has(Protocol::ReverseTransfer);
    let need_scratch = has(Protocol::Scratch) || has(Protocol::FineTune);
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|s| (0..n).map(move |t| (s, t))).collect();

    let save_net = |net: &QNetwork<f32>, name: String| -> Result<(), MatrixError> {
        let path = ckpt_dir.join(name);
        save_checkpoint(&net.params, None, &path)
            .map_err(|source| MatrixError::Checkpoint { path, source })
    };

    // Networks trained on a single task at the direct budget. These are the
    // copy sources, and reverse transfer's "fresh" and "target-only" nets.
    let direct_nets: Vec<Result<QNetwork<f32>, String>> = if need_direct {
        tasks
            .par_iter()
            .map(|&t| {
                let name = t.name();
                train_plain(
                    cfg,
                    t,
                    cfg.budgets.direct_steps(),
                    &format!("train/direct/{name}"),
                    cfg.init_net(&format!("init/direct/{name}")),
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    } else {
        Vec::new()
    };
    for (i, r) in direct_nets.iter().enumerate() {
        if let Ok(net) = r {
            save_net(net, format!("direct_{}.ckpt", tasks[i].name()))?;
        }
    }

    let direct_cells: Vec<Result<TransferReport, String>> = if need_direct {
        pairs
            .par_iter()
            .map(|&(si, ti)| match &direct_nets[si] {
                Ok(net) => Ok(direct_copy_eval(
                    net,
                    tasks[si],
                    tasks[ti],
                    cfg.final_episodes,
                    cfg.eval_seed_for(tasks[ti]),
                )),
                Err(e) => Err(format!("source training failed: {e}")),
            })
            .collect()
    } else {
        Vec::new()
    };

    let pretrain_nets: Vec<Result<QNetwork<f32>, String>> = if need_finetune {
        tasks
            .par_iter()
            .map(|&t| {
                let name = t.name();
                train_plain(
                    cfg,
                    t,
                    cfg.budgets.pretrain_steps(),
                    &format!("train/pretrain/{name}"),
                    cfg.init_net(&format!("init/pretrain/{name}")),
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    } else {
        Vec::new()
    };
    for (i, r) in pretrain_nets.iter().enumerate() {
        if let Ok(net) = r {
            save_net(net, format!("pretrain_{}.ckpt", tasks[i].name()))?;
        }
    }

    let scratch_runs: Vec<Result<(QNetwork<f32>, LearningCurve), String>> = if need_scratch {
        tasks
            .par_iter()
            .map(|&t| {
                let name = t.name();
                train_with_curve(
                    cfg,
                    t,
                    cfg.budgets.finetune_steps(),
                    &format!("train/scratch/{name}"),
                    cfg.init_net(&format!("init/scratch/{name}")),
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    } else {
        Vec::new()
    };
    for (i, r) in scratch_runs.iter().enumerate() {
        if let Ok((net, _)) = r {
            save_net(net, format!("scratch_{}.ckpt", tasks[i].name()))?;
        }
    }

    let finetune_runs: Vec<Result<(QNetwork<f32>, LearningCurve), String>> = if need_finetune {
        pairs
            .par_iter()
            .map(|&(si, ti)| {
                let pre = pretrain_nets[si]
                    .as_ref()
                    .map_err(|e| format!("pretraining failed: {e}"))?;
                train_with_curve(
                    cfg,
                    tasks[ti],
                    cfg.budgets.finetune_steps(),
                    &format!("train/finetune/{}/{}", tasks[si].name(), tasks[ti].name()),
                    pre.clone(),
                )
                .map_err(|e| e.to_string())
            })
            .collect()
    } else {
        Vec::new()
    };
    for (k, r) in finetune_runs.iter().enumerate() {
        if let Ok((net, _)) = r {
            let (si, ti) = pairs[k];
            save_net(net, format!("finetune_{}_to_{}.ckpt", tasks[si].name(), tasks[ti].name()))?;
        }
    }

    // Reported rates for fine-tune and scratch cells.
    let finetune_cells: Vec<Result<TransferReport, String>> = if need_finetune {
        pairs
            .par_iter()
            .enumerate()
            .map(|(k, &(si, ti))| {
                let (net, curve) = finetune_runs[k].as_ref().map_err(|e| e.clone())?;
                let jumpstart = scratch_runs
                    .get(ti)
                    .and_then(|r| r.as_ref().ok())
                    .map(|(_, sc)| curve.jumpstart_vs(sc));
                Ok(TransferReport::from_eval(
                    Protocol::FineTune,
                    tasks[si].name(),
                    tasks[ti].name(),
                    final_eval(cfg, net, tasks[ti]),
                    Some(curve.clone()),
                    jumpstart,
                ))
            })
            .collect()
    } else {
        Vec::new()
    };

    let scratch_cells: Vec<Result<TransferReport, String>> = if need_scratch {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let (net, curve) = scratch_runs[i].as_ref().map_err(|e| e.clone())?;
                Ok(TransferReport::from_eval(
                    Protocol::Scratch,
                    t.name(),
                    t.name(),
                    final_eval(cfg, net, t),
                    Some(curve.clone()),
                    None,
                ))
            })
            .collect()
    } else {
        Vec::new()
    };

    // Reverse transfer reuses the direct rates: "fresh" is the source
    // diagonal, "direct" is the target-trained net's rate on the source.
    let offdiag: Vec<(usize, usize)> = pairs.iter().copied().filter(|&(s, t)| s != t).collect();
    let reverse_cells: Vec<Result<ReverseReport, String>> = if has(Protocol::ReverseTransfer) {
        offdiag
            .par_iter()
            .map(|&(si, ti)| {
                let k = si * n + ti;
                let (net, _) = finetune_runs[k]
                    .as_ref()
                    .map_err(|e| format!("fine-tune failed: {e}"))?;
                let fresh = direct_cells[si * n + si]
                    .as_ref()
                    .map_err(|e| format!("fresh source cell failed: {e}"))?;
                let direct = direct_cells[ti * n + si]
                    .as_ref()
                    .map_err(|e| format!("target-only cell failed: {e}"))?;
                let o = evaluate(
                    net,
                    &SimEnv::new(builtin(tasks[si])),
                    cfg.final_episodes,
                    cfg.eval_seed_for(tasks[si]),
                    "final",
                );
                let (ci_low, returned_rate, ci_high) = wilson_interval(o.successes, o.episodes);
                Ok(ReverseReport {
                    source: tasks[si].name().to_string(),
                    target: tasks[ti].name().to_string(),
                    episodes: o.episodes,
                    returned_rate,
                    ci_low,
                    ci_high,
                    fresh_rate: fresh.success_rate,
                    direct_rate: direct.success_rate,
                    expected_order: fresh.success_rate >= returned_rate
                        && returned_rate >= direct.success_rate,
                })
            })
            .collect()
    } else {
        Vec::new()
    };

    // Assemble requested outputs; failed cells become summary entries.
    let mut reports: Vec<TransferReport> = Vec::new();
    let mut failures: Vec<CellFailure> = Vec::new();
    fn collect(
        cells: &[Result<TransferReport, String>],
        protocol: Protocol,
        names: &dyn Fn(usize) -> (String, String),
        reports: &mut Vec<TransferReport>,
        failures: &mut Vec<CellFailure>,
    ) {
        for (k, c) in cells.iter().enumerate() {
            match c {
                Ok(r) => reports.push(r.clone()),
                Err(e) => {
                    let (source, target) = names(k);
                    failures.push(CellFailure { protocol, source, target, error: e.clone() });
                }
            }
        }
    }
    let pair_names = |k: usize| {
        let (si, ti) = pairs[k];
        (tasks[si].name().to_string(), tasks[ti].name().to_string())
    };
    let task_names = |i: usize| (tasks[i].name().to_string(), tasks[i].name().to_string());

    if has(Protocol::DirectCopy) {
        collect(&direct_cells, Protocol::DirectCopy, &pair_names, &mut reports, &mut failures);
    }
    if has(Protocol::FineTune) {
        collect(&finetune_cells, Protocol::FineTune, &pair_names, &mut reports, &mut failures);
    }
    if need_scratch {
        collect(&scratch_cells, Protocol::Scratch, &task_names, &mut reports, &mut failures);
    }
    for (k, c) in reverse_cells.iter().enumerate() {
        if let Err(e) = c {
            let (si, ti) = offdiag[k];
            failures.push(CellFailure {
                protocol: Protocol::ReverseTransfer,
                source: tasks[si].name().to_string(),
                target: tasks[ti].name().to_string(),
                error: e.clone(),
            });
        }
    }
    let reverse: Vec<ReverseReport> =
        reverse_cells.iter().filter_map(|c| c.as_ref().ok().cloned()).collect();

    // Protocol CSVs for everything that ran.
    if has(Protocol::DirectCopy) {
        let rows: Vec<&TransferReport> =
            reports.iter().filter(|r| r.protocol == Protocol::DirectCopy).collect();
        write_file(&out_dir.join("direct_copy.csv"), &reports_csv(&rows))?;
    }
    if has(Protocol::FineTune) {
        let rows: Vec<&TransferReport> =
            reports.iter().filter(|r| r.protocol == Protocol::FineTune).collect();
        write_file(&out_dir.join("fine_tune.csv"), &reports_csv(&rows))?;
    }
    if need_scratch {
        let rows: Vec<&TransferReport> =
            reports.iter().filter(|r| r.protocol == Protocol::Scratch).collect();
        write_file(&out_dir.join("scratch.csv"), &reports_csv(&rows))?;
    }
    if has(Protocol::ReverseTransfer) {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &reverse {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        write_file(&out_dir.join("reverse_transfer.csv"), &s)?;
    }
    for r in &reports {
        if let Some(curve) = &r.curve {
            let name = match r.protocol {
                Protocol::FineTune => format!("fine_tune_{}_to_{}.csv", r.source, r.target),
                _ => format!("{}_{}.csv", r.protocol.file_stem(), r.target),
            };
            write_file(&curve_dir.join(name), &curve.to_csv())?;
        }
    }

    let offdiag_jumps: Vec<f64> = reports
        .iter()
        .filter(|r| r.protocol == Protocol::FineTune && r.source != r.target)
        .filter_map(|r| r.jumpstart)
        .collect();
    let mean_offdiag_jumpstart = if offdiag_jumps.is_empty() {
        None
    } else {
        Some(offdiag_jumps.iter().sum::<f64>() / offdiag_jumps.len() as f64)
    };
    let mean_reverse = if reverse.is_empty() {
        None
    } else {
        let m = reverse.len() as f64;
        Some(ReverseMeans {
            returned: reverse.iter().map(|r| r.returned_rate).sum::<f64>() / m,
            fresh: reverse.iter().map(|r| r.fresh_rate).sum::<f64>() / m,
            direct: reverse.iter().map(|r| r.direct_rate).sum::<f64>() / m,
        })
    };

    let summary = MatrixSummary {
        master_seed: cfg.master_seed,
        budgets: cfg.budgets,
        scaled_steps: [
            cfg.budgets.direct_steps(),
            cfg.budgets.pretrain_steps(),
            cfg.budgets.finetune_steps(),
        ],
        tasks: tasks.iter().map(|t| t.name().to_string()).collect(),
        protocols: cfg.protocols.iter().map(Protocol::to_string).collect(),
        final_episodes: cfg.final_episodes,
        reports,
        reverse,
        failures,
        mean_offdiag_jumpstart,
        mean_reverse,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_scale_with_rounding_and_floor() {
        let b = Budgets::default();
        assert_eq!(b.direct_steps(), 10_000);
        assert_eq!(b.pretrain_steps(), 4_000);
        assert_eq!(b.finetune_steps(), 10_000);
        let b = Budgets { direct: 25_000, pretrain: 5, finetune: 3, scale: 0.5 };
        assert_eq!(b.direct_steps(), 12_500);
        assert_eq!(b.pretrain_steps(), 3);
        assert_eq!(b.finetune_steps(), 2);
        let b = Budgets { scale: 1e-9, ..Budgets::default() };
        assert_eq!(b.direct_steps(), 1);
    }

    #[test]
    fn seeds_key_on_names_not_positions() {
        let a = MatrixConfig {
            tasks: vec![ScenarioId::Left, ScenarioId::Right],
            ..MatrixConfig::default()
        };
        let b = MatrixConfig {
            tasks: vec![ScenarioId::Right, ScenarioId::Left],
            ..MatrixConfig::default()
        };
        assert_eq!(a.eval_seed_for(ScenarioId::Left), b.eval_seed_for(ScenarioId::Left));
        let ca = a.train_cfg(10, "train/direct/left", ScenarioId::Left);
        let cb = b.train_cfg(10, "train/direct/left", ScenarioId::Left);
        assert_eq!(ca.seed, cb.seed);
        assert_eq!(ca.eval_seed, cb.eval_seed);
        let other = MatrixConfig { master_seed: 99, ..MatrixConfig::default() };
        assert_ne!(a.eval_seed_for(ScenarioId::Left), other.eval_seed_for(ScenarioId::Left));
    }

    #[test]
    fn invalid_matrix_configs_name_the_field() {
        let cfg = MatrixConfig { tasks: vec![ScenarioId::Left], ..MatrixConfig::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "tasks");
        let cfg = MatrixConfig {
            tasks: vec![ScenarioId::Left, ScenarioId::Left],
            ..MatrixConfig::default()
        };
        assert!(cfg.validate().unwrap_err().reason.contains("duplicate"));
        let cfg = MatrixConfig { protocols: vec![], ..MatrixConfig::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "protocols");
        let cfg = MatrixConfig {
            budgets: Budgets { scale: 0.0, ..Budgets::default() },
            ..MatrixConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "budgets.scale");
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert_eq!("fine-tune".parse::<Protocol>().unwrap(), Protocol::FineTune);
        assert!("warp".parse::<Protocol>().is_err());
    }

    #[test]
    fn direct_copy_report_shape() {
        let net = QNetwork::<f32>::new(31);
        let r = direct_copy_eval(&net, ScenarioId::Left, ScenarioId::Forward, 5, 32);
        assert_eq!(r.protocol, Protocol::DirectCopy);
        assert_eq!((r.source.as_str(), r.target.as_str()), ("left", "forward"));
        assert_eq!(r.episodes, 5);
        assert!(r.ci_low <= r.success_rate && r.success_rate <= r.ci_high);
        assert!(r.jumpstart.is_none() && r.asymptote.is_none() && r.curve.is_none());
    }

    #[test]
    fn reverse_eval_with_identical_nets_gives_identical_rates() {
        let a = QNetwork::<f32>::new(33);
        let c = QNetwork::<f32>::new(34);
        let r = reverse_transfer_eval(ScenarioId::Forward, ScenarioId::Left, &a, &a, &c, 8, 35);
        assert_eq!(r.returned_rate, r.fresh_rate);
        assert_eq!(
            r.expected_order,
            r.fresh_rate >= r.returned_rate && r.returned_rate >= r.direct_rate
        );
    }

    #[test]
    fn csv_rows_pin_their_format() {
        let o = EvalOutcome { episodes: 4, successes: 2, collisions: 1, timeouts: 1 };
        let r = TransferReport::from_eval(Protocol::DirectCopy, "left", "right", o, None, None);
        let csv = reports_csv(&[&r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("left,right,0.5,"), "{row}");
        assert!(row.ends_with(",4,,"), "{row}");
    }
}
