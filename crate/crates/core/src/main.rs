//! Command-line entry point. Subcommands share one configuration namespace:
//! values come from built-in defaults, then an optional `--config` file, then
//! flags, in that order of precedence. Every run writes a `manifest.json`
//! next to its outputs pinning the resolved configuration, derived seeds,
//! and content hashes; re-running a manifest's command reproduces its files
//! byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error (including usage), 3 runtime
//! failure, 4 a `--check` or `--min-success` expectation did not hold.

use clap::{Args, Parser, Subcommand};
use junction::checkpoint::{file_sha256, load_checkpoint, save_checkpoint};
use junction::config::{ExperimentConfig, Manifest};
use junction::net::QNetwork;
use junction::recording::{
    check_sim2real, load_recording, save_recording, sim2real_experiment, synthesize_recording,
    Recording, RecordingRun,
};
use junction::rl::{evaluate, train, LearningCurve, TrainConfig};
use junction::scenario::{ScenarioId, ScenarioSpec};
use junction::sim::SimEnv;
use junction::stats::{derive_seed, wilson_interval};
use junction::transfer::{check_matrix, run_matrix};
use serde::Serialize;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "junction",
    version,
    about = "Intersection-handling reinforcement learning laboratory",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Experiment configuration file (TOML, flat keys); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one network on one task; writes checkpoint, curve, manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task with greedy decisions.
    Eval(EvalArgs),
    /// Run the transfer matrix; writes reports, curves, checkpoints.
    Matrix(MatrixArgs),
    /// Recording transfer: train from scratch vs simulator-pretrained.
    Sim2real(Sim2RealArgs),
    /// Synthesize a labeled recording from ego-free traffic.
    SynthRec(SynthRecArgs),
    /// Parse and range-check the configuration, then exit.
    ValidateConfig(ValidateArgs),
}

/// Flag mirrors of the configuration keys. `None` means "not given".
#[derive(Args, Default)]
struct Overrides {
    /// Root seed for all derived randomness.
    #[arg(long, visible_alias = "seed")]
    master_seed: Option<u64>,
    /// Discount factor in (0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    /// Exploration rate in [0, 1].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Experiences per gradient step.
    #[arg(long)]
    batch: Option<usize>,
    /// Gradient steps for `train`.
    #[arg(long)]
    iterations: Option<u32>,
    /// Gradient steps between curve checkpoints.
    #[arg(long)]
    eval_every: Option<u32>,
    /// Episodes per curve checkpoint.
    #[arg(long)]
    eval_episodes: Option<u32>,
    /// Replay buffer capacity.
    #[arg(long)]
    replay_capacity: Option<usize>,
    /// Experiences collected before the first gradient step.
    #[arg(long)]
    warmup: Option<usize>,
    /// Nominal step budget for source-task training.
    #[arg(long)]
    direct_budget: Option<u32>,
    /// Nominal step budget for pretraining before fine-tuning.
    #[arg(long)]
    pretrain_budget: Option<u32>,
    /// Nominal step budget for fine-tuning and scratch baselines.
    #[arg(long)]
    finetune_budget: Option<u32>,
    /// Multiplier on every budget.
    #[arg(long)]
    budget_scale: Option<f64>,
    /// Episodes behind every reported rate.
    #[arg(long)]
    final_episodes: Option<u32>,
    /// Per-second vehicle departure probability per lane.
    #[arg(long)]
    depart_prob: Option<f64>,
    /// Driver imperfection factor in [0, 1].
    #[arg(long)]
    krauss_sigma: Option<f64>,
    #[arg(long)]
    idm_max_accel: Option<f64>,
    #[arg(long)]
    idm_comfort_brake: Option<f64>,
    #[arg(long)]
    idm_hard_brake: Option<f64>,
    #[arg(long)]
    idm_min_gap: Option<f64>,
    #[arg(long)]
    idm_headway: Option<f64>,
    /// Observation window extent behind the ego (m).
    #[arg(long)]
    grid_behind: Option<f64>,
    /// Observation window extent ahead of the ego (m).
    #[arg(long)]
    grid_ahead: Option<f64>,
    /// Observation window half-width (m).
    #[arg(long)]
    grid_half_span: Option<f64>,
    /// Recording capture rate (Hz).
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Recording position noise (m).
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Recording length (s).
    #[arg(long)]
    duration: Option<f64>,
    /// Worker threads for the matrix (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Built-in task name or scenario file.
    #[arg(long)]
    task: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Built-in task name or scenario file.
    #[arg(long)]
    task: Option<String>,
    /// Episodes to run (defaults to final_episodes).
    #[arg(long)]
    episodes: Option<u32>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Exit 4 unless the success rate reaches this value.
    #[arg(long)]
    min_success: Option<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MatrixArgs {
    /// Comma-separated built-in task names.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Comma-separated protocols: direct-copy, fine-tune, reverse-transfer, scratch.
    #[arg(long, visible_alias = "protocol", value_delimiter = ',')]
    protocols: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Exit 4 unless the expected transfer orderings hold.
    #[arg(long)]
    check: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Sim2RealArgs {
    /// Simulator task to pretrain on (and to synthesize recordings from).
    #[arg(long)]
    task: Option<String>,
    /// Existing recording to train on (default: synthesize one).
    #[arg(long, value_name = "FILE", requires = "test_rec")]
    train_rec: Option<PathBuf>,
    /// Existing recording to hold out (default: synthesize one).
    #[arg(long, value_name = "FILE", requires = "train_rec")]
    test_rec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Exit 4 unless the expected pretraining advantage holds.
    #[arg(long)]
    check: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthRecArgs {
    /// Built-in task name or scenario file.
    #[arg(long)]
    task: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    overrides: Overrides,
}

enum CliError {
    /// The configuration or arguments are wrong; nothing was attempted.
    Config(String),
    /// The work itself failed.
    Runtime(String),
    /// The run finished but a checked expectation did not hold.
    Check(Vec<String>),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

fn config_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("configuration error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
                CliError::Check(fails) => {
                    for f in fails {
                        eprintln!("check failed: {f}");
                    }
                }
            }
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(resolve(&cli, &a.overrides)?, a),
        Cmd::Eval(a) => cmd_eval(resolve(&cli, &a.overrides)?, a),
        Cmd::Matrix(a) => cmd_matrix(resolve(&cli, &a.overrides)?, a),
        Cmd::Sim2real(a) => cmd_sim2real(resolve(&cli, &a.overrides)?, a),
        Cmd::SynthRec(a) => cmd_synth_rec(resolve(&cli, &a.overrides)?, a),
        Cmd::ValidateConfig(a) => {
            resolve(&cli, &a.overrides)?;
            println!("configuration is valid");
            Ok(())
        }
    }
}

/// Defaults, then the config file, then flags; validated as a whole.
fn resolve(cli: &Cli, o: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(config_err)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),* $(,)?) => { $( if let Some(v) = o.$f { cfg.$f = v; } )* };
    }
    macro_rules! over_opt {
        ($($f:ident),* $(,)?) => { $( if o.$f.is_some() { cfg.$f = o.$f; } )* };
    }
    over!(
        master_seed, gamma, epsilon, batch, iterations, eval_every, eval_episodes,
        replay_capacity, warmup, direct_budget, pretrain_budget, finetune_budget,
        budget_scale, final_episodes, sample_rate, noise_sigma, duration, jobs,
    );
    over_opt!(
        depart_prob, krauss_sigma, idm_max_accel, idm_comfort_brake, idm_hard_brake,
        idm_min_gap, idm_headway, grid_behind, grid_ahead, grid_half_span,
    );
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Folds the `--task` flag into the config before the manifest snapshots it,
/// so the manifest records the task that actually ran.
fn fold_task(cfg: &mut ExperimentConfig, flag: &Option<String>) {
    if let Some(t) = flag {
        cfg.task = t.clone();
    }
}

/// Loads the configured scenario; a task given as a file path is
/// content-hashed into the manifest's inputs.
fn load_task(cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<ScenarioSpec, CliError> {
    let spec = cfg.scenario(&cfg.task).map_err(config_err)?;
    if ScenarioId::from_str(&cfg.task).is_err() {
        manifest
            .inputs
            .insert(cfg.task.clone(), file_sha256(Path::new(&cfg.task)).map_err(runtime_err)?);
    }
    Ok(spec)
}

fn make_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))
}

fn write_out(dir: &Path, name: &str, text: &str, m: &mut Manifest) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
    hash_output(dir, name, m)
}

fn hash_output(dir: &Path, name: &str, m: &mut Manifest) -> Result<(), CliError> {
    let h = file_sha256(&dir.join(name)).map_err(runtime_err)?;
    m.outputs.insert(name.to_string(), h);
    Ok(())
}

fn finish(m: &Manifest, dir: &Path) -> Result<(), CliError> {
    m.write(dir).map_err(|e| runtime_err(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn cmd_train(mut cfg: ExperimentConfig, a: &TrainArgs) -> Result<(), CliError> {
    fold_task(&mut cfg, &a.task);
    let mut manifest = Manifest::new("train", &cfg);
    let spec = load_task(&cfg, &mut manifest)?;
    let task = cfg.task.clone();
    let seeds = [
        ("init", derive_seed(cfg.master_seed, &format!("init/cli/{}", spec.name))),
        ("train", derive_seed(cfg.master_seed, &format!("train/cli/{}", spec.name))),
        ("eval", derive_seed(cfg.master_seed, &format!("eval/{}", spec.name))),
    ];
    for (k, v) in seeds {
        manifest.seeds.insert(k.into(), v);
    }

    let mut env = SimEnv::new(spec.clone());
    let evals = [("curve", SimEnv::new(spec))];
    let tc = TrainConfig { seed: seeds[1].1, eval_seed: seeds[2].1, ..cfg.train_template() };
    let out = train(&mut env, &evals, QNetwork::new(seeds[0].1), &tc).map_err(runtime_err)?;

    make_out_dir(&a.out)?;
    save_checkpoint(&out.net.params, Some(&out.opt), &a.out.join("checkpoint.ckpt"))
        .map_err(runtime_err)?;
    hash_output(&a.out, "checkpoint.ckpt", &mut manifest)?;
    write_out(&a.out, "curve.csv", &out.curves[0].to_csv(), &mut manifest)?;
    finish(&manifest, &a.out)?;

    let last = out.curves[0].points.last().expect("curve has points");
    println!(
        "trained {task} for {} steps over {} episodes; final success rate {:.3}",
        tc.iterations, out.episodes, last.eval_success_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalJson {
    task: String,
    episodes: u32,
    successes: u32,
    collisions: u32,
    timeouts: u32,
    success_rate: f64,
    ci_low: f64,
    ci_high: f64,
}

fn cmd_eval(mut cfg: ExperimentConfig, a: &EvalArgs) -> Result<(), CliError> {
    fold_task(&mut cfg, &a.task);
    if let Some(e) = a.episodes {
        cfg.final_episodes = e;
    }
    let mut manifest = Manifest::new("eval", &cfg);
    let spec = load_task(&cfg, &mut manifest)?;
    let task = cfg.task.clone();
    let (params, _) = load_checkpoint(&a.checkpoint).map_err(runtime_err)?;
    let net = QNetwork { params };

    manifest.inputs.insert(
        a.checkpoint.display().to_string(),
        file_sha256(&a.checkpoint).map_err(runtime_err)?,
    );
    let eval_seed = derive_seed(cfg.master_seed, &format!("eval/{}", spec.name));
    manifest.seeds.insert("eval".into(), eval_seed);

    let episodes = cfg.final_episodes;
    let o = evaluate(&net, &SimEnv::new(spec), episodes, eval_seed, "final");
    let (ci_low, success_rate, ci_high) = wilson_interval(o.successes, o.episodes);
    let report = EvalJson {
        task: task.to_string(),
        episodes: o.episodes,
        successes: o.successes,
        collisions: o.collisions,
        timeouts: o.timeouts,
        success_rate,
        ci_low,
        ci_high,
    };

    make_out_dir(&a.out)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_out(&a.out, "eval.json", &text, &mut manifest)?;
    finish(&manifest, &a.out)?;

    println!(
        "{task}: success {:.3} [{:.3}, {:.3}] over {} episodes ({} collisions, {} timeouts)",
        success_rate, ci_low, ci_high, o.episodes, o.collisions, o.timeouts
    );
    if let Some(min) = a.min_success {
        if success_rate < min {
            return Err(CliError::Check(vec![format!(
                "success rate {success_rate:.3} below required {min:.3}"
            )]));
        }
    }
    Ok(())
}

/// Hashes every regular file under `dir` (excluding the manifest itself)
/// into the manifest's outputs, keyed by relative path.
fn hash_tree(dir: &Path, root: &Path, m: &mut Manifest) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(runtime_err)?;
    for entry in entries {
        let path = entry.map_err(runtime_err)?.path();
        if path.is_dir() {
            hash_tree(&path, root, m)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
            if rel != "manifest.json" {
                m.outputs.insert(rel, file_sha256(&path).map_err(runtime_err)?);
            }
        }
    }
    Ok(())
}

fn cmd_matrix(cfg: ExperimentConfig, a: &MatrixArgs) -> Result<(), CliError> {
    let mut cfg = cfg;
    if let Some(tasks) = &a.tasks {
        cfg.tasks = tasks.clone();
    }
    if let Some(protocols) = &a.protocols {
        cfg.protocols = protocols.clone();
    }
    let mc = cfg.matrix_config().map_err(config_err)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(runtime_err)?;
    }

    let mut manifest = Manifest::new("matrix", &cfg);
    for t in &mc.tasks {
        manifest.seeds.insert(format!("eval/{}", t.name()), mc.eval_seed_for(*t));
    }

    let summary = run_matrix(&mc, &a.out).map_err(runtime_err)?;
    hash_tree(&a.out, &a.out, &mut manifest)?;
    finish(&manifest, &a.out)?;

    println!(
        "matrix over {:?} with {:?}: {} reports, {} failures",
        summary.tasks,
        summary.protocols,
        summary.reports.len(),
        summary.failures.len()
    );
    if let Some(j) = summary.mean_offdiag_jumpstart {
        println!("mean cross-task jumpstart {j:.3}");
    }
    if let Some(r) = &summary.mean_reverse {
        println!(
            "reverse transfer means: fresh {:.3}, returned {:.3}, target-only {:.3}",
            r.fresh, r.returned, r.direct
        );
    }
    if a.check {
        let fails = check_matrix(&summary);
        if !fails.is_empty() {
            return Err(CliError::Check(fails));
        }
        println!("all transfer orderings hold");
    }
    Ok(())
}

fn curve_summary(name: &str, run: &RecordingRun) -> String {
    format!(
        "{name}: train asymptote {:.3}, test asymptote {:.3}, reached 0.9 at {:?}",
        run.on_train.asymptote(),
        run.on_test.asymptote(),
        run.on_train.first_reaching(0.9)
    )
}

fn cmd_sim2real(mut cfg: ExperimentConfig, a: &Sim2RealArgs) -> Result<(), CliError> {
    fold_task(&mut cfg, &a.task);
    let mut manifest = Manifest::new("sim2real", &cfg);
    let spec = load_task(&cfg, &mut manifest)?;
    make_out_dir(&a.out)?;

    let (train_rec, test_rec) = match (&a.train_rec, &a.test_rec) {
        (Some(tr), Some(te)) => {
            for p in [tr, te] {
                manifest.inputs.insert(p.display().to_string(), file_sha256(p).map_err(runtime_err)?);
                let lab = p.with_extension("jlab");
                manifest.inputs.insert(lab.display().to_string(), file_sha256(&lab).map_err(runtime_err)?);
            }
            (load_recording(tr).map_err(runtime_err)?, load_recording(te).map_err(runtime_err)?)
        }
        _ => {
            let seeds = [
                ("rec/train", derive_seed(cfg.master_seed, "rec/train")),
                ("rec/test", derive_seed(cfg.master_seed, "rec/test")),
            ];
            for (k, v) in seeds {
                manifest.seeds.insert(k.into(), v);
            }
            let tr = synthesize_recording(&spec, cfg.duration, cfg.synthesis(), seeds[0].1);
            let te = synthesize_recording(&spec, cfg.duration, cfg.synthesis(), seeds[1].1);
            for (rec, name) in [(&tr, "train.jrec"), (&te, "test.jrec")] {
                save_recording(rec, &a.out.join(name)).map_err(runtime_err)?;
                hash_output(&a.out, name, &mut manifest)?;
                hash_output(&a.out, &name.replace(".jrec", ".jlab"), &mut manifest)?;
            }
            (tr, te)
        }
    };

    manifest.seeds.insert("eval".into(), derive_seed(cfg.master_seed, "eval/sim2real"));
    for key in ["init/sim2real/scratch", "train/sim2real/scratch", "init/sim2real/pretrain",
                "train/sim2real/pretrain", "train/sim2real/finetune"] {
        manifest.seeds.insert(key.into(), derive_seed(cfg.master_seed, key));
    }

    let outcome = sim2real_experiment(
        &spec,
        Arc::new(train_rec),
        Arc::new(test_rec),
        &cfg.budgets(),
        &cfg.train_template(),
        cfg.master_seed,
    )
    .map_err(runtime_err)?;

    let curves: [(&str, &LearningCurve); 4] = [
        ("scratch_train.csv", &outcome.scratch.on_train),
        ("scratch_test.csv", &outcome.scratch.on_test),
        ("pretrained_train.csv", &outcome.pretrained.on_train),
        ("pretrained_test.csv", &outcome.pretrained.on_test),
    ];
    for (name, curve) in curves {
        write_out(&a.out, name, &curve.to_csv(), &mut manifest)?;
    }
    for (name, net) in [("scratch.ckpt", &outcome.scratch.net), ("pretrained.ckpt", &outcome.pretrained.net)] {
        save_checkpoint(&net.params, None, &a.out.join(name)).map_err(runtime_err)?;
        hash_output(&a.out, name, &mut manifest)?;
    }
    finish(&manifest, &a.out)?;

    println!("{}", curve_summary("scratch", &outcome.scratch));
    println!("{}", curve_summary("pretrained", &outcome.pretrained));
    if a.check {
        let fails = check_sim2real(&outcome);
        if !fails.is_empty() {
            return Err(CliError::Check(fails));
        }
        println!("pretraining advantage and train/test gap hold");
    }
    Ok(())
}

fn cmd_synth_rec(mut cfg: ExperimentConfig, a: &SynthRecArgs) -> Result<(), CliError> {
    fold_task(&mut cfg, &a.task);
    let mut manifest = Manifest::new("synth-rec", &cfg);
    let spec = load_task(&cfg, &mut manifest)?;
    manifest.seeds.insert("recording".into(), cfg.master_seed);

    let rec: Recording = synthesize_recording(&spec, cfg.duration, cfg.synthesis(), cfg.master_seed);
    make_out_dir(&a.out)?;
    let stem = format!("{}.jrec", rec.spec.name);
    save_recording(&rec, &a.out.join(&stem)).map_err(runtime_err)?;
    hash_output(&a.out, &stem, &mut manifest)?;
    hash_output(&a.out, &stem.replace(".jrec", ".jlab"), &mut manifest)?;
    finish(&manifest, &a.out)?;

    let safe: f64 = rec
        .labels
        .iter()
        .filter(|l| l.safe)
        .map(|l| l.t1 - l.t0)
        .sum::<f64>()
        / rec.duration();
    println!(
        "{}: {:.0} s at {} Hz, {} frames, {} label spans, {:.0}% safe",
        stem,
        rec.duration(),
        rec.rate,
        rec.frames.len(),
        rec.labels.len(),
        100.0 * safe
    );
    Ok(())
}
