//! Cross-module invariants checked end to end: the car-following law never
//! rear-ends an admissibly spaced leader, observation channels stay coupled,
//! replay episodes keep the simulator's reward contract, checkpoints round
//! trip exactly, and the transfer matrix writes complete, reproducible,
//! order-invariant artifacts.

use junction::env::{Action, Environment, Outcome};
use junction::geom::Vec2;
use junction::grid::{encode_entities, Entity};
use junction::recording::{synthesize_recording, ReplayEnv, SynthesisConfig};
use junction::rl::TrainConfig;
use junction::scenario::{builtin, GridWindow, ScenarioId, DT};
use junction::sim::{idm_acceleration, Leader};
use junction::transfer::{run_matrix, Budgets, MatrixConfig, MatrixSummary, Protocol};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use std::sync::Arc;

const VEHICLE_LENGTH: f64 = 5.0;

/// Two IDM vehicles on a line, stepped exactly like the simulator steps a
/// lane (accelerations from the current state, then semi-implicit Euler),
/// but without the simulator's pass-through cap: the law itself must keep
/// the gap open.
#[test]
fn idm_admissible_initializations_never_collide() {
    let p = junction::scenario::IdmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut tested = 0u32;
    let mut draws = 0u32;
    while tested < 10_000 {
        draws += 1;
        assert!(draws < 200_000, "admissibility filter rejects too much");
        let v_f: f64 = rng.gen_range(0.0..20.0);
        let v_l: f64 = rng.gen_range(0.0..20.0);
        let gap0: f64 = rng.gen_range(0.0..80.0);
        // Admissible spacing: the standstill gap, plus one step of follower
        // travel, plus the distance lost while both brake as hard as the
        // follower may need to.
        let closing = (v_f * v_f - v_l * v_l).max(0.0) / (2.0 * p.hard_brake);
        let needed = p.min_gap.max(p.min_gap + v_f * DT + closing);
        if gap0 < needed {
            continue;
        }
        tested += 1;

        let vd_f = rng.gen_range(16.0..20.0);
        let vd_l = rng.gen_range(16.0..20.0);
        let (mut s_f, mut v_f) = (0.0, v_f);
        let (mut s_l, mut v_l) = (gap0 + VEHICLE_LENGTH, v_l);
        for tick in 0..150 {
            let gap = s_l - s_f - VEHICLE_LENGTH;
            assert!(
                gap > 0.0,
                "rear-end at tick {tick}: gap {gap:.3} from gap0 {gap0:.2}, vF {v_f:.2}, vL {v_l:.2}"
            );
            let a_l = idm_acceleration(v_l, vd_l, None, &p);
            let a_f = idm_acceleration(v_f, vd_f, Some(Leader { gap, speed: v_l }), &p);
            v_l = (v_l + a_l * DT).max(0.0);
            s_l += v_l * DT;
            v_f = (v_f + a_f * DT).max(0.0);
            s_f += v_f * DT;
        }
    }
}

proptest! {
    /// Occupancy gates every other channel: empty cells are all zero, and
    /// occupied cells carry a bounded speed fraction and a unit direction.
    #[test]
    fn grid_channels_stay_coupled(
        entities in prop::collection::vec(
            (-60.0..60.0f64, -60.0..60.0f64, -25.0..25.0f64, -25.0..25.0f64),
            0..6,
        ),
        ego_angle in 0.0..std::f64::consts::TAU,
    ) {
        let entities: Vec<Entity> = entities
            .iter()
            .map(|&(x, y, vx, vy)| {
                let vel = Vec2::new(vx, vy);
                let heading = if vel.norm() > 1e-9 { vel.normalized() } else { Vec2::new(1.0, 0.0) };
                Entity { pos: Vec2::new(x, y), vel, heading }
            })
            .collect();
        let ego_heading = Vec2::new(ego_angle.cos(), ego_angle.sin());
        let grid = encode_entities(&GridWindow::default(), Vec2::new(0.0, 0.0), ego_heading, 20.0, &entities);
        let (_, rows, cols) = grid.dim();
        for r in 0..rows {
            for c in 0..cols {
                let occ = grid[[0, r, c]];
                prop_assert!(occ == 0.0 || occ == 1.0);
                let (speed, cos, sin) = (grid[[1, r, c]], grid[[2, r, c]], grid[[3, r, c]]);
                if occ == 0.0 {
                    prop_assert_eq!((speed, cos, sin), (0.0, 0.0, 0.0));
                } else {
                    prop_assert!((0.0..=1.0).contains(&speed));
                    prop_assert!((cos * cos + sin * sin - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

/// Replay episodes keep the simulator's decision contract: per-decision
/// rewards from the fixed menu, one terminal outcome, returns inside the
/// reward bounds, and never more decisions than the step cap.
#[test]
fn replay_episodes_keep_the_reward_contract() {
    let rec = Arc::new(synthesize_recording(
        &builtin(ScenarioId::Left),
        40.0,
        SynthesisConfig::default(),
        77,
    ));
    let mut env = ReplayEnv::new(rec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = [0u32; 3];
    for episode in 0..300 {
        env.reset(episode);
        let mut total = 0.0f64;
        let mut decisions = 0u32;
        let outcome = loop {
            let action = match rng.gen_range(0..6) {
                0 => Action::Go,
                1 => Action::Wait1,
                2 => Action::Wait2,
                3 => Action::Wait4,
                _ => Action::Wait8,
            };
            let r = env.act(action);
            decisions += 1;
            assert!(
                r.reward == 1.0 || r.reward == -1.0 || r.reward == -0.01,
                "reward {} outside the decision menu",
                r.reward
            );
            total += r.reward as f64;
            if let Some(o) = r.outcome {
                break o;
            }
        };
        assert_eq!(env.outcome(), Some(outcome));
        assert!(decisions <= 100, "{decisions} decisions in one episode");
        assert!((-2.0..=1.0).contains(&total), "return {total} out of bounds");
        seen[match outcome {
            Outcome::Success => 0,
            Outcome::Collision => 1,
            Outcome::Timeout => 2,
        }] += 1;
    }
    assert!(seen.iter().all(|&n| n > 0), "outcome mix {seen:?} never hit some branch");
}

#[test]
fn synthesis_is_a_pure_function_of_its_seed() {
    let spec = builtin(ScenarioId::Right);
    let cfg = SynthesisConfig::default();
    let a = synthesize_recording(&spec, 30.0, cfg, 9);
    let b = synthesize_recording(&spec, 30.0, cfg, 9);
    assert_eq!(a.frames.len(), b.frames.len());
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        assert_eq!(fa.t, fb.t);
        assert_eq!(fa.tracks.len(), fb.tracks.len());
        for (ta, tb) in fa.tracks.iter().zip(&fb.tracks) {
            assert_eq!((ta.id, ta.pos, ta.vel, ta.heading), (tb.id, tb.pos, tb.vel, tb.heading));
        }
    }
    assert_eq!(a.labels, b.labels);
    let c = synthesize_recording(&spec, 30.0, cfg, 10);
    assert_ne!(a.labels, c.labels, "different seeds should give different traffic");
}

#[test]
fn checkpoints_round_trip_exactly() {
    use junction::checkpoint::{load_checkpoint, save_checkpoint};
    use junction::net::QNetwork;
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..20 {
        let net = QNetwork::<f32>::new(seed);
        let path = dir.path().join(format!("{seed}.ckpt"));
        save_checkpoint(&net.params, None, &path).unwrap();
        let (loaded, opt) = load_checkpoint(&path).unwrap();
        assert!(opt.is_none());
        for ((_, a), (_, b)) in net.params.layers().iter().zip(loaded.layers().iter()) {
            assert_eq!(a, b);
        }
        let path2 = dir.path().join(format!("{seed}b.ckpt"));
        save_checkpoint(&loaded, None, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}

fn tiny_matrix_config(tasks: Vec<ScenarioId>) -> MatrixConfig {
    MatrixConfig {
        tasks,
        protocols: Protocol::ALL.to_vec(),
        budgets: Budgets { direct: 40, pretrain: 20, finetune: 40, scale: 1.0 },
        master_seed: 3,
        final_episodes: 20,
        template: TrainConfig {
            iterations: 0,
            eval_every: 20,
            eval_episodes: 10,
            replay_capacity: 2_000,
            warmup: 80,
            ..TrainConfig::default()
        },
    }
}

fn read_summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn csv_rows(dir: &Path, name: &str) -> usize {
    fs::read_to_string(dir.join(name)).unwrap().lines().count() - 1
}

fn rate_by_names(summary: &serde_json::Value, protocol: &str, source: &str, target: &str) -> f64 {
    summary["reports"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["protocol"] == protocol && r["source"] == source && r["target"] == target)
        .unwrap_or_else(|| panic!("no {protocol} cell {source}->{target}"))["success_rate"]
        .as_f64()
        .unwrap()
}

/// One desk-scale matrix exercises the full artifact contract: expected
/// files with expected row counts, byte-identical re-runs, jumpstarts that
/// recompute from the stored curves, reverse-transfer rates that reuse the
/// direct diagonal, and per-cell results that survive task reordering.
#[test]
fn matrix_artifacts_are_complete_reproducible_and_order_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let cfg = tiny_matrix_config(vec![ScenarioId::Right, ScenarioId::Left]);
    let summary: MatrixSummary = run_matrix(&cfg, &a).unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);

    assert_eq!(csv_rows(&a, "direct_copy.csv"), 4);
    assert_eq!(csv_rows(&a, "fine_tune.csv"), 4);
    assert_eq!(csv_rows(&a, "scratch.csv"), 2);
    assert_eq!(csv_rows(&a, "reverse_transfer.csv"), 2);
    for name in [
        "checkpoints/direct_right.ckpt",
        "checkpoints/direct_left.ckpt",
        "checkpoints/pretrain_right.ckpt",
        "checkpoints/pretrain_left.ckpt",
        "checkpoints/scratch_right.ckpt",
        "checkpoints/scratch_left.ckpt",
        "checkpoints/finetune_right_to_left.ckpt",
        "checkpoints/finetune_left_to_right.ckpt",
        "curves/fine_tune_right_to_left.csv",
        "curves/fine_tune_left_to_right.csv",
        "curves/scratch_right.csv",
        "curves/scratch_left.csv",
    ] {
        assert!(a.join(name).is_file(), "missing {name}");
    }

    // Same configuration, fresh directory: every artifact byte-identical.
    run_matrix(&cfg, &b).unwrap();
    let mut checked = 0;
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        assert_eq!(
            fs::read(&entry).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{} differs between identical runs",
            rel.display()
        );
        checked += 1;
    }
    assert!(checked >= 17, "only {checked} files compared");

    // Reported jumpstarts recompute from the stored curves, and reverse
    // transfer's fresh rate is the direct diagonal.
    let js = read_summary(&a);
    for r in js["reports"].as_array().unwrap() {
        if r["protocol"] == "fine_tune" && r["source"] != r["target"] {
            let first = r["curve"]["points"][0]["eval_success_rate"].as_f64().unwrap();
            let scratch_first = js["reports"]
                .as_array()
                .unwrap()
                .iter()
                .find(|s| s["protocol"] == "scratch" && s["target"] == r["target"])
                .unwrap()["curve"]["points"][0]["eval_success_rate"]
                .as_f64()
                .unwrap();
            let recomputed = first - scratch_first;
            let stored = r["jumpstart"].as_f64().unwrap();
            assert!((stored - recomputed).abs() < 1e-12, "{stored} vs {recomputed}");
        }
    }
    for rev in js["reverse"].as_array().unwrap() {
        let s = rev["source"].as_str().unwrap();
        assert_eq!(
            rev["fresh_rate"].as_f64().unwrap(),
            rate_by_names(&js, "direct_copy", s, s),
            "fresh rate should reuse the direct diagonal for {s}"
        );
    }

    // Task order is bookkeeping, not physics: cells match by name.
    let flipped = tiny_matrix_config(vec![ScenarioId::Left, ScenarioId::Right]);
    run_matrix(&flipped, &c).unwrap();
    let jc = read_summary(&c);
    for proto in ["direct_copy", "fine_tune", "scratch"] {
        for src in ["right", "left"] {
            for tgt in ["right", "left"] {
                if proto == "scratch" && src != tgt {
                    continue;
                }
                assert_eq!(
                    rate_by_names(&js, proto, src, tgt),
                    rate_by_names(&jc, proto, src, tgt),
                    "{proto} {src}->{tgt} changed under task reordering"
                );
            }
        }
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}
