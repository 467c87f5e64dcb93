//! Micro traffic simulator: lane-following vehicles under the intelligent
//! driver model with Krauss-style imperfection, plus the ego vehicle whose
//! crossing decision the agent controls.
//!
//! Within one tick the phases run in a fixed order: spawn, traffic
//! acceleration (rear-most last), traffic integration, ego integration,
//! outcome checks (collision, then success, then the tick cap). All
//! randomness flows from one seeded generator, so a seed fully determines an
//! episode.

use crate::env::{decision_reward, Action, Environment, Outcome, StepResult};
use crate::geom::{Obb, Vec2};
use crate::grid::{encode_entities, Entity, Grid};
use crate::scenario::{IdmParams, Lane, ScenarioSpec, DT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The leader a follower reacts to: bumper-to-bumper gap and leader speed
/// along the lane.
#[derive(Clone, Copy, Debug)]
pub struct Leader {
    pub gap: f64,
    pub speed: f64,
}

/// Intelligent-driver-model acceleration for a vehicle at speed `v` with
/// desired speed `v_desired`, clamped to [-hard_brake, max_accel].
///
/// The interaction term uses the desired gap
/// `s* = s0 + v T + v (v - v_leader) / (2 sqrt(a_max b))` and the actual gap
/// is floored at 0.1 m so a vanishing gap demands (and gets) the hard-brake
/// clamp instead of an infinity.
pub fn idm_acceleration(v: f64, v_desired: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / v_desired).powi(4);
    let interaction = match leader {
        None => 0.0,
        Some(l) => {
            let dv = v - l.speed;
            let s_star = p.min_gap + v * p.headway + v * dv / (2.0 * (p.max_accel * p.comfort_brake).sqrt());
            (s_star / l.gap.max(0.1)).powi(2)
        }
    };
    (p.max_accel * (free - interaction)).clamp(-p.hard_brake, p.max_accel)
}

/// Krauss driver imperfection: subtracts a random fraction of `sigma *
/// max_accel` from a planned acceleration, clamped at the hard-brake limit.
pub fn krauss_perturb(a: f64, sigma: f64, p: &IdmParams, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen();
    (a - sigma * p.max_accel * u).max(-p.hard_brake)
}

#[derive(Clone, Copy, Debug)]
pub struct Vehicle {
    pub id: u64,
    /// Arclength of the vehicle center along the lane.
    pub s: f64,
    pub v: f64,
    pub v_desired: f64,
}

/// Snapshot of one traffic vehicle in world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct VehicleView {
    pub id: u64,
    pub pos: Vec2,
    pub vel: Vec2,
    pub heading: Vec2,
}

#[derive(Clone, Copy, Debug)]
struct EgoState {
    path_pos: f64,
    speed: f64,
    committed: bool,
}

/// The simulated intersection task.
#[derive(Clone, Debug)]
pub struct SimEnv {
    spec: ScenarioSpec,
    /// Per-lane vehicles, kept sorted by ascending arclength.
    lanes: Vec<Vec<Vehicle>>,
    ego: EgoState,
    rng: ChaCha8Rng,
    step_index: u32,
    next_id: u64,
    entered_zone: bool,
    outcome: Option<Outcome>,
}

fn entry_blocked(lane: &[Vehicle], entry_clear: f64, vehicle_length: f64) -> bool {
    // A vehicle occupies [s - len/2, s + len/2]; the entry segment is
    // [0, entry_clear].
    lane.iter().any(|veh| veh.s - vehicle_length * 0.5 < entry_clear)
}

impl SimEnv {
    pub fn new(spec: ScenarioSpec) -> SimEnv {
        let lanes = vec![Vec::new(); spec.lanes.len()];
        SimEnv {
            spec,
            lanes,
            ego: EgoState { path_pos: 0.0, speed: 0.0, committed: false },
            rng: ChaCha8Rng::seed_from_u64(0),
            step_index: 0,
            next_id: 0,
            entered_zone: false,
            outcome: None,
        }
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    /// Ticks of traffic flow run before each episode so the road starts
    /// populated: long enough for the first spawns to traverse a whole lane.
    pub fn warmup_ticks(&self) -> u32 {
        let longest = self.spec.lanes.iter().map(|l| l.center.length()).fold(0.0, f64::max);
        (longest / self.spec.speed_limit / DT).ceil() as u32
    }

    pub fn ego_pose(&self) -> (Vec2, Vec2) {
        (self.spec.ego_path.point_at(self.ego.path_pos), self.spec.ego_path.tangent_at(self.ego.path_pos))
    }

    pub fn ego_speed(&self) -> f64 {
        self.ego.speed
    }

    pub fn vehicles(&self) -> impl Iterator<Item = VehicleView> + '_ {
        self.lanes.iter().zip(&self.spec.lanes).flat_map(|(vehs, lane)| {
            vehs.iter().map(move |veh| {
                let heading = lane.center.tangent_at(veh.s);
                VehicleView {
                    id: veh.id,
                    pos: lane.center.point_at(veh.s),
                    vel: heading * veh.v,
                    heading,
                }
            })
        })
    }

    fn spawn(&mut self) {
        let t = self.spec.traffic;
        let p_tick = t.depart_prob * DT;
        let limit = self.spec.speed_limit;
        for lane in &mut self.lanes {
            // The departure draw happens every tick on every lane, whether or
            // not the entry is free, to keep the random stream aligned.
            let departs = self.rng.gen::<f64>() < p_tick;
            if !departs || entry_blocked(lane, t.entry_clear, t.vehicle_length) {
                continue;
            }
            let v = self.rng.gen_range(t.init_speed_frac.0..t.init_speed_frac.1) * limit;
            let v_desired = self.rng.gen_range(t.desired_speed_frac.0..t.desired_speed_frac.1) * limit;
            lane.insert(0, Vehicle { id: self.next_id, s: t.vehicle_length * 0.5, v, v_desired });
            self.next_id += 1;
        }
    }

    /// Where (and how fast) the ego appears as an obstacle along `lane`, if
    /// its footprint intrudes into the corridor traffic sweeps.
    fn ego_obstacle(&self, lane: &Lane, ego_obb: &Obb, ego_vel: Vec2) -> Option<(f64, f64)> {
        let corridor = self.spec.traffic.vehicle_width + 0.6;
        let intrudes = lane.center.points().windows(2).any(|seg| {
            let mid = (seg[0] + seg[1]) * 0.5;
            let strip = Obb::new(mid, seg[1] - seg[0], seg[0].dist(seg[1]), corridor);
            ego_obb.overlaps(&strip)
        });
        if !intrudes {
            return None;
        }
        let s = ego_obb
            .corners()
            .iter()
            .map(|&c| lane.center.project(c).0)
            .fold(f64::INFINITY, f64::min);
        Some((s, ego_vel.dot(lane.center.tangent_at(s))))
    }

    /// One tick of traffic flow: spawn, plan accelerations rear-most last,
    /// integrate front-most first with a pass-through cap, drop vehicles past
    /// the lane end.
    fn tick_traffic(&mut self) {
        self.spawn();
        let t = self.spec.traffic;
        let (_, ego_heading) = self.ego_pose();
        let ego_obb = self.spec.ego_obb_at(self.ego.path_pos);
        let ego_vel = ego_heading * self.ego.speed;

        for li in 0..self.lanes.len() {
            let obstacle = self.ego_obstacle(&self.spec.lanes[li], &ego_obb, ego_vel);
            let lane_len = self.spec.lanes[li].center.length();
            let lane = &mut self.lanes[li];
            let n = lane.len();
            let mut accel = vec![0.0; n];
            for i in (0..n).rev() {
                let mut leader = if i + 1 < n {
                    Some(Leader {
                        gap: lane[i + 1].s - lane[i].s - t.vehicle_length,
                        speed: lane[i + 1].v,
                    })
                } else {
                    None
                };
                if let Some((os, ov)) = obstacle {
                    let gap = os - lane[i].s - t.vehicle_length * 0.5;
                    if gap > 0.0 && leader.map_or(true, |l| gap < l.gap) {
                        leader = Some(Leader { gap, speed: ov });
                    }
                }
                let planned = idm_acceleration(lane[i].v, lane[i].v_desired, leader, &t.idm);
                accel[i] = krauss_perturb(planned, t.krauss_sigma, &t.idm, &mut self.rng);
            }
            for i in (0..n).rev() {
                let v_new = (lane[i].v + accel[i] * DT).max(0.0);
                let mut s_new = lane[i].s + v_new * DT;
                lane[i].v = v_new;
                if i + 1 < n {
                    // The leader has already moved; never let the follower
                    // pass through it.
                    let cap = lane[i + 1].s - t.vehicle_length;
                    if s_new > cap {
                        s_new = cap;
                        lane[i].v = v_new.min(lane[i + 1].v);
                    }
                }
                lane[i].s = s_new;
            }
            lane.retain(|veh| veh.s <= lane_len);
        }
    }

    fn vehicle_obb(&self, li: usize, veh: &Vehicle) -> Obb {
        let lane = &self.spec.lanes[li];
        Obb::new(
            lane.center.point_at(veh.s),
            lane.center.tangent_at(veh.s),
            self.spec.traffic.vehicle_length,
            self.spec.traffic.vehicle_width,
        )
    }

    /// One full simulation tick including ego motion and outcome checks.
    fn tick(&mut self) {
        debug_assert!(self.outcome.is_none());
        self.tick_traffic();

        if self.ego.committed {
            self.ego.speed = (self.ego.speed + self.spec.ego_accel * DT).min(self.spec.speed_limit);
            self.ego.path_pos += self.ego.speed * DT;
        }
        self.step_index += 1;

        if self.ego.committed {
            let ego_obb = self.spec.ego_obb_at(self.ego.path_pos);
            let hit = (0..self.lanes.len()).any(|li| {
                self.lanes[li].iter().any(|veh| ego_obb.overlaps(&self.vehicle_obb(li, veh)))
            });
            if hit {
                self.outcome = Some(Outcome::Collision);
                return;
            }
            let in_zone = ego_obb.overlaps_aabb(&self.spec.conflict_zone);
            if in_zone {
                self.entered_zone = true;
            }
            let done_path = self.ego.path_pos >= self.spec.ego_path.length();
            if (self.entered_zone && !in_zone) || done_path {
                self.outcome = Some(Outcome::Success);
                return;
            }
        }
        if self.step_index >= self.spec.max_steps {
            self.outcome = Some(Outcome::Timeout);
        }
    }

    /// Synthesis hook: advance traffic only, without episode bookkeeping.
    pub(crate) fn advance_traffic(&mut self) {
        self.tick_traffic();
    }

    /// Synthesis hook: reseed onto an empty road, skipping the warmup, so
    /// recorded tracks have complete histories from their spawn tick.
    pub(crate) fn seed_empty(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for lane in &mut self.lanes {
            lane.clear();
        }
        self.ego = EgoState { path_pos: 0.0, speed: 0.0, committed: false };
        self.step_index = 0;
        self.next_id = 0;
        self.entered_zone = false;
        self.outcome = None;
    }

    #[cfg(test)]
    fn inject(&mut self, li: usize, s: f64, v: f64, v_desired: f64) {
        let veh = Vehicle { id: self.next_id, s, v, v_desired };
        self.next_id += 1;
        let pos = self.lanes[li].partition_point(|x| x.s < s);
        self.lanes[li].insert(pos, veh);
    }
}

impl Environment for SimEnv {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for lane in &mut self.lanes {
            lane.clear();
        }
        self.ego = EgoState { path_pos: 0.0, speed: 0.0, committed: false };
        self.step_index = 0;
        self.next_id = 0;
        self.entered_zone = false;
        self.outcome = None;
        for _ in 0..self.warmup_ticks() {
            self.tick_traffic();
        }
    }

    fn observe(&self) -> Grid {
        let (ego_pos, ego_heading) = self.ego_pose();
        let entities: Vec<Entity> = self
            .vehicles()
            .map(|v| Entity { pos: v.pos, vel: v.vel, heading: v.heading })
            .collect();
        encode_entities(&self.spec.grid, ego_pos, ego_heading, self.spec.speed_limit, &entities)
    }

    fn act(&mut self, action: Action) -> StepResult {
        assert!(self.outcome.is_none(), "act called on a terminal episode");
        match action.wait_ticks() {
            None => {
                self.ego.committed = true;
                while self.outcome.is_none() {
                    self.tick();
                }
            }
            Some(k) => {
                for _ in 0..k {
                    self.tick();
                    if self.outcome.is_some() {
                        break;
                    }
                }
            }
        }
        StepResult { reward: decision_reward(self.outcome), outcome: self.outcome }
    }

    fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::run_episode;
    use crate::scenario::{builtin, ScenarioId};
    use approx::assert_relative_eq;

    fn idm() -> IdmParams {
        IdmParams::default()
    }

    // Free road, v = 10, v0 = 20: a = 2 (1 - 0.5^4) = 1.875.
    #[test]
    fn idm_free_road_value() {
        assert_relative_eq!(idm_acceleration(10.0, 20.0, None, &idm()), 1.875, epsilon = 1e-12);
    }

    // v = 10, v0 = 20, leader at gap 20 doing 5:
    //   s* = 2 + 10 * 1.5 + 10 * 5 / (2 sqrt(4)) = 29.5
    //   a  = 2 (1 - 0.0625 - (29.5 / 20)^2) = -2.47625
    #[test]
    fn idm_closing_on_slower_leader() {
        let a = idm_acceleration(10.0, 20.0, Some(Leader { gap: 20.0, speed: 5.0 }), &idm());
        assert_relative_eq!(a, -2.47625, epsilon = 1e-12);
    }

    #[test]
    fn idm_clamps_at_hard_brake() {
        let a = idm_acceleration(20.0, 20.0, Some(Leader { gap: 3.0, speed: 0.0 }), &idm());
        assert_eq!(a, -6.0);
        // Zero or negative gap falls back to the 0.1 m floor, still clamped.
        let b = idm_acceleration(5.0, 20.0, Some(Leader { gap: -1.0, speed: 0.0 }), &idm());
        assert_eq!(b, -6.0);
    }

    #[test]
    fn krauss_mean_matches_expectation() {
        // E[a - sigma a_max U] = -0.5 * 2 * 0.5 = -0.5 at a = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 =
            (0..n).map(|_| krauss_perturb(0.0, 0.5, &idm(), &mut rng)).sum::<f64>() / n as f64;
        assert!((mean + 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn spawn_rate_matches_departure_probability() {
        // With the entry always cleared, spawns are Bernoulli at
        // depart_prob * DT = 0.04 per tick.
        let mut env = SimEnv::new(builtin(ScenarioId::Forward));
        env.rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut spawns = 0usize;
        for _ in 0..n {
            for lane in &mut env.lanes {
                lane.clear();
            }
            env.spawn();
            spawns += env.lanes.iter().map(Vec::len).sum::<usize>();
        }
        let rate = spawns as f64 / (n * env.lanes.len()) as f64;
        assert!((rate - 0.04).abs() < 0.002, "rate {rate}");
    }

    #[test]
    fn blocked_entry_defers_spawn() {
        let lane = [Vehicle { id: 0, s: 12.4, v: 10.0, v_desired: 20.0 }];
        assert!(entry_blocked(&lane, 10.0, 5.0));
        let lane = [Vehicle { id: 0, s: 12.6, v: 10.0, v_desired: 20.0 }];
        assert!(!entry_blocked(&lane, 10.0, 5.0));
    }

    #[test]
    fn lanes_stay_sorted_with_no_pass_through() {
        let mut env = SimEnv::new(builtin(ScenarioId::Challenge));
        env.reset(3);
        for _ in 0..500 {
            env.advance_traffic();
            for lane in &env.lanes {
                for w in lane.windows(2) {
                    let gap = w[1].s - w[0].s;
                    assert!(
                        gap >= env.spec.traffic.vehicle_length - 1e-9,
                        "vehicles overlap: ds = {gap}"
                    );
                }
            }
        }
        assert!(env.lanes.iter().map(Vec::len).sum::<usize>() > 0, "traffic never appeared");
    }

    #[test]
    fn reset_is_deterministic_and_seed_sensitive() {
        let mut a = SimEnv::new(builtin(ScenarioId::Left));
        let mut b = SimEnv::new(builtin(ScenarioId::Left));
        a.reset(42);
        b.reset(42);
        assert_eq!(a.observe(), b.observe());
        assert_eq!(a.act(Action::Wait4), b.act(Action::Wait4));
        assert_eq!(a.observe(), b.observe());
        b.reset(43);
        assert_ne!(a.observe(), b.observe());
    }

    #[test]
    fn empty_road_crossing_succeeds() {
        let mut spec = builtin(ScenarioId::Forward);
        spec.traffic.depart_prob = 0.0;
        let mut env = SimEnv::new(spec);
        let ep = run_episode(&mut env, 1, |_| Action::Go);
        assert_eq!(ep.outcome, Outcome::Success);
        assert_eq!(ep.decisions.len(), 1);
        assert_eq!(ep.decisions[0].reward, 1.0);
    }

    #[test]
    fn waiting_forever_times_out() {
        let mut spec = builtin(ScenarioId::Forward);
        spec.traffic.depart_prob = 0.0;
        let mut env = SimEnv::new(spec);
        let ep = run_episode(&mut env, 1, |_| Action::Wait8);
        assert_eq!(ep.outcome, Outcome::Timeout);
        // 100 ticks at 8 per decision: 13 decisions, the last one truncated.
        assert_eq!(ep.decisions.len(), 13);
        assert_eq!(env.step_index(), 100);
        let total: f32 = ep.decisions.iter().map(|d| d.reward).sum();
        assert_relative_eq!(total, -0.13, epsilon = 1e-6);
    }

    #[test]
    fn driving_into_a_stopped_car_collides() {
        let mut spec = builtin(ScenarioId::Forward);
        spec.traffic.depart_prob = 0.0;
        let mut env = SimEnv::new(spec);
        env.reset(1);
        // Park a car on the eastbound lane right on the ego path. Its desired
        // speed is (near) zero so it stays put.
        let li = 0;
        let s_cross = {
            let lane = &env.spec.lanes[li];
            lane.center.project(Vec2::new(0.0, -2.0)).0
        };
        env.inject(li, s_cross, 0.0, 1e-3);
        let step = env.act(Action::Go);
        assert_eq!(step.outcome, Some(Outcome::Collision));
        assert_eq!(step.reward, -1.0);
    }

    #[test]
    fn traffic_brakes_for_a_committed_ego() {
        // A car approaching the crossing sees the ego blocking its lane and
        // ends up slower than its free-flow counterpart.
        let mut spec = builtin(ScenarioId::Forward);
        spec.traffic.depart_prob = 0.0;
        spec.traffic.krauss_sigma = 0.0;
        let mut blocked = SimEnv::new(spec.clone());
        let mut free = SimEnv::new(spec);
        for env in [&mut blocked, &mut free] {
            env.reset(1);
            env.inject(0, 55.0, 18.0, 18.0);
        }
        // Freeze the ego mid-intersection.
        blocked.ego.committed = true;
        blocked.ego.path_pos = 5.5;
        for _ in 0..80 {
            blocked.advance_traffic();
        }
        // The free car exits the lane eventually; sample it before that.
        for _ in 0..35 {
            free.advance_traffic();
        }
        let v_blocked = blocked.lanes[0][0].v;
        let v_free = free.lanes[0][0].v;
        assert!(
            v_blocked < 1.5 && v_free > 15.0,
            "blocked {v_blocked} vs free {v_free}"
        );
    }
}
