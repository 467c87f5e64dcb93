//! Intersection task definitions: the five built-in scenarios, the scenario
//! config file format, and spec validation.
//!
//! All built-ins share one convention: the ego approaches from the south
//! heading +y, the cross street runs along the x axis, and right-hand traffic
//! puts eastbound (+x) lanes at y < 0 and westbound (-x) lanes at y > 0.

use crate::geom::{arc_points, Aabb, Obb, Polyline, Vec2};
use serde::Deserialize;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Simulation tick length in seconds.
pub const DT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    Right,
    Left,
    Left2,
    Forward,
    Challenge,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [
        ScenarioId::Right,
        ScenarioId::Left,
        ScenarioId::Left2,
        ScenarioId::Forward,
        ScenarioId::Challenge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Right => "right",
            ScenarioId::Left => "left",
            ScenarioId::Left2 => "left2",
            ScenarioId::Forward => "forward",
            ScenarioId::Challenge => "challenge",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        match s.to_ascii_lowercase().as_str() {
            "right" => Ok(ScenarioId::Right),
            "left" => Ok(ScenarioId::Left),
            "left2" => Ok(ScenarioId::Left2),
            "forward" => Ok(ScenarioId::Forward),
            "challenge" => Ok(ScenarioId::Challenge),
            other => Err(ScenarioError::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario '{0}' (expected right, left, left2, forward, challenge, or a config file path)")]
    UnknownScenario(String),
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file parse error: {0}")]
    Parse(String),
    #[error("invalid scenario field '{field}': {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field, reason: reason.into() }
}

/// Intelligent-driver-model parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmParams {
    /// Maximum acceleration a_max (m/s^2).
    pub max_accel: f64,
    /// Comfortable deceleration b (m/s^2, positive).
    pub comfort_brake: f64,
    /// Hard braking limit b_max (m/s^2, positive); accelerations are clamped to -b_max.
    pub hard_brake: f64,
    /// Standstill minimum gap s0 (m).
    pub min_gap: f64,
    /// Desired time headway T_h (s).
    pub headway: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            max_accel: 2.0,
            comfort_brake: 2.0,
            hard_brake: 6.0,
            min_gap: 2.0,
            headway: 1.5,
        }
    }
}

/// Traffic generation and driver-behavior parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficParams {
    /// Probability per second that a lane emits a vehicle.
    pub depart_prob: f64,
    /// Krauss driver-imperfection factor in [0, 1].
    pub krauss_sigma: f64,
    pub idm: IdmParams,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Entry segment (m) that must be free for a spawn to happen.
    pub entry_clear: f64,
    /// Initial speed range as fractions of the speed limit.
    pub init_speed_frac: (f64, f64),
    /// Desired speed range as fractions of the speed limit.
    pub desired_speed_frac: (f64, f64),
}

impl Default for TrafficParams {
    fn default() -> Self {
        TrafficParams {
            depart_prob: 0.2,
            krauss_sigma: 0.5,
            idm: IdmParams::default(),
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            entry_clear: 10.0,
            init_speed_frac: (0.8, 1.0),
            desired_speed_frac: (0.9, 1.1),
        }
    }
}

/// Grid-encoder window, stored on the spec so alternates can be swept.
/// Cell sizes follow from the fixed 18x26 grid shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridWindow {
    /// Meters of look-behind along the ego heading.
    pub behind: f64,
    /// Meters of look-ahead along the ego heading.
    pub ahead: f64,
    /// Lateral half-span in meters.
    pub half_span: f64,
}

impl Default for GridWindow {
    fn default() -> Self {
        GridWindow { behind: 10.0, ahead: 44.0, half_span: 52.0 }
    }
}

/// One traffic lane. Vehicles travel along the centerline in the direction
/// of increasing arclength; the entry is at arclength zero.
#[derive(Clone, Debug)]
pub struct Lane {
    pub name: String,
    pub width: f64,
    pub center: Polyline,
}

/// Declarative geometry and traffic parameters for one intersection task.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub name: String,
    pub lanes: Vec<Lane>,
    /// The curve the ego follows once committed; position 0 is the wait point.
    pub ego_path: Polyline,
    /// Region whose exit (after entry) defines success.
    pub conflict_zone: Aabb,
    /// Lane speed limit in m/s.
    pub speed_limit: f64,
    /// Episode cap in simulation ticks.
    pub max_steps: u32,
    pub traffic: TrafficParams,
    pub grid: GridWindow,
    /// Ego footprint, same defaults as traffic vehicles.
    pub ego_length: f64,
    pub ego_width: f64,
    /// Committed-ego constant acceleration (m/s^2) up to the speed limit.
    pub ego_accel: f64,
}

impl ScenarioSpec {
    pub fn ego_obb_at(&self, path_pos: f64) -> Obb {
        Obb::new(
            self.ego_path.point_at(path_pos),
            self.ego_path.tangent_at(path_pos),
            self.ego_length,
            self.ego_width,
        )
    }

    /// Validates every invariant the simulator relies on. Errors name the
    /// offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.traffic.depart_prob >= 0.0 && self.traffic.depart_prob <= 1.0) {
            return Err(invalid("depart_prob", format!("{} not in [0, 1]", self.traffic.depart_prob)));
        }
        if !(self.speed_limit > 0.0) {
            return Err(invalid("speed_limit", format!("{} must be > 0", self.speed_limit)));
        }
        if !(self.traffic.krauss_sigma >= 0.0 && self.traffic.krauss_sigma <= 1.0) {
            return Err(invalid("krauss_sigma", format!("{} not in [0, 1]", self.traffic.krauss_sigma)));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be >= 1"));
        }
        if self.lanes.is_empty() {
            return Err(invalid("lanes", "at least one traffic lane required"));
        }
        for lane in &self.lanes {
            if !(lane.width > 0.0) {
                return Err(invalid("lane.width", format!("lane '{}' width must be > 0", lane.name)));
            }
        }
        if !(self.ego_length > 0.0 && self.ego_width > 0.0) {
            return Err(invalid("ego_length", "ego footprint dims must be > 0"));
        }
        if self.conflict_zone.min.x >= self.conflict_zone.max.x
            || self.conflict_zone.min.y >= self.conflict_zone.max.y
        {
            return Err(invalid("conflict_zone", "min corner must be strictly below max corner"));
        }

        // The ego path must cross at least one lane corridor, otherwise the
        // task is trivial.
        let crosses_lane = self.lanes.iter().any(|lane| {
            sample_path(&self.ego_path).iter().any(|&p| lane.center.distance_to(p) <= lane.width * 0.5)
        });
        if !crosses_lane {
            return Err(invalid("ego_path", "does not intersect any traffic lane"));
        }

        // Success must be reachable: the path enters the conflict zone.
        let enters_zone = sample_path(&self.ego_path).iter().any(|&p| self.conflict_zone.contains(p));
        if !enters_zone {
            return Err(invalid("conflict_zone", "ego path never enters the conflict zone"));
        }

        // A waiting ego must be conflict-free: its footprint at the wait
        // point may not touch any lane corridor.
        let wait_obb = self.ego_obb_at(0.0);
        for lane in &self.lanes {
            for seg in lane.center.points().windows(2) {
                let mid = (seg[0] + seg[1]) * 0.5;
                let strip = Obb::new(mid, seg[1] - seg[0], seg[0].dist(seg[1]), lane.width);
                if wait_obb.overlaps(&strip) {
                    return Err(invalid(
                        "ego_path",
                        format!("waiting ego overlaps lane '{}' corridor", lane.name),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn sample_path(path: &Polyline) -> Vec<Vec2> {
    let n = (path.length() / 0.25).ceil() as usize;
    (0..=n).map(|i| path.point_at(path.length() * i as f64 / n as f64)).collect()
}

fn straight(name: &str, a: Vec2, b: Vec2) -> Lane {
    Lane { name: name.to_string(), width: 4.0, center: Polyline::new(vec![a, b]).unwrap() }
}

const LANE_REACH: f64 = 100.0;

fn eastbound(idx: usize, y: f64) -> Lane {
    straight(&format!("east-{idx}"), Vec2::new(-LANE_REACH, y), Vec2::new(LANE_REACH, y))
}

fn westbound(idx: usize, y: f64) -> Lane {
    straight(&format!("west-{idx}"), Vec2::new(LANE_REACH, y), Vec2::new(-LANE_REACH, y))
}

fn base_spec(name: &str, lanes: Vec<Lane>, ego_points: Vec<Vec2>, zone: Aabb) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        lanes,
        ego_path: Polyline::new(ego_points).unwrap(),
        conflict_zone: zone,
        speed_limit: 20.0,
        max_steps: 100,
        traffic: TrafficParams::default(),
        grid: GridWindow::default(),
        ego_length: 5.0,
        ego_width: 2.0,
        ego_accel: 2.0,
    }
}

/// Builds one of the five built-in intersection tasks.
pub fn builtin(id: ScenarioId) -> ScenarioSpec {
    match id {
        // Right turn at a T-junction, merging into the eastbound lane whose
        // traffic approaches from the left.
        ScenarioId::Right => {
            let mut pts = vec![Vec2::new(0.0, -7.5), Vec2::new(0.0, -6.0)];
            pts.extend(arc_points(Vec2::new(4.0, -6.0), 4.0, PI, FRAC_PI_2, 15.0));
            pts.push(Vec2::new(60.0, -2.0));
            base_spec(
                "right",
                vec![eastbound(1, -2.0)],
                pts,
                Aabb::new(Vec2::new(-8.0, -4.0), Vec2::new(8.0, 0.0)),
            )
        }
        // Left turn at a T-junction: cross one eastbound lane, merge into the
        // westbound lane.
        ScenarioId::Left => {
            let mut pts = vec![Vec2::new(0.0, -7.5), Vec2::new(0.0, -2.5)];
            pts.extend(arc_points(Vec2::new(-4.5, -2.5), 4.5, 0.0, FRAC_PI_2, 15.0));
            pts.push(Vec2::new(-60.0, 2.0));
            base_spec(
                "left",
                vec![eastbound(1, -2.0), westbound(1, 2.0)],
                pts,
                Aabb::new(Vec2::new(-8.0, -4.0), Vec2::new(8.0, 4.0)),
            )
        }
        // Left turn across two same-direction lanes before merging.
        ScenarioId::Left2 => {
            let mut pts = vec![Vec2::new(0.0, -11.5), Vec2::new(0.0, -2.5)];
            pts.extend(arc_points(Vec2::new(-4.5, -2.5), 4.5, 0.0, FRAC_PI_2, 15.0));
            pts.push(Vec2::new(-60.0, 2.0));
            base_spec(
                "left2",
                vec![eastbound(1, -2.0), eastbound(2, -6.0), westbound(1, 2.0)],
                pts,
                Aabb::new(Vec2::new(-8.0, -8.0), Vec2::new(8.0, 4.0)),
            )
        }
        // Perpendicular crossing of a two-lane road.
        ScenarioId::Forward => base_spec(
            "forward",
            vec![eastbound(1, -2.0), westbound(1, 2.0)],
            vec![Vec2::new(0.0, -7.5), Vec2::new(0.0, 40.0)],
            Aabb::new(Vec2::new(-8.0, -4.0), Vec2::new(8.0, 4.0)),
        ),
        // Perpendicular crossing of a six-lane road, three each way.
        ScenarioId::Challenge => base_spec(
            "challenge",
            vec![
                eastbound(1, -2.0),
                eastbound(2, -6.0),
                eastbound(3, -10.0),
                westbound(1, 2.0),
                westbound(2, 6.0),
                westbound(3, 10.0),
            ],
            vec![Vec2::new(0.0, -15.5), Vec2::new(0.0, 48.0)],
            Aabb::new(Vec2::new(-8.0, -12.0), Vec2::new(8.0, 12.0)),
        ),
    }
}

/// Loads a scenario by built-in name (case-insensitive) or from a TOML
/// config file path. The returned spec has passed validation.
pub fn load_scenario(name_or_path: &str) -> Result<ScenarioSpec, ScenarioError> {
    let spec = match ScenarioId::from_str(name_or_path) {
        Ok(id) => builtin(id),
        Err(e) => {
            let path = Path::new(name_or_path);
            if !path.exists() {
                return Err(e);
            }
            from_toml_str(&std::fs::read_to_string(path)?)?
        }
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Config file format (documented in the guide's interface chapter).

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    speed_limit: Option<f64>,
    max_steps: Option<u32>,
    depart_prob: Option<f64>,
    krauss_sigma: Option<f64>,
    /// [xmin, ymin, xmax, ymax]
    conflict_zone: [f64; 4],
    /// [[x, y], ...]
    ego_path: Vec<[f64; 2]>,
    #[serde(rename = "lane")]
    lanes: Vec<RawLane>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLane {
    name: String,
    width: Option<f64>,
    centerline: Vec<[f64; 2]>,
}

/// Parses the scenario TOML schema. Does not validate; `load_scenario` does.
pub fn from_toml_str(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let ego_path = Polyline::new(raw.ego_path.iter().map(|p| Vec2::new(p[0], p[1])).collect())
        .map_err(|e| invalid("ego_path", e))?;
    let mut lanes = Vec::with_capacity(raw.lanes.len());
    for l in raw.lanes {
        let center = Polyline::new(l.centerline.iter().map(|p| Vec2::new(p[0], p[1])).collect())
            .map_err(|e| invalid("lane.centerline", format!("lane '{}': {e}", l.name)))?;
        lanes.push(Lane { name: l.name, width: l.width.unwrap_or(4.0), center });
    }
    let [x0, y0, x1, y1] = raw.conflict_zone;
    let mut traffic = TrafficParams::default();
    if let Some(p) = raw.depart_prob {
        traffic.depart_prob = p;
    }
    if let Some(s) = raw.krauss_sigma {
        traffic.krauss_sigma = s;
    }
    Ok(ScenarioSpec {
        name: raw.name,
        lanes,
        ego_path,
        conflict_zone: Aabb::new(Vec2::new(x0, y0), Vec2::new(x1, y1)),
        speed_limit: raw.speed_limit.unwrap_or(20.0),
        max_steps: raw.max_steps.unwrap_or(100),
        traffic,
        grid: GridWindow::default(),
        ego_length: 5.0,
        ego_width: 2.0,
        ego_accel: 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_builtins_validate() {
        for id in ScenarioId::ALL {
            let spec = load_scenario(id.name()).unwrap();
            assert_eq!(spec.name, id.name());
            assert!(spec.validate().is_ok(), "{id} failed validation");
        }
    }

    #[test]
    fn lookup_is_case_insensitive() {
        assert_eq!(load_scenario("Forward").unwrap().name, "forward");
        assert_eq!(load_scenario("LEFT2").unwrap().name, "left2");
    }

    #[test]
    fn unknown_name_is_rejected() {
        match load_scenario("nosuch") {
            Err(ScenarioError::UnknownScenario(n)) => assert_eq!(n, "nosuch"),
            other => panic!("expected UnknownScenario, got {other:?}"),
        }
    }

    #[test]
    fn forward_crosses_two_opposing_lanes() {
        let spec = builtin(ScenarioId::Forward);
        assert_eq!(spec.lanes.len(), 2);
        let dirs: Vec<f64> = spec.lanes.iter().map(|l| l.center.tangent_at(0.0).x).collect();
        assert!(dirs[0] > 0.0 && dirs[1] < 0.0);
    }

    #[test]
    fn left2_crosses_two_same_direction_lanes_before_merging() {
        let spec = builtin(ScenarioId::Left2);
        // Crossed lanes are the ones intersecting the straight approach
        // segment, i.e. centerlines with y between the path start and the arc.
        let crossed: Vec<&Lane> = spec
            .lanes
            .iter()
            .filter(|l| {
                let y = l.center.points()[0].y;
                y < -0.5 && l.center.tangent_at(0.0).x > 0.0
            })
            .collect();
        assert_eq!(crossed.len(), 2, "ego must cross exactly 2 same-direction lanes");
    }

    #[test]
    fn config_file_roundtrip_and_field_errors() {
        let text = r#"
            name = "custom"
            speed_limit = 15.0
            conflict_zone = [-8.0, -4.0, 8.0, 4.0]
            ego_path = [[0.0, -7.5], [0.0, 40.0]]

            [[lane]]
            name = "east"
            centerline = [[-100.0, -2.0], [100.0, -2.0]]
        "#;
        let spec = from_toml_str(text).unwrap();
        assert_eq!(spec.speed_limit, 15.0);
        spec.validate().unwrap();

        let bad = text.replace("speed_limit = 15.0", "depart_prob = 1.5");
        let err = from_toml_str(&bad).unwrap().validate().unwrap_err();
        match err {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "depart_prob"),
            other => panic!("expected Invalid {{ depart_prob }}, got {other:?}"),
        }
    }

    #[test]
    fn trivial_task_is_rejected() {
        let text = r#"
            name = "no-crossing"
            conflict_zone = [-8.0, -4.0, 8.0, 4.0]
            ego_path = [[0.0, -7.5], [0.0, 40.0]]

            [[lane]]
            name = "far-east"
            centerline = [[-100.0, -90.0], [100.0, -90.0]]
        "#;
        let err = from_toml_str(text).unwrap().validate().unwrap_err();
        match err {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "ego_path"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
