//! Ego-centric state encoding: traffic is rasterized into a fixed-shape
//! multi-channel grid aligned with the ego heading.
//!
//! The grid is 4 channels x 18 rows x 26 columns. Rows run along the ego
//! heading (row 0 is the far look-behind edge), columns run laterally (column
//! 0 is the far left edge). With the default window of 10 m behind, 44 m
//! ahead, and 52 m to each side, one cell covers 3 m x 4 m.

use crate::geom::Vec2;
use crate::scenario::GridWindow;
use ndarray::Array3;

pub const CHANNELS: usize = 4;
pub const ROWS: usize = 18;
pub const COLS: usize = 26;

/// Channel meanings, in storage order.
pub const CH_OCCUPANCY: usize = 0;
pub const CH_SPEED: usize = 1;
pub const CH_HEADING_COS: usize = 2;
pub const CH_HEADING_SIN: usize = 3;

pub type Grid = Array3<f32>;

pub fn empty_grid() -> Grid {
    Array3::zeros((CHANNELS, ROWS, COLS))
}

/// A moving body to rasterize. `heading` need not be normalized.
#[derive(Clone, Copy, Debug)]
pub struct Entity {
    pub pos: Vec2,
    pub vel: Vec2,
    pub heading: Vec2,
}

/// Rasterizes `entities` into the grid seen from the ego pose.
///
/// Each entity marks the cell containing its center with four values:
/// occupancy 1, speed as a fraction of the limit clamped to [0, 1], and the
/// cosine and sine of its heading relative to the ego heading. When two
/// entities land in one cell the one nearer the ego wins.
pub fn encode_entities(
    window: &GridWindow,
    ego_pos: Vec2,
    ego_heading: Vec2,
    speed_limit: f64,
    entities: &[Entity],
) -> Grid {
    let mut grid = empty_grid();
    let he = ego_heading.normalized();
    let left = he.perp();
    let cell_long = (window.behind + window.ahead) / ROWS as f64;
    let cell_lat = (2.0 * window.half_span) / COLS as f64;
    // Nearer entities overwrite farther ones per cell.
    let mut dist = [[f64::INFINITY; COLS]; ROWS];

    for e in entities {
        let rel = e.pos - ego_pos;
        let long = rel.dot(he);
        let lat = rel.dot(left);
        let row = ((long + window.behind) / cell_long).floor();
        let col = ((lat + window.half_span) / cell_lat).floor();
        if row < 0.0 || row >= ROWS as f64 || col < 0.0 || col >= COLS as f64 {
            continue;
        }
        let (r, c) = (row as usize, col as usize);
        let d = rel.norm();
        if d >= dist[r][c] {
            continue;
        }
        dist[r][c] = d;
        let hv = e.heading.normalized();
        grid[[CH_OCCUPANCY, r, c]] = 1.0;
        grid[[CH_SPEED, r, c]] = (e.vel.norm() / speed_limit).clamp(0.0, 1.0) as f32;
        grid[[CH_HEADING_COS, r, c]] = he.dot(hv) as f32;
        grid[[CH_HEADING_SIN, r, c]] = he.cross(hv) as f32;
    }
    grid
}

/// Sparse copy of a grid for long-term storage. Scenes hold a few dozen
/// vehicles at most, so storing only occupied cells shrinks a replay buffer
/// by two orders of magnitude. The round trip through [`CompactGrid::to_dense`]
/// is exact: occupancy in an encoded grid is always exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactGrid {
    /// (row * COLS + col, [speed, heading cos, heading sin]) per occupied cell.
    cells: Vec<(u16, [f32; 3])>,
}

impl CompactGrid {
    pub fn from_dense(grid: &Grid) -> CompactGrid {
        let mut cells = Vec::new();
        for r in 0..ROWS {
            for c in 0..COLS {
                let occ = grid[[CH_OCCUPANCY, r, c]];
                debug_assert!(occ == 0.0 || occ == 1.0);
                if occ != 0.0 {
                    cells.push((
                        (r * COLS + c) as u16,
                        [grid[[CH_SPEED, r, c]], grid[[CH_HEADING_COS, r, c]], grid[[CH_HEADING_SIN, r, c]]],
                    ));
                }
            }
        }
        CompactGrid { cells }
    }

    pub fn to_dense(&self) -> Grid {
        let mut grid = empty_grid();
        self.write_dense(&mut grid.view_mut());
        grid
    }

    /// Writes into a zeroed [CHANNELS, ROWS, COLS] view, for batch assembly
    /// without per-sample allocation.
    pub fn write_dense(&self, out: &mut ndarray::ArrayViewMut3<'_, f32>) {
        for &(idx, vals) in &self.cells {
            let (r, c) = (idx as usize / COLS, idx as usize % COLS);
            out[[CH_OCCUPANCY, r, c]] = 1.0;
            out[[CH_SPEED, r, c]] = vals[0];
            out[[CH_HEADING_COS, r, c]] = vals[1];
            out[[CH_HEADING_SIN, r, c]] = vals[2];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(pos: Vec2, vel: Vec2, heading: Vec2) -> Vec<Entity> {
        vec![Entity { pos, vel, heading }]
    }

    #[test]
    fn compact_roundtrip_is_exact() {
        let w = GridWindow::default();
        let he = Vec2::new(0.0, 1.0);
        let entities: Vec<Entity> = (0..12)
            .map(|i| Entity {
                pos: Vec2::new(-40.0 + 7.0 * i as f64, -8.0 + 4.0 * i as f64),
                vel: Vec2::new(1.5 * i as f64, 0.3),
                heading: Vec2::new(1.0, 0.2 * i as f64),
            })
            .collect();
        let dense = encode_entities(&w, Vec2::new(0.0, 0.0), he, 20.0, &entities);
        let compact = CompactGrid::from_dense(&dense);
        assert_eq!(compact.to_dense(), dense);
        assert!(!compact.cells.is_empty());
    }

    // Ego at origin heading +y. A car 8 m to its right and 6 m ahead, moving
    // at half the limit along -x (a left-to-right crosser seen from the ego,
    // heading rotated +90 degrees from the ego's):
    //   row = floor((6 + 10) / 3)  = 5
    //   col = floor((-8 + 52) / 4) = 11
    #[test]
    fn known_placement_and_channels() {
        let w = GridWindow::default();
        let ego = Vec2::new(0.0, 0.0);
        let he = Vec2::new(0.0, 1.0);
        let g = encode_entities(
            &w,
            ego,
            he,
            20.0,
            &one(Vec2::new(8.0, 6.0), Vec2::new(-10.0, 0.0), Vec2::new(-1.0, 0.0)),
        );
        assert_eq!(g[[CH_OCCUPANCY, 5, 11]], 1.0);
        assert_eq!(g[[CH_SPEED, 5, 11]], 0.5);
        assert!(g[[CH_HEADING_COS, 5, 11]].abs() < 1e-6);
        assert_eq!(g[[CH_HEADING_SIN, 5, 11]], 1.0);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn out_of_window_entities_vanish() {
        let w = GridWindow::default();
        let he = Vec2::new(0.0, 1.0);
        for pos in [
            Vec2::new(0.0, 44.0),   // at the ahead edge (half-open)
            Vec2::new(0.0, -10.5),  // behind the look-behind edge
            Vec2::new(-52.0, 5.0),  // at the left edge, which is excluded
            Vec2::new(-60.0, 5.0),
        ] {
            let g = encode_entities(&w, Vec2::new(0.0, 0.0), he, 20.0, &one(pos, Vec2::new(0.0, 0.0), he));
            assert!(g.iter().all(|&v| v == 0.0), "entity at {pos:?} should be outside");
        }
    }

    #[test]
    fn nearest_entity_wins_the_cell() {
        let w = GridWindow::default();
        let he = Vec2::new(0.0, 1.0);
        // Both map to the same cell; the second is nearer the ego.
        let far = Entity { pos: Vec2::new(0.5, 7.4), vel: Vec2::new(20.0, 0.0), heading: Vec2::new(1.0, 0.0) };
        let near = Entity { pos: Vec2::new(0.5, 6.2), vel: Vec2::new(5.0, 0.0), heading: Vec2::new(1.0, 0.0) };
        for order in [[far, near], [near, far]] {
            let g = encode_entities(&w, Vec2::new(0.0, 0.0), he, 20.0, &order);
            assert_eq!(g[[CH_SPEED, 5, 12]], 0.25, "near entity's speed must win");
        }
    }

    #[test]
    fn rotation_follows_the_ego_frame() {
        // Same scene, ego rotated to +x: longitudinal/lateral swap so the car
        // ahead stays at the same row/col.
        let w = GridWindow::default();
        let car_ahead_of = |ego_h: Vec2, d_long: f64, d_lat: f64| {
            let left = ego_h.perp();
            let pos = ego_h * d_long + left * d_lat;
            encode_entities(&w, Vec2::new(0.0, 0.0), ego_h, 20.0, &one(pos, ego_h * 10.0, ego_h))
        };
        let a = car_ahead_of(Vec2::new(0.0, 1.0), 20.5, 3.5);
        let b = car_ahead_of(Vec2::new(1.0, 0.0), 20.5, 3.5);
        let c = car_ahead_of(Vec2::new(-0.6, 0.8), 20.5, 3.5);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a[[CH_HEADING_COS, 10, 13]], 1.0);
    }
}
