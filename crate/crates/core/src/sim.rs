//! Agent-based synthetic crowd generator.
//!
//! Produces observation frames together with exact ground truth: per-cell
//! head counts, inter-cell flows (including boundary entries and exits on
//! the outside channel), and per-cell mean optical flow. Every run is a pure
//! function of its seed.
//!
//! Agents are points in cell units; positions live in `[0, cols) x [0,
//! rows)` and the cell of an agent is `(floor(y), floor(x))`. Speeds are
//! capped at one cell per frame so an agent can never move beyond the 3x3
//! neighborhood of its cell between consecutive frames.

use crate::error::{FlowError, Result};
use crate::grid::{
    channel_for_offset, FlowDirection, FlowField, GridShape, OpticalFlowField, OUTSIDE_CHANNEL,
};
use crate::seed::{rng_for, rng_for_indexed};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    /// Two horizontal bands walking in opposite directions.
    Lanes,
    /// Counterclockwise rotation around the grid center.
    Swirl,
    /// Independent bounded random walks.
    RandomWalk,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    pub shape: GridShape,
    pub n_agents: usize,
    /// Cells per frame; must not exceed 1 (single-step reachability).
    pub speed_max: f64,
    /// New agents per frame entering at boundary cells.
    pub entry_rate: f64,
    pub exit_enabled: bool,
    pub motion_model: MotionModel,
    pub seed: u64,
    pub n_frames: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.speed_max) {
            return Err(FlowError::Config(format!(
                "speed_max must be in [0, 1] cells/frame, got {}",
                self.speed_max
            )));
        }
        if self.entry_rate < 0.0 || !self.entry_rate.is_finite() {
            return Err(FlowError::Config(format!(
                "entry_rate must be non-negative, got {}",
                self.entry_rate
            )));
        }
        if self.n_frames == 0 {
            return Err(FlowError::Config("n_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agent {
    pub id: u64,
    /// (x, y) in cell units.
    pub pos: (f64, f64),
    /// (vx, vy) in cells per frame.
    pub vel: (f64, f64),
}

impl Agent {
    #[inline]
    pub fn cell(&self, shape: GridShape) -> usize {
        let c = (self.pos.0.floor() as usize).min(shape.cols - 1);
        let r = (self.pos.1.floor() as usize).min(shape.rows - 1);
        shape.index(r, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub agents: Vec<Agent>,
    pub frame_index: usize,
    pub next_id: u64,
}

impl SimState {
    /// Integer per-cell head count.
    pub fn counts(&self, shape: GridShape) -> Vec<f64> {
        let mut counts = vec![0.0; shape.len()];
        for a in &self.agents {
            counts[a.cell(shape)] += 1.0;
        }
        counts
    }

    /// Head positions in pixels.
    pub fn head_pixels(&self, shape: GridShape) -> Vec<(f64, f64)> {
        let px = shape.cell_px as f64;
        self.agents
            .iter()
            .map(|a| (a.pos.0 * px, a.pos.1 * px))
            .collect()
    }
}

/// Grayscale observation frame, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub shape: GridShape,
    pub pixels: Vec<f64>,
}

impl ObservationFrame {
    pub fn zeros(shape: GridShape) -> Self {
        ObservationFrame {
            shape,
            pixels: vec![0.0; shape.width_px() * shape.height_px()],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width_px()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height_px()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width() + x]
    }

    /// Copies the cell rectangle `[r0, r0+h) x [c0, c0+w)` into a new frame.
    pub fn crop_cells(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<ObservationFrame> {
        let s = self.shape;
        if r0 + h > s.rows || c0 + w > s.cols || h == 0 || w == 0 {
            return Err(FlowError::Region(format!(
                "crop [{r0}+{h}, {c0}+{w}) outside grid {s}"
            )));
        }
        let sub = GridShape::new(h, w, s.cell_px)?;
        let mut out = ObservationFrame::zeros(sub);
        let px = s.cell_px;
        for y in 0..h * px {
            let src_y = r0 * px + y;
            let src_row = &self.pixels[src_y * self.width() + c0 * px..][..w * px];
            out.pixels[y * w * px..(y + 1) * w * px].copy_from_slice(src_row);
        }
        Ok(out)
    }
}

fn lane_direction(y: f64, rows: usize) -> f64 {
    if y < rows as f64 / 2.0 {
        1.0
    } else {
        -1.0
    }
}

/// Lanes occupy two horizontal bands (rows/8..3rows/8 and 5rows/8..7rows/8)
/// walking in opposite directions, leaving the rest of the scene empty.
fn lane_bands(rows: usize) -> [(f64, f64); 2] {
    let r = rows as f64;
    [(r / 8.0, 3.0 * r / 8.0), (5.0 * r / 8.0, 7.0 * r / 8.0)]
}

fn spawn_agent(
    config: &SimConfig,
    rng: &mut impl Rng,
    id: u64,
    at_boundary: bool,
) -> Agent {
    let shape = config.shape;
    let (cols, rows) = (shape.cols as f64, shape.rows as f64);
    let speed = config.speed_max * rng.random_range(0.5..1.0);
    match config.motion_model {
        MotionModel::Lanes => {
            let bands = lane_bands(shape.rows);
            let band = bands[rng.random_range(0..2usize)];
            let y = rng.random_range(band.0..band.1);
            let dir = lane_direction(y, shape.rows);
            // Entrants start on the upstream edge of their lane.
            let x = if at_boundary {
                if dir > 0.0 {
                    rng.random_range(0.0..0.5)
                } else {
                    cols - rng.random_range(0.0..0.5) - 1e-9
                }
            } else {
                rng.random_range(0.0..cols)
            };
            Agent {
                id,
                pos: (x, y),
                vel: (dir * speed, 0.0),
            }
        }
        MotionModel::Swirl => {
            let (cx, cy) = (cols / 2.0, rows / 2.0);
            let (x, y) = if at_boundary {
                boundary_position(shape, rng)
            } else {
                let radius = rng.random_range(0.15..0.45) * cols.min(rows);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                (cx + radius * angle.cos(), cy + radius * angle.sin())
            };
            let mut a = Agent {
                id,
                pos: (clamp_pos(x, cols), clamp_pos(y, rows)),
                vel: (0.0, 0.0),
            };
            a.vel = swirl_velocity(a.pos, shape, speed);
            a
        }
        MotionModel::RandomWalk => {
            let (x, y) = if at_boundary {
                boundary_position(shape, rng)
            } else {
                (rng.random_range(0.0..cols), rng.random_range(0.0..rows))
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Agent {
                id,
                pos: (x, y),
                vel: (speed * angle.cos(), speed * angle.sin()),
            }
        }
    }
}

fn boundary_position(shape: GridShape, rng: &mut impl Rng) -> (f64, f64) {
    let (cols, rows) = (shape.cols as f64, shape.rows as f64);
    match rng.random_range(0..4u8) {
        0 => (rng.random_range(0.0..cols), rng.random_range(0.0..0.5)),
        1 => (rng.random_range(0.0..cols), rows - rng.random_range(0.0..0.5) - 1e-9),
        2 => (rng.random_range(0.0..0.5), rng.random_range(0.0..rows)),
        _ => (cols - rng.random_range(0.0..0.5) - 1e-9, rng.random_range(0.0..rows)),
    }
}

fn clamp_pos(v: f64, hi: f64) -> f64 {
    v.clamp(0.0, hi - 1e-9)
}

/// Counterclockwise tangent around the grid center, in image coordinates
/// (y grows downward).
fn swirl_velocity(pos: (f64, f64), shape: GridShape, speed: f64) -> (f64, f64) {
    let (cx, cy) = (shape.cols as f64 / 2.0, shape.rows as f64 / 2.0);
    let (dx, dy) = (pos.0 - cx, pos.1 - cy);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm < 1e-9 {
        return (speed, 0.0);
    }
    (speed * dy / norm, -speed * dx / norm)
}

/// Seeds the initial population at frame 0.
pub fn init_state(config: &SimConfig) -> Result<SimState> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "sim-init");
    let agents = (0..config.n_agents)
        .map(|i| spawn_agent(config, &mut rng, i as u64, false))
        .collect();
    Ok(SimState {
        agents,
        frame_index: 0,
        next_id: config.n_agents as u64,
    })
}

/// Advances the crowd by one frame. Deterministic given the config seed and
/// the state's frame index.
pub fn step(state: &SimState, config: &SimConfig) -> Result<SimState> {
    config.validate()?;
    let shape = config.shape;
    let (cols, rows) = (shape.cols as f64, shape.rows as f64);
    let mut rng = rng_for_indexed(config.seed, "sim-step", state.frame_index as u64);
    let mut agents = Vec::with_capacity(state.agents.len());
    for a in &state.agents {
        let mut vel = match config.motion_model {
            MotionModel::Lanes => a.vel,
            MotionModel::Swirl => {
                let speed = (a.vel.0 * a.vel.0 + a.vel.1 * a.vel.1).sqrt();
                swirl_velocity(a.pos, shape, speed)
            }
            MotionModel::RandomWalk => {
                let turn: f64 = rng.random_range(-0.5..0.5);
                let (vx, vy) = a.vel;
                (
                    vx * turn.cos() - vy * turn.sin(),
                    vx * turn.sin() + vy * turn.cos(),
                )
            }
        };
        let norm = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
        if norm > config.speed_max && norm > 0.0 {
            let scale = config.speed_max / norm;
            vel = (vel.0 * scale, vel.1 * scale);
        }
        let mut x = a.pos.0 + vel.0;
        let mut y = a.pos.1 + vel.1;
        let escaped = x < 0.0 || x >= cols || y < 0.0 || y >= rows;
        if escaped && config.exit_enabled {
            continue;
        }
        if escaped {
            // Reflect off the walls and flip the velocity component.
            if x < 0.0 {
                x = -x;
                vel.0 = -vel.0;
            } else if x >= cols {
                x = (2.0 * cols - x).min(cols - 1e-9);
                vel.0 = -vel.0;
            }
            if y < 0.0 {
                y = -y;
                vel.1 = -vel.1;
            } else if y >= rows {
                y = (2.0 * rows - y).min(rows - 1e-9);
                vel.1 = -vel.1;
            }
        }
        agents.push(Agent {
            id: a.id,
            pos: (x, y),
            vel,
        });
    }

    // Deterministic fractional entry schedule.
    let t = state.frame_index as f64;
    let n_enter = ((t + 1.0) * config.entry_rate).floor() - (t * config.entry_rate).floor();
    let mut next_id = state.next_id;
    for _ in 0..n_enter as usize {
        agents.push(spawn_agent(config, &mut rng, next_id, true));
        next_id += 1;
    }

    Ok(SimState {
        agents,
        frame_index: state.frame_index + 1,
        next_id,
    })
}

/// Exact inter-cell people flows between two adjacent frames.
///
/// Every agent present in both states increments the channel at its earlier
/// cell pointing to its later cell; agents that appear or disappear
/// increment the outside channel at the boundary cell where they do so. All
/// values are integers, so summing them reproduces head counts exactly.
pub fn ground_truth_flow(prev: &SimState, next: &SimState, shape: GridShape) -> Result<FlowField> {
    let direction = match next.frame_index as i64 - prev.frame_index as i64 {
        1 => FlowDirection::Forward,
        -1 => FlowDirection::Backward,
        d => {
            return Err(FlowError::Assumption(format!(
                "states must be adjacent frames, got frame delta {d}"
            )))
        }
    };
    let mut field = FlowField::zeros(shape, direction);
    let next_cells: BTreeMap<u64, usize> = next
        .agents
        .iter()
        .map(|a| (a.id, a.cell(shape)))
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for a in &prev.agents {
        let from = a.cell(shape);
        match next_cells.get(&a.id) {
            Some(&to) => {
                seen.insert(a.id);
                let (fr, fc) = shape.coords(from);
                let (tr, tc) = shape.coords(to);
                let (dr, dc) = (tr as i64 - fr as i64, tc as i64 - fc as i64);
                let ch = channel_for_offset(dr, dc).ok_or_else(|| {
                    FlowError::Assumption(format!(
                        "agent {} jumped {dr},{dc} cells in one frame",
                        a.id
                    ))
                })?;
                field.add(from, ch, 1.0);
            }
            None => {
                if !shape.is_boundary(from) {
                    return Err(FlowError::Assumption(format!(
                        "agent {} vanished from interior cell {from}",
                        a.id
                    )));
                }
                field.add(from, OUTSIDE_CHANNEL, 1.0);
            }
        }
    }
    for a in &next.agents {
        if !seen.contains(&a.id) {
            let at = a.cell(shape);
            if !shape.is_boundary(at) {
                return Err(FlowError::Assumption(format!(
                    "agent {} appeared at interior cell {at}",
                    a.id
                )));
            }
            field.add(at, OUTSIDE_CHANNEL, 1.0);
        }
    }
    Ok(field)
}

/// Mean pixel displacement of the agents starting in each cell; zero where
/// no agent both starts and survives the step.
pub fn ground_truth_optical(
    prev: &SimState,
    next: &SimState,
    shape: GridShape,
) -> OpticalFlowField {
    let next_pos: BTreeMap<u64, (f64, f64)> =
        next.agents.iter().map(|a| (a.id, a.pos)).collect();
    let px = shape.cell_px as f64;
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); shape.len()];
    for a in &prev.agents {
        if let Some(&(nx, ny)) = next_pos.get(&a.id) {
            let cell = a.cell(shape);
            sums[cell].0 += (nx - a.pos.0) * px;
            sums[cell].1 += (ny - a.pos.1) * px;
            sums[cell].2 += 1;
        }
    }
    let mut field = OpticalFlowField::zeros(shape);
    for (cell, (su, sv, n)) in sums.iter().enumerate() {
        if *n > 0 {
            field.set(cell, su / *n as f64, sv / *n as f64);
        }
    }
    field
}

/// Pixel standard deviation of an agent blob.
pub fn blob_sigma(shape: GridShape) -> f64 {
    shape.cell_px as f64 / 2.0
}

const BLOB_TRUNCATION: f64 = 4.0;

/// Renders every agent as a truncated unit-mass Gaussian blob on a zero
/// background, clamped to [0, 1].
pub fn rasterize(state: &SimState, config: &SimConfig) -> ObservationFrame {
    let shape = config.shape;
    let mut frame = ObservationFrame::zeros(shape);
    let sigma = blob_sigma(shape);
    let radius = BLOB_TRUNCATION * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let px = shape.cell_px as f64;
    for a in &state.agents {
        let (ax, ay) = (a.pos.0 * px, a.pos.1 * px);
        let x0 = ((ax - radius).floor() as i64).max(0);
        let x1 = ((ax + radius).ceil() as i64).min(w - 1);
        let y0 = ((ay - radius).floor() as i64).max(0);
        let y1 = ((ay + radius).ceil() as i64).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5) - ax;
                let dy = (y as f64 + 0.5) - ay;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    frame.pixels[(y * w + x) as usize] += norm * (-d2 * inv2s2).exp();
                }
            }
        }
    }
    for v in &mut frame.pixels {
        *v = v.min(1.0);
    }
    frame
}

/// Runs a configured simulation and returns the state of every frame.
pub fn run(config: &SimConfig) -> Result<Vec<SimState>> {
    let mut states = Vec::with_capacity(config.n_frames);
    states.push(init_state(config)?);
    for _ in 1..config.n_frames {
        let next = step(states.last().unwrap(), config)?;
        states.push(next);
    }
    Ok(states)
}
