//! Ground-truth density rendering from head annotations.
//!
//! A density map is the sum of truncated unit-mass 2D Gaussian kernels
//! centered on head positions, evaluated at cell centers. The same kernel is
//! applied everywhere; with a homography the heads can be mapped to a metric
//! ground plane first and rendered there with a single scene-wide kernel.

use crate::error::{FlowError, Result};
use crate::grid::{DensityMap, GridShape, OpticalFlowField};
use serde::{Deserialize, Serialize};

/// Head annotations for one frame, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFrame {
    pub time_index: usize,
    pub heads: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_mask: Option<Vec<bool>>,
}

impl AnnotationFrame {
    pub fn new(time_index: usize, heads: Vec<(f64, f64)>) -> Self {
        AnnotationFrame {
            time_index,
            heads,
            roi_mask: None,
        }
    }

    pub fn validate(&self, shape: Option<GridShape>) -> Result<()> {
        for (i, (x, y)) in self.heads.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(FlowError::Annotation(format!(
                    "head {i} of frame {} is non-finite",
                    self.time_index
                )));
            }
        }
        if let (Some(mask), Some(shape)) = (&self.roi_mask, shape) {
            if mask.len() != shape.len() {
                return Err(FlowError::shape_mismatch(
                    format!("roi mask of {} cells", shape.len()),
                    format!("{}", mask.len()),
                ));
            }
        }
        Ok(())
    }
}

/// 3x3 projective transform, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [f64; 9],
}

impl Homography {
    pub fn new(m: [f64; 9]) -> Result<Self> {
        let h = Homography { m };
        if h.det().abs() <= 1e-12 {
            return Err(FlowError::Config(format!(
                "homography is singular (det {})",
                h.det()
            )));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Homography {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0],
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Inverse via the adjugate.
    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() <= 1e-12 {
            return Err(FlowError::Config("homography is singular".into()));
        }
        let m = &self.m;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Homography::new(adj.map(|v| v / d))
    }
}

/// Projective transform of 2D points with division by the third homogeneous
/// coordinate. A point whose third coordinate vanishes maps to the horizon
/// and is rejected.
pub fn map_points(points: &[(f64, f64)], h: &Homography) -> Result<Vec<(f64, f64)>> {
    let m = &h.m;
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let w = m[6] * x + m[7] * y + m[8];
            if w.abs() < 1e-12 {
                return Err(FlowError::Horizon { index: i });
            }
            Ok((
                (m[0] * x + m[1] * y + m[2]) / w,
                (m[3] * x + m[4] * y + m[5]) / w,
            ))
        })
        .collect()
}

/// Isotropic Gaussian kernel: `sigma` in cell units for the image plane or
/// meters for the ground plane; evaluation truncated beyond
/// `truncation_radius * sigma`, without renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub sigma: f64,
    pub truncation_radius: f64,
}

impl KernelSpec {
    pub fn new(sigma: f64, truncation_radius: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(FlowError::Config(format!("sigma must be positive, got {sigma}")));
        }
        if truncation_radius < 3.0 {
            return Err(FlowError::Config(format!(
                "truncation_radius must be at least 3, got {truncation_radius}"
            )));
        }
        Ok(KernelSpec {
            sigma,
            truncation_radius,
        })
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            sigma: 2.0,
            truncation_radius: 4.0,
        }
    }
}

/// Splats unit-mass Gaussians at `points` (cell units) onto cell centers.
/// Shared by the image-plane and ground-plane paths so that congruent
/// geometries produce bitwise-identical maps.
fn splat(points: &[(f64, f64)], sigma: f64, truncation_radius: f64, shape: GridShape) -> DensityMap {
    let mut map = DensityMap::zeros(shape);
    let radius = truncation_radius * sigma;
    let r2 = radius * radius;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let (rows, cols) = (shape.rows as i64, shape.cols as i64);
    for &(px, py) in points {
        let c0 = ((px - radius - 0.5).floor() as i64).max(0);
        let c1 = ((px + radius - 0.5).ceil() as i64).min(cols - 1);
        let r0 = ((py - radius - 0.5).floor() as i64).max(0);
        let r1 = ((py + radius - 0.5).ceil() as i64).min(rows - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dx = (c as f64 + 0.5) - px;
                let dy = (r as f64 + 0.5) - py;
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    map.values_mut()[(r * cols + c) as usize] += norm * (-d2 * inv2s2).exp();
                }
            }
        }
    }
    map
}

/// Renders head annotations into an image-plane density map. Heads outside
/// the image bounds are rejected.
pub fn render_density(
    frame: &AnnotationFrame,
    kernel: &KernelSpec,
    shape: GridShape,
) -> Result<DensityMap> {
    frame.validate(Some(shape))?;
    let (w, h) = (shape.width_px() as f64, shape.height_px() as f64);
    for (i, &(x, y)) in frame.heads.iter().enumerate() {
        if x < 0.0 || y < 0.0 || x >= w || y >= h {
            return Err(FlowError::Annotation(format!(
                "head {i} of frame {} at ({x}, {y}) is outside the {w}x{h} image",
                frame.time_index
            )));
        }
    }
    let px = shape.cell_px as f64;
    let points: Vec<(f64, f64)> = frame.heads.iter().map(|&(x, y)| (x / px, y / px)).collect();
    Ok(splat(&points, kernel.sigma, kernel.truncation_radius, shape))
}

/// Renders head annotations on the ground plane reached through `h`, over
/// cells of `cell_m` meters. Heads that map outside the ground grid are
/// dropped; their count is returned alongside the map.
pub fn render_ground_density(
    frame: &AnnotationFrame,
    h: &Homography,
    kernel: &KernelSpec,
    ground_shape: GridShape,
    cell_m: f64,
) -> Result<(DensityMap, usize)> {
    frame.validate(None)?;
    if cell_m <= 0.0 || !cell_m.is_finite() {
        return Err(FlowError::Config(format!(
            "ground cell size must be positive, got {cell_m}"
        )));
    }
    let mapped = map_points(&frame.heads, h)?;
    if mapped.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FlowError::Numeric("mapped head is non-finite".into()));
    }
    let (cols, rows) = (ground_shape.cols as f64, ground_shape.rows as f64);
    let mut clipped = 0usize;
    let points: Vec<(f64, f64)> = mapped
        .iter()
        .map(|&(x, y)| (x / cell_m, y / cell_m))
        .filter(|&(x, y)| {
            let inside = x >= 0.0 && y >= 0.0 && x < cols && y < rows;
            if !inside {
                clipped += 1;
            }
            inside
        })
        .collect();
    let sigma_cells = kernel.sigma / cell_m;
    Ok((
        splat(&points, sigma_cells, kernel.truncation_radius, ground_shape),
        clipped,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    /// Displace heads along the flow.
    Along,
    /// Displace heads against the flow.
    Against,
}

impl WarpDirection {
    fn sign(self) -> f64 {
        match self {
            WarpDirection::Along => 1.0,
            WarpDirection::Against => -1.0,
        }
    }
}

/// Bilinearly samples a cell-resolution optical flow field at a pixel
/// position. Samples sit at cell centers; the field is clamped at the edges.
pub fn sample_optical(field: &OpticalFlowField, x_px: f64, y_px: f64) -> (f64, f64) {
    let shape = field.shape;
    let px = shape.cell_px as f64;
    let gx = (x_px / px - 0.5).clamp(0.0, (shape.cols - 1) as f64);
    let gy = (y_px / px - 0.5).clamp(0.0, (shape.rows - 1) as f64);
    let c0 = (gx.floor() as usize).min(shape.cols.saturating_sub(2));
    let r0 = (gy.floor() as usize).min(shape.rows.saturating_sub(2));
    let fx = gx - c0 as f64;
    let fy = gy - r0 as f64;
    let c1 = (c0 + 1).min(shape.cols - 1);
    let r1 = (r0 + 1).min(shape.rows - 1);
    let v00 = field.get(shape.index(r0, c0));
    let v01 = field.get(shape.index(r0, c1));
    let v10 = field.get(shape.index(r1, c0));
    let v11 = field.get(shape.index(r1, c1));
    let mix = |a: f64, b: f64, c: f64, d: f64| {
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    };
    (mix(v00.0, v01.0, v10.0, v11.0), mix(v00.1, v01.1, v10.1, v11.1))
}

/// Displaces each head by the sampled flow vector. Heads warped outside the
/// image are dropped; their count is returned alongside the new frame.
pub fn warp_heads(
    frame: &AnnotationFrame,
    optical: &OpticalFlowField,
    direction: WarpDirection,
) -> Result<(AnnotationFrame, usize)> {
    frame.validate(None)?;
    let shape = optical.shape;
    let (w, h) = (shape.width_px() as f64, shape.height_px() as f64);
    let sign = direction.sign();
    let mut dropped = 0usize;
    let mut heads = Vec::with_capacity(frame.heads.len());
    for &(x, y) in &frame.heads {
        let (u, v) = sample_optical(optical, x, y);
        let nx = x + sign * u;
        let ny = y + sign * v;
        if nx < 0.0 || ny < 0.0 || nx >= w || ny >= h {
            dropped += 1;
        } else {
            heads.push((nx, ny));
        }
    }
    Ok((
        AnnotationFrame {
            time_index: frame.time_index,
            heads,
            roi_mask: frame.roi_mask.clone(),
        },
        dropped,
    ))
}

/// Integer per-cell head count; the unsmoothed counterpart of
/// [`render_density`], used by exact oracles and evaluation targets.
pub fn bin_heads(frame: &AnnotationFrame, shape: GridShape) -> Result<DensityMap> {
    frame.validate(Some(shape))?;
    let mut map = DensityMap::zeros(shape);
    let px = shape.cell_px as f64;
    for (i, &(x, y)) in frame.heads.iter().enumerate() {
        let c = (x / px).floor();
        let r = (y / px).floor();
        if c < 0.0 || r < 0.0 || c >= shape.cols as f64 || r >= shape.rows as f64 {
            return Err(FlowError::Annotation(format!(
                "head {i} at ({x}, {y}) is outside the image"
            )));
        }
        map.values_mut()[shape.index(r as usize, c as usize)] += 1.0;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PI_INV: f64 = 1.0 / (2.0 * std::f64::consts::PI);

    fn shape(rows: usize, cols: usize, cell_px: usize) -> GridShape {
        GridShape::new(rows, cols, cell_px).unwrap()
    }

    #[test]
    fn no_heads_zero_map() {
        let frame = AnnotationFrame::new(0, vec![]);
        let m = render_density(&frame, &KernelSpec::default(), shape(4, 4, 8)).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_peak_is_closed_form() {
        let s = shape(9, 9, 8);
        // Cell (4, 4) center is at (4.5, 4.5) cells = (36, 36) px.
        let frame = AnnotationFrame::new(0, vec![(36.0, 36.0)]);
        let kernel = KernelSpec::new(1.0, 4.0).unwrap();
        let m = render_density(&frame, &kernel, s).unwrap();
        assert!((m.get(4, 4) - TWO_PI_INV).abs() < 1e-12);
    }

    #[test]
    fn mass_close_to_head_count() {
        use rand::{Rng, SeedableRng};
        let s = shape(32, 32, 8);
        let kernel = KernelSpec::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let margin = 3.0 * kernel.sigma * s.cell_px as f64;
        let heads: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                (
                    rng.random_range(margin..s.width_px() as f64 - margin),
                    rng.random_range(margin..s.height_px() as f64 - margin),
                )
            })
            .collect();
        let m = render_density(&AnnotationFrame::new(0, heads), &kernel, s).unwrap();
        assert!((m.total() - 50.0).abs() / 50.0 < 0.01, "total {}", m.total());
    }

    #[test]
    fn head_outside_image_rejected() {
        let s = shape(4, 4, 8);
        let frame = AnnotationFrame::new(0, vec![(100.0, 3.0)]);
        assert!(matches!(
            render_density(&frame, &KernelSpec::default(), s),
            Err(FlowError::Annotation(_))
        ));
    }

    #[test]
    fn shift_by_one_cell_is_exact_on_interior() {
        // Dyadic head coordinates shift exactly, so the rendered mass moves
        // by exactly one cell on interior cells.
        let s = shape(12, 12, 8);
        let kernel = KernelSpec::new(1.5, 3.0).unwrap();
        let heads = vec![(37.25, 41.5), (52.75, 44.0)];
        let shifted: Vec<(f64, f64)> = heads.iter().map(|&(x, y)| (x + 8.0, y)).collect();
        let a = render_density(&AnnotationFrame::new(0, heads), &kernel, s).unwrap();
        let b = render_density(&AnnotationFrame::new(0, shifted), &kernel, s).unwrap();
        for r in 0..12 {
            for c in 0..11 {
                assert_eq!(a.get(r, c), b.get(r, c + 1), "cell ({r}, {c})");
            }
        }
    }

    #[test]
    fn map_points_identity_and_translation() {
        let pts = vec![(1.0, 2.0), (-3.5, 0.25)];
        let same = map_points(&pts, &Homography::identity()).unwrap();
        assert_eq!(same, pts);
        let shifted = map_points(&pts, &Homography::translation(5.0, -2.0)).unwrap();
        assert_eq!(shifted, vec![(6.0, 0.0), (1.5, -1.75)]);
    }

    #[test]
    fn map_points_round_trip_through_inverse() {
        let h = Homography::new([1.2, 0.1, 3.0, -0.2, 0.9, 1.0, 0.001, 0.002, 1.0]).unwrap();
        let inv = h.inverse().unwrap();
        let pts = vec![(10.0, 20.0), (0.0, 0.0), (-5.0, 7.5)];
        let back = map_points(&map_points(&pts, &h).unwrap(), &inv).unwrap();
        for ((x, y), (bx, by)) in pts.iter().zip(&back) {
            assert!((x - bx).abs() < 1e-9 && (y - by).abs() < 1e-9);
        }
    }

    #[test]
    fn horizon_point_rejected() {
        let h = Homography::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        // w = x + 1, so x == -1 sits on the horizon.
        assert!(matches!(
            map_points(&[(-1.0, 1.0)], &h),
            Err(FlowError::Horizon { index: 0 })
        ));
    }

    #[test]
    fn ground_identity_congruent_is_bitwise_equal() {
        let s = shape(6, 6, 8);
        let heads = vec![(11.0, 13.0), (30.5, 25.25), (40.0, 40.0)];
        let frame = AnnotationFrame::new(0, heads);
        let kernel = KernelSpec::new(1.0, 4.0).unwrap();
        let img = render_density(&frame, &kernel, s).unwrap();
        // Congruent ground grid: one "meter" per pixel, 8 m cells, sigma
        // scaled by the same power of two.
        let ground_kernel = KernelSpec::new(kernel.sigma * 8.0, 4.0).unwrap();
        let (ground, clipped) =
            render_ground_density(&frame, &Homography::identity(), &ground_kernel, s, 8.0)
                .unwrap();
        assert_eq!(clipped, 0);
        assert_eq!(img.values(), ground.values());
    }

    #[test]
    fn ground_clips_and_reports() {
        let s = shape(4, 4, 8);
        let frame = AnnotationFrame::new(0, vec![(1.0, 1.0), (1000.0, 1.0)]);
        let kernel = KernelSpec::new(0.3, 3.0).unwrap();
        let (_, clipped) =
            render_ground_density(&frame, &Homography::identity(), &kernel, s, 1.0).unwrap();
        assert_eq!(clipped, 1);
    }

    #[test]
    fn warp_zero_flow_keeps_heads() {
        let s = shape(4, 4, 8);
        let frame = AnnotationFrame::new(3, vec![(5.0, 6.0), (20.0, 21.0)]);
        let (warped, dropped) =
            warp_heads(&frame, &OpticalFlowField::zeros(s), WarpDirection::Along).unwrap();
        assert_eq!(warped.heads, frame.heads);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn warp_uniform_flow_shifts_heads() {
        let s = shape(4, 4, 8);
        let mut field = OpticalFlowField::zeros(s);
        for cell in 0..s.len() {
            field.set(cell, 8.0, 0.0);
        }
        let frame = AnnotationFrame::new(0, vec![(5.0, 6.0), (12.0, 20.0)]);
        let (warped, dropped) = warp_heads(&frame, &field, WarpDirection::Along).unwrap();
        assert_eq!(dropped, 0);
        for ((x, y), (ox, oy)) in warped.heads.iter().zip(&frame.heads) {
            assert!((x - (ox + 8.0)).abs() < 1e-9);
            assert!((y - oy).abs() < 1e-9);
        }
        // Warping against the flow inverts the shift.
        let (back, _) = warp_heads(&warped, &field, WarpDirection::Against).unwrap();
        for ((x, _), (ox, _)) in back.heads.iter().zip(&frame.heads) {
            assert!((x - ox).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_drops_heads_leaving_image() {
        let s = shape(4, 4, 8);
        let mut field = OpticalFlowField::zeros(s);
        for cell in 0..s.len() {
            field.set(cell, 8.0, 0.0);
        }
        let frame = AnnotationFrame::new(0, vec![(30.0, 6.0)]);
        let (warped, dropped) = warp_heads(&frame, &field, WarpDirection::Along).unwrap();
        assert_eq!(dropped, 1);
        assert!(warped.heads.is_empty());
    }

    #[test]
    fn warp_tracks_simulated_agents() {
        // Agents at cell centers with per-row speeds: the bilinear sample at
        // a cell center is that cell's own mean displacement.
        use crate::sim::{ground_truth_optical, Agent, SimState};
        let s = shape(4, 4, 8);
        let mut agents = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                agents.push(Agent {
                    id: (r * 4 + c) as u64,
                    pos: (c as f64 + 0.5, r as f64 + 0.5),
                    vel: (0.1 * (r as f64 + 1.0), 0.0),
                });
            }
        }
        let prev = SimState { agents: agents.clone(), frame_index: 0, next_id: 16 };
        let moved: Vec<Agent> = agents
            .iter()
            .map(|a| Agent { pos: (a.pos.0 + a.vel.0, a.pos.1), ..*a })
            .collect();
        let next = SimState { agents: moved.clone(), frame_index: 1, next_id: 16 };
        let optical = ground_truth_optical(&prev, &next, s);
        let heads = prev.head_pixels(s);
        let (warped, dropped) =
            warp_heads(&AnnotationFrame::new(0, heads), &optical, WarpDirection::Along).unwrap();
        assert_eq!(dropped, 0);
        let target = next.head_pixels(s);
        for (w, t) in warped.heads.iter().zip(&target) {
            let dist = ((w.0 - t.0).powi(2) + (w.1 - t.1).powi(2)).sqrt();
            assert!(dist < 0.5, "warped {w:?} vs actual {t:?}");
        }
    }

    #[test]
    fn bin_heads_counts_per_cell() {
        let s = shape(2, 2, 8);
        let frame = AnnotationFrame::new(0, vec![(1.0, 1.0), (2.0, 3.0), (9.0, 9.0)]);
        let m = bin_heads(&frame, s).unwrap();
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.total(), 3.0);
    }
}
