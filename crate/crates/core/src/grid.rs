//! Grid data model and the flow-to-density algebra.
//!
//! An image is partitioned into `rows x cols` square cells. A [`FlowField`]
//! stores, for every cell, ten non-negative people counts for one frame pair:
//! nine directional channels towards the 3x3 neighborhood (source-cell
//! storage, fixed row-major order NW,N,NE,W,SELF,E,SW,S,SE) and one
//! outside-world channel that is only active at boundary cells. Summing the
//! flows incident on a cell yields its people count for the later frame of
//! the pair; summing the flows leaving a cell yields its count for the
//! earlier frame.

use crate::error::{FlowError, Result};
use serde::{Deserialize, Serialize};

/// Number of flow channels per cell.
pub const CHANNELS: usize = 10;
/// Channel index for people staying in the same cell.
pub const SELF_CHANNEL: usize = 4;
/// Channel index for movement across the image boundary.
pub const OUTSIDE_CHANNEL: usize = 9;

/// (row, col) offsets of the nine directional channels, in channel order.
pub const NEIGHBOR_OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// The directional channel pointing the opposite way.
#[inline]
pub fn opposite_channel(ch: usize) -> usize {
    debug_assert!(ch < OUTSIDE_CHANNEL);
    8 - ch
}

/// Channel for a (dr, dc) single-step displacement.
pub fn channel_for_offset(dr: i64, dc: i64) -> Option<usize> {
    NEIGHBOR_OFFSETS.iter().position(|&o| o == (dr, dc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    /// Pixels per cell side.
    pub cell_px: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize, cell_px: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || cell_px == 0 {
            return Err(FlowError::Config(format!(
                "grid dimensions must be positive, got {rows}x{cols} cell_px {cell_px}"
            )));
        }
        Ok(GridShape {
            rows,
            cols,
            cell_px,
        })
    }

    /// Total number of cells.
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.cols, idx % self.cols)
    }

    /// Frame width in pixels.
    #[inline]
    pub fn width_px(&self) -> usize {
        self.cols * self.cell_px
    }

    /// Frame height in pixels.
    #[inline]
    pub fn height_px(&self) -> usize {
        self.rows * self.cell_px
    }

    /// Whether a cell touches the image boundary. Only boundary cells may
    /// exchange people with the outside world.
    #[inline]
    pub fn is_boundary(&self, idx: usize) -> bool {
        let (r, c) = self.coords(idx);
        r == 0 || c == 0 || r == self.rows - 1 || c == self.cols - 1
    }

    /// The cell `steps` away from `idx` along a directional channel, if it
    /// stays on the grid.
    #[inline]
    pub fn offset_cell(&self, idx: usize, ch: usize) -> Option<usize> {
        let (r, c) = self.coords(idx);
        let (dr, dc) = NEIGHBOR_OFFSETS[ch];
        let nr = r as i64 + dr;
        let nc = c as i64 + dc;
        if nr < 0 || nc < 0 || nr >= self.rows as i64 || nc >= self.cols as i64 {
            None
        } else {
            Some(self.index(nr as usize, nc as usize))
        }
    }

    /// All in-grid cells within Chebyshev distance 1 of `idx`, including
    /// `idx` itself, in ascending index order.
    pub fn neighbors(&self, idx: usize) -> Result<Vec<usize>> {
        if idx >= self.len() {
            return Err(FlowError::Index {
                what: "cell",
                index: idx,
                len: self.len(),
            });
        }
        Ok((0..9).filter_map(|ch| self.offset_cell(idx, ch)).collect())
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@{}px", self.rows, self.cols, self.cell_px)
    }
}

/// Temporal orientation of a flow field: `Forward` maps the earlier frame of
/// the pair to the later one, `Backward` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Forward,
    Backward,
}

impl FlowDirection {
    pub fn toggled(self) -> Self {
        match self {
            FlowDirection::Forward => FlowDirection::Backward,
            FlowDirection::Backward => FlowDirection::Forward,
        }
    }
}

/// Which conservation sum to take when turning flows into a density map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    /// Sum the flows arriving at each cell (count for the later frame).
    Incoming,
    /// Sum the flows leaving each cell (count for the earlier frame).
    Outgoing,
}

/// Per-frame-pair grid of ten non-negative flow channels, stored at the
/// source cell: `data[cell * 10 + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    shape: GridShape,
    direction: FlowDirection,
    data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(shape: GridShape, direction: FlowDirection) -> Self {
        FlowField {
            shape,
            direction,
            data: vec![0.0; shape.len() * CHANNELS],
        }
    }

    /// Builds a field from raw channel data, validating the structural
    /// invariants: non-negativity, zero off-grid directional channels, and
    /// zero outside-world channel at interior cells.
    pub fn from_raw(shape: GridShape, direction: FlowDirection, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() * CHANNELS {
            return Err(FlowError::shape_mismatch(
                format!("{} values", shape.len() * CHANNELS),
                format!("{} values", data.len()),
            ));
        }
        let field = FlowField {
            shape,
            direction,
            data,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<()> {
        for cell in 0..self.shape.len() {
            for ch in 0..CHANNELS {
                let v = self.data[cell * CHANNELS + ch];
                if !v.is_finite() || v < 0.0 {
                    return Err(FlowError::Numeric(format!(
                        "flow value {v} at cell {cell} channel {ch} is negative or non-finite"
                    )));
                }
                if v != 0.0 && Self::channel_masked(self.shape, cell, ch) {
                    return Err(FlowError::Numeric(format!(
                        "structurally zero channel {ch} at cell {cell} holds {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// True for channels that must stay zero: directional channels pointing
    /// off-grid, and the outside channel of interior cells.
    #[inline]
    pub fn channel_masked(shape: GridShape, cell: usize, ch: usize) -> bool {
        if ch == OUTSIDE_CHANNEL {
            !shape.is_boundary(cell)
        } else {
            shape.offset_cell(cell, ch).is_none()
        }
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Callers are responsible for keeping the
    /// structural invariants; `validate` re-checks them.
    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, cell: usize, ch: usize) -> f64 {
        self.data[cell * CHANNELS + ch]
    }

    #[inline]
    pub fn add(&mut self, cell: usize, ch: usize, v: f64) {
        self.data[cell * CHANNELS + ch] += v;
    }

    /// Sum of all channel values.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Converts flows to a per-cell people count.
    ///
    /// `Incoming` sums, for each cell, the flows stored at its neighbors on
    /// the channel pointing to it; `Outgoing` sums the cell's own channels.
    /// In both modes the outside channel is added at boundary cells. The two
    /// modes iterate contributions in the same channel order, so
    /// `f.reversed().density(Outgoing)` equals `f.density(Incoming)` bitwise.
    pub fn density(&self, mode: DensityMode) -> DensityMap {
        let shape = self.shape;
        let mut values = vec![0.0; shape.len()];
        match mode {
            DensityMode::Incoming => {
                for j in 0..shape.len() {
                    let mut acc = 0.0;
                    for ch in 0..OUTSIDE_CHANNEL {
                        if let Some(i) = shape.offset_cell(j, ch) {
                            acc += self.get(i, opposite_channel(ch));
                        }
                    }
                    if shape.is_boundary(j) {
                        acc += self.get(j, OUTSIDE_CHANNEL);
                    }
                    values[j] = acc;
                }
            }
            DensityMode::Outgoing => {
                for j in 0..shape.len() {
                    let mut acc = 0.0;
                    for ch in 0..OUTSIDE_CHANNEL {
                        acc += self.get(j, ch);
                    }
                    if shape.is_boundary(j) {
                        acc += self.get(j, OUTSIDE_CHANNEL);
                    }
                    values[j] = acc;
                }
            }
        }
        DensityMap {
            shape,
            values,
        }
    }

    /// The same flows seen from the other end of the frame pair: the channel
    /// of cell `j` pointing to `i` takes the value of cell `i`'s channel
    /// pointing to `j`. Outside channels stay in place; the direction tag is
    /// toggled. Involution: `f.reversed().reversed() == f` bitwise.
    pub fn reversed(&self) -> FlowField {
        let shape = self.shape;
        let mut data = vec![0.0; self.data.len()];
        for j in 0..shape.len() {
            for ch in 0..OUTSIDE_CHANNEL {
                if let Some(i) = shape.offset_cell(j, ch) {
                    data[j * CHANNELS + ch] = self.get(i, opposite_channel(ch));
                }
            }
            data[j * CHANNELS + OUTSIDE_CHANNEL] = self.get(j, OUTSIDE_CHANNEL);
        }
        FlowField {
            shape,
            direction: self.direction.toggled(),
            data,
        }
    }
}

/// Adjoint of [`FlowField::density`]: scatters a per-cell gradient back onto
/// the flow channels that the density sum reads. Masked channels receive
/// zero for `Incoming`; `Outgoing` spreads over all nine directional
/// channels, mirroring the forward sum.
pub fn density_adjoint(shape: GridShape, grad_cells: &[f64], mode: DensityMode) -> Vec<f64> {
    assert_eq!(grad_cells.len(), shape.len());
    let mut grad = vec![0.0; shape.len() * CHANNELS];
    match mode {
        DensityMode::Incoming => {
            for j in 0..shape.len() {
                let g = grad_cells[j];
                for ch in 0..OUTSIDE_CHANNEL {
                    if let Some(i) = shape.offset_cell(j, ch) {
                        grad[i * CHANNELS + opposite_channel(ch)] += g;
                    }
                }
                if shape.is_boundary(j) {
                    grad[j * CHANNELS + OUTSIDE_CHANNEL] += g;
                }
            }
        }
        DensityMode::Outgoing => {
            for j in 0..shape.len() {
                let g = grad_cells[j];
                for ch in 0..OUTSIDE_CHANNEL {
                    grad[j * CHANNELS + ch] += g;
                }
                if shape.is_boundary(j) {
                    grad[j * CHANNELS + OUTSIDE_CHANNEL] += g;
                }
            }
        }
    }
    grad
}

/// Applies the reverse-field permutation to a raw flow-layout vector.
/// Self-adjoint, so it also maps gradients between the two orientations.
pub fn reverse_permute(shape: GridShape, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), shape.len() * CHANNELS);
    let mut out = vec![0.0; data.len()];
    for j in 0..shape.len() {
        for ch in 0..OUTSIDE_CHANNEL {
            if let Some(i) = shape.offset_cell(j, ch) {
                out[j * CHANNELS + ch] = data[i * CHANNELS + opposite_channel(ch)];
            }
        }
        out[j * CHANNELS + OUTSIDE_CHANNEL] = data[j * CHANNELS + OUTSIDE_CHANNEL];
    }
    out
}

/// Per-cell people count over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    shape: GridShape,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(shape: GridShape) -> Self {
        DensityMap {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn from_values(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(FlowError::shape_mismatch(
                format!("{} cells", shape.len()),
                format!("{} values", values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(FlowError::Numeric(format!(
                    "density value {v} at cell {i} is negative or non-finite"
                )));
            }
        }
        Ok(DensityMap { shape, values })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[self.shape.index(r, c)]
    }

    /// Total people count.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Elementwise mean with another map of the same shape.
    pub fn average_with(&self, other: &DensityMap) -> Result<DensityMap> {
        if self.shape != other.shape {
            return Err(FlowError::shape_mismatch(self.shape, other.shape));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Ok(DensityMap {
            shape: self.shape,
            values,
        })
    }

    /// Copies the cell rectangle `[r0, r0+h) x [c0, c0+w)` into a new map.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<DensityMap> {
        if r0 + h > self.shape.rows || c0 + w > self.shape.cols || h == 0 || w == 0 {
            return Err(FlowError::Region(format!(
                "crop [{r0}+{h}, {c0}+{w}) outside grid {}",
                self.shape
            )));
        }
        let shape = GridShape::new(h, w, self.shape.cell_px)?;
        let mut values = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                values.push(self.get(r, c));
            }
        }
        Ok(DensityMap { shape, values })
    }
}

/// Per-cell absolute mismatch between the incoming sum of the earlier frame
/// pair and the outgoing sum of the later one. Zero everywhere iff people
/// are conserved.
pub fn conservation_violation_map(f_in: &FlowField, f_out: &FlowField) -> Result<Vec<f64>> {
    if f_in.shape() != f_out.shape() {
        return Err(FlowError::shape_mismatch(f_in.shape(), f_out.shape()));
    }
    let arriving = f_in.density(DensityMode::Incoming);
    let leaving = f_out.density(DensityMode::Outgoing);
    Ok(arriving
        .values()
        .iter()
        .zip(leaving.values())
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Per-cell flow field of pixel displacements (u, v), stored as
/// `uv[cell * 2], uv[cell * 2 + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalFlowField {
    pub shape: GridShape,
    pub uv: Vec<f64>,
}

impl OpticalFlowField {
    pub fn zeros(shape: GridShape) -> Self {
        OpticalFlowField {
            shape,
            uv: vec![0.0; shape.len() * 2],
        }
    }

    pub fn from_uv(shape: GridShape, uv: Vec<f64>) -> Result<Self> {
        if uv.len() != shape.len() * 2 {
            return Err(FlowError::shape_mismatch(
                format!("{} uv values", shape.len() * 2),
                format!("{}", uv.len()),
            ));
        }
        if uv.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Numeric("non-finite optical flow value".into()));
        }
        Ok(OpticalFlowField { shape, uv })
    }

    #[inline]
    pub fn get(&self, cell: usize) -> (f64, f64) {
        (self.uv[cell * 2], self.uv[cell * 2 + 1])
    }

    #[inline]
    pub fn set(&mut self, cell: usize, u: f64, v: f64) {
        self.uv[cell * 2] = u;
        self.uv[cell * 2 + 1] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(rows: usize, cols: usize) -> GridShape {
        GridShape::new(rows, cols, 8).unwrap()
    }

    #[test]
    fn neighbors_interior_full() {
        let s = shape(3, 3);
        let n = s.neighbors(s.index(1, 1)).unwrap();
        assert_eq!(n, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn neighbors_corner_clipped() {
        let s = shape(3, 3);
        let n = s.neighbors(s.index(0, 0)).unwrap();
        assert_eq!(n, vec![0, 1, 3, 4]);
    }

    #[test]
    fn neighbors_degenerate_grid() {
        let s = shape(1, 1);
        assert_eq!(s.neighbors(0).unwrap(), vec![0]);
    }

    #[test]
    fn neighbors_bad_index() {
        let s = shape(2, 2);
        assert!(matches!(s.neighbors(4), Err(FlowError::Index { .. })));
    }

    #[test]
    fn zero_flow_zero_density() {
        let f = FlowField::zeros(shape(4, 4), FlowDirection::Forward);
        for mode in [DensityMode::Incoming, DensityMode::Outgoing] {
            assert!(f.density(mode).values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_cell_outgoing_sums_self_and_outside() {
        let s = shape(1, 1);
        let mut f = FlowField::zeros(s, FlowDirection::Forward);
        f.add(0, SELF_CHANNEL, 1.5);
        f.add(0, OUTSIDE_CHANNEL, 0.5);
        let d = f.density(DensityMode::Outgoing);
        assert_eq!(d.values(), &[2.0]);
    }

    #[test]
    fn reverse_moves_east_to_west() {
        let s = shape(1, 2);
        let mut f = FlowField::zeros(s, FlowDirection::Forward);
        let east = channel_for_offset(0, 1).unwrap();
        let west = channel_for_offset(0, -1).unwrap();
        f.add(0, east, 3.0);
        let g = f.reversed();
        assert_eq!(g.get(1, west), 3.0);
        assert_eq!(g.direction(), FlowDirection::Backward);
        assert_eq!(g.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn reverse_fixes_symmetric_interior_field() {
        // All directional channels equal on an all-interior neighborhood
        // pattern: use a 3x3 grid and only check the center cell.
        let s = shape(3, 3);
        let mut f = FlowField::zeros(s, FlowDirection::Forward);
        for cell in 0..9 {
            for ch in 0..OUTSIDE_CHANNEL {
                if !FlowField::channel_masked(s, cell, ch) {
                    f.add(cell, ch, 2.0);
                }
            }
        }
        let g = f.reversed();
        let center = s.index(1, 1);
        for ch in 0..OUTSIDE_CHANNEL {
            assert_eq!(g.get(center, ch), f.get(center, ch));
        }
    }

    fn random_valid_field(seed: u64, s: GridShape) -> FlowField {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut f = FlowField::zeros(s, FlowDirection::Forward);
        for cell in 0..s.len() {
            for ch in 0..CHANNELS {
                if !FlowField::channel_masked(s, cell, ch) {
                    f.add(cell, ch, rng.random_range(0.0..1.0));
                }
            }
        }
        f
    }

    #[test]
    fn reverse_is_involution() {
        for seed in 0..20 {
            let f = random_valid_field(seed, shape(4, 5));
            assert_eq!(f.reversed().reversed(), f);
        }
    }

    #[test]
    fn reverse_outgoing_equals_incoming_bitwise() {
        for seed in 0..20 {
            let f = random_valid_field(seed, shape(5, 3));
            let a = f.density(DensityMode::Incoming);
            let b = f.reversed().density(DensityMode::Outgoing);
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn incoming_total_preserves_mass() {
        // No flow mass lost or double-counted by the incoming sum.
        for seed in 0..10 {
            let f = random_valid_field(seed, shape(4, 4));
            let total: f64 = f.density(DensityMode::Incoming).total();
            assert!((total - f.total()).abs() < 1e-9, "{total} vs {}", f.total());
        }
    }

    #[test]
    fn violation_map_hand_case() {
        let s = shape(1, 1);
        let mut f_in = FlowField::zeros(s, FlowDirection::Forward);
        f_in.add(0, SELF_CHANNEL, 1.0);
        f_in.add(0, OUTSIDE_CHANNEL, 1.0);
        let mut f_out = FlowField::zeros(s, FlowDirection::Forward);
        f_out.add(0, SELF_CHANNEL, 1.2);
        let v = conservation_violation_map(&f_in, &f_out).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn violation_map_shape_error() {
        let a = FlowField::zeros(shape(2, 2), FlowDirection::Forward);
        let b = FlowField::zeros(shape(2, 3), FlowDirection::Forward);
        assert!(matches!(
            conservation_violation_map(&a, &b),
            Err(FlowError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn average_bidirectional() {
        let s = shape(1, 2);
        let a = DensityMap::from_values(s, vec![2.0, 0.0]).unwrap();
        let b = DensityMap::from_values(s, vec![0.0, 2.0]).unwrap();
        let m = a.average_with(&b).unwrap();
        assert_eq!(m.values(), &[1.0, 1.0]);
        // Identical inputs are a fixed point.
        assert_eq!(a.average_with(&a).unwrap().values(), a.values());
        // Shape mismatch is rejected.
        let c = DensityMap::zeros(shape(2, 2));
        assert!(a.average_with(&c).is_err());
    }

    #[test]
    fn average_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = shape(3, 4);
        let av: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.0..5.0)).collect();
        let bv: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.0..5.0)).collect();
        let a = DensityMap::from_values(s, av.clone()).unwrap();
        let b = DensityMap::from_values(s, bv.clone()).unwrap();
        let m = a.average_with(&b).unwrap();
        for i in 0..s.len() {
            assert_eq!(m.values()[i], 0.5 * (av[i] + bv[i]));
        }
    }

    #[test]
    fn from_raw_rejects_masked_values() {
        let s = shape(2, 2);
        let mut data = vec![0.0; s.len() * CHANNELS];
        // North-west channel of the top-left cell points off-grid.
        data[0] = 1.0;
        assert!(FlowField::from_raw(s, FlowDirection::Forward, data).is_err());
    }

    #[test]
    fn from_raw_rejects_interior_outside() {
        let s = shape(3, 3);
        let mut data = vec![0.0; s.len() * CHANNELS];
        data[s.index(1, 1) * CHANNELS + OUTSIDE_CHANNEL] = 0.5;
        assert!(FlowField::from_raw(s, FlowDirection::Forward, data).is_err());
    }

    #[test]
    fn density_adjoint_matches_linearity() {
        // <density(f), g> == <f, adjoint(g)> for the linear density map.
        use rand::{Rng, SeedableRng};
        let s = shape(3, 4);
        for mode in [DensityMode::Incoming, DensityMode::Outgoing] {
            let f = random_valid_field(11, s);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
            let g: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs: f64 = f
                .density(mode)
                .values()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum();
            let adj = density_adjoint(s, &g, mode);
            let rhs: f64 = f.values().iter().zip(&adj).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
