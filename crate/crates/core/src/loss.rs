//! Training objectives over predicted flows and densities.
//!
//! Every loss is a pure function returning its value together with the exact
//! gradient with respect to its flow or density inputs, so callers can chain
//! through the regressor backward pass.
//!
//! For a frame triple, four flow fields enter the losses: the two forward
//! pair fields (earlier-to-later for pairs (t-1, t) and (t, t+1)) and the
//! two reversed-order fields. The combined loss penalizes, per cell, the
//! squared mismatch between the annotated count and both the incoming and
//! outgoing flow sums, plus a cycle term tying each forward field to its
//! reversed-order counterpart channel by channel. Without an annotation the
//! supervised residual degrades to the squared incoming/outgoing mismatch.

use crate::error::{FlowError, Result};
use crate::grid::{
    density_adjoint, reverse_permute, DensityMap, DensityMode, FlowField, GridShape,
    OpticalFlowField, CHANNELS, OUTSIDE_CHANNEL,
};
use crate::model::{Discriminator, OpticalRegressor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Densities below this count are treated as empty when gating the optical
/// correlation term.
pub const MASK_EPS: f64 = 1e-4;

/// Probabilities are clamped to this interval before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cycle-consistency weight.
    pub alpha: f64,
    /// Optical-correlation weight.
    pub beta: f64,
    /// Spatial (super-patch) weight.
    pub gamma: f64,
    /// Adversarial weight.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1e-4,
            gamma: 1.0,
            delta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(FlowError::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four per-triple flow fields, named by the frame order each pass saw.
#[derive(Debug, Clone, Copy)]
pub struct TripleFields<'a> {
    /// Pair (t-1, t) in forward order.
    pub prev_to_cur: &'a FlowField,
    /// Pair (t, t+1) in forward order.
    pub cur_to_next: &'a FlowField,
    /// Pair (t-1, t) in reversed order.
    pub cur_to_prev: &'a FlowField,
    /// Pair (t, t+1) in reversed order.
    pub next_to_cur: &'a FlowField,
}

impl<'a> TripleFields<'a> {
    fn shape(&self) -> Result<GridShape> {
        let s = self.prev_to_cur.shape();
        for f in [self.cur_to_next, self.cur_to_prev, self.next_to_cur] {
            if f.shape() != s {
                return Err(FlowError::shape_mismatch(s, f.shape()));
            }
        }
        Ok(s)
    }
}

/// Gradients with respect to the four triple fields, in flow layout.
#[derive(Debug, Clone)]
pub struct TripleGrads {
    pub prev_to_cur: Vec<f64>,
    pub cur_to_next: Vec<f64>,
    pub cur_to_prev: Vec<f64>,
    pub next_to_cur: Vec<f64>,
}

impl TripleGrads {
    fn zeros(shape: GridShape) -> Self {
        let n = shape.len() * CHANNELS;
        TripleGrads {
            prev_to_cur: vec![0.0; n],
            cur_to_next: vec![0.0; n],
            cur_to_prev: vec![0.0; n],
            next_to_cur: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CombiBreakdown {
    /// Supervised residual against the annotated count.
    pub flow: f64,
    /// Unsupervised incoming/outgoing mismatch (annotation absent).
    pub uflow: f64,
    /// Cycle-consistency residual, unweighted.
    pub cycle: f64,
}

/// Combined conservation loss over one frame triple.
///
/// With a target: `sum_j (m_j - in_j)^2 + (m_j - out_j)^2`; without:
/// `sum_j (in_j - out_j)^2`, where `in` is the incoming sum of
/// `prev_to_cur` and `out` the outgoing sum of `cur_to_next`. In both cases
/// the cycle term `alpha * sum |fwd - reverse(bwd)|^2` over directional
/// channels is added for both pairs. Returns the total, its breakdown, and
/// exact gradients.
pub fn loss_combi(
    fields: &TripleFields,
    target: Option<&DensityMap>,
    weights: &LossWeights,
) -> Result<(f64, CombiBreakdown, TripleGrads)> {
    loss_combi_masked(fields, target, weights, None)
}

/// `loss_combi` restricted to cells where `cell_mask` is true (used to
/// exclude halo cells in patch training). `None` means every cell.
pub fn loss_combi_masked(
    fields: &TripleFields,
    target: Option<&DensityMap>,
    weights: &LossWeights,
    cell_mask: Option<&[bool]>,
) -> Result<(f64, CombiBreakdown, TripleGrads)> {
    weights.validate()?;
    let shape = fields.shape()?;
    if let Some(t) = target {
        if t.shape() != shape {
            return Err(FlowError::shape_mismatch(shape, t.shape()));
        }
    }
    if let Some(m) = cell_mask {
        if m.len() != shape.len() {
            return Err(FlowError::shape_mismatch(
                format!("{} mask cells", shape.len()),
                format!("{}", m.len()),
            ));
        }
    }
    let active = |j: usize| cell_mask.map_or(true, |m| m[j]);

    let mut grads = TripleGrads::zeros(shape);
    let mut breakdown = CombiBreakdown::default();

    let incoming = fields.prev_to_cur.density(DensityMode::Incoming);
    let outgoing = fields.cur_to_next.density(DensityMode::Outgoing);

    // Per-cell gradient of the data term w.r.t. the two density sums; the
    // adjoint of the density map scatters it back onto flow channels.
    let mut g_in = vec![0.0; shape.len()];
    let mut g_out = vec![0.0; shape.len()];
    match target {
        Some(t) => {
            for j in 0..shape.len() {
                if !active(j) {
                    continue;
                }
                let r_in = t.values()[j] - incoming.values()[j];
                let r_out = t.values()[j] - outgoing.values()[j];
                breakdown.flow += r_in * r_in + r_out * r_out;
                g_in[j] = -2.0 * r_in;
                g_out[j] = -2.0 * r_out;
            }
        }
        None => {
            for j in 0..shape.len() {
                if !active(j) {
                    continue;
                }
                let r = incoming.values()[j] - outgoing.values()[j];
                breakdown.uflow += r * r;
                g_in[j] = 2.0 * r;
                g_out[j] = -2.0 * r;
            }
        }
    }
    accumulate(
        &mut grads.prev_to_cur,
        &density_adjoint(shape, &g_in, DensityMode::Incoming),
        1.0,
    );
    accumulate(
        &mut grads.cur_to_next,
        &density_adjoint(shape, &g_out, DensityMode::Outgoing),
        1.0,
    );

    // Cycle terms: each forward field against the reverse view of its
    // reversed-order counterpart, directional channels only.
    let alpha = weights.alpha;
    for (fwd, bwd, g_fwd, g_bwd) in [
        (
            fields.prev_to_cur,
            fields.cur_to_prev,
            &mut grads.prev_to_cur,
            &mut grads.cur_to_prev,
        ),
        (
            fields.cur_to_next,
            fields.next_to_cur,
            &mut grads.cur_to_next,
            &mut grads.next_to_cur,
        ),
    ] {
        let mirrored = reverse_permute(shape, bwd.values());
        let mut diff = vec![0.0; shape.len() * CHANNELS];
        for j in 0..shape.len() {
            if !active(j) {
                continue;
            }
            for ch in 0..OUTSIDE_CHANNEL {
                let idx = j * CHANNELS + ch;
                let d = fwd.values()[idx] - mirrored[idx];
                breakdown.cycle += d * d;
                diff[idx] = d;
            }
        }
        accumulate(g_fwd, &diff, 2.0 * alpha);
        // The permutation is self-adjoint, so the counterpart gradient is
        // the mirrored difference.
        accumulate(g_bwd, &reverse_permute(shape, &diff), -2.0 * alpha);
    }

    let total = breakdown.flow + breakdown.uflow + alpha * breakdown.cycle;
    Ok((total, breakdown, grads))
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Correlation between predicted optical flow (from a frozen regressor fed
/// with flow-derived densities) and the reference optical flow, enforced
/// only where people are present: `beta * sum_j [m_cur_j > eps] |O_j -
/// ref_j|^2`. Gradients flow through the regressor into both densities; the
/// occupancy gate is treated as constant.
pub fn loss_optical(
    m_prev: &DensityMap,
    m_cur: &DensityMap,
    fo: &OpticalRegressor,
    target: &OpticalFlowField,
    beta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let shape = m_prev.shape();
    if m_cur.shape() != shape || target.shape != shape {
        return Err(FlowError::shape_mismatch(shape, m_cur.shape()));
    }
    let (predicted, cache) = fo.forward_cached(m_prev, m_cur)?;
    let mut value = 0.0;
    let mut g_uv = vec![0.0; shape.len() * 2];
    for j in 0..shape.len() {
        if m_cur.values()[j] <= MASK_EPS {
            continue;
        }
        let (pu, pv) = predicted.get(j);
        let (tu, tv) = target.get(j);
        let (du, dv) = (pu - tu, pv - tv);
        value += beta * (du * du + dv * dv);
        g_uv[j * 2] = beta * 2.0 * du;
        g_uv[j * 2 + 1] = beta * 2.0 * dv;
    }
    let (_, grad_prev, grad_cur) = fo.backward(&cache, &g_uv)?;
    Ok((value, grad_prev, grad_cur))
}

/// Squared mismatch between the summed people counts of a super-patch and
/// of the patches tiling it. Patch gradients are constant per cell.
pub fn loss_spatial(
    patch_densities: &[DensityMap],
    super_density: &DensityMap,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let member_cells: usize = patch_densities.iter().map(|p| p.values().len()).sum();
    if member_cells != super_density.values().len() {
        return Err(FlowError::Region(format!(
            "patches cover {member_cells} cells but the super-patch has {}",
            super_density.values().len()
        )));
    }
    let patch_total: f64 = patch_densities.iter().map(|p| p.total()).sum();
    let residual = patch_total - super_density.total();
    let value = residual * residual;
    let grad_patches = patch_densities
        .iter()
        .map(|p| vec![2.0 * residual; p.values().len()])
        .collect();
    let grad_super = vec![-2.0 * residual; super_density.values().len()];
    Ok((value, grad_patches, grad_super))
}

/// Everything the adversarial objective produces in one pass.
#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    /// `-sum_A log D - sum_U log(1 - D)`, the discriminator objective.
    pub disc_loss: f64,
    pub grad_disc_params: Vec<f64>,
    /// Non-saturating generator objective `-sum_U log D`.
    pub gen_loss: f64,
    /// Gradient of `gen_loss` w.r.t. each unlabeled patch density.
    pub grad_unlabeled: Vec<Vec<f64>>,
}

/// Binary cross-entropy between patches from the annotated set and the
/// rest, with probabilities clamped away from 0 and 1 before the logs. The
/// generator side receives the non-saturating objective on unlabeled
/// patches; clamped probabilities contribute zero gradient.
pub fn loss_adversarial(
    disc: &Discriminator,
    labeled: &[DensityMap],
    unlabeled: &[DensityMap],
) -> Result<AdversarialTerms> {
    let mut disc_loss = 0.0;
    let mut gen_loss = 0.0;
    let mut grad_disc_params = vec![0.0; disc.theta.len()];
    let mut grad_unlabeled = Vec::with_capacity(unlabeled.len());
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    for patch in labeled {
        let (p, cache) = disc.forward_cached(patch)?;
        let pc = p.clamp(lo, hi);
        disc_loss += -pc.ln();
        if (lo..=hi).contains(&p) {
            let (gp, _) = disc.backward(&cache, -1.0 / pc);
            accumulate(&mut grad_disc_params, &gp, 1.0);
        }
    }
    for patch in unlabeled {
        let (p, cache) = disc.forward_cached(patch)?;
        let pc = p.clamp(lo, hi);
        disc_loss += -(1.0 - pc).ln();
        gen_loss += -pc.ln();
        if (lo..=hi).contains(&p) {
            let (gp, _) = disc.backward(&cache, 1.0 / (1.0 - pc));
            accumulate(&mut grad_disc_params, &gp, 1.0);
            let (_, gi) = disc.backward(&cache, -1.0 / pc);
            grad_unlabeled.push(gi);
        } else {
            grad_unlabeled.push(vec![0.0; patch.values().len()]);
        }
    }
    Ok(AdversarialTerms {
        disc_loss,
        grad_disc_params,
        gen_loss,
        grad_unlabeled,
    })
}

/// Weighted superposition `combi + gamma * spatial + delta * advers` of
/// component (value, gradient) pairs living in one gradient space.
pub fn loss_overall(
    combi: (f64, &[f64]),
    spatial: Option<(f64, &[f64])>,
    advers: Option<(f64, &[f64])>,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    weights.validate()?;
    let check = |name: &str, v: f64| -> Result<()> {
        if !v.is_finite() {
            return Err(FlowError::Numeric(format!(
                "loss component {name} is non-finite ({v})"
            )));
        }
        Ok(())
    };
    check("combi", combi.0)?;
    let mut value = combi.0;
    let mut grad = combi.1.to_vec();
    for (name, weight, term) in [
        ("spatial", weights.gamma, spatial),
        ("advers", weights.delta, advers),
    ] {
        if let Some((v, g)) = term {
            check(name, v)?;
            if g.len() != grad.len() {
                return Err(FlowError::shape_mismatch(
                    format!("{} gradient values", grad.len()),
                    format!("{} in {name}", g.len()),
                ));
            }
            value += weight * v;
            accumulate(&mut grad, g, weight);
        }
    }
    Ok((value, grad))
}

/// Loose density-level conservation penalty: per cell, hinge on the count
/// exceeding the summed counts of its neighborhood in the previous and next
/// frames. Zero iff the weak constraints hold everywhere.
pub fn loss_weak_baseline(
    m_prev: &DensityMap,
    m_cur: &DensityMap,
    m_next: &DensityMap,
) -> Result<f64> {
    Ok(loss_weak_with_grads(m_prev, m_cur, m_next)?.0)
}

/// Weak-constraint hinge with gradients w.r.t. all three maps.
pub fn loss_weak_with_grads(
    m_prev: &DensityMap,
    m_cur: &DensityMap,
    m_next: &DensityMap,
) -> Result<(f64, [Vec<f64>; 3])> {
    let shape = m_cur.shape();
    if m_prev.shape() != shape || m_next.shape() != shape {
        return Err(FlowError::shape_mismatch(shape, m_prev.shape()));
    }
    let mut value = 0.0;
    let mut g_prev = vec![0.0; shape.len()];
    let mut g_cur = vec![0.0; shape.len()];
    let mut g_next = vec![0.0; shape.len()];
    for j in 0..shape.len() {
        let neighbors = shape.neighbors(j)?;
        for (other, g_other) in [(m_prev, &mut g_prev), (m_next, &mut g_next)] {
            let reachable: f64 = neighbors.iter().map(|&i| other.values()[i]).sum();
            let excess = m_cur.values()[j] - reachable;
            if excess > 0.0 {
                value += excess;
                g_cur[j] += 1.0;
                for &i in &neighbors {
                    g_other[i] -= 1.0;
                }
            }
        }
    }
    Ok((value, [g_prev, g_cur, g_next]))
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub l_flow: f64,
    pub l_cycle: f64,
    pub l_uflow: f64,
    pub l_optical: f64,
    pub l_spatial: f64,
    pub l_advers: f64,
    pub total: f64,
}

/// Per-step loss breakdown accumulated during training.
#[derive(Debug, Clone, Default)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, row: LossRow) {
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,l_flow,l_cycle,l_uflow,l_optical,l_spatial,l_advers,total")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step,
                fmt(r.l_flow),
                fmt(r.l_cycle),
                fmt(r.l_uflow),
                fmt(r.l_optical),
                fmt(r.l_spatial),
                fmt(r.l_advers),
                fmt(r.total)
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FlowDirection, SELF_CHANNEL};
    use crate::model::{DiscriminatorArch, OpticalArch};
    use crate::seed::rng_for;
    use crate::sim;
    use rand::Rng;

    fn shape(rows: usize, cols: usize) -> GridShape {
        GridShape::new(rows, cols, 8).unwrap()
    }

    fn random_field(seed: u64, s: GridShape, dir: FlowDirection) -> FlowField {
        let mut rng = rng_for(seed, "loss-field");
        let mut f = FlowField::zeros(s, dir);
        for cell in 0..s.len() {
            for ch in 0..CHANNELS {
                if !FlowField::channel_masked(s, cell, ch) {
                    f.values_mut()[cell * CHANNELS + ch] = rng.random_range(0.1..1.0);
                }
            }
        }
        f
    }

    #[test]
    fn combi_zero_on_ground_truth() {
        let config = sim::SimConfig {
            shape: GridShape::new(5, 5, 8).unwrap(),
            n_agents: 20,
            speed_max: 0.6,
            entry_rate: 0.0,
            exit_enabled: false,
            motion_model: sim::MotionModel::Swirl,
            seed: 3,
            n_frames: 3,
        };
        let states = sim::run(&config).unwrap();
        let fields = TripleFields {
            prev_to_cur: &sim::ground_truth_flow(&states[0], &states[1], config.shape).unwrap(),
            cur_to_next: &sim::ground_truth_flow(&states[1], &states[2], config.shape).unwrap(),
            cur_to_prev: &sim::ground_truth_flow(&states[1], &states[0], config.shape).unwrap(),
            next_to_cur: &sim::ground_truth_flow(&states[2], &states[1], config.shape).unwrap(),
        };
        let target = DensityMap::from_values(config.shape, states[1].counts(config.shape)).unwrap();
        let (total, parts, _) =
            loss_combi(&fields, Some(&target), &LossWeights::default()).unwrap();
        assert_eq!(total, 0.0);
        assert_eq!(parts.cycle, 0.0);
    }

    #[test]
    fn combi_hand_case_one_cell() {
        let s = shape(1, 1);
        let mut f = FlowField::zeros(s, FlowDirection::Forward);
        f.add(0, SELF_CHANNEL, 1.5);
        let b = {
            let mut b = FlowField::zeros(s, FlowDirection::Backward);
            b.add(0, SELF_CHANNEL, 1.5);
            b
        };
        let fields = TripleFields {
            prev_to_cur: &f,
            cur_to_next: &f,
            cur_to_prev: &b,
            next_to_cur: &b,
        };
        let target = DensityMap::from_values(s, vec![2.0]).unwrap();
        let (total, parts, _) =
            loss_combi(&fields, Some(&target), &LossWeights::default()).unwrap();
        assert!((parts.flow - 0.5).abs() < 1e-12);
        assert_eq!(parts.cycle, 0.0);
        assert!((total - 0.5).abs() < 1e-12);
    }

    /// Central finite differences of a loss over the unmasked entries of
    /// one flow field.
    fn fd_check_field(
        loss: &dyn Fn(&FlowField) -> f64,
        base: &FlowField,
        analytic: &[f64],
        tol: f64,
    ) {
        let h = 1e-4;
        let s = base.shape();
        for cell in 0..s.len() {
            for ch in 0..CHANNELS {
                if FlowField::channel_masked(s, cell, ch) {
                    continue;
                }
                let idx = cell * CHANNELS + ch;
                let mut up = base.clone();
                up.values_mut()[idx] += h;
                let mut dn = base.clone();
                dn.values_mut()[idx] -= h;
                let numeric = (loss(&up) - loss(&dn)) / (2.0 * h);
                let a = analytic[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(err < tol, "cell {cell} ch {ch}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn combi_gradients_match_finite_differences() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let weights = LossWeights { alpha: 0.7, ..Default::default() };
        let f1 = random_field(1, s, FlowDirection::Forward);
        let f2 = random_field(2, s, FlowDirection::Forward);
        let f3 = random_field(3, s, FlowDirection::Backward);
        let f4 = random_field(4, s, FlowDirection::Backward);
        let mut rng = rng_for(5, "combi-target");
        let target =
            DensityMap::from_values(s, (0..4).map(|_| rng.random_range(0.0..3.0)).collect())
                .unwrap();
        for with_target in [true, false] {
            let t = if with_target { Some(&target) } else { None };
            let fields = TripleFields {
                prev_to_cur: &f1,
                cur_to_next: &f2,
                cur_to_prev: &f3,
                next_to_cur: &f4,
            };
            let (_, _, grads) = loss_combi(&fields, t, &weights).unwrap();
            let eval = |a: &FlowField, b: &FlowField, c: &FlowField, d: &FlowField| {
                let fields = TripleFields {
                    prev_to_cur: a,
                    cur_to_next: b,
                    cur_to_prev: c,
                    next_to_cur: d,
                };
                loss_combi(&fields, t, &weights).unwrap().0
            };
            fd_check_field(&|x| eval(x, &f2, &f3, &f4), &f1, &grads.prev_to_cur, 1e-6);
            fd_check_field(&|x| eval(&f1, x, &f3, &f4), &f2, &grads.cur_to_next, 1e-6);
            fd_check_field(&|x| eval(&f1, &f2, x, &f4), &f3, &grads.cur_to_prev, 1e-6);
            fd_check_field(&|x| eval(&f1, &f2, &f3, x), &f4, &grads.next_to_cur, 1e-6);
        }
    }

    #[test]
    fn combi_rotation_invariance() {
        // Rotating every field (and the target) together by 90 degrees
        // leaves the value unchanged.
        let s = GridShape::new(3, 3, 8).unwrap();
        let rotate_cell = |r: usize, c: usize| (c, s.rows - 1 - r);
        // Channel permutation under a 90-degree clockwise rotation of
        // (dr, dc) -> (dc, -dr).
        let rot_ch = |ch: usize| {
            let (dr, dc) = crate::grid::NEIGHBOR_OFFSETS[ch];
            crate::grid::channel_for_offset(dc, -dr).unwrap()
        };
        let rotate_field = |f: &FlowField| {
            let mut g = FlowField::zeros(s, f.direction());
            for r in 0..s.rows {
                for c in 0..s.cols {
                    let (nr, nc) = rotate_cell(r, c);
                    for ch in 0..OUTSIDE_CHANNEL {
                        let v = f.get(s.index(r, c), ch);
                        if v != 0.0 {
                            g.values_mut()[s.index(nr, nc) * CHANNELS + rot_ch(ch)] = v;
                        }
                    }
                    g.values_mut()[s.index(nr, nc) * CHANNELS + OUTSIDE_CHANNEL] =
                        f.get(s.index(r, c), OUTSIDE_CHANNEL);
                }
            }
            g
        };
        let rotate_map = |m: &DensityMap| {
            let mut values = vec![0.0; s.len()];
            for r in 0..s.rows {
                for c in 0..s.cols {
                    let (nr, nc) = rotate_cell(r, c);
                    values[s.index(nr, nc)] = m.get(r, c);
                }
            }
            DensityMap::from_values(s, values).unwrap()
        };
        let f1 = random_field(10, s, FlowDirection::Forward);
        let f2 = random_field(11, s, FlowDirection::Forward);
        let f3 = random_field(12, s, FlowDirection::Backward);
        let f4 = random_field(13, s, FlowDirection::Backward);
        let mut rng = rng_for(14, "rot-target");
        let target = DensityMap::from_values(
            s,
            (0..s.len()).map(|_| rng.random_range(0.0..3.0)).collect(),
        )
        .unwrap();
        let original = loss_combi(
            &TripleFields {
                prev_to_cur: &f1,
                cur_to_next: &f2,
                cur_to_prev: &f3,
                next_to_cur: &f4,
            },
            Some(&target),
            &LossWeights::default(),
        )
        .unwrap()
        .0;
        let (r1, r2, r3, r4) = (
            rotate_field(&f1),
            rotate_field(&f2),
            rotate_field(&f3),
            rotate_field(&f4),
        );
        let rotated = loss_combi(
            &TripleFields {
                prev_to_cur: &r1,
                cur_to_next: &r2,
                cur_to_prev: &r3,
                next_to_cur: &r4,
            },
            Some(&rotate_map(&target)),
            &LossWeights::default(),
        )
        .unwrap()
        .0;
        assert!((original - rotated).abs() < 1e-9, "{original} vs {rotated}");
    }

    #[test]
    fn uflow_residual_is_difference_of_supervised_roots() {
        // Per cell: (in - out)^2 where the supervised residuals are
        // (m - in) and (m - out); their difference equals (out - in).
        let s = GridShape::new(2, 2, 8).unwrap();
        let f1 = random_field(21, s, FlowDirection::Forward);
        let f2 = random_field(22, s, FlowDirection::Forward);
        let incoming = f1.density(DensityMode::Incoming);
        let outgoing = f2.density(DensityMode::Outgoing);
        let mut rng = rng_for(23, "uflow-target");
        let target =
            DensityMap::from_values(s, (0..4).map(|_| rng.random_range(0.0..3.0)).collect())
                .unwrap();
        for j in 0..s.len() {
            let r_in = target.values()[j] - incoming.values()[j];
            let r_out = target.values()[j] - outgoing.values()[j];
            let unsupervised = incoming.values()[j] - outgoing.values()[j];
            assert!((unsupervised - (r_out - r_in)).abs() < 1e-12);
        }
    }

    #[test]
    fn optical_loss_zero_when_prediction_matches() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let fo = OpticalRegressor::zeros(OpticalArch { hidden: 4 });
        let m = DensityMap::from_values(s, vec![1.0; 4]).unwrap();
        // Zero regressor output and zero target agree everywhere.
        let target = OpticalFlowField::zeros(s);
        let (v, gp, gc) = loss_optical(&m, &m, &fo, &target, 1e-4).unwrap();
        assert_eq!(v, 0.0);
        assert!(gp.iter().chain(&gc).all(|&g| g == 0.0));
    }

    #[test]
    fn optical_loss_gated_by_empty_density() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let fo = OpticalRegressor::init(OpticalArch { hidden: 4 }, 9);
        let zeros = DensityMap::zeros(s);
        let mut target = OpticalFlowField::zeros(s);
        target.set(0, 3.0, -1.0);
        let (v, _, _) = loss_optical(&zeros, &zeros, &fo, &target, 1e-4).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn optical_gradients_match_finite_differences() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let fo = OpticalRegressor::init(OpticalArch { hidden: 4 }, 31);
        let mut rng = rng_for(32, "optical-fd");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            DensityMap::from_values(s, (0..4).map(|_| rng.random_range(0.1..2.0)).collect())
                .unwrap()
        };
        let m_prev = mk(&mut rng);
        let m_cur = mk(&mut rng);
        let mut target = OpticalFlowField::zeros(s);
        for v in &mut target.uv {
            *v = rng.random_range(-2.0..2.0);
        }
        let beta = 0.5;
        let (_, gp, gc) = loss_optical(&m_prev, &m_cur, &fo, &target, beta).unwrap();
        let h = 1e-5;
        for j in 0..s.len() {
            for (which, analytic) in [(0, &gp), (1, &gc)] {
                let perturb = |delta: f64| {
                    let mut a = m_prev.clone();
                    let mut b = m_cur.clone();
                    if which == 0 {
                        a.values_mut()[j] += delta;
                    } else {
                        b.values_mut()[j] += delta;
                    }
                    loss_optical(&a, &b, &fo, &target, beta).unwrap().0
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = analytic[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(err < 1e-6, "map {which} cell {j}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn spatial_consistent_counts_zero() {
        let s1 = GridShape::new(1, 2, 8).unwrap();
        let sup = GridShape::new(2, 3, 8).unwrap();
        let p1 = DensityMap::from_values(s1, vec![1.0, 1.0]).unwrap();
        let p2 = DensityMap::from_values(s1, vec![2.0, 1.0]).unwrap();
        let p3 = DensityMap::from_values(s1, vec![0.5, 0.5]).unwrap();
        let total = DensityMap::from_values(sup, vec![1.0; 6]).unwrap();
        let (v, _, _) = loss_spatial(&[p1, p2, p3], &total).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn spatial_mismatch_squared() {
        let s1 = GridShape::new(1, 1, 8).unwrap();
        let sup = GridShape::new(1, 3, 8).unwrap();
        let patches = vec![
            DensityMap::from_values(s1, vec![2.0]).unwrap(),
            DensityMap::from_values(s1, vec![3.0]).unwrap(),
            DensityMap::from_values(s1, vec![1.0]).unwrap(),
        ];
        let total = DensityMap::from_values(sup, vec![3.0, 3.0, 1.0]).unwrap();
        let (v, gp, gs) = loss_spatial(&patches, &total).unwrap();
        assert_eq!(v, 1.0);
        // Residual is -1, so patch gradients are -2 and super gradients 2.
        assert!(gp.iter().flatten().all(|&g| g == -2.0));
        assert!(gs.iter().all(|&g| g == 2.0));
    }

    #[test]
    fn spatial_region_mismatch_rejected() {
        let s1 = GridShape::new(1, 1, 8).unwrap();
        let p = DensityMap::from_values(s1, vec![1.0]).unwrap();
        let sup = DensityMap::zeros(GridShape::new(1, 3, 8).unwrap());
        assert!(matches!(
            loss_spatial(&[p], &sup),
            Err(FlowError::Region(_))
        ));
    }

    #[test]
    fn adversarial_uninformed_discriminator() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let disc = Discriminator::zeros(DiscriminatorArch { input_len: 4, hidden: 4 });
        let patches: Vec<DensityMap> = (0..3)
            .map(|i| DensityMap::from_values(s, vec![i as f64; 4]).unwrap())
            .collect();
        let terms = loss_adversarial(&disc, &patches[..2], &patches[2..]).unwrap();
        let expected = -(3.0) * 0.5f64.ln();
        assert!((terms.disc_loss - expected).abs() < 1e-12);
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let arch = DiscriminatorArch { input_len: 4, hidden: 4 };
        let disc = Discriminator::init(arch, 17);
        let mut rng = rng_for(18, "adv-fd");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            DensityMap::from_values(s, (0..4).map(|_| rng.random_range(0.1..3.0)).collect())
                .unwrap()
        };
        let labeled = vec![mk(&mut rng), mk(&mut rng)];
        let unlabeled = vec![mk(&mut rng)];
        let terms = loss_adversarial(&disc, &labeled, &unlabeled).unwrap();
        let h = 1e-5;
        // Discriminator parameter gradients.
        for i in (0..disc.theta.len()).step_by(2) {
            let mut up = disc.clone();
            up.theta[i] += h;
            let mut dn = disc.clone();
            dn.theta[i] -= h;
            let fu = loss_adversarial(&up, &labeled, &unlabeled).unwrap().disc_loss;
            let fd = loss_adversarial(&dn, &labeled, &unlabeled).unwrap().disc_loss;
            let numeric = (fu - fd) / (2.0 * h);
            let a = terms.grad_disc_params[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < 1e-6, "param {i}: {a} vs {numeric}");
        }
        // Generator-side gradients w.r.t. the unlabeled patch.
        for j in 0..4 {
            let perturb = |delta: f64| {
                let mut p = unlabeled[0].clone();
                p.values_mut()[j] += delta;
                loss_adversarial(&disc, &labeled, &[p]).unwrap().gen_loss
            };
            let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
            let a = terms.grad_unlabeled[0][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < 1e-6, "cell {j}: {a} vs {numeric}");
        }
    }

    #[test]
    fn overall_reduces_to_combi_when_weights_vanish() {
        let weights = LossWeights { gamma: 0.0, delta: 0.0, ..Default::default() };
        let g = vec![1.0, -2.0, 3.0];
        let (v, grad) = loss_overall(
            (1.5, &g),
            Some((100.0, &[9.0, 9.0, 9.0][..])),
            Some((50.0, &[7.0, 7.0, 7.0][..])),
            &weights,
        )
        .unwrap();
        assert_eq!(v, 1.5);
        assert_eq!(grad, g);
    }

    #[test]
    fn overall_superposes_linearly() {
        let weights = LossWeights { gamma: 2.0, delta: 0.5, ..Default::default() };
        let (v, grad) = loss_overall(
            (1.0, &[1.0, 0.0][..]),
            Some((2.0, &[0.0, 1.0][..])),
            Some((4.0, &[1.0, 1.0][..])),
            &weights,
        )
        .unwrap();
        assert_eq!(v, 1.0 + 2.0 * 2.0 + 0.5 * 4.0);
        assert_eq!(grad, vec![1.0 + 0.5, 2.0 + 0.5]);
    }

    #[test]
    fn overall_rejects_non_finite_component() {
        let err = loss_overall(
            (f64::NAN, &[0.0][..]),
            None,
            None,
            &LossWeights::default(),
        );
        match err {
            Err(FlowError::Numeric(msg)) => assert!(msg.contains("combi")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn weak_baseline_uniform_maps_satisfied() {
        let s = GridShape::new(4, 4, 8).unwrap();
        let m = DensityMap::from_values(s, vec![1.0; 16]).unwrap();
        assert_eq!(loss_weak_baseline(&m, &m, &m).unwrap(), 0.0);
    }

    #[test]
    fn weak_baseline_isolated_spike() {
        let s = GridShape::new(3, 3, 8).unwrap();
        let zeros = DensityMap::zeros(s);
        let mut spike = DensityMap::zeros(s);
        spike.values_mut()[s.index(1, 1)] = 10.0;
        // The spike exceeds both neighbor sums, contributing 10 twice.
        assert_eq!(loss_weak_baseline(&zeros, &spike, &zeros).unwrap(), 20.0);
    }

    #[test]
    fn weak_baseline_satisfied_random_instance() {
        let s = GridShape::new(3, 3, 8).unwrap();
        let mut rng = rng_for(41, "weak");
        let cur = DensityMap::from_values(
            s,
            (0..9).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        // Neighbors hold at least the center value, so the hinge never fires.
        let fat = DensityMap::from_values(s, vec![1.0; 9]).unwrap();
        assert_eq!(loss_weak_baseline(&fat, &cur, &fat).unwrap(), 0.0);
        // Brute-force per-cell check of a violated instance.
        let thin = DensityMap::from_values(s, vec![0.01; 9]).unwrap();
        let v = loss_weak_baseline(&thin, &cur, &thin).unwrap();
        let mut expected = 0.0;
        for j in 0..9 {
            let reach: f64 = s.neighbors(j).unwrap().iter().map(|_| 0.01).sum();
            expected += (cur.values()[j] - reach).max(0.0) * 2.0;
        }
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn weak_gradients_match_finite_differences() {
        let s = GridShape::new(2, 2, 8).unwrap();
        let mut rng = rng_for(43, "weak-fd");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            DensityMap::from_values(s, (0..4).map(|_| rng.random_range(0.2..2.0)).collect())
                .unwrap()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (_, grads) = loss_weak_with_grads(&a, &b, &c).unwrap();
        let h = 1e-6;
        for which in 0..3 {
            for j in 0..4 {
                let perturb = |delta: f64| {
                    let mut maps = [a.clone(), b.clone(), c.clone()];
                    maps[which].values_mut()[j] += delta;
                    loss_weak_baseline(&maps[0], &maps[1], &maps[2]).unwrap()
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                assert!(
                    (grads[which][j] - numeric).abs() < 1e-6,
                    "map {which} cell {j}"
                );
            }
        }
    }
}
