//! The trainable regressors.
//!
//! `FlowRegressor` maps a pair of consecutive grayscale frames to the ten
//! flow channels per grid cell: a three-layer convolutional encoder (weights
//! shared between the two frames, with stride pooling that downsamples by
//! one cell side), feature concatenation, and a two-layer decoder ending in
//! a rectification so flows are never negative. Structurally impossible
//! channels (off-grid directions, interior outside channel) are forced to
//! zero.
//!
//! `OpticalRegressor` maps a pair of density maps to a per-cell optical flow
//! estimate. `Discriminator` is a small MLP scoring whether a patch density
//! came from an annotated patch.

use crate::error::{FlowError, Result};
use crate::grid::{DensityMap, FlowDirection, FlowField, GridShape, OpticalFlowField, CHANNELS};
use crate::nn::{
    conv_backward, conv_forward, dense_backward, dense_forward, glorot_init, sigmoid, ConvSpec,
    DenseSpec, Tensor3,
};
use crate::seed::rng_for;
use crate::sim::ObservationFrame;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Architecture of the flow regressor. Convolution weights are independent
/// of the spatial extent, so one set of parameters serves full frames and
/// patch crops alike; only `cell_px` is baked in through the encoder
/// strides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub cell_px: usize,
    pub enc_channels: [usize; 3],
    pub dec_hidden: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        FlowArch {
            cell_px: 8,
            enc_channels: [8, 16, 16],
            dec_hidden: 16,
        }
    }
}

/// Splits the per-cell downsampling factor into three encoder strides.
fn encoder_strides(cell_px: usize) -> Result<[usize; 3]> {
    match cell_px {
        1 => Ok([1, 1, 1]),
        2 => Ok([2, 1, 1]),
        4 => Ok([2, 2, 1]),
        8 => Ok([2, 2, 2]),
        _ => Err(FlowError::Config(format!(
            "regressor cell_px must be 1, 2, 4 or 8, got {cell_px}"
        ))),
    }
}

impl FlowArch {
    fn layers(&self) -> Result<[ConvSpec; 5]> {
        let s = encoder_strides(self.cell_px)?;
        let [e0, e1, e2] = self.enc_channels;
        Ok([
            ConvSpec { in_ch: 1, out_ch: e0, kernel: 3, stride: s[0], pad: 1, relu: true },
            ConvSpec { in_ch: e0, out_ch: e1, kernel: 3, stride: s[1], pad: 1, relu: true },
            ConvSpec { in_ch: e1, out_ch: e2, kernel: 3, stride: s[2], pad: 1, relu: true },
            ConvSpec { in_ch: 2 * e2, out_ch: self.dec_hidden, kernel: 3, stride: 1, pad: 1, relu: true },
            ConvSpec { in_ch: self.dec_hidden, out_ch: CHANNELS, kernel: 3, stride: 1, pad: 1, relu: true },
        ])
    }

    pub fn param_len(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|l| l.param_len()).sum())
    }

    fn offsets(&self) -> Result<[(usize, usize); 5]> {
        let layers = self.layers()?;
        let mut offsets = [(0usize, 0usize); 5];
        let mut at = 0;
        for (i, l) in layers.iter().enumerate() {
            offsets[i] = (at, at + l.param_len());
            at += l.param_len();
        }
        Ok(offsets)
    }
}

pub struct FlowCache {
    shape: GridShape,
    prev: [Tensor3; 4],
    cur: [Tensor3; 4],
    concat: Tensor3,
    dec_hidden: Tensor3,
    dec_out: Tensor3,
}

/// Flow regressor parameters together with their layer layout.
#[derive(Debug, Clone)]
pub struct FlowRegressor {
    pub arch: FlowArch,
    pub theta: Vec<f64>,
}

impl FlowRegressor {
    /// Glorot-uniform weights, zero biases, seeded.
    pub fn init(arch: FlowArch, seed: u64) -> Result<Self> {
        let layers = arch.layers()?;
        let mut theta = vec![0.0; arch.param_len()?];
        let mut rng = rng_for(seed, "flow-regressor-init");
        let offsets = arch.offsets()?;
        for (layer, (start, _)) in layers.iter().zip(offsets) {
            let w_len = layer.param_len() - layer.out_ch;
            glorot_init(&mut rng, &mut theta[start..start + w_len], layer.fan_in(), layer.fan_out());
        }
        Ok(FlowRegressor { arch, theta })
    }

    pub fn zeros(arch: FlowArch) -> Result<Self> {
        Ok(FlowRegressor {
            theta: vec![0.0; arch.param_len()?],
            arch,
        })
    }

    fn frame_tensor(frame: &ObservationFrame) -> Tensor3 {
        Tensor3 {
            ch: 1,
            h: frame.height(),
            w: frame.width(),
            data: frame.pixels.clone(),
        }
    }

    fn encode(&self, layers: &[ConvSpec; 5], offsets: &[(usize, usize); 5], frame: &ObservationFrame) -> [Tensor3; 4] {
        let x0 = Self::frame_tensor(frame);
        let x1 = conv_forward(&layers[0], &self.theta[offsets[0].0..offsets[0].1], &x0);
        let x2 = conv_forward(&layers[1], &self.theta[offsets[1].0..offsets[1].1], &x1);
        let x3 = conv_forward(&layers[2], &self.theta[offsets[2].0..offsets[2].1], &x2);
        [x0, x1, x2, x3]
    }

    pub fn forward(&self, prev: &ObservationFrame, cur: &ObservationFrame) -> Result<FlowField> {
        Ok(self.forward_cached(prev, cur)?.0)
    }

    pub fn forward_cached(
        &self,
        prev: &ObservationFrame,
        cur: &ObservationFrame,
    ) -> Result<(FlowField, FlowCache)> {
        if prev.shape != cur.shape {
            return Err(FlowError::shape_mismatch(prev.shape, cur.shape));
        }
        if prev.shape.cell_px != self.arch.cell_px {
            return Err(FlowError::shape_mismatch(
                format!("cell_px {}", self.arch.cell_px),
                format!("cell_px {}", prev.shape.cell_px),
            ));
        }
        let shape = prev.shape;
        let layers = self.arch.layers()?;
        let offsets = self.arch.offsets()?;
        let prev_feats = self.encode(&layers, &offsets, prev);
        let cur_feats = self.encode(&layers, &offsets, cur);
        let concat = Tensor3::concat(&prev_feats[3], &cur_feats[3]);
        debug_assert_eq!((concat.h, concat.w), (shape.rows, shape.cols));
        let dec_hidden = conv_forward(&layers[3], &self.theta[offsets[3].0..offsets[3].1], &concat);
        let dec_out = conv_forward(&layers[4], &self.theta[offsets[4].0..offsets[4].1], &dec_hidden);

        let mut field = FlowField::zeros(shape, FlowDirection::Forward);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let cell = shape.index(r, c);
                for ch in 0..CHANNELS {
                    if !FlowField::channel_masked(shape, cell, ch) {
                        field.values_mut()[cell * CHANNELS + ch] = dec_out.at(ch, r, c);
                    }
                }
            }
        }
        Ok((
            field,
            FlowCache {
                shape,
                prev: prev_feats,
                cur: cur_feats,
                concat,
                dec_hidden,
                dec_out,
            },
        ))
    }

    /// Exact gradient of the forward pass contracted with `grad_field`
    /// (flow layout, `cell * 10 + channel`). Encoder gradients from both
    /// frames accumulate into the shared weights.
    pub fn backward(&self, cache: &FlowCache, grad_field: &[f64]) -> Result<Vec<f64>> {
        if grad_field.len() != cache.shape.len() * CHANNELS {
            return Err(FlowError::shape_mismatch(
                format!("{} gradient values", cache.shape.len() * CHANNELS),
                format!("{}", grad_field.len()),
            ));
        }
        if let Some(i) = grad_field.iter().position(|g| !g.is_finite()) {
            return Err(FlowError::Numeric(format!(
                "non-finite upstream gradient at index {i}"
            )));
        }
        let shape = cache.shape;
        let layers = self.arch.layers()?;
        let offsets = self.arch.offsets()?;
        let mut grads = vec![0.0; self.theta.len()];

        // Masked channels are overwritten with zero in the forward pass, so
        // their upstream gradient is discarded.
        let mut g_out = Tensor3::zeros(CHANNELS, shape.rows, shape.cols);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let cell = shape.index(r, c);
                for ch in 0..CHANNELS {
                    if !FlowField::channel_masked(shape, cell, ch) {
                        *g_out.at_mut(ch, r, c) = grad_field[cell * CHANNELS + ch];
                    }
                }
            }
        }

        let g_dec_hidden = conv_backward(
            &layers[4],
            &self.theta[offsets[4].0..offsets[4].1],
            &cache.dec_hidden,
            &cache.dec_out,
            &g_out,
            &mut grads[offsets[4].0..offsets[4].1],
        );
        let g_concat = conv_backward(
            &layers[3],
            &self.theta[offsets[3].0..offsets[3].1],
            &cache.concat,
            &cache.dec_hidden,
            &g_dec_hidden,
            &mut grads[offsets[3].0..offsets[3].1],
        );

        let e2 = self.arch.enc_channels[2];
        let split = e2 * g_concat.h * g_concat.w;
        let g_prev_top = Tensor3 {
            ch: e2,
            h: g_concat.h,
            w: g_concat.w,
            data: g_concat.data[..split].to_vec(),
        };
        let g_cur_top = Tensor3 {
            ch: e2,
            h: g_concat.h,
            w: g_concat.w,
            data: g_concat.data[split..].to_vec(),
        };

        for (feats, mut g_top) in [(&cache.prev, g_prev_top), (&cache.cur, g_cur_top)] {
            for layer_idx in (0..3).rev() {
                g_top = conv_backward(
                    &layers[layer_idx],
                    &self.theta[offsets[layer_idx].0..offsets[layer_idx].1],
                    &feats[layer_idx],
                    &feats[layer_idx + 1],
                    &g_top,
                    &mut grads[offsets[layer_idx].0..offsets[layer_idx].1],
                );
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "flow",
            "arch": self.arch,
        });
        write_checkpoint(path, &header, &self.theta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, theta) = read_checkpoint(path)?;
        check_kind(&header, "flow", path)?;
        let arch: FlowArch = serde_json::from_value(header["arch"].clone())?;
        if theta.len() != arch.param_len()? {
            return Err(FlowError::shape_mismatch(
                format!("{} parameters", arch.param_len()?),
                format!("{}", theta.len()),
            ));
        }
        Ok(FlowRegressor { arch, theta })
    }
}

/// Architecture of the density-pair to optical-flow regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpticalArch {
    pub hidden: usize,
}

impl Default for OpticalArch {
    fn default() -> Self {
        OpticalArch { hidden: 8 }
    }
}

impl OpticalArch {
    fn layers(&self) -> [ConvSpec; 2] {
        [
            ConvSpec { in_ch: 2, out_ch: self.hidden, kernel: 3, stride: 1, pad: 1, relu: true },
            ConvSpec { in_ch: self.hidden, out_ch: 2, kernel: 3, stride: 1, pad: 1, relu: false },
        ]
    }

    pub fn param_len(&self) -> usize {
        self.layers().iter().map(|l| l.param_len()).sum()
    }
}

pub struct OpticalCache {
    shape: GridShape,
    x0: Tensor3,
    x1: Tensor3,
    x2: Tensor3,
}

#[derive(Debug, Clone)]
pub struct OpticalRegressor {
    pub arch: OpticalArch,
    pub theta: Vec<f64>,
}

impl OpticalRegressor {
    pub fn init(arch: OpticalArch, seed: u64) -> Self {
        let mut theta = vec![0.0; arch.param_len()];
        let mut rng = rng_for(seed, "optical-regressor-init");
        let mut at = 0;
        for layer in arch.layers() {
            let w_len = layer.param_len() - layer.out_ch;
            glorot_init(&mut rng, &mut theta[at..at + w_len], layer.fan_in(), layer.fan_out());
            at += layer.param_len();
        }
        OpticalRegressor { arch, theta }
    }

    pub fn zeros(arch: OpticalArch) -> Self {
        OpticalRegressor {
            theta: vec![0.0; arch.param_len()],
            arch,
        }
    }

    pub fn forward(&self, m_prev: &DensityMap, m_cur: &DensityMap) -> Result<OpticalFlowField> {
        Ok(self.forward_cached(m_prev, m_cur)?.0)
    }

    pub fn forward_cached(
        &self,
        m_prev: &DensityMap,
        m_cur: &DensityMap,
    ) -> Result<(OpticalFlowField, OpticalCache)> {
        if m_prev.shape() != m_cur.shape() {
            return Err(FlowError::shape_mismatch(m_prev.shape(), m_cur.shape()));
        }
        let shape = m_prev.shape();
        let layers = self.arch.layers();
        let mut x0 = Tensor3::zeros(2, shape.rows, shape.cols);
        x0.data[..shape.len()].copy_from_slice(m_prev.values());
        x0.data[shape.len()..].copy_from_slice(m_cur.values());
        let split = layers[0].param_len();
        let x1 = conv_forward(&layers[0], &self.theta[..split], &x0);
        let x2 = conv_forward(&layers[1], &self.theta[split..], &x1);
        let mut field = OpticalFlowField::zeros(shape);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                field.set(shape.index(r, c), x2.at(0, r, c), x2.at(1, r, c));
            }
        }
        Ok((field, OpticalCache { shape, x0, x1, x2 }))
    }

    /// Gradient w.r.t. parameters and both density inputs, contracted with
    /// `grad_uv` in optical layout (`cell * 2 + component`).
    pub fn backward(
        &self,
        cache: &OpticalCache,
        grad_uv: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let shape = cache.shape;
        if grad_uv.len() != shape.len() * 2 {
            return Err(FlowError::shape_mismatch(
                format!("{} gradient values", shape.len() * 2),
                format!("{}", grad_uv.len()),
            ));
        }
        let layers = self.arch.layers();
        let split = layers[0].param_len();
        let mut grads = vec![0.0; self.theta.len()];
        let mut g_out = Tensor3::zeros(2, shape.rows, shape.cols);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let cell = shape.index(r, c);
                *g_out.at_mut(0, r, c) = grad_uv[cell * 2];
                *g_out.at_mut(1, r, c) = grad_uv[cell * 2 + 1];
            }
        }
        let g_x1 = conv_backward(
            &layers[1],
            &self.theta[split..],
            &cache.x1,
            &cache.x2,
            &g_out,
            &mut grads[split..],
        );
        let g_x0 = conv_backward(
            &layers[0],
            &self.theta[..split],
            &cache.x0,
            &cache.x1,
            &g_x1,
            &mut grads[..split],
        );
        let grad_prev = g_x0.data[..shape.len()].to_vec();
        let grad_cur = g_x0.data[shape.len()..].to_vec();
        Ok((grads, grad_prev, grad_cur))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "optical", "arch": self.arch });
        write_checkpoint(path, &header, &self.theta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, theta) = read_checkpoint(path)?;
        check_kind(&header, "optical", path)?;
        let arch: OpticalArch = serde_json::from_value(header["arch"].clone())?;
        if theta.len() != arch.param_len() {
            return Err(FlowError::shape_mismatch(
                format!("{} parameters", arch.param_len()),
                format!("{}", theta.len()),
            ));
        }
        Ok(OpticalRegressor { arch, theta })
    }
}

/// MLP over a flattened patch density, sigmoid output strictly in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub input_len: usize,
    pub hidden: usize,
}

impl DiscriminatorArch {
    fn layers(&self) -> [DenseSpec; 2] {
        [
            DenseSpec { in_dim: self.input_len, out_dim: self.hidden, relu: true },
            DenseSpec { in_dim: self.hidden, out_dim: 1, relu: false },
        ]
    }

    pub fn param_len(&self) -> usize {
        self.layers().iter().map(|l| l.param_len()).sum()
    }
}

pub struct DiscriminatorCache {
    x0: Vec<f64>,
    x1: Vec<f64>,
    logit: Vec<f64>,
    prob: f64,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub theta: Vec<f64>,
}

impl Discriminator {
    pub fn init(arch: DiscriminatorArch, seed: u64) -> Self {
        let mut theta = vec![0.0; arch.param_len()];
        let mut rng = rng_for(seed, "discriminator-init");
        let mut at = 0;
        for layer in arch.layers() {
            let w_len = layer.out_dim * layer.in_dim;
            glorot_init(&mut rng, &mut theta[at..at + w_len], layer.in_dim, layer.out_dim);
            at += layer.param_len();
        }
        Discriminator { arch, theta }
    }

    pub fn zeros(arch: DiscriminatorArch) -> Self {
        Discriminator {
            theta: vec![0.0; arch.param_len()],
            arch,
        }
    }

    pub fn forward(&self, patch: &DensityMap) -> Result<f64> {
        Ok(self.forward_cached(patch)?.0)
    }

    pub fn forward_cached(&self, patch: &DensityMap) -> Result<(f64, DiscriminatorCache)> {
        if patch.values().len() != self.arch.input_len {
            return Err(FlowError::shape_mismatch(
                format!("patch of {} cells", self.arch.input_len),
                format!("{}", patch.values().len()),
            ));
        }
        let layers = self.arch.layers();
        let split = layers[0].param_len();
        let x0 = patch.values().to_vec();
        let x1 = dense_forward(&layers[0], &self.theta[..split], &x0);
        let logit = dense_forward(&layers[1], &self.theta[split..], &x1);
        let prob = sigmoid(logit[0]);
        Ok((prob, DiscriminatorCache { x0, x1, logit, prob }))
    }

    /// Gradient of a scalar loss w.r.t. parameters and the patch input,
    /// given `dloss_dprob`.
    pub fn backward(&self, cache: &DiscriminatorCache, dloss_dprob: f64) -> (Vec<f64>, Vec<f64>) {
        let layers = self.arch.layers();
        let split = layers[0].param_len();
        let mut grads = vec![0.0; self.theta.len()];
        let dlogit = dloss_dprob * cache.prob * (1.0 - cache.prob);
        let g_x1 = dense_backward(
            &layers[1],
            &self.theta[split..],
            &cache.x1,
            &cache.logit,
            &[dlogit],
            &mut grads[split..],
        );
        let g_x0 = dense_backward(
            &layers[0],
            &self.theta[..split],
            &cache.x0,
            &cache.x1,
            &g_x1,
            &mut grads[..split],
        );
        (grads, g_x0)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";

/// Checkpoint layout: magic, u32 JSON header length, the JSON header, then
/// the parameters as little-endian f64. Round-trips bitwise.
pub fn write_checkpoint(path: &Path, header: &serde_json::Value, theta: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in theta {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<f64>)> {
    let file_name = path.display().to_string();
    let parse = |detail: String| FlowError::Parse {
        file: file_name.clone(),
        detail,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(parse("bad checkpoint magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header_bytes).map_err(|e| parse(format!("bad header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(parse("parameter block is not a multiple of 8 bytes".into()));
    }
    let theta = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, theta))
}

fn check_kind(header: &serde_json::Value, expected: &str, path: &Path) -> Result<()> {
    if header["kind"].as_str() != Some(expected) {
        return Err(FlowError::Parse {
            file: path.display().to_string(),
            detail: format!("checkpoint kind {:?}, expected {expected:?}", header["kind"]),
        });
    }
    Ok(())
}

/// Small architecture used by gradient-check fixtures.
pub fn tiny_flow_arch(cell_px: usize) -> FlowArch {
    FlowArch {
        cell_px,
        enc_channels: [2, 3, 3],
        dec_hidden: 4,
    }
}
