//! Minimal dense/convolutional layers with exact reverse-mode gradients.
//!
//! Everything runs on 64-bit floats so analytic gradients can be checked
//! against central finite differences to tight tolerances. Parameters for a
//! whole network live in one flat vector; each layer reads its slice at a
//! fixed offset.

use rand::Rng;

/// Channel-major 3D feature map: `data[(ch * h + y) * w + x]`.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    /// Stacks two maps with identical spatial dims along the channel axis.
    pub fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
        assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor3 {
            ch: a.ch + b.ch,
            h: a.h,
            w: a.w,
            data,
        }
    }
}

/// 2D convolution with zero padding and an optional fused ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn param_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        (in_dim + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.out_ch * self.kernel * self.kernel
    }
}

pub fn conv_forward(spec: &ConvSpec, params: &[f64], input: &Tensor3) -> Tensor3 {
    assert_eq!(input.ch, spec.in_ch);
    assert_eq!(params.len(), spec.param_len());
    let k = spec.kernel;
    let oh = spec.out_dim(input.h);
    let ow = spec.out_dim(input.w);
    let weights = &params[..spec.out_ch * spec.in_ch * k * k];
    let biases = &params[spec.out_ch * spec.in_ch * k * k..];
    let mut out = Tensor3::zeros(spec.out_ch, oh, ow);
    for oc in 0..spec.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = biases[oc];
                for ic in 0..spec.in_ch {
                    let w_base = ((oc * spec.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as i64 - spec.pad as i64;
                        if iy < 0 || iy >= input.h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as i64 - spec.pad as i64;
                            if ix < 0 || ix >= input.w as i64 {
                                continue;
                            }
                            acc += weights[w_base + ky * k + kx]
                                * input.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                *out.at_mut(oc, oy, ox) = if spec.relu { acc.max(0.0) } else { acc };
            }
        }
    }
    out
}

/// Backpropagates through a convolution. `output` must be the tensor
/// produced by `conv_forward` for the same `input` (used to gate the ReLU;
/// the subgradient at zero is taken as zero). Accumulates into
/// `grad_params` and returns the gradient with respect to the input.
pub fn conv_backward(
    spec: &ConvSpec,
    params: &[f64],
    input: &Tensor3,
    output: &Tensor3,
    grad_out: &Tensor3,
    grad_params: &mut [f64],
) -> Tensor3 {
    assert_eq!(params.len(), spec.param_len());
    assert_eq!(grad_params.len(), spec.param_len());
    let k = spec.kernel;
    let (oh, ow) = (output.h, output.w);
    let w_len = spec.out_ch * spec.in_ch * k * k;
    let weights = &params[..w_len];
    let mut grad_in = Tensor3::zeros(input.ch, input.h, input.w);
    for oc in 0..spec.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut g = grad_out.at(oc, oy, ox);
                if spec.relu && output.at(oc, oy, ox) <= 0.0 {
                    g = 0.0;
                }
                if g == 0.0 {
                    continue;
                }
                grad_params[w_len + oc] += g;
                for ic in 0..spec.in_ch {
                    let w_base = ((oc * spec.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as i64 - spec.pad as i64;
                        if iy < 0 || iy >= input.h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as i64 - spec.pad as i64;
                            if ix < 0 || ix >= input.w as i64 {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            grad_params[w_base + ky * k + kx] += g * input.at(ic, iy, ix);
                            *grad_in.at_mut(ic, iy, ix) += g * weights[w_base + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Fully connected layer with an optional fused ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

impl DenseSpec {
    pub fn param_len(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

pub fn dense_forward(spec: &DenseSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), spec.in_dim);
    assert_eq!(params.len(), spec.param_len());
    let weights = &params[..spec.out_dim * spec.in_dim];
    let biases = &params[spec.out_dim * spec.in_dim..];
    (0..spec.out_dim)
        .map(|o| {
            let row = &weights[o * spec.in_dim..(o + 1) * spec.in_dim];
            let acc = biases[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            if spec.relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

pub fn dense_backward(
    spec: &DenseSpec,
    params: &[f64],
    input: &[f64],
    output: &[f64],
    grad_out: &[f64],
    grad_params: &mut [f64],
) -> Vec<f64> {
    let w_len = spec.out_dim * spec.in_dim;
    let weights = &params[..w_len];
    let mut grad_in = vec![0.0; spec.in_dim];
    for o in 0..spec.out_dim {
        let mut g = grad_out[o];
        if spec.relu && output[o] <= 0.0 {
            g = 0.0;
        }
        if g == 0.0 {
            continue;
        }
        grad_params[w_len + o] += g;
        for i in 0..spec.in_dim {
            grad_params[o * spec.in_dim + i] += g * input[i];
            grad_in[i] += g * weights[o * spec.in_dim + i];
        }
    }
    grad_in
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Glorot-uniform initialization over one layer's weight block; biases zero.
pub fn glorot_init(rng: &mut impl Rng, weights: &mut [f64], fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in weights {
        *w = rng.random_range(-bound..bound);
    }
}
