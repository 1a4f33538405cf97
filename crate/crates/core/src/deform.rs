//! Deformation field: frequency-encoded `(mean, t)` to per-Gaussian offsets.
//!
//! The network output has exactly five slots `(dx, dy, dls_x, dls_y, do_logit)`;
//! there is no way for it to move a Gaussian axially or rotate it. The mean
//! offsets are `tanh`-bounded and scaled to pixels.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::gaussian::DeformationDelta;
use crate::rng::SplitMix64;

pub const OUTPUT_DIM: usize = DeformationDelta::ARITY;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Hidden layer (0-based, >= 1) that also receives the encoded input.
    pub skip_layer: Option<usize>,
    /// Position frequencies `2^0 .. 2^(L-1)` (times pi).
    pub pos_freqs: usize,
    pub time_freqs: usize,
    /// Mean offsets are bounded by this fraction of the image width.
    pub mean_offset_fraction: f64,
    /// When set, the opacity-logit offset is `b * tanh(raw / b)` instead of raw.
    pub opacity_delta_bound: Option<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_layers: 6,
            width: 128,
            skip_layer: Some(4),
            pos_freqs: 10,
            time_freqs: 6,
            mean_offset_fraction: 0.1,
            opacity_delta_bound: None,
        }
    }
}

impl NetConfig {
    /// Smaller network used for desk-scale runs, with a coarser positional
    /// encoding and a bounded opacity offset.
    pub fn desk() -> Self {
        NetConfig {
            hidden_layers: 4,
            width: 64,
            skip_layer: Some(2),
            pos_freqs: 4,
            time_freqs: 2,
            opacity_delta_bound: Some(3.0),
            ..NetConfig::default()
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 * self.pos_freqs + 2 * self.time_freqs + 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }
}

/// Trainable parameters of the deformation network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

impl NetParams {
    pub fn zeros_like(&self) -> Self {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter blocks in a fixed order: per layer, weights then bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn bitwise_eq(&self, other: &NetParams) -> bool {
        self.same_shape(other) && self.iter().zip(other.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Activations retained by a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    t: f64,
    means: Vec<[f64; 2]>,
    /// Input of every layer (hidden layers then output).
    inputs: Vec<Array2<f64>>,
    /// Post-ReLU output of each hidden layer.
    hidden: Vec<Array2<f64>>,
    raw: Array2<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn timestamp(&self) -> f64 {
        self.t
    }
}

/// Network architecture bound to an image frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformNet {
    config: NetConfig,
    width: usize,
    height: usize,
}

impl DeformNet {
    pub fn new(config: NetConfig, width: usize, height: usize) -> Result<Self> {
        if config.hidden_layers == 0 || config.width == 0 {
            return Err(Error::invalid("deformation net needs at least one non-empty hidden layer"));
        }
        if let Some(k) = config.skip_layer {
            if k == 0 || k >= config.hidden_layers {
                return Err(Error::invalid(format!(
                    "skip layer {k} must be in 1..{}",
                    config.hidden_layers
                )));
            }
        }
        if config.opacity_delta_bound.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("opacity delta bound must be positive and finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("deformation net needs a non-empty frame"));
        }
        Ok(DeformNet {
            config,
            width,
            height,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn frame(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn encoded_len(&self) -> usize {
        self.config.encoded_len()
    }

    pub fn mean_offset_scale(&self) -> f64 {
        self.config.mean_offset_fraction * self.width as f64
    }

    fn opacity_delta(&self, raw: f64) -> f64 {
        match self.config.opacity_delta_bound {
            Some(b) => b * (raw / b).tanh(),
            None => raw,
        }
    }

    fn opacity_delta_slope(&self, raw: f64) -> f64 {
        match self.config.opacity_delta_bound {
            Some(b) => {
                let th = (raw / b).tanh();
                1.0 - th * th
            }
            None => 1.0,
        }
    }

    fn layer_input_dim(&self, k: usize) -> usize {
        match k {
            0 => self.encoded_len(),
            k if self.config.skip_layer == Some(k) => self.config.width + self.encoded_len(),
            _ => self.config.width,
        }
    }

    /// `(rows, cols)` of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<_> = (0..self.config.hidden_layers)
            .map(|k| (self.config.width, self.layer_input_dim(k)))
            .collect();
        shapes.push((OUTPUT_DIM, self.config.width));
        shapes
    }

    pub fn check_params(&self, params: &NetParams) -> Result<()> {
        let shapes = self.layer_shapes();
        let ok = params.layers.len() == shapes.len()
            && params
                .layers
                .iter()
                .zip(&shapes)
                .all(|(l, &(r, c))| l.rows() == r && l.cols() == c && l.bias.len() == r);
        if ok {
            Ok(())
        } else {
            Err(Error::mismatch("network parameters do not match the architecture"))
        }
    }

    /// Hidden layers get uniform fan-in (He) initialization; the output layer
    /// starts at zero so the initial deformation is the identity.
    pub fn init_params(&self, rng: &mut SplitMix64) -> NetParams {
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(k, &(rows, cols))| {
                let weights = if k == last {
                    Array2::zeros((rows, cols))
                } else {
                    let bound = (6.0 / cols as f64).sqrt();
                    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-bound, bound))
                };
                Layer {
                    weights,
                    bias: Array1::zeros(rows),
                }
            })
            .collect();
        NetParams { layers }
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!("timestamp {t} outside [0, 1]")))
        }
    }

    /// Writes the encoding of one `(mean, t)` into `out`.
    pub fn encode(&self, mean: [f64; 2], t: f64, out: &mut [f64]) {
        let xn = 2.0 * mean[0] / self.width as f64 - 1.0;
        let yn = 2.0 * mean[1] / self.height as f64 - 1.0;
        out[0] = xn;
        out[1] = yn;
        out[2] = t;
        let mut i = 3;
        let mut f = PI;
        for _ in 0..self.config.pos_freqs {
            let (sx, cx) = (f * xn).sin_cos();
            let (sy, cy) = (f * yn).sin_cos();
            out[i..i + 4].copy_from_slice(&[sx, cx, sy, cy]);
            i += 4;
            f *= 2.0;
        }
        let mut f = PI;
        for _ in 0..self.config.time_freqs {
            let (st, ct) = (f * t).sin_cos();
            out[i] = st;
            out[i + 1] = ct;
            i += 2;
            f *= 2.0;
        }
    }

    pub fn forward(&self, params: &NetParams, mean: [f64; 2], t: f64) -> Result<DeformationDelta> {
        Ok(self.batched_forward(params, &[mean], t)?[0])
    }

    pub fn batched_forward(&self, params: &NetParams, means: &[[f64; 2]], t: f64) -> Result<Vec<DeformationDelta>> {
        self.forward_with_cache(params, means, t).map(|(d, _)| d)
    }

    pub fn forward_with_cache(
        &self,
        params: &NetParams,
        means: &[[f64; 2]],
        t: f64,
    ) -> Result<(Vec<DeformationDelta>, ForwardCache)> {
        Self::check_t(t)?;
        self.check_params(params)?;
        let n = means.len();
        let e = self.encoded_len();
        let mut enc = Array2::zeros((n, e));
        for (row, &m) in enc.outer_iter_mut().zip(means) {
            let mut row = row;
            self.encode(m, t, row.as_slice_mut().expect("row-major"));
        }

        let hidden_count = self.config.hidden_layers;
        let mut inputs = Vec::with_capacity(hidden_count + 1);
        let mut hidden = Vec::with_capacity(hidden_count);
        let mut x = enc.clone();
        for (k, layer) in params.layers.iter().enumerate() {
            if self.config.skip_layer == Some(k) {
                x = ndarray::concatenate![Axis(1), x, enc];
            }
            let mut z = Array2::zeros((n, layer.rows()));
            general_mat_mul(1.0, &x, &layer.weights.t(), 0.0, &mut z);
            z += &layer.bias;
            inputs.push(x);
            if k < hidden_count {
                z.mapv_inplace(|v| v.max(0.0));
                hidden.push(z.clone());
                x = z;
            } else {
                x = z;
            }
        }
        let raw = x;
        let scale = self.mean_offset_scale();
        let deltas = raw
            .outer_iter()
            .map(|r| DeformationDelta {
                d_mean: [scale * r[0].tanh(), scale * r[1].tanh()],
                d_log_scale: [r[2], r[3]],
                d_opacity_logit: self.opacity_delta(r[4]),
            })
            .collect();
        Ok((
            deltas,
            ForwardCache {
                t,
                means: means.to_vec(),
                inputs,
                hidden,
                raw,
            },
        ))
    }

    /// Gradients of `sum_i <grad_deltas[i], delta_i>` with respect to the
    /// parameters and, when requested, each input mean. `t` is data and gets none.
    pub fn backward(
        &self,
        params: &NetParams,
        cache: &ForwardCache,
        grad_deltas: &[DeformationDelta],
        want_mean_grad: bool,
    ) -> Result<(NetParams, Option<Vec<[f64; 2]>>)> {
        self.check_params(params)?;
        let n = cache.len();
        if grad_deltas.len() != n {
            return Err(Error::mismatch(format!(
                "{} delta gradients for a batch of {n}",
                grad_deltas.len()
            )));
        }
        let scale = self.mean_offset_scale();
        let mut g = Array2::zeros((n, OUTPUT_DIM));
        for ((mut row, gd), raw) in g.outer_iter_mut().zip(grad_deltas).zip(cache.raw.outer_iter()) {
            for j in 0..2 {
                let th = raw[j].tanh();
                row[j] = gd.d_mean[j] * scale * (1.0 - th * th);
            }
            row[2] = gd.d_log_scale[0];
            row[3] = gd.d_log_scale[1];
            row[4] = gd.d_opacity_logit * self.opacity_delta_slope(raw[4]);
        }

        let e = self.encoded_len();
        let mut grads = params.zeros_like();
        let mut g_enc: Option<Array2<f64>> = want_mean_grad.then(|| Array2::zeros((n, e)));
        let hidden_count = self.config.hidden_layers;
        for k in (0..=hidden_count).rev() {
            let layer = &params.layers[k];
            if k < hidden_count {
                // Through the ReLU of this layer's output.
                g.zip_mut_with(&cache.hidden[k], |gv, &h| {
                    if h <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let x = &cache.inputs[k];
            let gl = &mut grads.layers[k];
            general_mat_mul(1.0, &g.t(), x, 0.0, &mut gl.weights);
            gl.bias = g.sum_axis(Axis(0));
            if k == 0 && g_enc.is_none() {
                break;
            }
            let mut gx = Array2::zeros((n, layer.cols()));
            general_mat_mul(1.0, &g, &layer.weights, 0.0, &mut gx);
            if k == 0 {
                if let Some(ge) = g_enc.as_mut() {
                    *ge += &gx;
                }
                break;
            }
            if self.config.skip_layer == Some(k) {
                let w = self.config.width;
                if let Some(ge) = g_enc.as_mut() {
                    *ge += &gx.slice(s![.., w..]);
                }
                g = gx.slice(s![.., ..w]).to_owned();
            } else {
                g = gx;
            }
        }

        let mean_grads = g_enc.map(|ge| {
            ge.outer_iter()
                .zip(&cache.means)
                .map(|(row, &m)| self.encoding_vjp(m, row.as_slice().expect("row-major")))
                .collect()
        });
        Ok((grads, mean_grads))
    }

    /// Pulls an encoding-space gradient back to the pixel-space mean.
    fn encoding_vjp(&self, mean: [f64; 2], g: &[f64]) -> [f64; 2] {
        let sx = 2.0 / self.width as f64;
        let sy = 2.0 / self.height as f64;
        let xn = mean[0] * sx - 1.0;
        let yn = mean[1] * sy - 1.0;
        let mut gx = g[0];
        let mut gy = g[1];
        let mut f = PI;
        let mut i = 3;
        for _ in 0..self.config.pos_freqs {
            let (sxv, cxv) = (f * xn).sin_cos();
            let (syv, cyv) = (f * yn).sin_cos();
            gx += f * (g[i] * cxv - g[i + 1] * sxv);
            gy += f * (g[i + 2] * cyv - g[i + 3] * syv);
            i += 4;
            f *= 2.0;
        }
        [gx * sx, gy * sy]
    }

    /// Single-point backward: `(grad_params, grad_mean)`.
    pub fn backward_single(
        &self,
        params: &NetParams,
        mean: [f64; 2],
        t: f64,
        grad_delta: &DeformationDelta,
    ) -> Result<(NetParams, [f64; 2])> {
        let (_, cache) = self.forward_with_cache(params, &[mean], t)?;
        let (gp, gm) = self.backward(params, &cache, std::slice::from_ref(grad_delta), true)?;
        Ok((gp, gm.expect("requested")[0]))
    }
}
