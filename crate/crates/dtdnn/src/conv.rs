//! Standard time-delay (1-D convolution) layers: the fixed sampling grid,
//! parameter container, and forward/backward passes.
//!
//! Output frame `i` is centered on input frame `i * stride` and reads the
//! grid `R = { dilation * (n - (N-1)/2) : n = 0..N-1 }` around it with
//! "same" zero padding, so the output length is `ceil(T / stride)`.

use crate::error::{Error, Result};
use crate::exec;
use crate::interp::padded;
use crate::rng::Rng;
use crate::seq::FeatureSeq;

/// Sampling grid of a 1-D convolution: kernel size (odd), dilation, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    kernel_size: usize,
    dilation: usize,
    stride: usize,
}

impl GridSpec {
    pub fn new(kernel_size: usize, dilation: usize, stride: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::usage(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::usage(format!(
                "dilation and stride must be >= 1, got d={dilation}, s={stride}"
            )));
        }
        Ok(GridSpec { kernel_size, dilation, stride })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Grid position of tap `n`, in input frames relative to the center.
    #[inline]
    pub fn tap_offset(&self, n: usize) -> i64 {
        debug_assert!(n < self.kernel_size);
        self.dilation as i64 * (n as i64 - (self.kernel_size as i64 - 1) / 2)
    }

    /// All tap positions, symmetric around zero.
    pub fn taps(&self) -> Vec<i64> {
        (0..self.kernel_size).map(|n| self.tap_offset(n)).collect()
    }

    /// Largest future reach of the grid, `dilation * (N-1)/2`.
    pub fn radius(&self) -> i64 {
        self.tap_offset(self.kernel_size - 1)
    }

    /// Output length for an input of length `t_in`.
    pub fn out_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }
}

/// Weights and bias of a 1-D convolution; weights are stored
/// `[out_channel][in_channel][tap]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    out_channels: usize,
    in_channels: usize,
    taps: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        taps: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || taps == 0 {
            return Err(Error::usage("conv dims must be positive".to_string()));
        }
        if weights.len() != out_channels * in_channels * taps {
            return Err(Error::usage(format!(
                "weight size {} does not match ({out_channels}, {in_channels}, {taps})",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::usage(format!(
                "bias size {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::usage("conv parameters contain non-finite values".to_string()));
        }
        Ok(ConvParams { out_channels, in_channels, taps, weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, taps: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels,
            taps,
            weights: vec![0.0; out_channels * in_channels * taps],
            bias: vec![0.0; out_channels],
        }
    }

    /// Weights uniform in `±sqrt(1 / (in_channels * taps))`, bias zero.
    pub fn init_uniform(
        out_channels: usize,
        in_channels: usize,
        taps: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = (1.0 / (in_channels * taps) as f64).sqrt();
        let weights = (0..out_channels * in_channels * taps)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        ConvParams { out_channels, in_channels, taps, weights, bias: vec![0.0; out_channels] }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, n: usize) -> f64 {
        self.weights[(co * self.in_channels + ci) * self.taps + n]
    }

    pub fn set_weight(&mut self, co: usize, ci: usize, n: usize, v: f64) {
        self.weights[(co * self.in_channels + ci) * self.taps + n] = v;
    }

    /// Weight row `[in_channels * taps]` of one output channel.
    #[inline]
    pub(crate) fn weight_row(&self, co: usize) -> &[f64] {
        let w = self.in_channels * self.taps;
        &self.weights[co * w..(co + 1) * w]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn set_bias(&mut self, co: usize, v: f64) {
        self.bias[co] = v;
    }

    /// Total stored parameters, `C_out * C_in * N + C_out`.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn check_shapes(x: &FeatureSeq, p: &ConvParams, g: &GridSpec) -> Result<()> {
    if x.channels() != p.in_channels() {
        return Err(Error::usage(format!(
            "input has {} channels but conv expects {}",
            x.channels(),
            p.in_channels()
        )));
    }
    if p.taps() != g.kernel_size() {
        return Err(Error::usage(format!(
            "conv has {} taps but grid kernel size is {}",
            p.taps(),
            g.kernel_size()
        )));
    }
    Ok(())
}

fn check_grad_out(grad_y: &FeatureSeq, p: &ConvParams, t_out: usize) -> Result<()> {
    if grad_y.channels() != p.out_channels() || grad_y.len() != t_out {
        return Err(Error::usage(format!(
            "output gradient shape ({}, {}) does not match forward output ({}, {})",
            grad_y.channels(),
            grad_y.len(),
            p.out_channels(),
            t_out
        )));
    }
    Ok(())
}

/// Forward pass of a standard TDNN layer with "same" zero padding.
pub fn tdnn_forward(x: &FeatureSeq, p: &ConvParams, g: &GridSpec) -> Result<FeatureSeq> {
    check_shapes(x, p, g)?;
    let t_out = g.out_len(x.len());
    let offs = g.taps();
    let (c_in, taps, stride) = (p.in_channels(), p.taps(), g.stride() as i64);

    let mut y = FeatureSeq::zeros(p.out_channels(), t_out);
    exec::for_each_row(y.as_mut_slice(), t_out, |co, row| {
        let wrow = p.weight_row(co);
        let b = p.bias()[co];
        for (i, out) in row.iter_mut().enumerate() {
            let center = i as i64 * stride;
            let mut acc = b;
            for ci in 0..c_in {
                let xrow = x.row(ci);
                let w = &wrow[ci * taps..(ci + 1) * taps];
                for (n, &off) in offs.iter().enumerate() {
                    acc += w[n] * padded(xrow, center + off);
                }
            }
            *out = acc;
        }
    });
    Ok(y)
}

/// Backward pass of [`tdnn_forward`]: gradients of `sum(grad_y * y)` with
/// respect to the input and the parameters. The parameter gradient reuses
/// [`ConvParams`] as its container.
pub fn tdnn_backward(
    x: &FeatureSeq,
    p: &ConvParams,
    g: &GridSpec,
    grad_y: &FeatureSeq,
) -> Result<(FeatureSeq, ConvParams)> {
    check_shapes(x, p, g)?;
    let t_out = g.out_len(x.len());
    check_grad_out(grad_y, p, t_out)?;

    let offs = g.taps();
    let (c_in, c_out, taps, stride) = (
        p.in_channels(),
        p.out_channels(),
        p.taps(),
        g.stride() as i64,
    );
    let t_in = x.len();

    // Weight and bias gradients: each output channel owns one disjoint row.
    let mut grad_p = ConvParams::zeros(c_out, c_in, taps);
    let row_w = c_in * taps;
    let mut grad_bias = vec![0.0f64; c_out];
    exec::for_each_row(grad_p.weights_mut(), row_w, |co, wrow| {
        let gy = grad_y.row(co);
        for ci in 0..c_in {
            let xrow = x.row(ci);
            for (n, &off) in offs.iter().enumerate() {
                let mut acc = 0.0;
                for (i, &gyv) in gy.iter().enumerate() {
                    acc += gyv * padded(xrow, i as i64 * stride + off);
                }
                wrow[ci * taps + n] = acc;
            }
        }
    });
    for (co, b) in grad_bias.iter_mut().enumerate() {
        *b = grad_y.row(co).iter().sum();
    }
    for (co, b) in grad_bias.into_iter().enumerate() {
        grad_p.set_bias(co, b);
    }

    // Input gradient: each input channel owns one disjoint row.
    let mut grad_x = FeatureSeq::zeros(c_in, t_in);
    exec::for_each_row(grad_x.as_mut_slice(), t_in, |ci, xg| {
        for i in 0..t_out {
            let center = i as i64 * stride;
            for (n, &off) in offs.iter().enumerate() {
                let j = center + off;
                if j < 0 || j as usize >= t_in {
                    continue;
                }
                let mut acc = 0.0;
                for co in 0..c_out {
                    acc += grad_y.get(co, i) * p.weight(co, ci, n);
                }
                xg[j as usize] += acc;
            }
        }
    });

    Ok((grad_x, grad_p))
}
