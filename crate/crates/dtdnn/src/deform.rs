//! Deformable TDNN layers: the fixed sampling grid of [`crate::conv`]
//! augmented with input-conditioned fractional offsets.
//!
//! Each kernel tap `n` at output frame `i` samples the input at
//! `i * stride + tap_offset(n) + offset[n][i]` by linear interpolation. The
//! offsets are predicted from the layer input by a small auxiliary 1-D
//! convolution and are shared by all channels, so the field has shape
//! `(N, T_out)`. Latency-controlled mode clips positive offsets to zero so a
//! deformed layer never looks further ahead than its fixed grid.

use serde::{Deserialize, Serialize};

use crate::conv::{tdnn_backward, tdnn_forward, ConvParams, GridSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::interp::{padded, split_pos};
use crate::seq::FeatureSeq;

/// Fractional sampling offsets, entry `[n][i]` is the displacement of tap
/// `n` at output frame `i`, in input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    taps: usize,
    len: usize,
    data: Vec<f64>,
}

impl OffsetField {
    pub fn new(taps: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if taps == 0 || len == 0 {
            return Err(Error::usage("offset field dims must be positive".to_string()));
        }
        if data.len() != taps * len {
            return Err(Error::usage(format!(
                "offset data size {} does not match ({taps}, {len})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::usage("offset field contains non-finite values".to_string()));
        }
        Ok(OffsetField { taps, len, data })
    }

    pub fn zeros(taps: usize, len: usize) -> Self {
        OffsetField { taps, len, data: vec![0.0; taps * len] }
    }

    pub fn constant(taps: usize, len: usize, v: f64) -> Self {
        OffsetField { taps, len, data: vec![v; taps * len] }
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.data[n * self.len + i]
    }

    pub fn set(&mut self, n: usize, i: usize, v: f64) {
        self.data[n * self.len + i] = v;
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.len..(n + 1) * self.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn from_seq(seq: FeatureSeq) -> Self {
        OffsetField { taps: seq.channels(), len: seq.len(), data: seq.into_data() }
    }

    fn to_seq(&self) -> FeatureSeq {
        FeatureSeq::new(self.taps, self.len, self.data.clone()).expect("valid field")
    }
}

/// Offset post-processing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Offsets pass through unchanged.
    None,
    /// Positive offsets are replaced by zero in both training and inference,
    /// bounding lookahead by the fixed grid's.
    LatencyControlled,
}

impl std::fmt::Display for ClipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClipMode::None => write!(f, "none"),
            ClipMode::LatencyControlled => write!(f, "latency_controlled"),
        }
    }
}

/// Apply the clip mode: `latency_controlled` maps each offset to
/// `min(offset, 0)`; `none` returns the field unchanged.
pub fn clip_offsets(f: &OffsetField, mode: ClipMode) -> OffsetField {
    match mode {
        ClipMode::None => f.clone(),
        ClipMode::LatencyControlled => {
            let data = f.data.iter().map(|v| v.min(0.0)).collect();
            OffsetField { taps: f.taps, len: f.len, data }
        }
    }
}

/// Backward of [`clip_offsets`]: passes gradient where the raw offset is
/// `<= 0` (gradient 1 at exactly zero), blocks it elsewhere.
pub fn clip_offsets_backward(
    raw: &OffsetField,
    mode: ClipMode,
    grad_clipped: &OffsetField,
) -> OffsetField {
    match mode {
        ClipMode::None => grad_clipped.clone(),
        ClipMode::LatencyControlled => {
            let data = raw
                .data
                .iter()
                .zip(&grad_clipped.data)
                .map(|(r, g)| if *r <= 0.0 { *g } else { 0.0 })
                .collect();
            OffsetField { taps: raw.taps, len: raw.len, data }
        }
    }
}

/// Symmetric magnitude clamp `offset -> clamp(offset, -bound, bound)`,
/// available for bounding streaming memory; `None` disables it.
fn clamp_offsets(f: &OffsetField, bound: Option<f64>) -> OffsetField {
    match bound {
        None => f.clone(),
        Some(m) => {
            let data = f.data.iter().map(|v| v.clamp(-m, m)).collect();
            OffsetField { taps: f.taps, len: f.len, data }
        }
    }
}

fn clamp_offsets_backward(
    raw: &OffsetField,
    bound: Option<f64>,
    grad: &OffsetField,
) -> OffsetField {
    match bound {
        None => grad.clone(),
        Some(m) => {
            let data = raw
                .data
                .iter()
                .zip(&grad.data)
                .map(|(r, g)| if r.abs() <= m { *g } else { 0.0 })
                .collect();
            OffsetField { taps: raw.taps, len: raw.len, data }
        }
    }
}

/// The auxiliary 1-D convolution that predicts one offset per kernel tap of
/// the main convolution at every output frame. It runs with dilation 1 and
/// the main layer's stride, so predictions align one-to-one with output
/// frames; its outputs are used raw (no nonlinearity, no scaling).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPredictor {
    params: ConvParams,
}

impl OffsetPredictor {
    /// Wrap predictor parameters; `params.out_channels` must equal the main
    /// kernel size (one offset per tap).
    pub fn new(params: ConvParams, main_taps: usize) -> Result<Self> {
        if params.out_channels() != main_taps {
            return Err(Error::usage(format!(
                "offset predictor emits {} channels but the main kernel has {main_taps} taps",
                params.out_channels()
            )));
        }
        if params.taps() % 2 == 0 {
            return Err(Error::usage(format!(
                "offset predictor kernel must be odd, got {}",
                params.taps()
            )));
        }
        Ok(OffsetPredictor { params })
    }

    /// Fresh predictor with all weights and biases zero, so a new deformable
    /// layer starts out exactly equivalent to its standard twin.
    pub fn zeros(main_taps: usize, in_channels: usize, kernel_size: usize) -> Result<Self> {
        OffsetPredictor::new(ConvParams::zeros(main_taps, in_channels, kernel_size), main_taps)
    }

    pub fn kernel_size(&self) -> usize {
        self.params.taps()
    }

    pub fn params(&self) -> &ConvParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ConvParams {
        &mut self.params
    }

    /// `N * C_in * N' + N`.
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn grid(&self, main_stride: usize) -> GridSpec {
        GridSpec::new(self.params.taps(), 1, main_stride).expect("validated at construction")
    }
}

/// Predict the `(N, T_out)` offset field for input `x`.
pub fn offset_predict(
    x: &FeatureSeq,
    predictor: &OffsetPredictor,
    g: &GridSpec,
) -> Result<OffsetField> {
    let y = tdnn_forward(x, predictor.params(), &predictor.grid(g.stride()))?;
    Ok(OffsetField::from_seq(y))
}

fn check_field(f: &OffsetField, g: &GridSpec, t_out: usize) -> Result<()> {
    if f.taps() != g.kernel_size() || f.len() != t_out {
        return Err(Error::usage(format!(
            "offset field shape ({}, {}) does not match kernel {} and output length {}",
            f.taps(),
            f.len(),
            g.kernel_size(),
            t_out
        )));
    }
    Ok(())
}

/// Forward pass of a deformable TDNN layer with explicit offsets.
pub fn deformable_forward(
    x: &FeatureSeq,
    p: &ConvParams,
    g: &GridSpec,
    f: &OffsetField,
) -> Result<FeatureSeq> {
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
    let t_out = g.out_len(x.len());
    check_field(f, g, t_out)?;

    let (c_in, taps, t_in) = (p.in_channels(), p.taps(), x.len());
    let splits = sample_splits(g, f, t_in, t_out);

    let mut y = FeatureSeq::zeros(p.out_channels(), t_out);
    exec::for_each_row(y.as_mut_slice(), t_out, |co, row| {
        let wrow = p.weight_row(co);
        let b = p.bias()[co];
        for (i, out) in row.iter_mut().enumerate() {
            let mut acc = b;
            for ci in 0..c_in {
                let xrow = x.row(ci);
                let w = &wrow[ci * taps..(ci + 1) * taps];
                for (n, wn) in w.iter().enumerate() {
                    if let Some((k, w_lo, w_hi)) = splits[n * t_out + i] {
                        let v = if w_hi == 0.0 {
                            padded(xrow, k)
                        } else {
                            padded(xrow, k) * w_lo + padded(xrow, k + 1) * w_hi
                        };
                        acc += wn * v;
                    }
                }
            }
            *out = acc;
        }
    });
    Ok(y)
}

/// Precompute `(floor, w_lo, w_hi)` per (tap, output frame); `None` where the
/// sampling position falls outside the padded support.
fn sample_splits(
    g: &GridSpec,
    f: &OffsetField,
    t_in: usize,
    t_out: usize,
) -> Vec<Option<(i64, f64, f64)>> {
    let stride = g.stride() as i64;
    let mut splits = vec![None; f.taps() * t_out];
    for n in 0..f.taps() {
        let off = g.tap_offset(n);
        let frow = f.row(n);
        for i in 0..t_out {
            let t = (i as i64 * stride + off) as f64 + frow[i];
            splits[n * t_out + i] = split_pos(t, t_in);
        }
    }
    splits
}

/// Gradients of a deformable forward pass.
pub struct DeformableGrads {
    pub input: FeatureSeq,
    pub params: ConvParams,
    pub offsets: OffsetField,
}

/// Backward pass of [`deformable_forward`]: exact gradients with respect to
/// the input, the convolution parameters, and the offsets. Input gradients
/// scatter the interpolation coefficients onto the two integer taps; taps
/// outside the input range contribute nothing.
pub fn deformable_backward(
    x: &FeatureSeq,
    p: &ConvParams,
    g: &GridSpec,
    f: &OffsetField,
    grad_y: &FeatureSeq,
) -> Result<DeformableGrads> {
    let t_out = g.out_len(x.len());
    check_field(f, g, t_out)?;
    if grad_y.channels() != p.out_channels() || grad_y.len() != t_out {
        return Err(Error::usage(format!(
            "output gradient shape ({}, {}) does not match forward output ({}, {})",
            grad_y.channels(),
            grad_y.len(),
            p.out_channels(),
            t_out
        )));
    }
    if x.channels() != p.in_channels() || p.taps() != g.kernel_size() {
        return Err(Error::usage("input/parameter shapes do not match grid".to_string()));
    }

    let (c_in, c_out, taps, t_in) = (p.in_channels(), p.out_channels(), p.taps(), x.len());
    let splits = sample_splits(g, f, t_in, t_out);

    // Weight and bias gradients, one disjoint row per output channel.
    let mut grad_p = ConvParams::zeros(c_out, c_in, taps);
    let row_w = c_in * taps;
    exec::for_each_row(grad_p.weights_mut(), row_w, |co, wrow| {
        let gy = grad_y.row(co);
        for ci in 0..c_in {
            let xrow = x.row(ci);
            for n in 0..taps {
                let mut acc = 0.0;
                for (i, &gyv) in gy.iter().enumerate() {
                    if let Some((k, w_lo, w_hi)) = splits[n * t_out + i] {
                        let v = if w_hi == 0.0 {
                            padded(xrow, k)
                        } else {
                            padded(xrow, k) * w_lo + padded(xrow, k + 1) * w_hi
                        };
                        acc += gyv * v;
                    }
                }
                wrow[ci * taps + n] = acc;
            }
        }
    });
    for co in 0..c_out {
        grad_p.set_bias(co, grad_y.row(co).iter().sum());
    }

    // Offset gradients, one disjoint row per tap:
    // d y[co][i] / d offset[n][i] = sum_ci w[co][ci][n] * (x(k+1) - x(k)).
    let mut grad_f = OffsetField::zeros(taps, t_out);
    exec::for_each_row(&mut grad_f.data, t_out, |n, frow| {
        for (i, slot) in frow.iter_mut().enumerate() {
            let Some((k, _, _)) = splits[n * t_out + i] else {
                continue;
            };
            let mut acc = 0.0;
            for co in 0..c_out {
                let gyv = grad_y.get(co, i);
                if gyv == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for ci in 0..c_in {
                    let xrow = x.row(ci);
                    inner += p.weight(co, ci, n) * (padded(xrow, k + 1) - padded(xrow, k));
                }
                acc += gyv * inner;
            }
            *slot = acc;
        }
    });

    // Input gradients, one disjoint row per input channel.
    let mut grad_x = FeatureSeq::zeros(c_in, t_in);
    exec::for_each_row(grad_x.as_mut_slice(), t_in, |ci, xg| {
        for i in 0..t_out {
            for n in 0..taps {
                let Some((k, w_lo, w_hi)) = splits[n * t_out + i] else {
                    continue;
                };
                let mut acc = 0.0;
                for co in 0..c_out {
                    acc += grad_y.get(co, i) * p.weight(co, ci, n);
                }
                if k >= 0 && (k as usize) < t_in {
                    xg[k as usize] += acc * w_lo;
                }
                let k1 = k + 1;
                if w_hi != 0.0 && k1 >= 0 && (k1 as usize) < t_in {
                    xg[k1 as usize] += acc * w_hi;
                }
            }
        }
    });

    Ok(DeformableGrads { input: grad_x, params: grad_p, offsets: grad_f })
}

/// A deformable layer: main convolution, grid, offset predictor, and the
/// offset post-processing configuration.
#[derive(Debug, Clone)]
pub struct DeformableLayer {
    pub params: ConvParams,
    pub grid: GridSpec,
    pub predictor: OffsetPredictor,
    pub clip_mode: ClipMode,
    /// Optional symmetric bound on offset magnitude, applied before clipping.
    pub max_offset: Option<f64>,
}

/// Cached intermediate state of one deformable forward pass.
pub struct DeformableForward {
    pub output: FeatureSeq,
    /// Raw predictor output, before clamp/clip.
    pub raw_offsets: OffsetField,
    /// Offsets actually used for sampling.
    pub used_offsets: OffsetField,
}

/// Gradients of a full deformable layer application.
pub struct DeformableLayerGrads {
    pub input: FeatureSeq,
    pub params: ConvParams,
    pub predictor: ConvParams,
}

impl DeformableLayer {
    pub fn new(
        params: ConvParams,
        grid: GridSpec,
        predictor: OffsetPredictor,
        clip_mode: ClipMode,
    ) -> Result<Self> {
        if predictor.params().out_channels() != grid.kernel_size() {
            return Err(Error::usage(format!(
                "predictor emits {} offsets per frame but kernel has {} taps",
                predictor.params().out_channels(),
                grid.kernel_size()
            )));
        }
        if predictor.params().in_channels() != params.in_channels() {
            return Err(Error::usage(format!(
                "predictor consumes {} channels but layer input has {}",
                predictor.params().in_channels(),
                params.in_channels()
            )));
        }
        Ok(DeformableLayer { params, grid, predictor, clip_mode, max_offset: None })
    }

    /// Predict offsets, post-process them, and convolve. The used offsets
    /// are returned alongside the output for analysis.
    pub fn forward(&self, x: &FeatureSeq) -> Result<DeformableForward> {
        let raw = offset_predict(x, &self.predictor, &self.grid)?;
        let clamped = clamp_offsets(&raw, self.max_offset);
        let used = clip_offsets(&clamped, self.clip_mode);
        let output = deformable_forward(x, &self.params, &self.grid, &used)?;
        Ok(DeformableForward { output, raw_offsets: raw, used_offsets: used })
    }

    /// Convenience wrapper returning `(output, used offsets)`.
    pub fn apply(&self, x: &FeatureSeq) -> Result<(FeatureSeq, OffsetField)> {
        let fwd = self.forward(x)?;
        Ok((fwd.output, fwd.used_offsets))
    }

    /// Backward through the convolution, the offset post-processing, and the
    /// predictor. The input gradient sums the main-path and predictor-path
    /// contributions.
    pub fn backward(
        &self,
        x: &FeatureSeq,
        fwd: &DeformableForward,
        grad_y: &FeatureSeq,
    ) -> Result<DeformableLayerGrads> {
        let grads = deformable_backward(x, &self.params, &self.grid, &fwd.used_offsets, grad_y)?;
        let clamped = clamp_offsets(&fwd.raw_offsets, self.max_offset);
        let grad_clamped = clip_offsets_backward(&clamped, self.clip_mode, &grads.offsets);
        let grad_raw = clamp_offsets_backward(&fwd.raw_offsets, self.max_offset, &grad_clamped);

        let (grad_x_pred, grad_predictor) = tdnn_backward(
            x,
            self.predictor.params(),
            &self.predictor.grid(self.grid.stride()),
            &grad_raw.to_seq(),
        )?;
        let mut grad_input = grads.input;
        grad_input.add_assign(&grad_x_pred);
        Ok(DeformableLayerGrads {
            input: grad_input,
            params: grads.params,
            predictor: grad_predictor,
        })
    }

    /// `{ main, offset }` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.params.param_count(), self.predictor.param_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCase, GradCheckSpec};
    use crate::rng::Rng;

    fn grid(n: usize, d: usize, s: usize) -> GridSpec {
        GridSpec::new(n, d, s).unwrap()
    }

    fn max_abs_diff(a: &FeatureSeq, b: &FeatureSeq) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_offsets_reduce_to_standard_forward() {
        let mut rng = Rng::seeded(1);
        let x = FeatureSeq::random_normal(2, 9, &mut rng);
        let p = ConvParams::init_uniform(3, 2, 3, &mut rng);
        let g = grid(3, 2, 1);
        let f = OffsetField::zeros(3, 9);
        let deformed = deformable_forward(&x, &p, &g, &f).unwrap();
        let standard = tdnn_forward(&x, &p, &g).unwrap();
        assert!(max_abs_diff(&deformed, &standard) <= 1e-12);
    }

    #[test]
    fn center_tap_half_offset_hand_example() {
        let x = FeatureSeq::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let p = ConvParams::new(1, 1, 3, vec![0.0, 1.0, 0.0], vec![0.0]).unwrap();
        let g = grid(3, 1, 1);
        let mut f = OffsetField::zeros(3, 5);
        for i in 0..5 {
            f.set(1, i, 0.5);
        }
        let y = deformable_forward(&x, &p, &g, &f).unwrap();
        assert_eq!(y.row(0), &[1.5, 2.5, 3.5, 4.5, 2.5]);
    }

    #[test]
    fn integer_offset_is_a_grid_shift() {
        let x = FeatureSeq::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let p = ConvParams::new(1, 1, 3, vec![0.0, 1.0, 0.0], vec![0.0]).unwrap();
        let g = grid(3, 1, 1);
        let mut f = OffsetField::zeros(3, 5);
        for i in 0..5 {
            f.set(1, i, 1.0);
        }
        let y = deformable_forward(&x, &p, &g, &f).unwrap();
        assert_eq!(y.row(0), &[2.0, 3.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn offset_field_shape_is_checked() {
        let x = FeatureSeq::zeros(1, 5);
        let p = ConvParams::zeros(1, 1, 3);
        let g = grid(3, 1, 1);
        assert!(deformable_forward(&x, &p, &g, &OffsetField::zeros(3, 4)).is_err());
        assert!(deformable_forward(&x, &p, &g, &OffsetField::zeros(2, 5)).is_err());
    }

    #[test]
    fn clip_latency_controlled_and_none() {
        let f = OffsetField::new(1, 3, vec![-1.2, 0.3, 0.0]).unwrap();
        let clipped = clip_offsets(&f, ClipMode::LatencyControlled);
        assert_eq!(clipped.values(), &[-1.2, 0.0, 0.0]);
        let untouched = clip_offsets(&f, ClipMode::None);
        assert_eq!(untouched, f);
        // Idempotent.
        assert_eq!(clip_offsets(&clipped, ClipMode::LatencyControlled), clipped);
    }

    #[test]
    fn clip_backward_subgradient() {
        let raw = OffsetField::new(1, 3, vec![-0.5, 0.0, 0.7]).unwrap();
        let g = OffsetField::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let back = clip_offsets_backward(&raw, ClipMode::LatencyControlled, &g);
        assert_eq!(back.values(), &[1.0, 2.0, 0.0]);
        assert_eq!(clip_offsets_backward(&raw, ClipMode::None, &g).values(), g.values());
    }

    #[test]
    fn zero_initialized_predictor_emits_zero_offsets() {
        let mut rng = Rng::seeded(3);
        let x = FeatureSeq::random_normal(3, 12, &mut rng);
        let pred = OffsetPredictor::zeros(5, 3, 5).unwrap();
        let f = offset_predict(&x, &pred, &grid(5, 2, 3)).unwrap();
        assert!(f.values().iter().all(|v| *v == 0.0));
        assert_eq!((f.taps(), f.len()), (5, 4));
    }

    #[test]
    fn predictor_bias_passes_through_on_zero_input() {
        let x = FeatureSeq::zeros(2, 6);
        let mut params = ConvParams::zeros(3, 2, 5);
        params.set_bias(0, -0.25);
        params.set_bias(1, 0.5);
        params.set_bias(2, 2.0);
        let pred = OffsetPredictor::new(params, 3).unwrap();
        let f = offset_predict(&x, &pred, &grid(3, 1, 1)).unwrap();
        for i in 0..6 {
            assert_eq!(f.get(0, i), -0.25);
            assert_eq!(f.get(1, i), 0.5);
            assert_eq!(f.get(2, i), 2.0);
        }
    }

    #[test]
    fn offset_shape_independent_of_channel_count() {
        let g = grid(5, 1, 3);
        for c_in in [3usize, 6] {
            let mut rng = Rng::seeded(4);
            let x = FeatureSeq::random_normal(c_in, 12, &mut rng);
            let pred = OffsetPredictor::zeros(5, c_in, 5).unwrap();
            let f = offset_predict(&x, &pred, &g).unwrap();
            assert_eq!((f.taps(), f.len()), (5, 4));
            assert_eq!(pred.param_count(), 5 * c_in * 5 + 5);
        }
    }

    #[test]
    fn backward_zero_offsets_match_standard_backward() {
        let mut rng = Rng::seeded(8);
        let x = FeatureSeq::random_normal(2, 9, &mut rng);
        let p = ConvParams::init_uniform(3, 2, 3, &mut rng);
        let g = grid(3, 2, 1);
        let gy = FeatureSeq::random_normal(3, 9, &mut rng);
        let f = OffsetField::zeros(3, 9);

        let d = deformable_backward(&x, &p, &g, &f, &gy).unwrap();
        let (gx, gp) = tdnn_backward(&x, &p, &g, &gy).unwrap();
        assert!(max_abs_diff(&d.input, &gx) <= 1e-12);
        let wdiff = d
            .params
            .weights()
            .iter()
            .zip(gp.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(wdiff <= 1e-12);
    }

    #[test]
    fn constant_input_has_zero_offset_gradient() {
        // Interior taps only: keep sampling positions well inside the range.
        let x = FeatureSeq::new(2, 11, vec![3.5; 22]).unwrap();
        let mut rng = Rng::seeded(6);
        let p = ConvParams::init_uniform(2, 2, 3, &mut rng);
        let g = grid(3, 1, 1);
        let mut f = OffsetField::zeros(3, 11);
        for n in 0..3 {
            for i in 0..11 {
                f.set(n, i, 0.25);
            }
        }
        let gy = FeatureSeq::random_normal(2, 11, &mut rng);
        let d = deformable_backward(&x, &p, &g, &f, &gy).unwrap();
        for n in 0..3 {
            for i in 3..8 {
                assert_eq!(d.offsets.get(n, i), 0.0, "tap {n} frame {i}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::seeded(42);
        let (c_in, c_out, t, taps) = (2usize, 3usize, 11usize, 3usize);
        let x = FeatureSeq::random_normal(c_in, t, &mut rng);
        let p = ConvParams::init_uniform(c_out, c_in, taps, &mut rng);
        let g = grid(taps, 2, 1);
        // Offsets in [0.1, 0.9]: all sampling positions stay away from integers.
        let fdata: Vec<f64> = (0..taps * t).map(|_| rng.uniform(0.1, 0.9)).collect();
        let f = OffsetField::new(taps, t, fdata).unwrap();
        let gy = FeatureSeq::random_normal(c_out, t, &mut rng);

        let grads = deformable_backward(&x, &p, &g, &f, &gy).unwrap();
        let obj = |xs: &[f64], ws: &[f64], bs: &[f64], fs: &[f64]| -> f64 {
            let xx = FeatureSeq::new(c_in, t, xs.to_vec()).unwrap();
            let pp = ConvParams::new(c_out, c_in, taps, ws.to_vec(), bs.to_vec()).unwrap();
            let ff = OffsetField::new(taps, t, fs.to_vec()).unwrap();
            let y = deformable_forward(&xx, &pp, &g, &ff).unwrap();
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        };

        let xv = x.as_slice().to_vec();
        let wv = p.weights().to_vec();
        let bv = p.bias().to_vec();
        let fv = f.values().to_vec();
        let cases = vec![
            GradCase::new("input", xv.clone(), grads.input.as_slice().to_vec(), {
                let (wv, bv, fv) = (wv.clone(), bv.clone(), fv.clone());
                move |v: &[f64]| obj(v, &wv, &bv, &fv)
            }),
            GradCase::new("weights", wv.clone(), grads.params.weights().to_vec(), {
                let (xv, bv, fv) = (xv.clone(), bv.clone(), fv.clone());
                move |v: &[f64]| obj(&xv, v, &bv, &fv)
            }),
            GradCase::new("bias", bv.clone(), grads.params.bias().to_vec(), {
                let (xv, wv, fv) = (xv.clone(), wv.clone(), fv.clone());
                move |v: &[f64]| obj(&xv, &wv, v, &fv)
            }),
            GradCase::new("offsets", fv.clone(), grads.offsets.values().to_vec(), {
                let (xv, wv, bv) = (xv.clone(), wv.clone(), bv.clone());
                move |v: &[f64]| obj(&xv, &wv, &bv, v)
            }),
        ];
        let spec = GradCheckSpec { eps: 1e-5, tol: 1e-4, max_dense: 200, directions: 24 };
        let report = grad_check(&cases, &spec, &mut Rng::seeded(0)).unwrap();
        assert!(report.pass, "failing groups: {:?}", report.failing());
    }

    #[test]
    fn fresh_layer_equals_standard_twin() {
        let mut rng = Rng::seeded(12);
        let x = FeatureSeq::random_normal(4, 15, &mut rng);
        let p = ConvParams::init_uniform(4, 4, 5, &mut rng);
        let g = grid(5, 2, 3);
        let layer = DeformableLayer::new(
            p.clone(),
            g,
            OffsetPredictor::zeros(5, 4, 5).unwrap(),
            ClipMode::None,
        )
        .unwrap();
        let (y, f) = layer.apply(&x).unwrap();
        let standard = tdnn_forward(&x, &p, &g).unwrap();
        assert_eq!(y, standard);
        assert!(f.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn latency_clip_makes_all_used_offsets_nonpositive() {
        let mut rng = Rng::seeded(13);
        let x = FeatureSeq::random_normal(3, 10, &mut rng);
        let p = ConvParams::init_uniform(3, 3, 3, &mut rng);
        let mut predictor = OffsetPredictor::zeros(3, 3, 5).unwrap();
        for w in predictor.params_mut().weights_mut() {
            *w = rng.uniform(-0.5, 0.5);
        }
        let layer = DeformableLayer::new(p, grid(3, 1, 1), predictor, ClipMode::LatencyControlled)
            .unwrap();
        let fwd = layer.forward(&x).unwrap();
        assert!(fwd.raw_offsets.values().iter().any(|v| *v > 0.0), "test wants live offsets");
        assert!(fwd.used_offsets.values().iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn max_offset_clamps_magnitude() {
        let mut rng = Rng::seeded(14);
        let x = FeatureSeq::random_normal(2, 8, &mut rng);
        let p = ConvParams::init_uniform(2, 2, 3, &mut rng);
        let mut predictor = OffsetPredictor::zeros(3, 2, 3).unwrap();
        for w in predictor.params_mut().weights_mut() {
            *w = rng.uniform(-3.0, 3.0);
        }
        let mut layer =
            DeformableLayer::new(p, grid(3, 1, 1), predictor, ClipMode::None).unwrap();
        layer.max_offset = Some(0.75);
        let fwd = layer.forward(&x).unwrap();
        assert!(fwd.raw_offsets.values().iter().any(|v| v.abs() > 0.75));
        assert!(fwd.used_offsets.values().iter().all(|v| v.abs() <= 0.75));
    }

    /// End-to-end layer gradient: through predictor, clip, and deformation.
    #[test]
    fn layer_backward_matches_finite_differences() {
        // Search the first seed whose sampling positions sit away from
        // integers and whose raw offsets sit away from the clip boundary.
        let mut seed = 0u64;
        let (layer, x, gy) = loop {
            let mut rng = Rng::seeded(seed);
            let x = FeatureSeq::random_normal(2, 9, &mut rng);
            let p = ConvParams::init_uniform(2, 2, 3, &mut rng);
            let mut predictor = OffsetPredictor::zeros(3, 2, 3).unwrap();
            for w in predictor.params_mut().weights_mut() {
                *w = rng.uniform(-0.4, 0.4);
            }
            let layer =
                DeformableLayer::new(p, grid(3, 1, 1), predictor, ClipMode::LatencyControlled)
                    .unwrap();
            let fwd = layer.forward(&x).unwrap();
            let degenerate = fwd.raw_offsets.values().iter().any(|v| v.abs() < 0.05)
                || fwd
                    .used_offsets
                    .values()
                    .iter()
                    .any(|v| *v != 0.0 && (v - v.round()).abs() < 0.05);
            if !degenerate {
                let gy = FeatureSeq::random_normal(2, 9, &mut rng);
                break (layer, x, gy);
            }
            seed += 1;
            assert!(seed < 100, "no suitable seed found");
        };

        let fwd = layer.forward(&x).unwrap();
        let grads = layer.backward(&x, &fwd, &gy).unwrap();
        let score = |layer: &DeformableLayer, x: &FeatureSeq| -> f64 {
            let y = layer.forward(x).unwrap().output;
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        };

        let cases = vec![
            GradCase::new(
                "layer.input",
                x.as_slice().to_vec(),
                grads.input.as_slice().to_vec(),
                |v: &[f64]| score(&layer, &FeatureSeq::new(2, 9, v.to_vec()).unwrap()),
            ),
            GradCase::new(
                "layer.weights",
                layer.params.weights().to_vec(),
                grads.params.weights().to_vec(),
                |v: &[f64]| {
                    let mut l = layer.clone();
                    l.params.weights_mut().copy_from_slice(v);
                    score(&l, &x)
                },
            ),
            GradCase::new(
                "layer.predictor.weights",
                layer.predictor.params().weights().to_vec(),
                grads.predictor.weights().to_vec(),
                |v: &[f64]| {
                    let mut l = layer.clone();
                    l.predictor.params_mut().weights_mut().copy_from_slice(v);
                    score(&l, &x)
                },
            ),
            GradCase::new(
                "layer.predictor.bias",
                layer.predictor.params().bias().to_vec(),
                grads.predictor.bias().to_vec(),
                |v: &[f64]| {
                    let mut l = layer.clone();
                    l.predictor.params_mut().bias_mut().copy_from_slice(v);
                    score(&l, &x)
                },
            ),
        ];
        let spec = GradCheckSpec { eps: 1e-5, tol: 1e-4, max_dense: 64, directions: 30 };
        let report = grad_check(&cases, &spec, &mut Rng::seeded(1)).unwrap();
        assert!(report.pass, "failing groups: {:?}", report.failing());
    }

    mod props {
        use super::*;
        use crate::rng::Rng;
        use proptest::prelude::*;

        proptest! {
            /// Zero-offset equivalence over random shapes.
            #[test]
            fn zero_offset_equivalence(
                seed in 0u64..200,
                c_in in 1usize..4,
                c_out in 1usize..4,
                t in 1usize..20,
                n in prop::sample::select(vec![1usize, 3, 5]),
                d in 1usize..3,
                s in 1usize..4,
            ) {
                let mut rng = Rng::seeded(seed);
                let x = FeatureSeq::random_normal(c_in, t, &mut rng);
                let p = ConvParams::init_uniform(c_out, c_in, n, &mut rng);
                let g = grid(n, d, s);
                let f = OffsetField::zeros(n, g.out_len(t));
                let a = deformable_forward(&x, &p, &g, &f).unwrap();
                let b = tdnn_forward(&x, &p, &g).unwrap();
                prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
            }

            /// With latency clipping, no sampling position with a nonzero
            /// interpolation coefficient exceeds the fixed grid's reach.
            #[test]
            fn clip_safety(seed in 0u64..200) {
                let mut rng = Rng::seeded(seed);
                let t = 12usize;
                let x = FeatureSeq::random_normal(2, t, &mut rng);
                let g = grid(3, 2, 1);
                let mut predictor = OffsetPredictor::zeros(3, 2, 3).unwrap();
                for w in predictor.params_mut().weights_mut() {
                    *w = rng.uniform(-1.0, 1.0);
                }
                let f = clip_offsets(
                    &offset_predict(&x, &predictor, &g).unwrap(),
                    ClipMode::LatencyControlled,
                );
                for n in 0..f.taps() {
                    for i in 0..f.len() {
                        let pos = (i as i64 + g.tap_offset(n)) as f64 + f.get(n, i);
                        let bound = (i as i64 + g.radius()) as f64;
                        // floor+1 only carries weight when w_hi > 0.
                        if let Some((k, _, w_hi)) = crate::interp::split_pos(pos, t) {
                            let max_read = if w_hi == 0.0 { k } else { k + 1 };
                            prop_assert!((max_read as f64) <= bound);
                        }
                    }
                }
            }
        }
    }
}
