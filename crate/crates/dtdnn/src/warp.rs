//! Single-anchor piecewise-linear time warping.
//!
//! A warp picks an interior anchor `a`, a displacement `w` drawn uniformly
//! from `[0, W]`, and a direction; the time axis is remapped by the
//! piecewise-linear function fixing frames `0` and `T-1` and sending
//! `a -> a ± w`. Features are resampled through the interpolation primitive,
//! preserving length. Warping only the features (labels fixed) is the
//! robustness-evaluation setting; [`WarpMap::warp_classes`] additionally
//! remaps a per-frame class timeline for consistent augmentation.

use crate::error::{Error, Result};
use crate::interp::interp_row;
use crate::rng::Rng;
use crate::seq::FeatureSeq;

/// A sampled warp: the realized piecewise-linear time remap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpMap {
    len: usize,
    /// Where the anchor content originally sits.
    source_anchor: f64,
    /// Where it lands after warping.
    target_anchor: f64,
}

impl WarpMap {
    pub fn identity(len: usize) -> Self {
        let mid = (len.max(1) - 1) as f64 / 2.0;
        WarpMap { len, source_anchor: mid, target_anchor: mid }
    }

    /// Sample a warp for sequences of length `len` with warp parameter
    /// `w_max` (maximum displacement in input frames).
    ///
    /// Draw order: anchor, displacement, direction. `w_max == 0` yields the
    /// identity without consuming randomness.
    pub fn sample(len: usize, w_max: f64, rng: &mut Rng) -> Result<Self> {
        if len < 3 {
            return Err(Error::usage(format!("warp needs at least 3 frames, got {len}")));
        }
        if !(w_max.is_finite() && w_max >= 0.0) {
            return Err(Error::usage(format!("warp parameter must be finite and >= 0, got {w_max}")));
        }
        if w_max >= len as f64 / 2.0 {
            return Err(Error::usage(format!(
                "warp parameter {w_max} is degenerate for length {len} (must be < T/2)"
            )));
        }
        if w_max == 0.0 {
            return Ok(WarpMap::identity(len));
        }
        let last = (len - 1) as f64;
        // Anchor uniform in [W, T-1-W], clamped into the interior.
        let lo = w_max.max(1.0).min(last - 1.0);
        let hi = (last - w_max).max(lo);
        let anchor = rng.uniform(lo, hi);
        let w = rng.uniform(0.0, w_max);
        let target = (anchor + rng.sign() * w).clamp(0.5, last - 0.5);
        Ok(WarpMap { len, source_anchor: anchor, target_anchor: target })
    }

    pub fn is_identity(&self) -> bool {
        self.source_anchor == self.target_anchor
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Source position sampled for output frame `t`: linear from `(0, 0)` to
    /// `(target, source)` and from `(target, source)` to `(T-1, T-1)`.
    pub fn source_pos(&self, t: f64) -> f64 {
        let last = (self.len - 1) as f64;
        if self.is_identity() {
            return t;
        }
        if t <= self.target_anchor {
            t * (self.source_anchor / self.target_anchor)
        } else {
            self.source_anchor
                + (t - self.target_anchor) * (last - self.source_anchor)
                    / (last - self.target_anchor)
        }
    }

    /// Resample every channel through the warp; length preserved.
    pub fn warp_features(&self, x: &FeatureSeq) -> FeatureSeq {
        if self.is_identity() {
            return x.clone();
        }
        let mut out = FeatureSeq::zeros(x.channels(), x.len());
        for c in 0..x.channels() {
            let src = x.row(c);
            let dst = out.row_mut(c);
            for (t, slot) in dst.iter_mut().enumerate() {
                *slot = interp_row(src, self.source_pos(t as f64));
            }
        }
        out
    }

    /// Remap a per-frame class timeline by nearest-neighbor lookup, for
    /// warping labels consistently with the features.
    pub fn warp_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..classes.len())
            .map(|t| {
                let src = self.source_pos(t as f64).round();
                classes[(src.max(0.0) as usize).min(classes.len() - 1)]
            })
            .collect()
    }
}

/// Sample a warp and apply it to the features of `x`.
pub fn time_warp(x: &FeatureSeq, w_max: f64, rng: &mut Rng) -> Result<FeatureSeq> {
    let map = WarpMap::sample(x.len(), w_max, rng)?;
    Ok(map.warp_features(x))
}
