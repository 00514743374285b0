//! Fractional-position sampling by linear interpolation, with its analytic
//! derivative.
//!
//! A sample at position `t` blends the two neighboring integer frames:
//! `x(floor(t)) * (floor(t)+1-t) + x(floor(t)+1) * (t-floor(t))`. Reads
//! outside `[0, T-1]` resolve to zero padding, so the support of a sample is
//! the open interval `(-1, T)`. At integer `t` the value reduces to an exact
//! read and the derivative with respect to `t` uses the right-continuous
//! convention `x(t+1) - x(t)`.

use crate::error::{Error, Result};
use crate::seq::FeatureSeq;

/// Zero-padded read of one channel row at an integer index.
#[inline]
pub(crate) fn padded(row: &[f64], k: i64) -> f64 {
    if k < 0 || k as usize >= row.len() {
        0.0
    } else {
        row[k as usize]
    }
}

/// Splits a sample position into its base tap and blend weights:
/// `(k, w_lo, w_hi)` with `k = floor(t)`. Returns `None` outside the support
/// `(-1, T)`, where both taps read padding. The early exit also keeps `k`
/// within `i64` range for arbitrary finite `t`.
#[inline]
pub(crate) fn split_pos(t: f64, len: usize) -> Option<(i64, f64, f64)> {
    if t <= -1.0 || t >= len as f64 {
        return None;
    }
    let lo = t.floor();
    let k = lo as i64;
    Some((k, lo + 1.0 - t, t - lo))
}

#[inline]
pub(crate) fn interp_row(row: &[f64], t: f64) -> f64 {
    match split_pos(t, row.len()) {
        None => 0.0,
        Some((k, _, w_hi)) => {
            let lo_val = padded(row, k);
            if w_hi == 0.0 {
                // Integer position: exact read, no blending round-off.
                lo_val
            } else {
                lo_val * (1.0 - w_hi) + padded(row, k + 1) * w_hi
            }
        }
    }
}

fn check_args(x: &FeatureSeq, c: usize, t: f64) -> Result<()> {
    if c >= x.channels() {
        return Err(Error::usage(format!(
            "channel {c} out of range for {} channels",
            x.channels()
        )));
    }
    if !t.is_finite() {
        return Err(Error::usage(format!("sample position must be finite, got {t}")));
    }
    Ok(())
}

/// Sample channel `c` of `x` at fractional frame position `t`.
pub fn interpolate(x: &FeatureSeq, c: usize, t: f64) -> Result<f64> {
    check_args(x, c, t)?;
    Ok(interp_row(x.row(c), t))
}

/// Blend weights and position derivative of [`interpolate`] at `t`.
///
/// Returns `(w_lo, w_hi, d_dt)`: the coefficients of the two integer taps
/// `floor(t)` and `floor(t)+1` (for input-gradient scatter) and the
/// derivative of the sampled value with respect to `t`,
/// `x(floor(t)+1) - x(floor(t))` with zero-padded reads.
pub fn interpolate_grad(x: &FeatureSeq, c: usize, t: f64) -> Result<(f64, f64, f64)> {
    check_args(x, c, t)?;
    let row = x.row(c);
    Ok(match split_pos(t, row.len()) {
        None => (0.0, 0.0, 0.0),
        Some((k, w_lo, w_hi)) => (w_lo, w_hi, padded(row, k + 1) - padded(row, k)),
    })
}
