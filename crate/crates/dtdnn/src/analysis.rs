//! Receptive-field analysis: dependency maps, lookahead audits, and offset
//! histograms.
//!
//! A dependency map records, for a concrete probe input, which input frames
//! each output frame structurally depends on. Two independent probes exist
//! and must agree: `Jacobian` thresholds backward-pass input gradients,
//! `Perturb` jitters one input column at a time and watches the logits. For
//! deformable networks the offsets are whatever the network predicts on the
//! probe input.

use crate::error::{Error, Result};
use crate::exec;
use crate::network::Network;
use crate::seq::FeatureSeq;

/// Jacobian entries smaller than this are structural zeros.
pub const JACOBIAN_THRESHOLD: f64 = 1e-12;
/// Logit changes larger than this mark a dependence under perturbation.
pub const PERTURB_THRESHOLD: f64 = 1e-9;
/// Symmetric jitter magnitude used by perturbation probing. Large enough
/// that even the faint single-chain dependencies at the receptive-field
/// edges of deep stacks clear the detection threshold; structural zeros
/// stay exactly zero at any magnitude.
pub const PERTURB_EPS: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    Jacobian,
    Perturb,
}

/// Boolean `T_out x T_in` matrix: `bits[i][j]` says output frame `i` depends
/// on input frame `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyMap {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl DependencyMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    /// Per-row `(min, max)` dependent input index, `None` for empty rows.
    pub fn envelope(&self) -> Vec<Option<(usize, usize)>> {
        (0..self.rows)
            .map(|i| {
                let row = &self.bits[i * self.cols..(i + 1) * self.cols];
                let min = row.iter().position(|b| *b)?;
                let max = row.iter().rposition(|b| *b)?;
                Some((min, max))
            })
            .collect()
    }

    /// Whether both envelope edges are nondecreasing over rows.
    pub fn envelope_is_monotone(&self) -> bool {
        let env: Vec<(usize, usize)> = self.envelope().into_iter().flatten().collect();
        env.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1)
    }

    /// CSV rendering: a header row of input indices, then one 0/1 row per
    /// output frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.cols).map(|j| j.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.rows {
            let row: Vec<&str> =
                (0..self.cols).map(|j| if self.get(i, j) { "1" } else { "0" }).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Future reach of each output frame, in input frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookaheadReport {
    /// `max(dependent j) - i * stride_product`, floored at zero.
    pub per_output: Vec<i64>,
    pub max: i64,
}

/// Compute the dependency map of `net` on a concrete probe input.
pub fn dependency_map(net: &Network, probe: &FeatureSeq, mode: ProbeMode) -> Result<DependencyMap> {
    let logits = net.forward(probe)?;
    let (rows, cols) = (logits.len(), probe.len());
    let out_channels = logits.channels();

    let bits = match mode {
        ProbeMode::Jacobian => {
            // One backward per (output frame, output channel); a row of the
            // map is the union over channels of nonzero input gradients.
            let row_bits: Vec<Vec<bool>> = exec::map_indexed(rows, |i| {
                let mut row = vec![false; cols];
                for co in 0..out_channels {
                    let mut seed = FeatureSeq::zeros(out_channels, rows);
                    seed.set(co, i, 1.0);
                    let grads = net.backward(probe, &seed).expect("shapes fixed above");
                    for j in 0..cols {
                        if row[j] {
                            continue;
                        }
                        for ci in 0..probe.channels() {
                            if grads.input.get(ci, j).abs() > JACOBIAN_THRESHOLD {
                                row[j] = true;
                                break;
                            }
                        }
                    }
                }
                row
            });
            row_bits.concat()
        }
        ProbeMode::Perturb => {
            // Central jitter of one input column at a time; columns of the
            // map are independent.
            let col_bits: Vec<Vec<bool>> = exec::map_indexed(cols, |j| {
                let mut plus = probe.clone();
                let mut minus = probe.clone();
                for c in 0..probe.channels() {
                    plus.set(c, j, probe.get(c, j) + PERTURB_EPS);
                    minus.set(c, j, probe.get(c, j) - PERTURB_EPS);
                }
                let lp = net.forward(&plus).expect("shapes fixed above");
                let lm = net.forward(&minus).expect("shapes fixed above");
                (0..rows)
                    .map(|i| {
                        (0..out_channels)
                            .any(|co| (lp.get(co, i) - lm.get(co, i)).abs() > PERTURB_THRESHOLD)
                    })
                    .collect()
            });
            // Transpose columns into row-major bits.
            let mut bits = vec![false; rows * cols];
            for (j, col) in col_bits.iter().enumerate() {
                for (i, b) in col.iter().enumerate() {
                    bits[i * cols + j] = *b;
                }
            }
            bits
        }
    };
    Ok(DependencyMap { rows, cols, bits })
}

/// Per-output and maximum future extent of a dependency map, where output
/// frame `i` is centered on input frame `i * stride_product`.
pub fn lookahead(map: &DependencyMap, stride_product: usize) -> LookaheadReport {
    let mut per_output = Vec::with_capacity(map.rows());
    let mut global = 0i64;
    for i in 0..map.rows() {
        let center = (i * stride_product) as i64;
        let mut ahead = 0i64;
        for j in 0..map.cols() {
            if map.get(i, j) {
                ahead = ahead.max(j as i64 - center);
            }
        }
        per_output.push(ahead);
        global = global.max(ahead);
    }
    LookaheadReport { per_output, max: global }
}

/// Histogram of predicted offsets for one deformable layer, with uniform
/// bins aligned to multiples of the bin width.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHistogram {
    pub layer: usize,
    pub bin_width: f64,
    /// Low edge of the first bin; bin `b` covers
    /// `[bin_lo + b*w, bin_lo + (b+1)*w)`.
    pub bin_lo: f64,
    pub counts: Vec<u64>,
    pub total: u64,
    pub fraction_nonpositive: f64,
}

impl OffsetHistogram {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        (self.bin_lo + b as f64 * self.bin_width, self.bin_lo + (b + 1) as f64 * self.bin_width)
    }
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.25;

fn histogram_from_values(layer: usize, values: &[f64], bin_width: f64) -> OffsetHistogram {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut nonpositive = 0u64;
    for v in values {
        min = min.min(*v);
        max = max.max(*v);
        if *v <= 0.0 {
            nonpositive += 1;
        }
    }
    let bin_lo = (min / bin_width).floor() * bin_width;
    let nbins = (((max - bin_lo) / bin_width).floor() as usize + 1).max(1);
    let mut counts = vec![0u64; nbins];
    for v in values {
        let b = (((v - bin_lo) / bin_width).floor() as usize).min(nbins - 1);
        counts[b] += 1;
    }
    let total = values.len() as u64;
    OffsetHistogram {
        layer,
        bin_width,
        bin_lo,
        counts,
        total,
        fraction_nonpositive: nonpositive as f64 / total as f64,
    }
}

/// Aggregate the offsets a network actually uses over a set of inputs, one
/// histogram per deformable layer. Errors if the network has none.
pub fn offset_histogram(
    net: &Network,
    inputs: &[FeatureSeq],
    bin_width: f64,
) -> Result<Vec<OffsetHistogram>> {
    let layers = net.deformable_layers();
    if layers.is_empty() {
        return Err(Error::usage("network has no deformable layers".to_string()));
    }
    if inputs.is_empty() {
        return Err(Error::usage("offset histogram needs at least one input".to_string()));
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::usage(format!("bin width must be positive, got {bin_width}")));
    }
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    for x in inputs {
        let (_, captured) = net.forward_captured(x, true)?;
        for (slot, (_, field)) in per_layer.iter_mut().zip(&captured) {
            slot.extend_from_slice(field.values());
        }
    }
    Ok(layers
        .iter()
        .zip(&per_layer)
        .map(|(layer, values)| histogram_from_values(*layer, values, bin_width))
        .collect())
}

/// CSV rendering of offset histograms: `bin_lo, bin_hi, count, layer_index`.
pub fn offset_histograms_to_csv(hists: &[OffsetHistogram]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,layer_index\n");
    for h in hists {
        for (b, count) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(b);
            out.push_str(&format!("{lo},{hi},{count},{}\n", h.layer));
        }
    }
    out
}
