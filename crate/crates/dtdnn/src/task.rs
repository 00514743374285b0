//! Synthetic warped-sequence benchmark.
//!
//! A sequence is a run of segments, each holding one of `K` classes for a
//! random number of input frames. Features are the class embedding plus
//! per-frame Gaussian noise; labels are emitted at the output frame rate
//! (input rate divided by the network's stride product) as the majority
//! class inside each output-frame window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seq::FeatureSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Sequence length in input frames.
    pub len: usize,
    /// Segment duration range `[d_min, d_max]` in input frames.
    pub d_min: usize,
    pub d_max: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Fixes the random class-to-embedding map.
    pub embed_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::usage("task needs positive class count and feature dim"));
        }
        if self.d_min == 0 || self.d_min > self.d_max {
            return Err(Error::usage(format!(
                "segment durations must satisfy 1 <= d_min <= d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.len < self.d_min {
            return Err(Error::usage(format!(
                "sequence length {} is shorter than d_min {}",
                self.len, self.d_min
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::usage("noise must be finite and >= 0"));
        }
        Ok(())
    }

    /// The fixed class-to-feature embedding table, `K x feature_dim`.
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::seeded(self.embed_seed);
        (0..self.num_classes)
            .map(|_| (0..self.feature_dim).map(|_| rng.normal()).collect())
            .collect()
    }
}

/// A batch of sequences with output-rate labels. `frame_classes` keeps the
/// input-rate class of every frame so consistent warping can rebuild labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<FeatureSeq>,
    pub labels: Vec<Vec<usize>>,
    pub frame_classes: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.len()).collect()
    }
}

/// Majority class per output-frame window `[i*sp, (i+1)*sp)`, ties broken
/// toward the smaller class id.
pub fn labels_for_frames(frame_classes: &[usize], stride_product: usize, k: usize) -> Vec<usize> {
    let t = frame_classes.len();
    let t_out = t.div_ceil(stride_product);
    let mut labels = Vec::with_capacity(t_out);
    let mut counts = vec![0usize; k];
    for i in 0..t_out {
        counts.iter_mut().for_each(|c| *c = 0);
        let lo = i * stride_product;
        let hi = ((i + 1) * stride_product).min(t);
        for &cls in &frame_classes[lo..hi] {
            counts[cls] += 1;
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        labels.push(best);
    }
    labels
}

fn render_sequence(spec: &TaskSpec, embeds: &[Vec<f64>], rng: &mut Rng) -> (FeatureSeq, Vec<usize>) {
    let mut classes = Vec::with_capacity(spec.len);
    while classes.len() < spec.len {
        let cls = rng.below(spec.num_classes);
        let dur = rng.int_in(spec.d_min, spec.d_max);
        for _ in 0..dur.min(spec.len - classes.len()) {
            classes.push(cls);
        }
    }
    let mut feats = FeatureSeq::zeros(spec.feature_dim, spec.len);
    for t in 0..spec.len {
        let emb = &embeds[classes[t]];
        for c in 0..spec.feature_dim {
            let noise = if spec.noise > 0.0 { spec.noise * rng.normal() } else { 0.0 };
            feats.set(c, t, emb[c] + noise);
        }
    }
    (feats, classes)
}

/// Draw a batch of `batch_size` sequences. Deterministic in the generator
/// state; labels are rendered at the output rate implied by
/// `stride_product`.
pub fn generate_batch(
    spec: &TaskSpec,
    stride_product: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    spec.validate()?;
    if stride_product == 0 || batch_size == 0 {
        return Err(Error::usage("stride product and batch size must be positive"));
    }
    let embeds = spec.embeddings();
    let mut features = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut frame_classes = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (feats, classes) = render_sequence(spec, &embeds, rng);
        labels.push(labels_for_frames(&classes, stride_product, spec.num_classes));
        features.push(feats);
        frame_classes.push(classes);
    }
    Ok(Batch { features, labels, frame_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            num_classes: 4,
            feature_dim: 3,
            len: 24,
            d_min: 2,
            d_max: 7,
            noise: 0.5,
            embed_seed: 11,
        }
    }

    #[test]
    fn validation_catches_degenerate_specs() {
        let mut s = spec();
        s.len = 1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.d_min = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.d_min = 9;
        s.d_max = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn noiseless_single_class_is_constant() {
        let s = TaskSpec { num_classes: 1, noise: 0.0, ..spec() };
        let batch = generate_batch(&s, 3, 2, &mut Rng::seeded(0)).unwrap();
        for feats in &batch.features {
            for c in 0..s.feature_dim {
                let row = feats.row(c);
                assert!(row.iter().all(|v| *v == row[0]));
            }
        }
        for labels in &batch.labels {
            assert!(labels.iter().all(|l| *l == 0));
            assert_eq!(labels.len(), 8);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let a = generate_batch(&spec(), 3, 3, &mut Rng::seeded(7)).unwrap();
        let b = generate_batch(&spec(), 3, 3, &mut Rng::seeded(7)).unwrap();
        assert_eq!(a.labels, b.labels);
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn fixed_duration_segments_align_with_label_windows() {
        // d = 6 input frames and stride product 3: every segment spans
        // exactly two output frames, so labels change only at even indices.
        let s = TaskSpec { d_min: 6, d_max: 6, len: 30, noise: 0.0, ..spec() };
        let batch = generate_batch(&s, 3, 4, &mut Rng::seeded(3)).unwrap();
        for labels in &batch.labels {
            assert_eq!(labels.len(), 10);
            for pair in labels.chunks(2) {
                assert_eq!(pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn majority_label_tie_breaks_to_smaller_class() {
        // Window [2, 2, 5]: class 2 wins by count; window [5, 2]: tie -> 2.
        assert_eq!(labels_for_frames(&[2, 2, 5, 5, 2], 3, 6), vec![2, 2]);
        assert_eq!(labels_for_frames(&[5, 2], 2, 6), vec![2]);
    }

    #[test]
    fn label_length_is_post_stride_length() {
        let s = spec();
        for sp in [1usize, 2, 3, 5] {
            let batch = generate_batch(&s, sp, 1, &mut Rng::seeded(1)).unwrap();
            assert_eq!(batch.labels[0].len(), s.len.div_ceil(sp));
        }
    }
}
