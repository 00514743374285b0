//! Frame-level softmax cross-entropy.

use crate::error::{Error, Result};
use crate::seq::FeatureSeq;

/// Mean-over-frames softmax cross-entropy with its analytic gradient.
///
/// `logits` has one channel per class; `labels` holds one class id per
/// frame. Returns the scalar loss and `d loss / d logits`.
pub fn frame_ce_loss(logits: &FeatureSeq, labels: &[usize]) -> Result<(f64, FeatureSeq)> {
    let k = logits.channels();
    let t = logits.len();
    if labels.len() != t {
        return Err(Error::usage(format!(
            "{} labels for {} logit frames",
            labels.len(),
            t
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::usage(format!("label {bad} out of range for {k} classes")));
    }

    let mut grad = FeatureSeq::zeros(k, t);
    let mut loss = 0.0;
    let inv_t = 1.0 / t as f64;
    for (i, &label) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(logits.get(c, i));
        }
        let mut denom = 0.0;
        for c in 0..k {
            denom += (logits.get(c, i) - max).exp();
        }
        let log_denom = denom.ln();
        loss += (log_denom + max - logits.get(label, i)) * inv_t;
        for c in 0..k {
            let softmax = (logits.get(c, i) - max).exp() / denom;
            let indicator = if c == label { 1.0 } else { 0.0 };
            grad.set(c, i, (softmax - indicator) * inv_t);
        }
    }
    Ok((loss, grad))
}

/// Fraction of frames whose argmax logit equals the label (ties toward the
/// smaller class id).
pub fn frame_accuracy(logits: &FeatureSeq, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.len() {
        return Err(Error::usage(format!(
            "{} labels for {} logit frames",
            labels.len(),
            logits.len()
        )));
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        for c in 1..logits.channels() {
            if logits.get(c, i) > logits.get(best, i) {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCase, GradCheckSpec};
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = FeatureSeq::zeros(4, 6);
        let labels = vec![0, 1, 2, 3, 0, 1];
        let (loss, _) = frame_ce_loss(&logits, &labels).unwrap();
        assert!((loss - 4.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = FeatureSeq::zeros(3, 4);
        let labels = vec![2, 0, 1, 2];
        for (i, &l) in labels.iter().enumerate() {
            logits.set(l, i, 50.0);
        }
        let (loss, _) = frame_ce_loss(&logits, &labels).unwrap();
        assert!(loss < 1e-12, "loss = {loss}");
        assert_eq!(frame_accuracy(&logits, &labels).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_label_is_usage_error() {
        let logits = FeatureSeq::zeros(3, 2);
        assert!(frame_ce_loss(&logits, &[0, 3]).is_err());
        assert!(frame_ce_loss(&logits, &[0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::seeded(21);
        let logits = FeatureSeq::random_normal(5, 7, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.below(5)).collect();
        let (_, grad) = frame_ce_loss(&logits, &labels).unwrap();

        let labels2 = labels.clone();
        let case = GradCase::new(
            "logits",
            logits.as_slice().to_vec(),
            grad.as_slice().to_vec(),
            move |v: &[f64]| {
                let l = FeatureSeq::new(5, 7, v.to_vec()).unwrap();
                frame_ce_loss(&l, &labels2).unwrap().0
            },
        );
        let spec = GradCheckSpec { eps: 1e-6, tol: 1e-6, max_dense: 64, directions: 24 };
        let report = grad_check(&[case], &spec, &mut Rng::seeded(0)).unwrap();
        assert!(report.pass, "max err {:?}", report.groups[0].max_rel_err);
    }
}
