//! Central finite-difference gradient checking.
//!
//! This is the verification oracle for every analytic backward pass in the
//! crate. A check case is one named parameter group together with a scalar
//! objective and the analytic gradient at the current point; the oracle never
//! touches the backward implementation it is judging.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Objective evaluated on one parameter group, all other inputs fixed.
pub type Objective<'a> = Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>;

pub struct GradCase<'a> {
    pub name: String,
    /// Current point of the group.
    pub theta: Vec<f64>,
    /// Analytic gradient at `theta`, as claimed by the implementation.
    pub analytic: Vec<f64>,
    pub objective: Objective<'a>,
}

impl<'a> GradCase<'a> {
    pub fn new(
        name: impl Into<String>,
        theta: Vec<f64>,
        analytic: Vec<f64>,
        objective: impl Fn(&[f64]) -> f64 + Sync + 'a,
    ) -> Self {
        GradCase { name: name.into(), theta, analytic, objective: Box::new(objective) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    /// Max over checked coordinates (or directions) of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// Coordinates or random directions examined.
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSpec {
    pub eps: f64,
    pub tol: f64,
    /// Groups larger than this are probed along random unit directions
    /// instead of coordinate-by-coordinate.
    pub max_dense: usize,
    /// Number of random directions for large groups.
    pub directions: usize,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec { eps: 1e-5, tol: 1e-4, max_dense: 64, directions: 24 }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Check each case's analytic gradient against central differences.
///
/// Fails with an oracle error if an objective is non-deterministic (two
/// evaluations at the same point must agree bitwise) or non-finite at the
/// expansion point.
pub fn grad_check(
    cases: &[GradCase<'_>],
    spec: &GradCheckSpec,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let mut groups = Vec::with_capacity(cases.len());
    for case in cases {
        if case.theta.len() != case.analytic.len() {
            return Err(Error::Oracle(format!(
                "group `{}`: analytic gradient has {} entries for {} parameters",
                case.name,
                case.analytic.len(),
                case.theta.len()
            )));
        }
        let f0 = (case.objective)(&case.theta);
        let f0_again = (case.objective)(&case.theta);
        if f0.to_bits() != f0_again.to_bits() {
            return Err(Error::Oracle(format!(
                "group `{}`: objective is not deterministic ({f0} vs {f0_again})",
                case.name
            )));
        }
        if !f0.is_finite() {
            return Err(Error::Oracle(format!(
                "group `{}`: objective non-finite at expansion point",
                case.name
            )));
        }

        let (max_rel_err, checked) = if case.theta.len() <= spec.max_dense {
            check_dense(case, spec.eps)
        } else {
            check_directions(case, spec, rng)
        };
        groups.push(GroupReport {
            name: case.name.clone(),
            max_rel_err,
            checked,
            pass: max_rel_err <= spec.tol,
        });
    }
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradCheckReport { eps: spec.eps, tol: spec.tol, groups, pass })
}

fn check_dense(case: &GradCase<'_>, eps: f64) -> (f64, usize) {
    let mut theta = case.theta.clone();
    let mut worst = 0.0f64;
    for j in 0..theta.len() {
        let orig = theta[j];
        theta[j] = orig + eps;
        let plus = (case.objective)(&theta);
        theta[j] = orig - eps;
        let minus = (case.objective)(&theta);
        theta[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(case.analytic[j], numeric));
    }
    (worst, case.theta.len())
}

fn check_directions(case: &GradCase<'_>, spec: &GradCheckSpec, rng: &mut Rng) -> (f64, usize) {
    let n = case.theta.len();
    let mut worst = 0.0f64;
    for _ in 0..spec.directions {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in dir.iter_mut() {
            *v /= norm;
        }
        let plus: Vec<f64> =
            case.theta.iter().zip(&dir).map(|(t, d)| t + spec.eps * d).collect();
        let minus: Vec<f64> =
            case.theta.iter().zip(&dir).map(|(t, d)| t - spec.eps * d).collect();
        let numeric =
            ((case.objective)(&plus) - (case.objective)(&minus)) / (2.0 * spec.eps);
        let analytic: f64 = case.analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max(rel_err(analytic, numeric));
    }
    (worst, spec.directions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_closure_matches_at_machine_precision() {
        let coeffs = [1.5, -2.0, 0.25];
        let case = GradCase::new(
            "linear",
            vec![0.3, -0.7, 2.0],
            coeffs.to_vec(),
            move |theta: &[f64]| theta.iter().zip(&coeffs).map(|(t, c)| t * c).sum(),
        );
        let report =
            grad_check(&[case], &GradCheckSpec::default(), &mut Rng::seeded(0)).unwrap();
        assert!(report.pass);
        assert!(report.groups[0].max_rel_err < 1e-9);
    }

    #[test]
    fn sign_flip_is_reported_with_group_name() {
        let case = GradCase::new(
            "broken",
            vec![1.0, 2.0],
            vec![-2.0, -4.0], // true gradient is (2, 4)
            |theta: &[f64]| theta.iter().map(|t| t * t).sum(),
        );
        let report =
            grad_check(&[case], &GradCheckSpec::default(), &mut Rng::seeded(0)).unwrap();
        assert!(!report.pass);
        assert_eq!(report.failing(), vec!["broken"]);
    }

    #[test]
    fn directional_mode_for_large_groups() {
        let n = 300;
        let theta: Vec<f64> = (0..n).map(|i| (i as f64) * 0.01 - 1.0).collect();
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let case = GradCase::new("quadratic", theta, analytic, |th: &[f64]| {
            th.iter().map(|t| t * t).sum()
        });
        let spec = GradCheckSpec::default();
        let report = grad_check(&[case], &spec, &mut Rng::seeded(7)).unwrap();
        assert!(report.pass, "max rel err {}", report.groups[0].max_rel_err);
        assert_eq!(report.groups[0].checked, spec.directions);
    }

    #[test]
    fn full_suite_passes_on_a_small_config() {
        let mut cfg = crate::network::seven_layer_config(
            3,
            4,
            5,
            1,
            crate::deform::ClipMode::LatencyControlled,
            3,
        );
        cfg.layers.truncate(2);
        cfg.layers[1].stride = 3;
        let report = full_gradient_suite(&cfg, 12, &GradCheckSpec::default()).unwrap();
        assert!(report.pass, "failing groups: {:?}", report.failing());
        assert!(report.groups.len() >= 15, "suite covers all backwards");
    }

    #[test]
    fn nondeterministic_closure_is_an_oracle_error() {
        let calls = std::sync::atomic::AtomicU64::new(0);
        let flaky = GradCase::new("flaky", vec![1.0], vec![1.0], move |_: &[f64]| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64
        });
        let err = grad_check(&[flaky], &GradCheckSpec::default(), &mut Rng::seeded(0));
        assert!(matches!(err, Err(Error::Oracle(_))));
    }
}

/// The full oracle battery: every analytic backward in the crate checked
/// against central differences on small randomized cases built from a
/// network config. Probes are chosen (by bounded seed search) so sampling
/// positions sit at least 0.01 from integers and relu inputs away from zero,
/// where the subgradient conventions would otherwise make the comparison
/// ill-posed.
pub fn full_gradient_suite(
    net_cfg: &crate::network::NetworkConfig,
    seed: u64,
    spec: &GradCheckSpec,
) -> Result<GradCheckReport> {
    use crate::conv::{tdnn_backward, tdnn_forward, ConvParams, GridSpec};
    use crate::deform::{
        clip_offsets, clip_offsets_backward, deformable_backward, deformable_forward, ClipMode,
        DeformableLayer, OffsetField, OffsetPredictor,
    };
    use crate::interp::{interpolate, interpolate_grad};
    use crate::loss::frame_ce_loss;
    use crate::network::build_network;
    use crate::seq::FeatureSeq;

    let mut rng = Rng::seeded(seed);
    let mut cases: Vec<GradCase<'_>> = Vec::new();

    // Interpolation: derivative with respect to the sample position.
    let interp_x = FeatureSeq::random_normal(1, 8, &mut rng);
    let t0 = 2.37;
    let (_, _, d_dt) = interpolate_grad(&interp_x, 0, t0)?;
    let interp_x_obj = interp_x.clone();
    cases.push(GradCase::new("interp.position", vec![t0], vec![d_dt], move |v: &[f64]| {
        interpolate(&interp_x_obj, 0, v[0]).expect("finite probe")
    }));

    // Standard convolution.
    let conv_grid = GridSpec::new(3, 2, 1)?;
    let conv_x = FeatureSeq::random_normal(2, 9, &mut rng);
    let conv_p = ConvParams::init_uniform(3, 2, 3, &mut rng);
    let conv_gy = FeatureSeq::random_normal(3, 9, &mut rng);
    let (conv_gx, conv_gp) = tdnn_backward(&conv_x, &conv_p, &conv_grid, &conv_gy)?;
    let conv_obj = {
        let (gy, grid) = (conv_gy.clone(), conv_grid);
        move |xs: &[f64], ws: &[f64], bs: &[f64]| -> f64 {
            let x = FeatureSeq::new(2, 9, xs.to_vec()).expect("shape");
            let p = ConvParams::new(3, 2, 3, ws.to_vec(), bs.to_vec()).expect("shape");
            let y = tdnn_forward(&x, &p, &grid).expect("shapes");
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        }
    };
    {
        let (xv, wv, bv) = (conv_x.as_slice().to_vec(), conv_p.weights().to_vec(), conv_p.bias().to_vec());
        let o = conv_obj.clone();
        let (w2, b2) = (wv.clone(), bv.clone());
        cases.push(GradCase::new("conv.input", xv.clone(), conv_gx.as_slice().to_vec(), move |v: &[f64]| o(v, &w2, &b2)));
        let o = conv_obj.clone();
        let (x2, b2) = (xv.clone(), bv.clone());
        cases.push(GradCase::new("conv.weights", wv.clone(), conv_gp.weights().to_vec(), move |v: &[f64]| o(&x2, v, &b2)));
        let o = conv_obj.clone();
        let (x2, w2) = (xv.clone(), wv.clone());
        cases.push(GradCase::new("conv.bias", bv.clone(), conv_gp.bias().to_vec(), move |v: &[f64]| o(&x2, &w2, v)));
    }

    // Deformable convolution with explicit fractional offsets.
    let d_grid = GridSpec::new(3, 2, 1)?;
    let d_x = FeatureSeq::random_normal(2, 11, &mut rng);
    let d_p = ConvParams::init_uniform(3, 2, 3, &mut rng);
    let d_f = OffsetField::new(3, 11, (0..33).map(|_| rng.uniform(0.1, 0.9)).collect())?;
    let d_gy = FeatureSeq::random_normal(3, 11, &mut rng);
    let d_grads = deformable_backward(&d_x, &d_p, &d_grid, &d_f, &d_gy)?;
    let d_obj = {
        let (gy, grid) = (d_gy.clone(), d_grid);
        move |xs: &[f64], ws: &[f64], bs: &[f64], fs: &[f64]| -> f64 {
            let x = FeatureSeq::new(2, 11, xs.to_vec()).expect("shape");
            let p = ConvParams::new(3, 2, 3, ws.to_vec(), bs.to_vec()).expect("shape");
            let f = OffsetField::new(3, 11, fs.to_vec()).expect("shape");
            let y = deformable_forward(&x, &p, &grid, &f).expect("shapes");
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        }
    };
    {
        let xv = d_x.as_slice().to_vec();
        let wv = d_p.weights().to_vec();
        let bv = d_p.bias().to_vec();
        let fv = d_f.values().to_vec();
        let o = d_obj.clone();
        let (w2, b2, f2) = (wv.clone(), bv.clone(), fv.clone());
        cases.push(GradCase::new("deform.input", xv.clone(), d_grads.input.as_slice().to_vec(), move |v: &[f64]| o(v, &w2, &b2, &f2)));
        let o = d_obj.clone();
        let (x2, b2, f2) = (xv.clone(), bv.clone(), fv.clone());
        cases.push(GradCase::new("deform.weights", wv.clone(), d_grads.params.weights().to_vec(), move |v: &[f64]| o(&x2, v, &b2, &f2)));
        let o = d_obj.clone();
        let (x2, w2, f2) = (xv.clone(), wv.clone(), fv.clone());
        cases.push(GradCase::new("deform.bias", bv.clone(), d_grads.params.bias().to_vec(), move |v: &[f64]| o(&x2, &w2, v, &f2)));
        let o = d_obj.clone();
        let (x2, w2, b2) = (xv.clone(), wv.clone(), bv.clone());
        cases.push(GradCase::new("deform.offsets", fv.clone(), d_grads.offsets.values().to_vec(), move |v: &[f64]| o(&x2, &w2, &b2, v)));
    }

    // Offset clipping: subgradient of min(offset, 0) through a quadratic
    // readout, probed away from the boundary at zero.
    let raw = OffsetField::new(2, 5, (0..10).map(|i| if i % 2 == 0 { -0.7 } else { 0.6 } + 0.01 * i as f64).collect())?;
    let clip_upstream = OffsetField::new(2, 5, (0..10).map(|_| rng.normal()).collect())?;
    let clip_grad = clip_offsets_backward(&raw, ClipMode::LatencyControlled, &clip_upstream);
    let clip_upstream_obj = clip_upstream.clone();
    cases.push(GradCase::new(
        "clip.offsets",
        raw.values().to_vec(),
        clip_grad.values().to_vec(),
        move |v: &[f64]| {
            let f = OffsetField::new(2, 5, v.to_vec()).expect("shape");
            let clipped = clip_offsets(&f, ClipMode::LatencyControlled);
            clipped
                .values()
                .iter()
                .zip(clip_upstream_obj.values())
                .map(|(a, b)| a * b)
                .sum()
        },
    ));

    // End-to-end deformable layer: predictor -> clip -> deform -> convolve.
    let mut layer_seed = seed;
    let (layer, layer_x, layer_gy) = loop {
        let mut lrng = Rng::seeded(layer_seed.wrapping_add(31));
        let x = FeatureSeq::random_normal(2, 9, &mut lrng);
        let p = ConvParams::init_uniform(2, 2, 3, &mut lrng);
        let mut predictor = OffsetPredictor::zeros(3, 2, 3)?;
        for w in predictor.params_mut().weights_mut() {
            *w = lrng.uniform(-0.4, 0.4);
        }
        let layer = DeformableLayer::new(p, GridSpec::new(3, 1, 1)?, predictor, ClipMode::LatencyControlled)?;
        let fwd = layer.forward(&x)?;
        let ok = fwd.raw_offsets.values().iter().all(|v| v.abs() > 0.05)
            && fwd
                .used_offsets
                .values()
                .iter()
                .all(|v| *v == 0.0 || (v - v.round()).abs() > 0.05);
        if ok {
            let gy = FeatureSeq::random_normal(2, 9, &mut lrng);
            break (layer, x, gy);
        }
        layer_seed += 1;
        if layer_seed > seed + 100 {
            return Err(Error::Oracle("no non-degenerate layer probe found".to_string()));
        }
    };
    let layer_fwd = layer.forward(&layer_x)?;
    let layer_grads = layer.backward(&layer_x, &layer_fwd, &layer_gy)?;
    let layer_score = {
        let gy = layer_gy.clone();
        move |l: &DeformableLayer, x: &FeatureSeq| -> f64 {
            let y = l.forward(x).expect("shapes").output;
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        }
    };
    {
        let (l, s) = (layer.clone(), layer_score.clone());
        cases.push(GradCase::new(
            "layer.input",
            layer_x.as_slice().to_vec(),
            layer_grads.input.as_slice().to_vec(),
            move |v: &[f64]| s(&l, &FeatureSeq::new(2, 9, v.to_vec()).expect("shape")),
        ));
        let (l, s, x) = (layer.clone(), layer_score.clone(), layer_x.clone());
        cases.push(GradCase::new(
            "layer.weights",
            layer.params.weights().to_vec(),
            layer_grads.params.weights().to_vec(),
            move |v: &[f64]| {
                let mut l2 = l.clone();
                l2.params.weights_mut().copy_from_slice(v);
                s(&l2, &x)
            },
        ));
        let (l, s, x) = (layer.clone(), layer_score.clone(), layer_x.clone());
        cases.push(GradCase::new(
            "layer.predictor.weights",
            layer.predictor.params().weights().to_vec(),
            layer_grads.predictor.weights().to_vec(),
            move |v: &[f64]| {
                let mut l2 = l.clone();
                l2.predictor.params_mut().weights_mut().copy_from_slice(v);
                s(&l2, &x)
            },
        ));
        let (l, s, x) = (layer.clone(), layer_score.clone(), layer_x.clone());
        cases.push(GradCase::new(
            "layer.predictor.bias",
            layer.predictor.params().bias().to_vec(),
            layer_grads.predictor.bias().to_vec(),
            move |v: &[f64]| {
                let mut l2 = l.clone();
                l2.predictor.params_mut().bias_mut().copy_from_slice(v);
                s(&l2, &x)
            },
        ));
    }

    // Frame cross-entropy.
    let loss_logits = FeatureSeq::random_normal(4, 6, &mut rng);
    let loss_labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
    let (_, loss_grad) = frame_ce_loss(&loss_logits, &loss_labels)?;
    let labels_obj = loss_labels.clone();
    cases.push(GradCase::new(
        "loss.logits",
        loss_logits.as_slice().to_vec(),
        loss_grad.as_slice().to_vec(),
        move |v: &[f64]| {
            let l = FeatureSeq::new(4, 6, v.to_vec()).expect("shape");
            frame_ce_loss(&l, &labels_obj).expect("valid labels").0
        },
    ));

    // Full network, every parameter group plus the input.
    let mut net_seed = seed;
    let (net, net_x, net_gy) = loop {
        let mut cfg = net_cfg.clone();
        cfg.seed = net_seed;
        let mut net = build_network(&cfg)?;
        let mut nrng = Rng::seeded(net_seed.wrapping_add(77));
        for layer in net.deformable_layers() {
            net.predictor_params_mut(layer)?
                .weights_mut()
                .iter_mut()
                .for_each(|w| *w = nrng.uniform(-0.3, 0.3));
        }
        let t_in = 15;
        let x = FeatureSeq::random_normal(cfg.input_dim, t_in, &mut nrng);
        if net.probe_is_nondegenerate(&x) {
            let t_out = net.forward(&x)?.len();
            let gy = FeatureSeq::random_normal(cfg.output_dim, t_out, &mut nrng);
            break (net, x, gy);
        }
        net_seed += 1;
        if net_seed > seed + 100 {
            return Err(Error::Oracle("no non-degenerate network probe found".to_string()));
        }
    };
    let net_grads = net.backward(&net_x, &net_gy)?;
    let net_score = {
        let gy = net_gy.clone();
        move |n: &crate::network::Network, x: &FeatureSeq| -> f64 {
            let y = n.forward(x).expect("shapes");
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        }
    };
    let mut net_snapshot: Vec<(String, Vec<f64>)> = Vec::new();
    net.visit_params(|n, v| net_snapshot.push((n.to_string(), v.to_vec())));
    for (name, theta) in &net_snapshot {
        let analytic = net_grads
            .params
            .get(name)
            .ok_or_else(|| Error::Oracle(format!("missing gradient group `{name}`")))?
            .to_vec();
        let (cfg, snap, score, x, group) = (
            net.config().clone(),
            net_snapshot.clone(),
            net_score.clone(),
            net_x.clone(),
            name.clone(),
        );
        cases.push(GradCase::new(
            format!("network.{name}"),
            theta.clone(),
            analytic,
            move |v: &[f64]| {
                let mut n = build_network(&cfg).expect("validated config");
                n.visit_params_mut(|pname, dst| {
                    let src = if pname == group {
                        v
                    } else {
                        snap.iter()
                            .find(|(sn, _)| sn == pname)
                            .map(|(_, sv)| sv.as_slice())
                            .expect("snapshot covers all groups")
                    };
                    dst.copy_from_slice(src);
                });
                score(&n, &x)
            },
        ));
    }
    {
        let (c_in, t_in) = (net_x.channels(), net_x.len());
        let (n2, s2) = (net.clone(), net_score.clone());
        cases.push(GradCase::new(
            "network.input",
            net_x.as_slice().to_vec(),
            net_grads.input.as_slice().to_vec(),
            move |v: &[f64]| s2(&n2, &FeatureSeq::new(c_in, t_in, v.to_vec()).expect("shape")),
        ));
    }

    grad_check(&cases, spec, &mut Rng::seeded(seed ^ 0x5eed))
}
