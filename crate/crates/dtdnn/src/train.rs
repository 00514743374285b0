//! Experiment loop for the synthetic warped-sequence task: training,
//! periodic evaluation under test-time warps, and the paired
//! standard-versus-deformable comparison protocol.
//!
//! Evaluation warps the features only, leaving labels on the clean timeline;
//! training can optionally apply a consistent warp (features plus label
//! timeline) as augmentation. Every number in a report is a pure function of
//! the experiment config: all randomness flows from the declared seeds, and
//! wall time is kept out of the serialized artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::ClipMode;
use crate::error::{Error, Result};
use crate::exec;
use crate::loss::{frame_accuracy, frame_ce_loss};
use crate::network::{build_network, GradStore, Network, NetworkConfig};
use crate::optim::{Adam, AdamParams};
use crate::rng::Rng;
use crate::seq::FeatureSeq;
use crate::task::{generate_batch, labels_for_frames, TaskSpec};
use crate::warp::WarpMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub task: TaskSpec,
    pub optimizer: AdamParams,
    pub steps: usize,
    pub batch_size: usize,
    /// Seed of the training data stream.
    pub seed: u64,
    /// Evaluate every this many steps (0: only at the start and end).
    pub eval_interval: usize,
    /// Held-out seeds `eval_seed_base .. eval_seed_base + eval_seeds`.
    pub eval_seeds: u64,
    pub eval_seed_base: u64,
    /// Sequences per evaluation seed.
    pub eval_sequences: usize,
    /// Test-time warp parameters; features only, labels fixed.
    pub eval_warps: Vec<f64>,
    /// Consistent-warp training augmentation; 0 disables.
    pub train_warp: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.task.validate()?;
        if self.network.input_dim != self.task.feature_dim {
            return Err(Error::usage(format!(
                "network input_dim {} does not match task feature_dim {}",
                self.network.input_dim, self.task.feature_dim
            )));
        }
        if self.network.output_dim != self.task.num_classes {
            return Err(Error::usage(format!(
                "network output_dim {} does not match task num_classes {}",
                self.network.output_dim, self.task.num_classes
            )));
        }
        if self.batch_size == 0 || self.eval_sequences == 0 || self.eval_seeds == 0 {
            return Err(Error::usage(
                "batch_size, eval_sequences, and eval_seeds must be positive",
            ));
        }
        let half = self.task.len as f64 / 2.0;
        for w in self.eval_warps.iter().chain(std::iter::once(&self.train_warp)) {
            if !(w.is_finite() && *w >= 0.0 && *w < half) {
                return Err(Error::usage(format!(
                    "warp parameter {w} must be in [0, {half}) for sequence length {}",
                    self.task.len
                )));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(None, format!("cannot read experiment config {}: {e}", path.display()))
        })?;
        let file: ExperimentConfigFile = toml::from_str(&text)
            .map_err(|e| Error::config(None, format!("cannot parse experiment config: {e}")))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let network = NetworkConfig::from_file(&base.join(&file.network))?;
        let cfg = ExperimentConfig {
            network,
            task: file.task,
            optimizer: file.optimizer,
            steps: file.steps,
            batch_size: file.batch_size,
            seed: file.seed,
            eval_interval: file.eval_interval,
            eval_seeds: file.eval_seeds,
            eval_seed_base: file.eval_seed_base,
            eval_sequences: file.eval_sequences,
            eval_warps: file.eval_warps,
            train_warp: file.train_warp,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// On-disk experiment config; `network` is a path relative to this file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfigFile {
    network: String,
    task: TaskSpec,
    #[serde(default)]
    optimizer: AdamParams,
    steps: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    eval_interval: usize,
    #[serde(default = "default_eval_seeds")]
    eval_seeds: u64,
    #[serde(default = "default_eval_seed_base")]
    eval_seed_base: u64,
    #[serde(default = "default_eval_sequences")]
    eval_sequences: usize,
    #[serde(default)]
    eval_warps: Vec<f64>,
    #[serde(default)]
    train_warp: f64,
}

fn default_batch() -> usize {
    2
}

fn default_eval_seeds() -> u64 {
    10
}

fn default_eval_seed_base() -> u64 {
    1000
}

fn default_eval_sequences() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub loss: f64,
    pub frame_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub warp: f64,
    pub clip_mode: ClipMode,
    pub seed: u64,
    pub loss: f64,
    pub frame_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub train: Vec<TrainStepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step at which a non-finite loss aborted training, if any.
    pub diverged_at: Option<usize>,
    /// Wall time is informational only and never serialized; reports are
    /// pure functions of their config.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metrics.csv` rows: `step, split, warp_W, clip_mode, loss, frame_acc,
    /// seed`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,split,warp_W,clip_mode,loss,frame_acc,seed\n");
        let train_clip = clip_label(&self.config.network);
        for rec in &self.train {
            out.push_str(&format!(
                "{},train,{},{},{},{},{}\n",
                rec.step, self.config.train_warp, train_clip, rec.loss, rec.frame_acc,
                self.config.seed
            ));
        }
        for rec in &self.evals {
            out.push_str(&format!(
                "{},eval,{},{},{},{},{}\n",
                rec.step, rec.warp, rec.clip_mode, rec.loss, rec.frame_acc, rec.seed
            ));
        }
        out
    }
}

fn clip_label(cfg: &NetworkConfig) -> ClipMode {
    if cfg.deformable_last_k == 0 {
        ClipMode::None
    } else {
        cfg.layers.last().map(|l| l.clip_mode).unwrap_or(ClipMode::None)
    }
}

/// A finished run: the report plus the trained network.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub network: Network,
}

fn network_clip(net: &Network) -> ClipMode {
    let layers = net.deformable_layers();
    if layers.is_empty() {
        ClipMode::None
    } else {
        net.config()
            .resolved_layers()
            .ok()
            .and_then(|specs| specs.get(layers[0]).map(|s| s.clip_mode))
            .unwrap_or(ClipMode::None)
    }
}

struct SeqGrad {
    loss: f64,
    acc: f64,
    grads: GradStore,
}

fn train_minibatch(net: &Network, feats: &[FeatureSeq], labels: &[Vec<usize>]) -> Result<Vec<SeqGrad>> {
    let results: Vec<Result<SeqGrad>> = exec::map_indexed(feats.len(), |b| {
        let logits = net.forward(&feats[b])?;
        let (loss, grad_logits) = frame_ce_loss(&logits, &labels[b])?;
        let acc = frame_accuracy(&logits, &labels[b])?;
        let grads = net.backward(&feats[b], &grad_logits)?;
        Ok(SeqGrad { loss, acc, grads: grads.params })
    });
    results.into_iter().collect()
}

/// Evaluate a network on held-out seeds for every configured warp setting.
/// `clip_override` swaps the clip mode of every deformable layer for this
/// evaluation only (the latency-control test-time setting).
pub fn evaluate(
    net: &Network,
    cfg: &ExperimentConfig,
    step: usize,
    clip_override: Option<ClipMode>,
) -> Result<Vec<EvalRecord>> {
    let eval_net: Network;
    let net = match clip_override {
        Some(mode) => {
            let mut clone = net.clone();
            clone.set_clip_mode(mode);
            eval_net = clone;
            &eval_net
        }
        None => net,
    };
    let clip = clip_override.unwrap_or_else(|| network_clip(net));
    let sp = net.stride_product();
    let warps = if cfg.eval_warps.is_empty() { vec![0.0] } else { cfg.eval_warps.clone() };

    let n_seeds = cfg.eval_seeds as usize;
    let jobs = warps.len() * n_seeds;
    let records: Vec<Result<EvalRecord>> = exec::map_indexed(jobs, |job| {
        let warp = warps[job / n_seeds];
        let seed = cfg.eval_seed_base + (job % n_seeds) as u64;
        let mut rng = Rng::seeded(seed);
        let batch = generate_batch(&cfg.task, sp, cfg.eval_sequences, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for (feats, labels) in batch.features.iter().zip(&batch.labels) {
            // Features-only warp: labels stay on the clean timeline.
            let x = if warp > 0.0 {
                WarpMap::sample(feats.len(), warp, &mut rng)?.warp_features(feats)
            } else {
                feats.clone()
            };
            let logits = net.forward(&x)?;
            let (loss, _) = frame_ce_loss(&logits, labels)?;
            loss_sum += loss;
            acc_sum += frame_accuracy(&logits, labels)?;
        }
        let n = batch.features.len() as f64;
        Ok(EvalRecord {
            step,
            warp,
            clip_mode: clip,
            seed,
            loss: loss_sum / n,
            frame_acc: acc_sum / n,
        })
    });
    records.into_iter().collect()
}

/// Run the full experiment loop: generate, optionally warp, forward, loss,
/// backward, step; evaluate at the start, at intervals, and at the end. A
/// non-finite loss aborts training and returns the report accumulated so far
/// with `diverged_at` set.
pub fn train_run(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let mut net = build_network(&cfg.network)?;
    let sp = net.stride_product();
    let mut adam = Adam::new(cfg.optimizer);
    let mut data_rng = Rng::seeded(cfg.seed);

    let mut report = TrainReport {
        config: cfg.clone(),
        train: Vec::with_capacity(cfg.steps),
        evals: evaluate(&net, cfg, 0, None)?,
        diverged_at: None,
        wall_time_s: 0.0,
    };

    for step in 1..=cfg.steps {
        let mut batch = generate_batch(&cfg.task, sp, cfg.batch_size, &mut data_rng)?;
        if cfg.train_warp > 0.0 {
            // Consistent augmentation: features and label timeline together.
            for b in 0..batch.features.len() {
                let map = WarpMap::sample(cfg.task.len, cfg.train_warp, &mut data_rng)?;
                batch.features[b] = map.warp_features(&batch.features[b]);
                let classes = map.warp_classes(&batch.frame_classes[b]);
                batch.labels[b] = labels_for_frames(&classes, sp, cfg.task.num_classes);
                batch.frame_classes[b] = classes;
            }
        }

        let per_seq = train_minibatch(&net, &batch.features, &batch.labels)?;
        let n = per_seq.len() as f64;
        let loss = per_seq.iter().map(|s| s.loss).sum::<f64>() / n;
        let acc = per_seq.iter().map(|s| s.acc).sum::<f64>() / n;
        if !loss.is_finite() {
            report.diverged_at = Some(step);
            break;
        }
        let mut grads = GradStore::default();
        for (i, seq) in per_seq.into_iter().enumerate() {
            if i == 0 {
                grads = seq.grads;
            } else {
                grads.add_assign(&seq.grads)?;
            }
        }
        grads.scale(1.0 / n);
        adam.step(&mut net, &grads)?;
        report.train.push(TrainStepRecord { step, loss, frame_acc: acc });

        let at_interval = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
        if (at_interval && step != cfg.steps) || step == cfg.steps {
            report.evals.extend(evaluate(&net, cfg, step, None)?);
        }
    }

    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { report, network: net })
}

/// Median of the final-step eval losses across seeds at one warp setting.
pub fn median_eval_loss(records: &[EvalRecord], step: usize, warp: f64) -> Option<f64> {
    let mut losses: Vec<f64> = records
        .iter()
        .filter(|r| r.step == step && r.warp == warp)
        .map(|r| r.loss)
        .collect();
    if losses.is_empty() {
        return None;
    }
    losses.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let n = losses.len();
    Some(if n % 2 == 1 { losses[n / 2] } else { (losses[n / 2 - 1] + losses[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpComparison {
    pub warp: f64,
    pub standard_median_loss: f64,
    pub deformable_median_loss: f64,
    /// `(standard - deformable) / standard`; positive means the deformable
    /// network is better.
    pub relative_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub per_warp: Vec<WarpComparison>,
}

pub struct CompareOutcome {
    pub standard: TrainOutcome,
    pub deformable: TrainOutcome,
    pub summary: CompareSummary,
}

/// The paired protocol: train a standard network and its deformable twin on
/// identical seeds and data, then compare median eval losses per test-time
/// warp setting at the final step.
pub fn compare_run(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    cfg.validate()?;
    if cfg.network.deformable_last_k == 0 {
        return Err(Error::usage(
            "compare needs a network config with deformable_last_k >= 1",
        ));
    }
    let mut standard_cfg = cfg.clone();
    standard_cfg.network.deformable_last_k = 0;

    let standard = train_run(&standard_cfg)?;
    let deformable = train_run(cfg)?;

    let mut per_warp = Vec::new();
    for warp in &cfg.eval_warps {
        let s = median_eval_loss(&standard.report.evals, cfg.steps, *warp);
        let d = median_eval_loss(&deformable.report.evals, cfg.steps, *warp);
        if let (Some(s), Some(d)) = (s, d) {
            per_warp.push(WarpComparison {
                warp: *warp,
                standard_median_loss: s,
                deformable_median_loss: d,
                relative_gain: (s - d) / s,
            });
        }
    }
    Ok(CompareOutcome { standard, deformable, summary: CompareSummary { per_warp } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::seven_layer_config;

    fn tiny_experiment(deformable_last_k: usize, steps: usize) -> ExperimentConfig {
        let mut network = seven_layer_config(3, 4, 6, deformable_last_k, ClipMode::None, 11);
        network.layers.truncate(2);
        network.layers[1].stride = 3;
        ExperimentConfig {
            network,
            task: TaskSpec {
                num_classes: 4,
                feature_dim: 3,
                len: 24,
                d_min: 3,
                d_max: 6,
                noise: 0.3,
                embed_seed: 2,
            },
            optimizer: AdamParams::with_lr(3e-3),
            steps,
            batch_size: 2,
            seed: 5,
            eval_interval: 0,
            eval_seeds: 3,
            eval_seed_base: 900,
            eval_sequences: 2,
            eval_warps: vec![0.0, 4.0],
            train_warp: 0.0,
        }
    }

    #[test]
    fn zero_steps_reports_only_the_initial_evaluation() {
        let outcome = train_run(&tiny_experiment(0, 0)).unwrap();
        assert!(outcome.report.train.is_empty());
        assert!(outcome.report.evals.iter().all(|r| r.step == 0));
        // 2 warps x 3 seeds.
        assert_eq!(outcome.report.evals.len(), 6);
    }

    #[test]
    fn fresh_standard_and_deformable_start_at_identical_eval_loss() {
        let st = train_run(&tiny_experiment(0, 0)).unwrap();
        let de = train_run(&tiny_experiment(2, 0)).unwrap();
        for (a, b) in st.report.evals.iter().zip(&de.report.evals) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "warp {} seed {}", a.warp, a.seed);
        }
    }

    #[test]
    fn report_is_a_pure_function_of_config() {
        let cfg = tiny_experiment(1, 4);
        let a = train_run(&cfg).unwrap().report;
        let b = train_run(&cfg).unwrap().report;
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.metrics_csv(), b.metrics_csv());
    }

    #[test]
    fn warped_eval_with_zero_w_equals_clean_eval() {
        let mut cfg = tiny_experiment(1, 0);
        cfg.eval_warps = vec![0.0];
        let outcome = train_run(&cfg).unwrap();
        let cloned = evaluate(&outcome.network, &cfg, 0, None).unwrap();
        for (a, b) in outcome.report.evals.iter().zip(&cloned) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss_on_the_toy_task() {
        let cfg = tiny_experiment(0, 60);
        let outcome = train_run(&cfg).unwrap();
        let first = outcome.report.train.first().unwrap().loss;
        let last = outcome.report.train.last().unwrap().loss;
        assert!(last < first, "no progress: {first} -> {last}");
        assert!(outcome.report.diverged_at.is_none());
    }

    #[test]
    fn metrics_csv_has_expected_header_and_rows() {
        let cfg = tiny_experiment(1, 2);
        let report = train_run(&cfg).unwrap().report;
        let csv = report.metrics_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,split,warp_W,clip_mode,loss,frame_acc,seed");
        // 2 train rows + evals at step 0 and final step.
        assert_eq!(csv.lines().count(), 1 + 2 + 2 * cfg.eval_warps.len() * 3);
        assert!(csv.contains(",train,"));
        assert!(csv.contains(",eval,"));
    }

    #[test]
    fn train_warp_keeps_reports_deterministic_and_finite() {
        let mut cfg = tiny_experiment(1, 3);
        cfg.train_warp = 4.0;
        let a = train_run(&cfg).unwrap().report;
        let b = train_run(&cfg).unwrap().report;
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.train.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn clip_override_changes_evaluation_of_live_offset_nets() {
        let mut cfg = tiny_experiment(1, 25);
        cfg.optimizer = AdamParams::with_lr(1e-2);
        let outcome = train_run(&cfg).unwrap();
        let plain = evaluate(&outcome.network, &cfg, 99, None).unwrap();
        let clipped =
            evaluate(&outcome.network, &cfg, 99, Some(ClipMode::LatencyControlled)).unwrap();
        assert_eq!(plain.len(), clipped.len());
        assert!(clipped.iter().all(|r| r.clip_mode == ClipMode::LatencyControlled));
        // The trained predictor emits some positive offsets, so clipping must
        // change at least one eval loss.
        assert!(
            plain.iter().zip(&clipped).any(|(a, b)| a.loss != b.loss),
            "clip override had no effect"
        );
    }

    #[test]
    fn compare_runs_paired_protocol() {
        let mut cfg = tiny_experiment(1, 3);
        cfg.eval_warps = vec![0.0, 4.0];
        let outcome = compare_run(&cfg).unwrap();
        assert_eq!(outcome.summary.per_warp.len(), 2);
        assert_eq!(outcome.standard.network.deformable_layers().len(), 0);
        assert_eq!(outcome.deformable.network.deformable_layers().len(), 1);
        let bad = tiny_experiment(0, 1);
        assert!(compare_run(&bad).is_err());
    }

    #[test]
    fn median_is_the_middle_order_statistic() {
        let recs: Vec<EvalRecord> = [3.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, l)| EvalRecord {
                step: 7,
                warp: 0.0,
                clip_mode: ClipMode::None,
                seed: i as u64,
                loss: *l,
                frame_acc: 0.0,
            })
            .collect();
        assert_eq!(median_eval_loss(&recs, 7, 0.0), Some(2.0));
        assert_eq!(median_eval_loss(&recs, 8, 0.0), None);
    }
}
