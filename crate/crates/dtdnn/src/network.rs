//! Multi-layer networks assembled from a declarative configuration: a stack
//! of standard or deformable TDNN layers followed by a per-frame linear
//! projection. The last `k` layers of a stack can be switched to deformable
//! without touching the rest of the config.

use serde::{Deserialize, Serialize};

use crate::conv::{tdnn_backward, tdnn_forward, ConvParams, GridSpec};
use crate::deform::{ClipMode, DeformableForward, DeformableLayer, OffsetField, OffsetPredictor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seq::FeatureSeq;

pub const DEFAULT_OFFSET_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Standard,
    Deformable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// One layer of the stack, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kind: LayerKind,
    pub clip_mode: ClipMode,
    pub activation: Activation,
    /// Kernel size of the offset predictor (deformable layers only).
    pub offset_kernel: usize,
    /// Optional symmetric bound on offset magnitude.
    pub max_offset: Option<f64>,
}

/// `{ main, offset }` parameter counts of one layer. `offset` is zero for
/// standard layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerParamCount {
    pub main: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.kernel_size, self.dilation, self.stride)
    }

    /// Parameter accounting: `main = C_out*C_in*N + C_out`; for deformable
    /// layers `offset = N*C_in*N' + N`, else 0.
    pub fn param_count(&self) -> LayerParamCount {
        let main = self.out_channels * self.in_channels * self.kernel_size + self.out_channels;
        let offset = match self.kind {
            LayerKind::Standard => 0,
            LayerKind::Deformable => {
                self.kernel_size * self.in_channels * self.offset_kernel + self.kernel_size
            }
        };
        LayerParamCount { main, offset }
    }
}

/// Resolved network configuration: an ordered layer stack plus the final
/// per-frame linear projection from the last hidden width to `output_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Rewrites the kind of the last `k` layers to deformable at build time.
    pub deformable_last_k: usize,
    pub seed: u64,
}

impl NetworkConfig {
    /// Validate and apply `deformable_last_k`, returning the effective spec
    /// list the network will be built from.
    pub fn resolved_layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut layers = self.layers.clone();
        let first = layers.len() - self.deformable_last_k;
        for spec in layers.iter_mut().skip(first) {
            spec.kind = LayerKind::Deformable;
        }
        Ok(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(None, "network needs at least one layer"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config(None, "input_dim and output_dim must be positive"));
        }
        if self.deformable_last_k > self.layers.len() {
            return Err(Error::config(
                None,
                format!(
                    "deformable_last_k = {} exceeds the {} configured layers",
                    self.deformable_last_k,
                    self.layers.len()
                ),
            ));
        }
        let mut expect_in = self.input_dim;
        for (idx, spec) in self.layers.iter().enumerate() {
            if spec.kernel_size == 0 || spec.kernel_size % 2 == 0 {
                return Err(Error::config(
                    idx,
                    format!("kernel size must be odd and positive, got {}", spec.kernel_size),
                ));
            }
            if spec.offset_kernel == 0 || spec.offset_kernel % 2 == 0 {
                return Err(Error::config(
                    idx,
                    format!("offset kernel must be odd and positive, got {}", spec.offset_kernel),
                ));
            }
            if spec.dilation == 0 || spec.stride == 0 {
                return Err(Error::config(idx, "dilation and stride must be >= 1"));
            }
            if spec.in_channels == 0 || spec.out_channels == 0 {
                return Err(Error::config(idx, "channel dims must be positive"));
            }
            if spec.in_channels != expect_in {
                return Err(Error::config(
                    idx,
                    format!(
                        "in_channels = {} does not chain with previous width {}",
                        spec.in_channels, expect_in
                    ),
                ));
            }
            if let Some(m) = spec.max_offset {
                if !(m.is_finite() && m >= 0.0) {
                    return Err(Error::config(idx, "max_offset must be finite and >= 0"));
                }
            }
            expect_in = spec.out_channels;
        }
        Ok(())
    }

    /// Product of all layer strides: the input-to-output frame-rate ratio.
    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Stable 64-bit hash of the canonical serialized form.
    pub fn config_hash(&self) -> u64 {
        let canon = serde_json::to_string(self).expect("config serializes");
        fnv1a64(canon.as_bytes())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: NetworkConfigFile = toml::from_str(text)
            .map_err(|e| Error::config(None, format!("cannot parse network config: {e}")))?;
        file.resolve()
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(None, format!("cannot read network config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// On-disk network config. Per-layer channel widths default to
/// `hidden_dim`; `clip_mode`, `offset_kernel`, and `max_offset` apply to all
/// deformable layers unless overridden per layer.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkConfigFile {
    input_dim: usize,
    output_dim: usize,
    hidden_dim: usize,
    #[serde(default)]
    deformable_last_k: usize,
    #[serde(default = "default_clip_mode")]
    clip_mode: ClipMode,
    #[serde(default = "default_offset_kernel")]
    offset_kernel: usize,
    #[serde(default)]
    max_offset: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(rename = "layer")]
    layers: Vec<LayerFileEntry>,
}

fn default_clip_mode() -> ClipMode {
    ClipMode::None
}

fn default_offset_kernel() -> usize {
    DEFAULT_OFFSET_KERNEL
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFileEntry {
    kernel_size: usize,
    dilation: usize,
    stride: usize,
    #[serde(default)]
    kind: Option<LayerKind>,
    #[serde(default)]
    in_channels: Option<usize>,
    #[serde(default)]
    out_channels: Option<usize>,
    #[serde(default)]
    activation: Option<Activation>,
}

impl NetworkConfigFile {
    fn resolve(self) -> Result<NetworkConfig> {
        if self.layers.is_empty() {
            return Err(Error::config(None, "network config declares no [[layer]] entries"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev_out = self.input_dim;
        for entry in &self.layers {
            let in_channels = entry.in_channels.unwrap_or(prev_out);
            let out_channels = entry.out_channels.unwrap_or(self.hidden_dim);
            layers.push(LayerSpec {
                kernel_size: entry.kernel_size,
                dilation: entry.dilation,
                stride: entry.stride,
                in_channels,
                out_channels,
                kind: entry.kind.unwrap_or(LayerKind::Standard),
                clip_mode: self.clip_mode,
                activation: entry.activation.unwrap_or(Activation::Relu),
                offset_kernel: self.offset_kernel,
                max_offset: self.max_offset,
            });
            prev_out = out_channels;
        }
        let cfg = NetworkConfig {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            layers,
            deformable_last_k: self.deformable_last_k,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
enum LayerOp {
    Standard { params: ConvParams, grid: GridSpec },
    Deformable(DeformableLayer),
}

#[derive(Debug, Clone)]
struct LayerInstance {
    op: LayerOp,
    activation: Activation,
}

/// A built network: layer instances plus the final projection, with the
/// construction metadata needed for checkpointing.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<LayerInstance>,
    projection: ConvParams,
    config_hash: u64,
}

/// Named gradient arrays in canonical parameter order. Only parameter groups
/// that exist in the network appear; a standard layer has no predictor
/// entries at all.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    entries: Vec<(String, Vec<f64>)>,
}

impl GradStore {
    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> Self {
        GradStore { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    fn push(&mut self, name: String, values: Vec<f64>) {
        self.entries.push((name, values));
    }

    /// Elementwise sum; stores must have identical group layouts.
    pub fn add_assign(&mut self, other: &GradStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::usage("gradient stores have different group counts".to_string()));
        }
        for ((name, vals), (oname, ovals)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || vals.len() != ovals.len() {
                return Err(Error::usage(format!(
                    "gradient group mismatch: `{name}` vs `{oname}`"
                )));
            }
            for (a, b) in vals.iter_mut().zip(ovals) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (_, vals) in self.entries.iter_mut() {
            for v in vals.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Result of a backward pass: parameter gradients plus the input gradient.
pub struct NetworkGrads {
    pub params: GradStore,
    pub input: FeatureSeq,
}

/// Build a network from a validated config. Construction is deterministic in
/// `cfg.seed`; each layer draws from an independent derived stream, so the
/// main weights do not depend on `deformable_last_k` and fresh deformable
/// layers (zero-initialized predictors) match their standard twins exactly.
pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    let layers = cfg.resolved_layers()?;
    let root = Rng::seeded(cfg.seed);

    let mut instances = Vec::with_capacity(layers.len());
    for (idx, spec) in layers.iter().enumerate() {
        let grid = spec.grid()?;
        let mut layer_rng = root.derive(idx as u64);
        let params = ConvParams::init_uniform(
            spec.out_channels,
            spec.in_channels,
            spec.kernel_size,
            &mut layer_rng,
        );
        let op = match spec.kind {
            LayerKind::Standard => LayerOp::Standard { params, grid },
            LayerKind::Deformable => {
                let predictor =
                    OffsetPredictor::zeros(spec.kernel_size, spec.in_channels, spec.offset_kernel)?;
                let mut layer = DeformableLayer::new(params, grid, predictor, spec.clip_mode)?;
                layer.max_offset = spec.max_offset;
                LayerOp::Deformable(layer)
            }
        };
        instances.push(LayerInstance { op, activation: spec.activation });
    }

    let last_width = layers.last().expect("validated nonempty").out_channels;
    let mut proj_rng = root.derive(layers.len() as u64);
    let projection = ConvParams::init_uniform(cfg.output_dim, last_width, 1, &mut proj_rng);

    Ok(Network {
        config: cfg.clone(),
        layers: instances,
        projection,
        config_hash: cfg.config_hash(),
    })
}

fn relu_forward(x: &FeatureSeq) -> FeatureSeq {
    let data = x.as_slice().iter().map(|v| v.max(0.0)).collect();
    FeatureSeq::new(x.channels(), x.len(), data).expect("relu preserves shape")
}

/// Gradient mask uses `pre > 0`; the subgradient at exactly zero is zero.
fn relu_backward(pre: &FeatureSeq, grad_post: &FeatureSeq) -> FeatureSeq {
    let data = pre
        .as_slice()
        .iter()
        .zip(grad_post.as_slice())
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    FeatureSeq::new(pre.channels(), pre.len(), data).expect("shapes match")
}

struct LayerTrace {
    /// Pre-activation layer output.
    pre: FeatureSeq,
    /// Post-activation output (input of the next stage).
    post: FeatureSeq,
    deform: Option<DeformableForward>,
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn stride_product(&self) -> usize {
        self.config.stride_product()
    }

    /// Indices of the deformable layers, in order.
    pub fn deformable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.op, LayerOp::Deformable(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Switch the offset clip mode of every deformable layer.
    pub fn set_clip_mode(&mut self, mode: ClipMode) {
        for layer in self.layers.iter_mut() {
            if let LayerOp::Deformable(d) = &mut layer.op {
                d.clip_mode = mode;
            }
        }
    }

    /// Mutable access to one deformable layer's predictor parameters.
    pub fn predictor_params_mut(&mut self, layer: usize) -> Result<&mut ConvParams> {
        match self.layers.get_mut(layer).map(|l| &mut l.op) {
            Some(LayerOp::Deformable(d)) => Ok(d.predictor.params_mut()),
            Some(LayerOp::Standard { .. }) => {
                Err(Error::usage(format!("layer {layer} is not deformable")))
            }
            None => Err(Error::usage(format!("layer {layer} out of range"))),
        }
    }

    /// Total stored parameters; equals the sum of per-layer counts plus the
    /// projection.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(|_, vals| total += vals.len());
        total
    }

    /// Visit every parameter group in canonical order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &[f64])) {
        for (idx, layer) in self.layers.iter().enumerate() {
            match &layer.op {
                LayerOp::Standard { params, .. } => {
                    f(&format!("layers.{idx}.weight"), params.weights());
                    f(&format!("layers.{idx}.bias"), params.bias());
                }
                LayerOp::Deformable(d) => {
                    f(&format!("layers.{idx}.weight"), d.params.weights());
                    f(&format!("layers.{idx}.bias"), d.params.bias());
                    f(&format!("layers.{idx}.offset.weight"), d.predictor.params().weights());
                    f(&format!("layers.{idx}.offset.bias"), d.predictor.params().bias());
                }
            }
        }
        f("projection.weight", self.projection.weights());
        f("projection.bias", self.projection.bias());
    }

    /// Visit every parameter group mutably, in the same canonical order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match &mut layer.op {
                LayerOp::Standard { params, .. } => {
                    f(&format!("layers.{idx}.weight"), params.weights_mut());
                    f(&format!("layers.{idx}.bias"), params.bias_mut());
                }
                LayerOp::Deformable(d) => {
                    f(&format!("layers.{idx}.weight"), d.params.weights_mut());
                    f(&format!("layers.{idx}.bias"), d.params.bias_mut());
                    f(
                        &format!("layers.{idx}.offset.weight"),
                        d.predictor.params_mut().weights_mut(),
                    );
                    f(&format!("layers.{idx}.offset.bias"), d.predictor.params_mut().bias_mut());
                }
            }
        }
        f("projection.weight", self.projection.weights_mut());
        f("projection.bias", self.projection.bias_mut());
    }

    /// Canonical parameter group names, with shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let describe = |p: &ConvParams| {
            (vec![p.out_channels(), p.in_channels(), p.taps()], vec![p.out_channels()])
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            match &layer.op {
                LayerOp::Standard { params, .. } => {
                    let (w, b) = describe(params);
                    shapes.push((format!("layers.{idx}.weight"), w));
                    shapes.push((format!("layers.{idx}.bias"), b));
                }
                LayerOp::Deformable(d) => {
                    let (w, b) = describe(&d.params);
                    shapes.push((format!("layers.{idx}.weight"), w));
                    shapes.push((format!("layers.{idx}.bias"), b));
                    let (w, b) = describe(d.predictor.params());
                    shapes.push((format!("layers.{idx}.offset.weight"), w));
                    shapes.push((format!("layers.{idx}.offset.bias"), b));
                }
            }
        }
        shapes.push((
            "projection.weight".to_string(),
            vec![self.projection.out_channels(), self.projection.in_channels(), 1],
        ));
        shapes.push(("projection.bias".to_string(), vec![self.projection.out_channels()]));
        shapes
    }

    fn check_input(&self, x: &FeatureSeq) -> Result<()> {
        if x.channels() != self.config.input_dim {
            return Err(Error::usage(format!(
                "input has {} channels but network expects {}",
                x.channels(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn run_layers(&self, x: &FeatureSeq) -> Result<Vec<LayerTrace>> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for layer in &self.layers {
            let (pre, deform) = match &layer.op {
                LayerOp::Standard { params, grid } => (tdnn_forward(current, params, grid)?, None),
                LayerOp::Deformable(d) => {
                    let fwd = d.forward(current)?;
                    (fwd.output.clone(), Some(fwd))
                }
            };
            let post = match layer.activation {
                Activation::Relu => relu_forward(&pre),
                Activation::None => pre.clone(),
            };
            traces.push(LayerTrace { pre, post, deform });
            current = &traces.last().expect("just pushed").post;
        }
        Ok(traces)
    }

    fn projection_grid() -> GridSpec {
        GridSpec::new(1, 1, 1).expect("kernel-1 grid is valid")
    }

    /// Per-frame logits for input `x`.
    pub fn forward(&self, x: &FeatureSeq) -> Result<FeatureSeq> {
        Ok(self.forward_captured(x, false)?.0)
    }

    /// Forward pass that optionally captures the offsets each deformable
    /// layer actually used, as `(layer index, field)` pairs.
    pub fn forward_captured(
        &self,
        x: &FeatureSeq,
        capture: bool,
    ) -> Result<(FeatureSeq, Vec<(usize, OffsetField)>)> {
        self.check_input(x)?;
        let traces = self.run_layers(x)?;
        let hidden = traces.last().map(|t| &t.post).unwrap_or(x);
        let logits = tdnn_forward(hidden, &self.projection, &Self::projection_grid())?;

        let mut captured = Vec::new();
        if capture {
            for (idx, trace) in traces.iter().enumerate() {
                if let Some(fwd) = &trace.deform {
                    captured.push((idx, fwd.used_offsets.clone()));
                }
            }
        }
        Ok((logits, captured))
    }

    /// Backward pass: gradients of `sum(grad_logits * logits)` for every
    /// parameter group and for the input.
    pub fn backward(&self, x: &FeatureSeq, grad_logits: &FeatureSeq) -> Result<NetworkGrads> {
        self.check_input(x)?;
        let traces = self.run_layers(x)?;
        let hidden = traces.last().map(|t| &t.post).unwrap_or(x);

        let (mut grad_h, grad_proj) =
            tdnn_backward(hidden, &self.projection, &Self::projection_grid(), grad_logits)?;

        // Walk the stack backwards collecting per-layer gradients.
        let mut per_layer: Vec<(Option<ConvParams>, ConvParams)> =
            Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = if idx == 0 { x } else { &traces[idx - 1].post };
            let trace = &traces[idx];
            let grad_pre = match layer.activation {
                Activation::Relu => relu_backward(&trace.pre, &grad_h),
                Activation::None => grad_h,
            };
            match &layer.op {
                LayerOp::Standard { params, grid } => {
                    let (gx, gp) = tdnn_backward(input, params, grid, &grad_pre)?;
                    per_layer.push((None, gp));
                    grad_h = gx;
                }
                LayerOp::Deformable(d) => {
                    let fwd = trace.deform.as_ref().expect("deformable trace");
                    let grads = d.backward(input, fwd, &grad_pre)?;
                    per_layer.push((Some(grads.predictor), grads.params));
                    grad_h = grads.input;
                }
            }
        }
        per_layer.reverse();

        let mut store = GradStore::default();
        for (idx, (predictor, main)) in per_layer.into_iter().enumerate() {
            store.push(format!("layers.{idx}.weight"), main.weights().to_vec());
            store.push(format!("layers.{idx}.bias"), main.bias().to_vec());
            if let Some(pred) = predictor {
                store.push(format!("layers.{idx}.offset.weight"), pred.weights().to_vec());
                store.push(format!("layers.{idx}.offset.bias"), pred.bias().to_vec());
            }
        }
        store.push("projection.weight".to_string(), grad_proj.weights().to_vec());
        store.push("projection.bias".to_string(), grad_proj.bias().to_vec());

        Ok(NetworkGrads { params: store, input: grad_h })
    }

    /// Whether every offset the network uses on `x` keeps its sampling
    /// position at least `margin` from the interpolation kinks, and every
    /// raw offset at least `margin` from the clip boundary. Constant-offset
    /// predictors (zero weights) are exempt: their positions cannot move.
    pub fn offsets_are_kink_safe(&self, x: &FeatureSeq, margin: f64) -> bool {
        let traces = match self.run_layers(x) {
            Ok(t) => t,
            Err(_) => return false,
        };
        for (trace, layer) in traces.iter().zip(&self.layers) {
            let Some(fwd) = &trace.deform else { continue };
            if let LayerOp::Deformable(d) = &layer.op {
                if d.predictor.params().weights().iter().all(|w| *w == 0.0) {
                    continue;
                }
            }
            for (used, raw) in fwd.used_offsets.values().iter().zip(fwd.raw_offsets.values()) {
                if *used != 0.0 && (used - used.round()).abs() < margin {
                    return false;
                }
                if raw.abs() < margin {
                    return false;
                }
            }
        }
        true
    }

    /// Whether `x` is a well-conditioned probe for finite-difference checks:
    /// every relu input sits away from zero, every nonzero offset keeps its
    /// sampling position away from integers, and raw offsets sit away from
    /// the clip boundary.
    pub fn probe_is_nondegenerate(&self, x: &FeatureSeq) -> bool {
        let traces = match self.run_layers(x) {
            Ok(t) => t,
            Err(_) => return false,
        };
        for trace in &traces {
            if trace.pre.as_slice().iter().any(|v| v.abs() < 1e-3) {
                return false;
            }
            if let Some(fwd) = &trace.deform {
                for (used, raw) in fwd.used_offsets.values().iter().zip(fwd.raw_offsets.values())
                {
                    if *used != 0.0 && (used - used.round()).abs() < 0.02 {
                        return false;
                    }
                    if raw.abs() < 0.02 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// The 7-layer stack with the published kernel/dilation/stride schedule
/// (kernels 5,5,5,3,5,5,5; dilations 1,2,2,1,1,1,2; strides 1,1,1,3,1,1,1)
/// at a configurable hidden width.
pub fn seven_layer_config(
    input_dim: usize,
    output_dim: usize,
    hidden: usize,
    deformable_last_k: usize,
    clip_mode: ClipMode,
    seed: u64,
) -> NetworkConfig {
    let kernels = [5usize, 5, 5, 3, 5, 5, 5];
    let dilations = [1usize, 2, 2, 1, 1, 1, 2];
    let strides = [1usize, 1, 1, 3, 1, 1, 1];
    let mut layers = Vec::with_capacity(7);
    let mut in_ch = input_dim;
    for i in 0..7 {
        layers.push(LayerSpec {
            kernel_size: kernels[i],
            dilation: dilations[i],
            stride: strides[i],
            in_channels: in_ch,
            out_channels: hidden,
            kind: LayerKind::Standard,
            clip_mode,
            activation: Activation::Relu,
            offset_kernel: DEFAULT_OFFSET_KERNEL,
            max_offset: None,
        });
        in_ch = hidden;
    }
    NetworkConfig { input_dim, output_dim, layers, deformable_last_k, seed }
}
