//! The sound-only student detector: a small five-stage strided-conv
//! backbone with swish activations, feature taps at strides 8/16/32
//! (P3/P4/P5), and per-level 1x1 classification and box-regression heads.
//! Also hosts the pretext head (global pooling into a two-layer MLP over
//! object-count classes), box delta encoding/decoding, and checkpoint I/O.
//!
//! The default configuration is deliberately tiny (a dozen thousand
//! parameters) so the full training loop runs on one core in seconds;
//! capacity scales through [`StudentConfig::stage_widths`].

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};

use crate::attention::l2_normalize_node;
use crate::boxes::{generate_anchors, AnchorConfig, BBox, LevelAnchors, PyramidLevel};
use crate::container::{load_param_set, save_param_set};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::tensor::Tensor;

/// Largest magnitude accepted for log-size deltas before `exp`; keeps an
/// untrained box head from emitting astronomically sized boxes.
pub const MAX_SIZE_DELTA: f64 = 4.0;

/// Architecture and decoding hyperparameters.
#[derive(Debug, Clone)]
pub struct StudentConfig {
    /// Spectrogram channels fed to the first conv (microphone count).
    pub input_channels: usize,
    /// Input height/width in pixels; detection coordinates live in this
    /// frame too. Must be divisible by 32 so the pyramid grids nest.
    pub input_hw: (usize, usize),
    /// Output channels of the five backbone stages (each stage halves the
    /// spatial size). Taps for P3/P4/P5 come after stages 3, 4, 5.
    pub stage_widths: [usize; 5],
    pub kernel_size: usize,
    /// Hidden width of the pretext MLP.
    pub pretext_hidden: usize,
    /// Pretext classes: object counts 0..=K fold into K+1 buckets.
    pub pretext_classes: usize,
    /// Prior foreground probability used to initialize the cls-head bias
    /// to `-ln((1 - p) / p)`.
    pub prior_prob: f64,
    pub anchors: AnchorConfig,
    /// Concatenate two constant coordinate-ramp channels (x and y in
    /// [0, 1]) to the spectrogram before the first conv. Inter-channel
    /// level cues say where a sound source is, but a purely convolutional
    /// head has no sense of its own absolute grid position; the ramps
    /// supply it.
    pub coordinate_channels: bool,
    /// Decoded boxes below this score are dropped before NMS.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            input_channels: 8,
            input_hw: (96, 96),
            stage_widths: [8, 8, 16, 16, 32],
            kernel_size: 3,
            pretext_hidden: 16,
            pretext_classes: 5,
            prior_prob: 0.01,
            anchors: AnchorConfig::default(),
            coordinate_channels: true,
            score_threshold: 0.3,
            nms_iou: 0.5,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be divisible by 32"
            )));
        }
        if self.input_channels == 0 || self.stage_widths.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.pretext_hidden == 0 || self.pretext_classes < 2 {
            return Err(Error::invalid("pretext head too small"));
        }
        if !(0.0..1.0).contains(&self.prior_prob) || self.prior_prob <= 0.0 {
            return Err(Error::invalid("prior_prob must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::invalid("score_threshold must lie in [0, 1]"));
        }
        if !(0.0 < self.nms_iou && self.nms_iou <= 1.0) {
            return Err(Error::invalid("nms_iou must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Tap widths for P3/P4/P5 in level order.
    pub fn tap_widths(&self) -> [usize; 3] {
        [
            self.stage_widths[2],
            self.stage_widths[3],
            self.stage_widths[4],
        ]
    }

    pub fn cls_bias_init(&self) -> f64 {
        -((1.0 - self.prior_prob) / self.prior_prob).ln()
    }

    /// (grid_height, grid_width) of a pyramid level for this input size.
    pub fn grid_hw(&self, level: PyramidLevel) -> (usize, usize) {
        let s = level.stride();
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }
}

/// Leaf name of the stacked-spectrogram input.
pub const INPUT_NAME: &str = "spectrogram";

fn stage_weight(i: usize) -> String {
    format!("backbone.stage{i}.weight")
}

fn stage_bias(i: usize) -> String {
    format!("backbone.stage{i}.bias")
}

fn head_name(level: PyramidLevel, head: &str, part: &str) -> String {
    format!("head.{level}.{head}.{part}")
}

/// Build the shared backbone inside `gb`; returns the P3/P4/P5 tap nodes.
fn build_backbone(gb: &mut GraphBuilder, cfg: &StudentConfig) -> Result<[NodeId; 3]> {
    let (h, w) = cfg.input_hw;
    let x = gb.input(INPUT_NAME, vec![cfg.input_channels, h, w])?;
    let k = cfg.kernel_size;
    let pad = k / 2;
    let (mut cur, mut in_ch) = if cfg.coordinate_channels {
        let mut xs = vec![0.0; h * w];
        let mut ys = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                xs[row * w + col] = (col as f64 + 0.5) / w as f64;
                ys[row * w + col] = (row as f64 + 0.5) / h as f64;
            }
        }
        let xr = gb.constant(Tensor::new(vec![1, h, w], xs)?);
        let yr = gb.constant(Tensor::new(vec![1, h, w], ys)?);
        let stacked = gb.concat_channels(&[x, xr, yr])?;
        (stacked, cfg.input_channels + 2)
    } else {
        (x, cfg.input_channels)
    };
    let mut taps = Vec::with_capacity(3);
    #[allow(clippy::needless_range_loop)]
    for (i, &out_ch) in cfg.stage_widths.iter().enumerate() {
        let weight = gb.param(&stage_weight(i + 1), vec![out_ch, in_ch, k, k])?;
        let bias = gb.param(&stage_bias(i + 1), vec![out_ch])?;
        let conv = gb.conv2d(cur, weight, Some(bias), 2, pad)?;
        cur = gb.swish(conv);
        if i >= 2 {
            taps.push(cur);
        }
        in_ch = out_ch;
    }
    Ok([taps[0], taps[1], taps[2]])
}

/// Detection graph: backbone plus per-level heads. Outputs per level
/// `act.P*` (tap activations, for attention), `cls.P*` (sigmoid
/// probabilities, `9 x gh x gw`), and `box.P*` (deltas, `36 x gh x gw`).
pub fn build_detect_graph(cfg: &StudentConfig) -> Result<GraphBuilder> {
    cfg.validate()?;
    let mut gb = GraphBuilder::new();
    let taps = build_backbone(&mut gb, cfg)?;
    let per_cell = AnchorConfig::ANCHORS_PER_CELL;
    for (idx, level) in PyramidLevel::ALL.iter().enumerate() {
        let tap = taps[idx];
        let width = cfg.tap_widths()[idx];
        gb.mark_output(&format!("act.{level}"), tap);

        let cls_w = gb.param(&head_name(*level, "cls", "weight"), vec![per_cell, width, 1, 1])?;
        let cls_b = gb.param(&head_name(*level, "cls", "bias"), vec![per_cell])?;
        let cls_logits = gb.conv2d(tap, cls_w, Some(cls_b), 1, 0)?;
        let cls = gb.sigmoid(cls_logits);
        gb.mark_output(&format!("cls.{level}"), cls);

        let box_w = gb.param(&head_name(*level, "box", "weight"), vec![4 * per_cell, width, 1, 1])?;
        let box_b = gb.param(&head_name(*level, "box", "bias"), vec![4 * per_cell])?;
        let boxes = gb.conv2d(tap, box_w, Some(box_b), 1, 0)?;
        gb.mark_output(&format!("box.{level}"), boxes);
    }
    Ok(gb)
}

/// Pretext graph: backbone, global average pool of the final stage, and a
/// two-layer swish MLP to `pretext_classes` logits (output
/// `pretext_logits`). A `pretext_onehot` no-grad input and scalar
/// cross-entropy loss are attached so the graph trains as-is.
pub fn build_pretext_graph(cfg: &StudentConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut gb = GraphBuilder::new();
    let taps = build_backbone(&mut gb, cfg)?;
    let pooled = gb.global_avg_pool(taps[2])?;
    // L2-normalize the pooled vector so the classifier only sees feature
    // *direction*. This closes the shortcut of encoding the object count in
    // global activation magnitude, which would leave the backbone spatially
    // uninformative and inflate its scale — and a scale-drifted backbone is
    // a poor warm start for detection heads initialized for fresh-scale
    // inputs (there are no normalization layers to absorb the difference).
    let pooled = l2_normalize_node(&mut gb, pooled)?;
    let c5 = cfg.stage_widths[4];
    let w1 = gb.param("pretext.fc1.weight", vec![cfg.pretext_hidden, c5])?;
    let b1 = gb.param("pretext.fc1.bias", vec![cfg.pretext_hidden])?;
    let h1 = gb.dense(w1, pooled)?;
    let h1 = gb.add(h1, b1)?;
    let h1 = gb.swish(h1);
    let w2 = gb.param("pretext.fc2.weight", vec![cfg.pretext_classes, cfg.pretext_hidden])?;
    let b2 = gb.param("pretext.fc2.bias", vec![cfg.pretext_classes])?;
    let logits = gb.dense(w2, h1)?;
    let logits = gb.add(logits, b2)?;
    gb.mark_output("pretext_logits", logits);

    let onehot = gb.input_no_grad("pretext_onehot", vec![cfg.pretext_classes])?;
    let probs = gb.softmax_t(logits, 1.0)?;
    let log_probs = gb.log(probs);
    let picked = gb.mul(log_probs, onehot)?;
    let nll = gb.sum(picked);
    let loss = gb.scale_const(nll, -1.0)?;
    gb.build_with_loss(loss)
}

/// Uniform Kaiming-style initialization for every parameter; cls-head
/// biases start at the prior-probability logit, all other biases at zero.
pub fn init_params(cfg: &StudentConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Shapes come from the graph itself so init can never drift from it.
    let gb = build_detect_graph(cfg)?;
    let detect = gb.build();
    let pretext = build_pretext_graph(cfg)?;

    let mut params = BTreeMap::new();
    let mut add_from = |graph: &Graph, params: &mut BTreeMap<String, Tensor>| -> Result<()> {
        for name in graph.param_names() {
            if params.contains_key(&name) {
                continue;
            }
            let shape = graph.leaf_shape(&name)?.to_vec();
            let tensor = if name.ends_with(".bias") {
                if name.contains(".cls.") {
                    Tensor::full(shape, cfg.cls_bias_init())?
                } else {
                    Tensor::zeros(shape)
                }
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        Ok(())
    };
    add_from(&detect, &mut params)?;
    add_from(&pretext, &mut params)?;
    Ok(params)
}

/// Root-mean-square of a tensor's entries; 0 for empty tensors.
fn weight_rms(t: &Tensor) -> f64 {
    if t.numel() == 0 {
        return 0.0;
    }
    t.l2_norm() / (t.numel() as f64).sqrt()
}

/// Fresh parameters whose backbone is copied from a pretext checkpoint.
/// Head parameters are re-initialized and the pretext MLP is discarded.
///
/// Copied weight tensors are rescaled to the fresh initializer's RMS.
/// Pretext training drifts weight magnitudes, and with no normalization
/// layers the drift compounds through the stages, landing the fresh heads
/// outside the operating range their initialization assumes. Rescaling
/// restores that range while preserving the learned feature directions
/// exactly. Biases are copied as-is (the fresh initializer zeroes them, so
/// there is no meaningful scale to restore).
pub fn init_from_pretext(
    cfg: &StudentConfig,
    pretext_params: &BTreeMap<String, Tensor>,
    seed: u64,
) -> Result<BTreeMap<String, Tensor>> {
    let mut params = init_params(cfg, seed)?;
    params.retain(|name, _| !name.starts_with("pretext."));
    for (name, value) in pretext_params {
        if !name.starts_with("backbone.") {
            continue;
        }
        match params.get(name) {
            Some(existing) if existing.shape() == value.shape() => {
                let mut copied = value.clone();
                if name.ends_with(".weight") {
                    let target = weight_rms(existing);
                    let actual = weight_rms(&copied);
                    if actual > 0.0 {
                        let scale = target / actual;
                        for v in copied.data_mut() {
                            *v *= scale;
                        }
                    }
                }
                params.insert(name.clone(), copied);
            }
            Some(existing) => {
                return Err(Error::ShapeMismatch {
                    context: format!("init_from_pretext {name}"),
                    expected: existing.shape().to_vec(),
                    actual: value.shape().to_vec(),
                });
            }
            None => return Err(Error::UnknownLeaf(name.clone())),
        }
    }
    Ok(params)
}

/// Rescale the backbone of `params` so its tap activations match the
/// activation RMS of `reference` on the given spectrograms, level by level.
///
/// Weight-space RMS matching (see [`init_from_pretext`]) cannot fully
/// restore activation scale: trained filters correlate with the input, so
/// they respond more strongly than fresh filters of equal norm. This pass
/// measures the response directly and folds the correction into each
/// stage's weight and bias, preserving feature directions. A handful of
/// spectrograms is enough; the fixed point converges in a few sweeps
/// because the corrections start near 1.
pub fn calibrate_backbone_scales(
    cfg: &StudentConfig,
    params: &mut BTreeMap<String, Tensor>,
    reference: &BTreeMap<String, Tensor>,
    spectrograms: &[Tensor],
) -> Result<()> {
    if spectrograms.is_empty() {
        return Err(Error::invalid(
            "backbone calibration needs at least one spectrogram",
        ));
    }
    // Mean per-level tap RMS over the calibration clips.
    let tap_rms = |param_set: &BTreeMap<String, Tensor>| -> Result<[f64; 3]> {
        let graph = build_detect_graph(cfg)?.build();
        let mut kept = BTreeMap::new();
        for name in graph.param_names() {
            let t = param_set
                .get(&name)
                .ok_or_else(|| Error::MissingBinding(name.clone()))?;
            kept.insert(name, t.clone());
        }
        let model = StudentModel::from_params(cfg.clone(), kept)?;
        let mut acc = [0.0; 3];
        for s in spectrograms {
            let out = model.forward(s)?;
            for (slot, (_, act)) in out.activations.iter().enumerate() {
                acc[slot] += weight_rms(act);
            }
        }
        for a in &mut acc {
            *a /= spectrograms.len() as f64;
        }
        Ok(acc)
    };

    let target = tap_rms(reference)?;
    for _ in 0..4 {
        let actual = tap_rms(params)?;
        let mut ratios = [0.0; 3];
        for (slot, ratio) in ratios.iter_mut().enumerate() {
            if !(target[slot] > 0.0 && actual[slot] > 0.0) {
                return Err(Error::invalid(
                    "backbone calibration hit a dead pyramid level",
                ));
            }
            *ratio = target[slot] / actual[slot];
        }
        if ratios.iter().all(|r| (r - 1.0).abs() < 0.01) {
            break;
        }
        // Each tap sees the product of all upstream corrections, so a
        // stage only applies the residual its own level still needs.
        let mut upstream = 1.0;
        for (slot, stage) in (3..=5).enumerate() {
            let local = ratios[slot] / upstream;
            for kind in ["weight", "bias"] {
                let name = format!("backbone.stage{stage}.{kind}");
                let t = params
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                for v in t.data_mut() {
                    *v *= local;
                }
            }
            upstream = ratios[slot];
        }
    }
    Ok(())
}

/// Per-level raw outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct StudentOutputs {
    /// Backbone tap activations, `channels x gh x gw`, level order.
    pub activations: Vec<(PyramidLevel, Tensor)>,
    /// Sigmoid foreground probabilities, `9 x gh x gw`.
    pub cls: Vec<(PyramidLevel, Tensor)>,
    /// Box deltas `(dx, dy, dw, dh)` interleaved per anchor, `36 x gh x gw`.
    pub boxes: Vec<(PyramidLevel, Tensor)>,
}

/// Inference-oriented wrapper holding a configuration and parameter set.
#[derive(Debug)]
pub struct StudentModel {
    cfg: StudentConfig,
    params: BTreeMap<String, Tensor>,
    graph: Graph,
    anchors: Vec<LevelAnchors>,
}

impl StudentModel {
    pub fn new(cfg: StudentConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: StudentConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let graph = build_detect_graph(&cfg)?.build();
        for name in graph.param_names() {
            let expected = graph.leaf_shape(&name)?;
            match params.get(&name) {
                Some(t) if t.shape() == expected => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        context: format!("param {name}"),
                        expected: expected.to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                None => return Err(Error::MissingBinding(name)),
            }
        }
        let (h, w) = cfg.input_hw;
        let anchors = generate_anchors(&cfg.anchors, (w, h))?;
        Ok(Self {
            cfg,
            params,
            graph,
            anchors,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn anchors(&self) -> &[LevelAnchors] {
        &self.anchors
    }

    /// Run the detection graph on one stacked spectrogram.
    pub fn forward(&self, spectrogram: &Tensor) -> Result<StudentOutputs> {
        let mut bindings = self.params.clone();
        bindings.insert(INPUT_NAME.to_string(), spectrogram.clone());
        let exec = self.graph.forward(&bindings)?;
        let mut outputs = StudentOutputs {
            activations: Vec::with_capacity(3),
            cls: Vec::with_capacity(3),
            boxes: Vec::with_capacity(3),
        };
        for level in PyramidLevel::ALL {
            outputs
                .activations
                .push((level, exec.output(&format!("act.{level}"))?.clone()));
            outputs
                .cls
                .push((level, exec.output(&format!("cls.{level}"))?.clone()));
            outputs
                .boxes
                .push((level, exec.output(&format!("box.{level}"))?.clone()));
        }
        Ok(outputs)
    }

    /// Forward, decode, clip to the input frame, and fuse with NMS.
    pub fn detect(&self, spectrogram: &Tensor) -> Result<Vec<BBox>> {
        let outputs = self.forward(spectrogram)?;
        decode_detections(&outputs, &self.anchors, &self.cfg)
    }
}

/// Box deltas for regressing `anchor` onto `gt`: center offsets are in
/// units of the anchor size, extents are log ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Invert [`encode_box`]. Log-size deltas are clamped to
/// [`MAX_SIZE_DELTA`] so untrained heads cannot overflow.
pub fn decode_box(anchor: &BBox, delta: [f64; 4], score: f64, class_id: u32) -> Result<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + delta[0] * anchor.width();
    let cy = acy + delta[1] * anchor.height();
    let w = anchor.width() * delta[2].clamp(-MAX_SIZE_DELTA, MAX_SIZE_DELTA).exp();
    let h = anchor.height() * delta[3].clamp(-MAX_SIZE_DELTA, MAX_SIZE_DELTA).exp();
    BBox::new(
        cx - 0.5 * w,
        cy - 0.5 * h,
        cx + 0.5 * w,
        cy + 0.5 * h,
        score,
        class_id,
    )
}

/// Turn raw head outputs into boxes: threshold on the sigmoid score,
/// decode against the matching anchor, clip to the input frame, and run
/// NMS across all levels at once.
pub fn decode_detections(
    outputs: &StudentOutputs,
    anchors: &[LevelAnchors],
    cfg: &StudentConfig,
) -> Result<Vec<BBox>> {
    let per_cell = AnchorConfig::ANCHORS_PER_CELL;
    let (img_h, img_w) = cfg.input_hw;
    let mut candidates = Vec::new();
    for (idx, level_anchors) in anchors.iter().enumerate() {
        let (_, cls) = &outputs.cls[idx];
        let (_, deltas) = &outputs.boxes[idx];
        let (gh, gw) = (level_anchors.grid_height, level_anchors.grid_width);
        if cls.shape() != [per_cell, gh, gw] || deltas.shape() != [4 * per_cell, gh, gw] {
            return Err(Error::ShapeMismatch {
                context: format!("decode_detections {}", level_anchors.level),
                expected: vec![per_cell, gh, gw],
                actual: cls.shape().to_vec(),
            });
        }
        for y in 0..gh {
            for x in 0..gw {
                for a in 0..per_cell {
                    let score = cls.at3(a, y, x);
                    if score < cfg.score_threshold {
                        continue;
                    }
                    let delta = [
                        deltas.at3(4 * a, y, x),
                        deltas.at3(4 * a + 1, y, x),
                        deltas.at3(4 * a + 2, y, x),
                        deltas.at3(4 * a + 3, y, x),
                    ];
                    let anchor = &level_anchors.anchors[(y * gw + x) * per_cell + a];
                    let decoded = decode_box(anchor, delta, score.clamp(0.0, 1.0), 0)?;
                    if let Some(clipped) = decoded.clipped(img_w as f64, img_h as f64) {
                        candidates.push(clipped);
                    }
                }
            }
        }
    }
    crate::boxes::nms(&candidates, cfg.nms_iou)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Everything needed to resume training: parameters, Adam moments, the
/// step counter, and caller metadata (config snapshot, validation loss).
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub opt_m: BTreeMap<String, Tensor>,
    pub opt_v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

const PARAM_PREFIX: &str = "param.";
const ADAM_M_PREFIX: &str = "adam_m.";
const ADAM_V_PREFIX: &str = "adam_v.";

/// Write a checkpoint as one tensor container plus a JSON manifest.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut merged = BTreeMap::new();
    for (name, t) in &ckpt.params {
        merged.insert(format!("{PARAM_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &ckpt.opt_m {
        merged.insert(format!("{ADAM_M_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &ckpt.opt_v {
        merged.insert(format!("{ADAM_V_PREFIX}{name}"), t.clone());
    }
    let mut metadata = ckpt.metadata.clone();
    metadata.insert("step".into(), serde_json::json!(ckpt.step));
    save_param_set(path, &merged, metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (merged, sidecar) = load_param_set(path)?;
    let mut ckpt = Checkpoint {
        metadata: sidecar.metadata,
        ..Checkpoint::default()
    };
    ckpt.step = ckpt
        .metadata
        .remove("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(path, "checkpoint manifest missing step"))?;
    for (name, t) in merged {
        if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
            ckpt.params.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(ADAM_M_PREFIX) {
            ckpt.opt_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(ADAM_V_PREFIX) {
            ckpt.opt_v.insert(rest.to_string(), t);
        } else {
            return Err(Error::format(path, format!("unknown record {name}")));
        }
    }
    Ok(ckpt)
}
