//! Training harness: synthetic dataset assembly, Adam with decoupled
//! weight decay, a reduce-on-plateau schedule, and the train / pretext /
//! evaluate / sweep entry points the command-line tool wraps.
//!
//! Supervision is self-supervised throughout: anchor labels and box
//! targets come from the *fused teacher detections*, never from scene
//! ground truth. Ground truth is carried alongside purely so held-out
//! evaluation can score the student against reality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attention_map_with_mode, l2_normalize, write_pgm, AttentionMap};
use crate::audio::{spectrogram_pipeline, WaveClip};
use crate::boxes::{
    assign_targets, fuse_teachers, AnchorLabel, DetectionSet, Modality, PyramidLevel,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::losses::{
    focal_loss_node, mta_loss_node, smooth_l1_node, teacher_mta_targets, total_loss_node,
    LossConfig,
};
use crate::metrics::{evaluate_detections, mot_metrics, EvalReport};
use crate::student::{
    build_detect_graph, build_pretext_graph, calibrate_backbone_scales, encode_box,
    init_from_pretext, init_params, StudentConfig, StudentModel, INPUT_NAME,
};
use crate::synth::{generate_scene, SceneData};
use crate::tensor::Tensor;
use crate::tracker::{run_tracker, track_records, TrackRecord};

// ---------------------------------------------------------------------------
// optimizer configuration
// ---------------------------------------------------------------------------

/// Optimizer and schedule hyperparameters. The defaults are the published
/// large-scale values; [`RunConfig`](crate::config::RunConfig) presets may
/// override them (the desk preset raises the learning rate to suit its
/// much smaller model).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate when validation loss
    /// plateaus.
    pub scheduler_factor: f64,
    /// Consecutive non-improving epochs tolerated before a reduction.
    pub scheduler_patience: usize,
    /// Train / validation / test fractions; must sum to one.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 50,
            batch_size: 8,
            scheduler_factor: 0.1,
            scheduler_patience: 3,
            split: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            adam_beta1: cfg.adam_beta1,
            adam_beta2: cfg.adam_beta2,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            scheduler_factor: cfg.scheduler_factor,
            scheduler_patience: cfg.scheduler_patience,
            split: (cfg.split_train, cfg.split_val, cfg.split_test),
            seed: cfg.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("adam {name} {b} outside [0, 1)")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(Error::invalid(format!(
                "scheduler factor {} outside (0, 1)",
                self.scheduler_factor
            )));
        }
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions ({a}, {b}, {c}) must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Deterministically split `n` items into train / validation / test index
/// sets. Validation and test sizes are rounded down; the remainder goes to
/// train, so 10 items at (0.6, 0.2, 0.2) give 6 / 2 / 2. The shuffle is a
/// pure function of `seed`.
pub fn split_dataset(
    n: usize,
    split: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a, b, c) = split;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * b).floor() as usize;
    let n_test = (n as f64 * c).floor() as usize;
    let n_train = n - n_val - n_test;
    let val = idx.split_off(n_train + n_val);
    let train_val = idx;
    let (train, val_set) = {
        let mut t = train_val;
        let v = t.split_off(n_train);
        (t, v)
    };
    Ok((train, val_set, val))
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias-corrected moments and *decoupled* weight
/// decay: the decay term `lr * wd * p` is subtracted directly from the
/// parameter and never enters the moment estimates. Consequences relied on
/// elsewhere: a zero learning rate changes nothing, and a zero gradient
/// changes a parameter only through the decay term.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("adam_step: no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("adam_step gradient for {name}"),
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] =
                pi - cfg.learning_rate * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * pi);
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule: after `patience` consecutive
/// epochs without the monitored value improving, multiply the rate by
/// `factor`. The rate never increases.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::invalid(format!("factor {factor} outside (0, 1)")));
        }
        Ok(Self {
            lr: initial_lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's monitored value; returns true if the rate was just
    /// reduced.
    pub fn observe(&mut self, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

/// One training sample: a spectrogram stack, the fused-teacher supervision
/// derived from it, and the ground truth kept aside for evaluation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Human-readable origin, e.g. `scene0003/frame01`.
    pub id: String,
    /// Globally unique frame id used by the metrics.
    pub frame_id: u64,
    pub scene_index: usize,
    /// Frame number within the scene (tracker input).
    pub scene_frame: u64,
    /// `[channels, size, size]`, normalized to `[0, 1]`.
    pub spectrogram: Tensor,
    /// Fused teacher detections: the training signal.
    pub pseudo_labels: DetectionSet,
    /// Scene ground truth; evaluation only, never trained on. Box `k`
    /// belongs to scene object `k`, which gives evaluation its track ids.
    pub ground_truth: DetectionSet,
    /// Per level: flattened L2-normalized teacher attention product.
    pub teacher_mta: Vec<(PyramidLevel, Tensor)>,
    /// Fused-teacher box count clamped to the pretext class range.
    pub pretext_class: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
}

/// Generate the synthetic scene a run config assigns to `scene_index`,
/// including the seeded per-scene object-count draw. This is the exact
/// scene the dataset builder uses for that index.
pub fn scene_for_index(cfg: &RunConfig, scene_index: usize) -> Result<SceneData> {
    let mut scene_cfg = cfg.scene_config(scene_index);
    let mut object_rng = ChaCha8Rng::seed_from_u64(scene_cfg.seed ^ 0x6f626a73); // "objs"
    scene_cfg.num_objects = object_rng.gen_range(cfg.min_objects..=cfg.max_objects);
    generate_scene(&scene_cfg)
}

/// Synthesize the full dataset a config describes: scenes, spectrograms,
/// fused pseudo-labels, and attention targets. Deterministic in the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let stft = cfg.stft_config();
    let loss_cfg = cfg.loss_config();
    let size = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.scenes * cfg.frames_per_scene);
    let mut frame_counter = 0u64;
    for scene_index in 0..cfg.scenes {
        let scene = scene_for_index(cfg, scene_index)?;
        for frame in &scene.frames {
            let teachers: Vec<_> = frame
                .teachers
                .iter()
                .filter(|t| cfg.teachers.contains(&t.modality))
                .collect();
            if teachers.len() != cfg.teachers.len() {
                return Err(Error::invalid(format!(
                    "scene {scene_index} is missing a requested teacher modality"
                )));
            }
            let detection_sets: Vec<DetectionSet> =
                teachers.iter().map(|t| t.detections.clone()).collect();
            let mut pseudo_labels = fuse_teachers(&detection_sets)?;
            let activation_stack: Vec<Vec<_>> =
                teachers.iter().map(|t| t.activations.clone()).collect();
            let teacher_mta = teacher_mta_targets(&activation_stack, &loss_cfg)?;

            let clip = WaveClip::new(
                frame.audio.channels[..cfg.channels].to_vec(),
                frame.audio.sample_rate,
                frame.audio.timestamp_ns,
            )?;
            let spectrogram = spectrogram_pipeline(&clip, &stft, (size, size))?;

            let mut ground_truth = frame.ground_truth.clone();
            pseudo_labels.frame_id = frame_counter;
            ground_truth.frame_id = frame_counter;
            let pretext_class = pseudo_labels
                .boxes
                .len()
                .min(cfg.pretext_classes.saturating_sub(1));
            samples.push(TrainSample {
                id: format!("scene{scene_index:04}/frame{:02}", frame.frame_id),
                frame_id: frame_counter,
                scene_index,
                scene_frame: frame.frame_id,
                spectrogram,
                pseudo_labels,
                ground_truth,
                teacher_mta,
                pretext_class,
            });
            frame_counter += 1;
        }
    }
    Ok(Dataset { samples })
}

// ---------------------------------------------------------------------------
// training graph
// ---------------------------------------------------------------------------

/// Name of the per-sample `1 / max(1, #positive)` normalizer input.
pub const INV_POSITIVE: &str = "inv_positive";

pub fn pos_mask_name(level: PyramidLevel) -> String {
    format!("pos_mask.{level}")
}
pub fn neg_mask_name(level: PyramidLevel) -> String {
    format!("neg_mask.{level}")
}
pub fn box_target_name(level: PyramidLevel) -> String {
    format!("box_target.{level}")
}
pub fn box_mask_name(level: PyramidLevel) -> String {
    format!("box_mask.{level}")
}
pub fn mta_target_name(level: PyramidLevel) -> String {
    format!("mta_target.{level}")
}

/// The student detection graph with the full distillation loss attached.
/// Outputs `loss.focal`, `loss.box`, `loss.detection`, `loss.mta`, and
/// `loss.total` are marked; the graph's designated loss is `loss.total`.
pub struct TrainGraph {
    pub graph: Graph,
    pub anchors: Vec<crate::boxes::LevelAnchors>,
    pub student: StudentConfig,
}

pub fn build_train_graph(s_cfg: &StudentConfig, l_cfg: &LossConfig) -> Result<TrainGraph> {
    s_cfg.validate()?;
    l_cfg.validate()?;
    let mut gb = build_detect_graph(s_cfg)?;
    let (h, w) = s_cfg.input_hw;
    let anchors = crate::boxes::generate_anchors(&s_cfg.anchors, (w, h))?;
    let inv_pos = gb.input_no_grad(INV_POSITIVE, vec![])?;

    let per_cell = crate::boxes::AnchorConfig::ANCHORS_PER_CELL;
    let mut focal_total: Option<NodeId> = None;
    let mut box_total: Option<NodeId> = None;
    let mut student_acts = Vec::new();
    let mut teacher_ins = Vec::new();
    for la in &anchors {
        let level = la.level;
        let (gh, gw) = (la.grid_height, la.grid_width);
        let n = per_cell * gh * gw;

        let cls = gb.output_node(&format!("cls.{level}"))?;
        let flat = gb.reshape(cls, vec![n])?;
        let pos = gb.input_no_grad(&pos_mask_name(level), vec![n])?;
        let neg = gb.input_no_grad(&neg_mask_name(level), vec![n])?;
        let focal = focal_loss_node(&mut gb, flat, pos, neg, inv_pos, l_cfg)?;
        focal_total = Some(match focal_total {
            Some(prev) => gb.add(prev, focal)?,
            None => focal,
        });

        let boxes = gb.output_node(&format!("box.{level}"))?;
        let target = gb.input_no_grad(&box_target_name(level), vec![4 * per_cell, gh, gw])?;
        let mask = gb.input_no_grad(&box_mask_name(level), vec![4 * per_cell, gh, gw])?;
        let diff = gb.sub(boxes, target)?;
        let masked = gb.mul(diff, mask)?;
        let sl = smooth_l1_node(&mut gb, masked)?;
        let summed = gb.sum(sl);
        let normalized = gb.scalar_scale(summed, inv_pos)?;
        box_total = Some(match box_total {
            Some(prev) => gb.add(prev, normalized)?,
            None => normalized,
        });

        let act = gb.output_node(&format!("act.{level}"))?;
        let target = gb.input_no_grad(&mta_target_name(level), vec![gh * gw])?;
        student_acts.push((level, act));
        teacher_ins.push((level, target));
    }
    let focal_total = focal_total.expect("at least one level");
    let box_total = box_total.expect("at least one level");
    let mta = mta_loss_node(&mut gb, &student_acts, &teacher_ins, l_cfg)?;
    let box_scaled = gb.scale_const(box_total, l_cfg.box_weight)?;
    let detection = gb.add(focal_total, box_scaled)?;
    let total = total_loss_node(&mut gb, detection, mta, l_cfg)?;
    gb.mark_output("loss.focal", focal_total);
    gb.mark_output("loss.box", box_scaled);
    gb.mark_output("loss.detection", detection);
    gb.mark_output("loss.mta", mta);
    gb.mark_output("loss.total", total);
    let graph = gb.build_with_loss(total)?;
    Ok(TrainGraph {
        graph,
        anchors,
        student: s_cfg.clone(),
    })
}

/// Per-sample input bindings for [`TrainGraph`]: the spectrogram, anchor
/// masks and box targets assigned against the *pseudo labels*, the shared
/// positive-count normalizer, and the teacher attention targets.
pub fn sample_bindings(sample: &TrainSample, tg: &TrainGraph) -> Result<Bindings> {
    let per_cell = crate::boxes::AnchorConfig::ANCHORS_PER_CELL;
    let mut bindings = Bindings::new();
    bindings.insert(INPUT_NAME.to_string(), sample.spectrogram.clone());

    let per_level: Vec<Vec<AnchorLabel>> = tg
        .anchors
        .iter()
        .map(|la| assign_targets(&la.anchors, &sample.pseudo_labels, &tg.student.anchors))
        .collect();
    let total_pos: usize = per_level
        .iter()
        .flatten()
        .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
        .count();
    bindings.insert(
        INV_POSITIVE.to_string(),
        Tensor::scalar(1.0 / total_pos.max(1) as f64)?,
    );

    for (la, labels) in tg.anchors.iter().zip(&per_level) {
        let (gh, gw) = (la.grid_height, la.grid_width);
        let n = per_cell * gh * gw;
        let mut pos = vec![0.0; n];
        let mut neg = vec![0.0; n];
        let mut target = vec![0.0; 4 * per_cell * gh * gw];
        let mut mask = vec![0.0; 4 * per_cell * gh * gw];
        for (ai, label) in labels.iter().enumerate() {
            let a = ai % per_cell;
            let cell = ai / per_cell;
            let (y, x) = (cell / gw, cell % gw);
            // the cls/box heads are laid out [channel, y, x]
            let flat = (a * gh + y) * gw + x;
            match label {
                AnchorLabel::Positive { gt_index } => {
                    pos[flat] = 1.0;
                    let deltas =
                        encode_box(&la.anchors[ai], &sample.pseudo_labels.boxes[*gt_index]);
                    for (d, &delta) in deltas.iter().enumerate() {
                        let ch = 4 * a + d;
                        target[(ch * gh + y) * gw + x] = delta;
                        mask[(ch * gh + y) * gw + x] = 1.0;
                    }
                }
                AnchorLabel::Negative => neg[flat] = 1.0,
                AnchorLabel::Ignore => {}
            }
        }
        bindings.insert(pos_mask_name(la.level), Tensor::new(vec![n], pos)?);
        bindings.insert(neg_mask_name(la.level), Tensor::new(vec![n], neg)?);
        bindings.insert(
            box_target_name(la.level),
            Tensor::new(vec![4 * per_cell, gh, gw], target)?,
        );
        bindings.insert(
            box_mask_name(la.level),
            Tensor::new(vec![4 * per_cell, gh, gw], mask)?,
        );
        let mta = sample
            .teacher_mta
            .iter()
            .find(|(level, _)| *level == la.level)
            .ok_or_else(|| {
                Error::invalid(format!("sample {} lacks MTA target {}", sample.id, la.level))
            })?;
        bindings.insert(mta_target_name(la.level), mta.1.clone());
    }
    Ok(bindings)
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One optimizer step's logged losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub focal: f64,
    pub mta: f64,
    pub total: f64,
    pub learning_rate: f64,
}

/// Per-epoch summary (means over batches, validation loss, rate in use).
#[derive(Debug, Clone)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<LossRow>,
    pub epochs: Vec<EpochStat>,
    pub final_params: BTreeMap<String, Tensor>,
    pub best_params: BTreeMap<String, Tensor>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub adam: AdamState,
}

/// Render loss rows as the canonical CSV (also what the run dir stores).
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,focal,mta,total,learning_rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.focal, r.mta, r.total, r.learning_rate
        );
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Keep only parameters the graph knows and verify the rest are complete
/// and correctly shaped.
fn conform_params(
    graph: &Graph,
    mut params: BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let names: BTreeSet<String> = graph.param_names().into_iter().collect();
    params.retain(|k, _| names.contains(k));
    for name in &names {
        let expected = graph.leaf_shape(name)?;
        match params.get(name) {
            Some(t) if t.shape() == expected => {}
            Some(t) => {
                return Err(Error::ShapeMismatch {
                    context: format!("param {name}"),
                    expected: expected.to_vec(),
                    actual: t.shape().to_vec(),
                })
            }
            None => return Err(Error::UnknownLeaf(name.clone())),
        }
    }
    Ok(params)
}

/// Initial parameters for detection training: fresh, or backbone-seeded
/// from a pretext parameter set. When a dataset is at hand, prefer
/// [`pretext_initial_params`] for the seeded case.
pub fn initial_params(
    cfg: &RunConfig,
    pretext: Option<&BTreeMap<String, Tensor>>,
) -> Result<BTreeMap<String, Tensor>> {
    let s_cfg = cfg.student_config();
    match pretext {
        Some(p) => init_from_pretext(&s_cfg, p, cfg.seed),
        None => init_params(&s_cfg, cfg.seed),
    }
}

/// How many dataset spectrograms [`pretext_initial_params`] measures when
/// calibrating backbone activation scale.
pub const CALIBRATION_CLIPS: usize = 8;

/// Pretext-seeded initial parameters, with the backbone's activation scale
/// calibrated against a fresh initialization on the first
/// [`CALIBRATION_CLIPS`] dataset spectrograms. The calibration removes the
/// scale drift pretext training leaves behind, so a seeded run starts from
/// the same operating point as a fresh one and differs only in features.
pub fn pretext_initial_params(
    cfg: &RunConfig,
    pretext: &BTreeMap<String, Tensor>,
    data: &Dataset,
) -> Result<BTreeMap<String, Tensor>> {
    if data.samples.is_empty() {
        return Err(Error::invalid("calibration needs a non-empty dataset"));
    }
    let s_cfg = cfg.student_config();
    let mut params = init_from_pretext(&s_cfg, pretext, cfg.seed)?;
    let reference = init_params(&s_cfg, cfg.seed)?;
    let clips: Vec<Tensor> = data
        .samples
        .iter()
        .take(CALIBRATION_CLIPS)
        .map(|s| s.spectrogram.clone())
        .collect();
    calibrate_backbone_scales(&s_cfg, &mut params, &reference, &clips)?;
    Ok(params)
}

/// Run the distillation training loop. `init` defaults to a fresh
/// seed-derived initialization. Aborts with a batch-naming error if any
/// forward pass produces a non-finite value.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    init: Option<BTreeMap<String, Tensor>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = TrainConfig::from_run(cfg);
    tc.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid("train on an empty dataset"));
    }
    let tg = build_train_graph(&cfg.student_config(), &cfg.loss_config())?;
    let (train_idx, val_idx, _test_idx) =
        split_dataset(data.samples.len(), tc.split, tc.seed)?;
    if train_idx.is_empty() {
        return Err(Error::invalid("split left no training samples"));
    }

    let init = match init {
        Some(p) => p,
        None => init_params(&cfg.student_config(), cfg.seed)?,
    };
    let mut params = conform_params(&tg.graph, init)?;

    // Bindings are pure per-sample data; precompute once.
    let mut cached: BTreeMap<usize, Bindings> = BTreeMap::new();
    for &i in train_idx.iter().chain(&val_idx) {
        cached.insert(i, sample_bindings(&data.samples[i], &tg)?);
    }

    let mut adam = AdamState::new();
    let mut scheduler = PlateauScheduler::new(tc.learning_rate, tc.scheduler_factor, tc.scheduler_patience)?;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut step = 0u64;

    let forward_sample = |params: &BTreeMap<String, Tensor>,
                          bindings: &Bindings,
                          context: &dyn Fn() -> String|
     -> Result<(f64, f64, f64, Bindings)> {
        let mut all = bindings.clone();
        for (k, v) in params {
            all.insert(k.clone(), v.clone());
        }
        let exec = tg.graph.forward(&all).map_err(|e| match e {
            Error::NonFinite(inner) => {
                Error::NonFinite(format!("{} hit a non-finite value ({inner})", context()))
            }
            other => other,
        })?;
        let total = exec.loss()?;
        let focal = exec.output("loss.focal")?.item()?;
        let mta = exec.output("loss.mta")?.item()?;
        drop(exec);
        Ok((total, focal, mta, all))
    };

    for epoch in 0..tc.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(tc.seed, epoch)));
        let mut epoch_totals = Vec::new();
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let mut grad_accum: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut total_sum, mut focal_sum, mut mta_sum) = (0.0, 0.0, 0.0);
            for &i in batch {
                let sample = &data.samples[i];
                let context = || {
                    format!(
                        "train batch {step} (epoch {epoch}, sample {})",
                        sample.id
                    )
                };
                let bindings = &cached[&i];
                let mut all = bindings.clone();
                for (k, v) in &params {
                    all.insert(k.clone(), v.clone());
                }
                let exec = tg.graph.forward(&all).map_err(|e| match e {
                    Error::NonFinite(inner) => Error::NonFinite(format!(
                        "{} hit a non-finite value ({inner})",
                        context()
                    )),
                    other => other,
                })?;
                let total = exec.loss()?;
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} produced total loss {total}",
                        context()
                    )));
                }
                total_sum += total;
                focal_sum += exec.output("loss.focal")?.item()?;
                mta_sum += exec.output("loss.mta")?.item()?;
                let grads = exec.backward()?;
                for (name, g) in grads.iter() {
                    if !params.contains_key(name) {
                        continue;
                    }
                    match grad_accum.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_accum.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let bn = batch.len() as f64;
            for g in grad_accum.values_mut() {
                for x in g.data_mut() {
                    *x /= bn;
                }
            }
            let lr = scheduler.lr();
            let step_cfg = TrainConfig {
                learning_rate: lr,
                ..tc.clone()
            };
            adam_step(&mut params, &grad_accum, &mut adam, &step_cfg)?;
            let row = LossRow {
                step,
                focal: focal_sum / bn,
                mta: mta_sum / bn,
                total: total_sum / bn,
                learning_rate: lr,
            };
            epoch_totals.push(row.total);
            history.push(row);
        }

        let train_loss = mean(&epoch_totals);
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let mut totals = Vec::with_capacity(val_idx.len());
            for &i in &val_idx {
                let context = || format!("validation (epoch {epoch}, sample {})", data.samples[i].id);
                let (total, _, _, _) = forward_sample(&params, &cached[&i], &context)?;
                totals.push(total);
            }
            mean(&totals)
        };
        epochs.push(EpochStat {
            epoch,
            train_loss,
            val_loss,
            learning_rate: scheduler.lr(),
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        scheduler.observe(val_loss);
    }

    Ok(TrainOutcome {
        history,
        epochs,
        final_params: params,
        best_params,
        best_val_loss,
        best_epoch,
        adam,
    })
}

// ---------------------------------------------------------------------------
// pretext pretraining
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PretextOutcome {
    /// Parameters at the best validation loss (backbone + pretext head).
    pub params: BTreeMap<String, Tensor>,
    /// Classification accuracy of those parameters on the validation split
    /// (train split if no validation samples exist).
    pub val_accuracy: f64,
    pub history: Vec<LossRow>,
    pub epochs: Vec<EpochStat>,
}

fn onehot(class: usize, classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes];
    let slot = data
        .get_mut(class)
        .ok_or_else(|| Error::invalid(format!("class {class} outside 0..{classes}")))?;
    *slot = 1.0;
    Tensor::new(vec![classes], data)
}

/// Self-supervised warm-up: classify how many fused-teacher boxes a frame
/// contains (clamped to the class range). Returns backbone + head
/// parameters at the best validation loss, plus that parameter set's
/// validation accuracy.
pub fn pretrain_pretext(cfg: &RunConfig, data: &Dataset) -> Result<PretextOutcome> {
    cfg.validate()?;
    let tc = TrainConfig::from_run(cfg);
    tc.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid("pretext training on an empty dataset"));
    }
    let s_cfg = cfg.student_config();
    let graph = build_pretext_graph(&s_cfg)?;
    let (train_idx, val_idx, _test) = split_dataset(data.samples.len(), tc.split, tc.seed)?;
    if train_idx.is_empty() {
        return Err(Error::invalid("split left no training samples"));
    }
    let mut params = conform_params(&graph, init_params(&s_cfg, cfg.seed)?)?;

    let forward = |params: &BTreeMap<String, Tensor>, i: usize| -> Result<_> {
        let sample = &data.samples[i];
        let mut bindings = Bindings::new();
        bindings.insert(INPUT_NAME.to_string(), sample.spectrogram.clone());
        bindings.insert(
            "pretext_onehot".to_string(),
            onehot(sample.pretext_class, s_cfg.pretext_classes)?,
        );
        for (k, v) in params {
            bindings.insert(k.clone(), v.clone());
        }
        graph.forward(&bindings)
    };

    let mut adam = AdamState::new();
    let mut scheduler =
        PlateauScheduler::new(tc.learning_rate, tc.scheduler_factor, tc.scheduler_patience)?;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut step = 0u64;

    for epoch in 0..tc.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(tc.seed, epoch)));
        let mut epoch_totals = Vec::new();
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let mut grad_accum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut total_sum = 0.0;
            for &i in batch {
                let exec = forward(&params, i).map_err(|e| match e {
                    Error::NonFinite(inner) => Error::NonFinite(format!(
                        "pretext batch {step} (epoch {epoch}, sample {}) hit a non-finite value ({inner})",
                        data.samples[i].id
                    )),
                    other => other,
                })?;
                total_sum += exec.loss()?;
                let grads = exec.backward()?;
                for (name, g) in grads.iter() {
                    if !params.contains_key(name) {
                        continue;
                    }
                    match grad_accum.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_accum.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let bn = batch.len() as f64;
            for g in grad_accum.values_mut() {
                for x in g.data_mut() {
                    *x /= bn;
                }
            }
            let lr = scheduler.lr();
            let step_cfg = TrainConfig {
                learning_rate: lr,
                ..tc.clone()
            };
            adam_step(&mut params, &grad_accum, &mut adam, &step_cfg)?;
            let total = total_sum / bn;
            epoch_totals.push(total);
            history.push(LossRow {
                step,
                focal: 0.0,
                mta: 0.0,
                total,
                learning_rate: lr,
            });
        }
        let train_loss = mean(&epoch_totals);
        let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut totals = Vec::with_capacity(eval_idx.len());
        for &i in eval_idx {
            totals.push(forward(&params, i)?.loss()?);
        }
        let val_loss = mean(&totals);
        epochs.push(EpochStat {
            epoch,
            train_loss,
            val_loss,
            learning_rate: scheduler.lr(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
        }
        scheduler.observe(val_loss);
    }

    // accuracy of the retained parameters
    let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let mut correct = 0usize;
    for &i in eval_idx {
        let exec = forward(&best_params, i)?;
        let logits = exec.output("pretext_logits")?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        if pred == data.samples[i].pretext_class {
            correct += 1;
        }
    }
    let val_accuracy = correct as f64 / eval_idx.len() as f64;

    Ok(PretextOutcome {
        params: best_params,
        val_accuracy,
        history,
        epochs,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Detections plus the report they earned.
#[derive(Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub detections: Vec<DetectionSet>,
    pub ground_truth: Vec<DetectionSet>,
}

/// Track ids unique across scenes: scene index spaced out, slot within.
fn scoped_track_id(scene_index: usize, local: usize) -> u64 {
    scene_index as u64 * 10_000 + local as u64
}

/// Run the student over the given samples and score it against ground
/// truth. With `with_mot`, detections are additionally linked per scene by
/// the tracker and CLEAR-MOT metrics are filled in (ground-truth identity
/// comes from scene object indices).
pub fn evaluate(
    cfg: &RunConfig,
    params: &BTreeMap<String, Tensor>,
    data: &Dataset,
    indices: &[usize],
    with_mot: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("evaluate on an empty index set"));
    }
    let s_cfg = cfg.student_config();
    let graph = build_detect_graph(&s_cfg)?.build();
    let model_params = conform_params(&graph, params.clone())?;
    let model = StudentModel::from_params(s_cfg, model_params)?;

    let mut ordered: Vec<usize> = indices.to_vec();
    ordered.sort_unstable();
    let mut detections = Vec::with_capacity(ordered.len());
    let mut ground_truth = Vec::with_capacity(ordered.len());
    for &i in &ordered {
        let sample = data
            .samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("evaluate index {i} out of range")))?;
        let boxes = model.detect(&sample.spectrogram)?;
        detections.push(DetectionSet::new(sample.frame_id, Modality::Audio, boxes));
        ground_truth.push(sample.ground_truth.clone());
    }
    let mut report = evaluate_detections(&detections, &ground_truth)?;

    if with_mot {
        // group per scene, frames in scene order
        let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &i) in ordered.iter().enumerate() {
            by_scene.entry(data.samples[i].scene_index).or_default().push(pos);
        }
        let mut hyp_records: Vec<TrackRecord> = Vec::new();
        let mut gt_records: Vec<TrackRecord> = Vec::new();
        for (scene_index, positions) in &by_scene {
            let mut frames: Vec<DetectionSet> = positions
                .iter()
                .map(|&p| detections[p].clone())
                .collect();
            frames.sort_by_key(|s| s.frame_id);
            let tracker = run_tracker(cfg.tracker_config(), &frames)?;
            for mut record in track_records(&tracker) {
                record.track_id = scoped_track_id(*scene_index, record.track_id as usize);
                hyp_records.push(record);
            }
            for &p in positions {
                let gt = &ground_truth[p];
                for (k, b) in gt.boxes.iter().enumerate() {
                    gt_records.push(TrackRecord {
                        frame: gt.frame_id,
                        track_id: scoped_track_id(*scene_index, k),
                        bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                    });
                }
            }
        }
        report.mot = Some(mot_metrics(&hyp_records, &gt_records, cfg.track_iou)?);
    }

    Ok(Evaluation {
        report,
        detections,
        ground_truth,
    })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// The hyperparameter grid a sweep explores (cartesian product).
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub r: Vec<f64>,
    pub temperature: Vec<f64>,
    pub teachers: Vec<Vec<Modality>>,
    pub channels: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            r: vec![1.0, 2.0],
            temperature: vec![1.0, 9.0],
            teachers: vec![
                vec![Modality::Rgb],
                vec![Modality::Rgb, Modality::Thermal],
                vec![Modality::Rgb, Modality::Depth, Modality::Thermal],
            ],
            channels: vec![2, 4, 6, 8],
        }
    }
}

/// One grid cell's outcome. `status` is `ok` or the error text; a failed
/// cell never aborts the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub seed: u64,
    pub r: f64,
    pub temperature: f64,
    pub teachers: Vec<Modality>,
    pub channels: usize,
    pub status: String,
    pub report: Option<EvalReport>,
    pub final_loss: Option<f64>,
}

fn teachers_label(teachers: &[Modality]) -> String {
    teachers
        .iter()
        .map(|m| m.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn run_sweep_cell(cfg: &RunConfig) -> Result<(EvalReport, f64)> {
    let data = build_dataset(cfg)?;
    let outcome = train(cfg, &data, None)?;
    let (_, _, test_idx) =
        split_dataset(data.samples.len(), TrainConfig::from_run(cfg).split, cfg.seed)?;
    let eval_idx = if test_idx.is_empty() {
        (0..data.samples.len()).collect()
    } else {
        test_idx
    };
    let evaluation = evaluate(cfg, &outcome.best_params, &data, &eval_idx, false)?;
    let final_loss = outcome.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok((evaluation.report, final_loss))
}

/// Train and evaluate one configuration per grid cell. Cells run in
/// parallel but each is fully self-contained and seeded, so the row set is
/// deterministic; failures are recorded in their row and the sweep
/// continues.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Vec<SweepRow> {
    let mut cells = Vec::new();
    for &r in &grid.r {
        for &temperature in &grid.temperature {
            for teachers in &grid.teachers {
                for &channels in &grid.channels {
                    let mut cfg = base.clone();
                    cfg.loss_r = r;
                    cfg.loss_temperature = temperature;
                    cfg.teachers = teachers.clone();
                    cfg.channels = channels;
                    cells.push((cells.len(), cfg));
                }
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(index, cfg)| {
            let (status, report, final_loss) = match run_sweep_cell(&cfg) {
                Ok((report, final_loss)) => ("ok".to_string(), Some(report), Some(final_loss)),
                Err(e) => (format!("error: {e}").replace(',', ";"), None, None),
            };
            SweepRow {
                index,
                seed: cfg.seed,
                r: cfg.loss_r,
                temperature: cfg.loss_temperature,
                teachers: cfg.teachers.clone(),
                channels: cfg.channels,
                status,
                report,
                final_loss,
            }
        })
        .collect()
}

/// Render sweep rows as CSV, one line per grid cell.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "index,seed,r,temperature,teachers,channels,status,map_avg,map_50,map_75,cd_x,cd_y,final_loss\n",
    );
    for row in rows {
        let (map_avg, map_50, map_75, cd_x, cd_y) = match &row.report {
            Some(rep) => (
                rep.map.map_avg.to_string(),
                rep.map.map_50.to_string(),
                rep.map.map_75.to_string(),
                rep.center_distance
                    .as_ref()
                    .map_or(String::new(), |c| c.x.to_string()),
                rep.center_distance
                    .as_ref()
                    .map_or(String::new(), |c| c.y.to_string()),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.index,
            row.seed,
            row.r,
            row.temperature,
            teachers_label(&row.teachers),
            row.channels,
            row.status,
            map_avg,
            map_50,
            map_75,
            cd_x,
            cd_y,
            row.final_loss.map_or(String::new(), |v| v.to_string()),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// run-directory artifacts
// ---------------------------------------------------------------------------

/// Write the student's attention maps and the teacher product targets for
/// one sample as PGM images under `dir` (`student_P3.pgm`,
/// `teacher_P3.pgm`, ...). Returns the written paths.
pub fn write_heatmaps(
    dir: &Path,
    cfg: &RunConfig,
    params: &BTreeMap<String, Tensor>,
    sample: &TrainSample,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s_cfg = cfg.student_config();
    let l_cfg = cfg.loss_config();
    let graph = build_detect_graph(&s_cfg)?.build();
    let model = StudentModel::from_params(s_cfg, conform_params(&graph, params.clone())?)?;
    let outputs = model.forward(&sample.spectrogram)?;
    let mut written = Vec::new();
    for (level, act) in &outputs.activations {
        let tensor = crate::attention::ActivationTensor::new(*level, act.clone())?;
        let map = l2_normalize(&attention_map_with_mode(&tensor, l_cfg.r, l_cfg.attention_mode)?);
        let path = dir.join(format!("student_{level}.pgm"));
        write_pgm(&path, &map)?;
        written.push(path);
    }
    for (level, flat) in &sample.teacher_mta {
        let side = (flat.numel() as f64).sqrt() as usize;
        let grid = flat.reshape(vec![side, side])?;
        let map = AttentionMap {
            level: *level,
            values: grid,
        };
        let path = dir.join(format!("teacher_{level}.pgm"));
        write_pgm(&path, &map)?;
        written.push(path);
    }
    Ok(written)
}
