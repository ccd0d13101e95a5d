//! `soundlens` — command-line front end for the audio detection stack.
//!
//! Every subcommand shares one option grammar:
//!
//! * `--config FILE` loads a flat `key = value` configuration file.
//! * Any configuration key can be overridden with `--key value`
//!   (`soundlens config --dump` prints them all). Overrides are applied
//!   in command-line order on top of the file; `--preset NAME` re-seats
//!   every key to that preset's defaults, so put it first.
//! * `--out DIR` names the run directory artifacts are written under.
//!
//! A typical session:
//!
//! ```text
//! soundlens config --dump > base.cfg
//! soundlens train --config base.cfg --seed 7 --out runs/seed7
//! soundlens eval  --config base.cfg --seed 7 --checkpoint runs/seed7/best.ckpt --out runs/seed7
//! soundlens report --run runs/seed7
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use soundlens::audio::{mel_spectrogram, WaveClip};
use soundlens::boxes::{DetectionSet, Modality};
use soundlens::config::RunConfig;
use soundlens::metrics::{mot_metrics, EvalReport};
use soundlens::student::{load_checkpoint, save_checkpoint, Checkpoint, StudentModel};
use soundlens::tensor::Tensor;
use soundlens::tracker::{run_tracker, track_records, write_tracks_jsonl, TrackRecord};
use soundlens::train::{
    self, build_dataset, evaluate, initial_params, loss_csv, pretrain_pretext, scene_for_index,
    split_dataset, sweep, sweep_csv, write_heatmaps, SweepGrid, TrainSample,
};

const OPTION_GRAMMAR: &str = "Options are `--key value` pairs: `--config FILE`, `--out DIR`, \
the subcommand's own options, and any configuration key from `soundlens config --dump`.";

#[derive(Parser)]
#[command(
    name = "soundlens",
    version,
    about = "Self-supervised audio object detection: synthesizes scenes, distills \
             multimodal teacher detections into an audio-only student, and evaluates \
             detection and tracking.",
    after_help = OPTION_GRAMMAR
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective configuration as `key = value` lines
    Config(RawArgs),
    /// Synthesize the dataset and write scene records and split indices
    GenData(RawArgs),
    /// Render one frame's multi-channel spectrogram as PGM images
    Spectrogram(RawArgs),
    /// Warm up the backbone on the object-counting pretext task
    PretrainPretext(RawArgs),
    /// Train the student on fused teacher detections; writes the full run directory
    Train(RawArgs),
    /// Score a checkpoint on a dataset split
    Eval(RawArgs),
    /// Link one scene's detections into tracklets and score them
    Track(RawArgs),
    /// Run the hyperparameter ablation grid and collect a CSV
    Sweep(RawArgs),
    /// Summarize the artifacts in a run directory
    Report(RawArgs),
}

#[derive(Args)]
#[command(after_help = OPTION_GRAMMAR)]
struct RawArgs {
    /// `--key value` pairs (see --help's trailing note)
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    args: Vec<String>,
}

/// CLI-level option keys that are not configuration keys. Each subcommand
/// accepts a subset; passing one to the wrong subcommand is an error.
const CLI_KEYS: &[&str] = &[
    "config",
    "out",
    "checkpoint",
    "pretext",
    "split",
    "scene",
    "frame",
    "run",
    "grid.r",
    "grid.temperature",
    "grid.teachers",
    "grid.channels",
];

/// Zero-argument flags, likewise per subcommand.
const CLI_FLAGS: &[&str] = &["dump", "no-mot"];

/// A subcommand invocation after option parsing: the merged run
/// configuration plus the CLI-level extras.
struct Invocation {
    cfg: RunConfig,
    out: PathBuf,
    opts: BTreeMap<String, String>,
    flags: BTreeSet<String>,
}

impl Invocation {
    fn opt(&self, key: &str) -> Option<&str> {
        self.opts.get(key).map(String::as_str)
    }

    fn opt_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.opts.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| anyhow!("option --{key}: bad value `{v}`")),
        }
    }

    fn flag(&self, name: &str) -> bool {
        self.flags.contains(name)
    }
}

/// Parse the raw token list for one subcommand. `extras` and `flags` are
/// the CLI-level options this subcommand accepts; every other `--key` must
/// be a configuration key.
fn resolve(raw: &RawArgs, name: &str, extras: &[&str], flags: &[&str]) -> Result<Invocation> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut seen_flags = BTreeSet::new();
    let mut it = raw.args.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected `--key value`, got `{tok}`"))?;
        if key.is_empty() {
            bail!("empty option name");
        }
        if CLI_FLAGS.contains(&key) {
            if !flags.contains(&key) {
                bail!("--{key} does not apply to `{name}`");
            }
            seen_flags.insert(key.to_string());
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| anyhow!("option --{key} expects a value"))?;
        pairs.push((key.to_string(), value.clone()));
    }

    let mut config_file: Option<PathBuf> = None;
    for (k, v) in &pairs {
        if k == "config" {
            if config_file.is_some() {
                bail!("--config given more than once");
            }
            config_file = Some(PathBuf::from(v));
        }
    }
    let mut cfg = match &config_file {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config file {}", path.display()))?,
        None => RunConfig::default(),
    };

    let mut out = PathBuf::from("soundlens-run");
    let mut opts = BTreeMap::new();
    for (k, v) in &pairs {
        match k.as_str() {
            "config" => {}
            "out" => out = PathBuf::from(v),
            key if CLI_KEYS.contains(&key) => {
                if !extras.contains(&key) {
                    bail!("--{key} does not apply to `{name}`");
                }
                opts.insert(k.clone(), v.clone());
            }
            key => {
                cfg.apply(key, v)
                    .with_context(|| format!("override --{key} {v}"))?;
            }
        }
    }
    Ok(Invocation {
        cfg,
        out,
        opts,
        flags: seen_flags,
    })
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Config(raw) => cmd_config(&resolve(&raw, "config", &[], &["dump"])?),
        Cmd::GenData(raw) => cmd_gen_data(&resolve(&raw, "gen-data", &[], &[])?),
        Cmd::Spectrogram(raw) => {
            cmd_spectrogram(&resolve(&raw, "spectrogram", &["scene", "frame"], &[])?)
        }
        Cmd::PretrainPretext(raw) => {
            cmd_pretrain_pretext(&resolve(&raw, "pretrain-pretext", &[], &[])?)
        }
        Cmd::Train(raw) => cmd_train(&resolve(&raw, "train", &["pretext"], &[])?),
        Cmd::Eval(raw) => cmd_eval(&resolve(
            &raw,
            "eval",
            &["checkpoint", "split"],
            &["no-mot"],
        )?),
        Cmd::Track(raw) => cmd_track(&resolve(&raw, "track", &["checkpoint", "scene"], &[])?),
        Cmd::Sweep(raw) => cmd_sweep(&resolve(
            &raw,
            "sweep",
            &["grid.r", "grid.temperature", "grid.teachers", "grid.channels"],
            &[],
        )?),
        Cmd::Report(raw) => cmd_report(&resolve(&raw, "report", &["run"], &[])?),
    }
}

// ---------------------------------------------------------------------------
// shared artifact helpers
// ---------------------------------------------------------------------------

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_config_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.txt"), &cfg.dump())
}

fn split_fractions(cfg: &RunConfig) -> (f64, f64, f64) {
    (cfg.split_train, cfg.split_val, cfg.split_test)
}

fn boxes_json(set: &DetectionSet) -> serde_json::Value {
    serde_json::Value::Array(
        set.boxes
            .iter()
            .map(|b| {
                serde_json::json!({
                    "x_min": b.x_min,
                    "y_min": b.y_min,
                    "x_max": b.x_max,
                    "y_max": b.y_max,
                    "score": b.score,
                    "class_id": b.class_id,
                })
            })
            .collect(),
    )
}

/// Binary 8-bit PGM scaled so the plane's peak maps to 255.
fn write_plane_pgm(path: &Path, h: usize, w: usize, data: &[f64]) -> Result<()> {
    let peak = data.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        data.iter()
            .map(|&v| ((v / peak) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Metadata value for a float that may be non-finite (JSON has no NaN).
fn json_float(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

fn student_checkpoint(
    params: &BTreeMap<String, Tensor>,
    adam: Option<&train::AdamState>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Checkpoint {
    let (opt_m, opt_v, step) = match adam {
        Some(a) => (a.m.clone(), a.v.clone(), a.step),
        None => (BTreeMap::new(), BTreeMap::new(), 0),
    };
    Checkpoint {
        params: params.clone(),
        opt_m,
        opt_v,
        step,
        metadata,
    }
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

fn cmd_config(inv: &Invocation) -> Result<()> {
    // `--dump` and the bare form both print; the flag is the documented
    // spelling. Validation makes `config` double as a checker.
    let _ = inv.flag("dump");
    inv.cfg.validate()?;
    print!("{}", inv.cfg.dump());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let data = build_dataset(cfg)?;
    ensure_out(&inv.out)?;
    write_config_snapshot(&inv.out, cfg)?;

    let mut jsonl = String::new();
    for s in &data.samples {
        let line = serde_json::json!({
            "id": s.id,
            "frame_id": s.frame_id,
            "scene": s.scene_index,
            "frame": s.scene_frame,
            "pretext_class": s.pretext_class,
            "spectrogram_shape": s.spectrogram.shape(),
            "ground_truth": boxes_json(&s.ground_truth),
            "pseudo_labels": boxes_json(&s.pseudo_labels),
        });
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    write_text(&inv.out.join("scenes.jsonl"), &jsonl)?;

    let (train_idx, val_idx, test_idx) =
        split_dataset(data.samples.len(), split_fractions(cfg), cfg.seed)?;
    let splits = serde_json::json!({
        "train": train_idx,
        "val": val_idx,
        "test": test_idx,
    });
    write_text(
        &inv.out.join("splits.json"),
        &(serde_json::to_string_pretty(&splits)? + "\n"),
    )?;

    println!(
        "generated {} samples ({} scenes x {} frames); split {}/{}/{}",
        data.samples.len(),
        cfg.scenes,
        cfg.frames_per_scene,
        train_idx.len(),
        val_idx.len(),
        test_idx.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrogram
// ---------------------------------------------------------------------------

fn cmd_spectrogram(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    cfg.validate()?;
    let scene_index: usize = inv.opt_parse("scene")?.unwrap_or(0);
    let frame_index: usize = inv.opt_parse("frame")?.unwrap_or(0);
    if scene_index >= cfg.scenes {
        bail!("--scene {scene_index} out of range (data.scenes = {})", cfg.scenes);
    }
    let scene = scene_for_index(cfg, scene_index)?;
    let frame = scene
        .frames
        .get(frame_index)
        .ok_or_else(|| anyhow!("--frame {frame_index} out of range ({} frames)", scene.frames.len()))?;
    let clip = WaveClip::new(
        frame.audio.channels[..cfg.channels].to_vec(),
        frame.audio.sample_rate,
        frame.audio.timestamp_ns,
    )?;

    let stft = cfg.stft_config();
    let native = mel_spectrogram(&clip.channels[0], &stft, clip.sample_rate)?;
    println!(
        "native mel spectrogram: {} x {} (bins x frames) per channel",
        native.shape()[0],
        native.shape()[1]
    );
    let spec = soundlens::audio::spectrogram_pipeline(&clip, &stft, (cfg.image_size, cfg.image_size))?;
    let shape = spec.shape().to_vec();
    println!(
        "student input: {} x {} x {} (channels x height x width)",
        shape[0], shape[1], shape[2]
    );

    ensure_out(&inv.out)?;
    let (h, w) = (shape[1], shape[2]);
    for c in 0..shape[0] {
        let plane = &spec.data()[c * h * w..(c + 1) * h * w];
        let path = inv
            .out
            .join(format!("spectrogram_s{scene_index}f{frame_index}_ch{c}.pgm"));
        write_plane_pgm(&path, h, w, plane)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain-pretext
// ---------------------------------------------------------------------------

fn cmd_pretrain_pretext(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let data = build_dataset(cfg)?;
    let outcome = pretrain_pretext(cfg, &data)?;
    ensure_out(&inv.out)?;
    write_config_snapshot(&inv.out, cfg)?;
    write_text(&inv.out.join("pretext-loss.csv"), &loss_csv(&outcome.history))?;

    let mut metadata = BTreeMap::new();
    metadata.insert("kind".into(), serde_json::json!("pretext"));
    metadata.insert("val_accuracy".into(), json_float(outcome.val_accuracy));
    metadata.insert("config".into(), serde_json::json!(cfg.dump()));
    let ckpt = student_checkpoint(&outcome.params, None, metadata);
    let path = inv.out.join("pretext.ckpt");
    save_checkpoint(&path, &ckpt)?;
    println!("wrote {}", path.display());
    println!("pretext validation accuracy: {:.4}", outcome.val_accuracy);
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let data = build_dataset(cfg)?;

    let init = match inv.opt("pretext") {
        Some(path) => {
            let ckpt = load_checkpoint(Path::new(path))
                .with_context(|| format!("loading pretext checkpoint {path}"))?;
            Some(initial_params(cfg, Some(&ckpt.params))?)
        }
        None => None,
    };
    let outcome = train::train(cfg, &data, init)?;

    ensure_out(&inv.out)?;
    write_config_snapshot(&inv.out, cfg)?;
    write_text(&inv.out.join("loss.csv"), &loss_csv(&outcome.history))?;

    let mut epochs_csv = String::from("epoch,train_loss,val_loss,learning_rate\n");
    for e in &outcome.epochs {
        epochs_csv.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.learning_rate
        ));
        println!(
            "epoch {:>3}: train {:.6}  val {:.6}  lr {}",
            e.epoch, e.train_loss, e.val_loss, e.learning_rate
        );
    }
    write_text(&inv.out.join("epochs.csv"), &epochs_csv)?;

    let mut best_meta = BTreeMap::new();
    best_meta.insert("kind".into(), serde_json::json!("student-best"));
    best_meta.insert("val_loss".into(), json_float(outcome.best_val_loss));
    best_meta.insert("best_epoch".into(), serde_json::json!(outcome.best_epoch));
    best_meta.insert("config".into(), serde_json::json!(cfg.dump()));
    let best_path = inv.out.join("best.ckpt");
    save_checkpoint(
        &best_path,
        &student_checkpoint(&outcome.best_params, Some(&outcome.adam), best_meta),
    )?;
    println!("wrote {}", best_path.display());

    let mut final_meta = BTreeMap::new();
    final_meta.insert("kind".into(), serde_json::json!("student-final"));
    final_meta.insert("config".into(), serde_json::json!(cfg.dump()));
    let final_path = inv.out.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &student_checkpoint(&outcome.final_params, Some(&outcome.adam), final_meta),
    )?;
    println!("wrote {}", final_path.display());

    // Score the best checkpoint on the held-out split (falling back when a
    // tiny dataset leaves a split empty) and render its heatmaps.
    let (train_idx, val_idx, test_idx) =
        split_dataset(data.samples.len(), split_fractions(cfg), cfg.seed)?;
    let (split_name, indices) = if !test_idx.is_empty() {
        ("test", &test_idx)
    } else if !val_idx.is_empty() {
        ("val", &val_idx)
    } else {
        ("train", &train_idx)
    };
    let evaluation = evaluate(cfg, &outcome.best_params, &data, indices, true)?;
    write_text(&inv.out.join("eval.json"), &evaluation.report.to_json()?)?;
    write_text(&inv.out.join("report.txt"), &evaluation.report.table())?;
    println!(
        "best epoch {} (val loss {:.6}); {split_name} split mAP@0.50 = {:.4}",
        outcome.best_epoch, outcome.best_val_loss, evaluation.report.map.map_50
    );

    if let Some(&first) = indices.iter().min() {
        let written = write_heatmaps(
            &inv.out.join("heatmaps"),
            cfg,
            &outcome.best_params,
            &data.samples[first],
        )?;
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let ckpt_path = inv
        .opt("checkpoint")
        .ok_or_else(|| anyhow!("eval needs --checkpoint FILE (best.ckpt or final.ckpt from train)"))?;
    let ckpt = load_checkpoint(Path::new(ckpt_path))
        .with_context(|| format!("loading checkpoint {ckpt_path}"))?;

    let data = build_dataset(cfg)?;
    let (train_idx, val_idx, test_idx) =
        split_dataset(data.samples.len(), split_fractions(cfg), cfg.seed)?;
    let split = inv.opt("split").unwrap_or("test");
    let indices = match split {
        "train" => &train_idx,
        "val" => &val_idx,
        "test" => &test_idx,
        other => bail!("--split {other}: expected train, val, or test"),
    };
    if indices.is_empty() {
        bail!("the {split} split is empty; adjust train.split_* or data.scenes");
    }

    let evaluation = evaluate(cfg, &ckpt.params, &data, indices, !inv.flag("no-mot"))?;
    ensure_out(&inv.out)?;
    write_config_snapshot(&inv.out, cfg)?;
    write_text(&inv.out.join("eval.json"), &evaluation.report.to_json()?)?;
    write_text(&inv.out.join("report.txt"), &evaluation.report.table())?;

    if let Some(&first) = indices.iter().min() {
        let written = write_heatmaps(
            &inv.out.join("heatmaps"),
            cfg,
            &ckpt.params,
            &data.samples[first],
        )?;
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    print!("{}", evaluation.report.table());
    Ok(())
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

fn cmd_track(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let scene: usize = inv.opt_parse("scene")?.unwrap_or(0);
    let data = build_dataset(cfg)?;
    let mut samples: Vec<&TrainSample> = data
        .samples
        .iter()
        .filter(|s| s.scene_index == scene)
        .collect();
    if samples.is_empty() {
        bail!("scene {scene} out of range (data.scenes = {})", cfg.scenes);
    }
    samples.sort_by_key(|s| s.scene_frame);

    // Detections to link: the student's if a checkpoint is given, else the
    // fused teacher boxes the student would train on.
    let frames: Vec<DetectionSet> = match inv.opt("checkpoint") {
        Some(path) => {
            let ckpt = load_checkpoint(Path::new(path))
                .with_context(|| format!("loading checkpoint {path}"))?;
            let model = StudentModel::from_params(cfg.student_config(), ckpt.params)?;
            let mut sets = Vec::with_capacity(samples.len());
            for s in &samples {
                let boxes = model.detect(&s.spectrogram)?;
                sets.push(DetectionSet::new(s.frame_id, Modality::Audio, boxes));
            }
            sets
        }
        None => samples.iter().map(|s| s.pseudo_labels.clone()).collect(),
    };

    let tracker = run_tracker(cfg.tracker_config(), &frames)?;
    let records = track_records(&tracker);
    ensure_out(&inv.out)?;
    let tracks_path = inv.out.join("tracks.jsonl");
    write_tracks_jsonl(&tracks_path, &records)?;
    println!("wrote {}", tracks_path.display());

    let mut gt_records = Vec::new();
    for s in &samples {
        for (k, b) in s.ground_truth.boxes.iter().enumerate() {
            gt_records.push(TrackRecord {
                frame: s.frame_id,
                track_id: k as u64,
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            });
        }
    }
    let mot = mot_metrics(&records, &gt_records, cfg.track_iou)?;
    write_text(
        &inv.out.join("mot.json"),
        &(serde_json::to_string_pretty(&mot)? + "\n"),
    )?;
    println!(
        "scene {scene}: {} tracklets over {} frames; MOTA {:.4}, {} id switches",
        tracker.tracklets().len(),
        frames.len(),
        mot.mota,
        mot.id_switches
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn parse_teacher_sets(s: &str) -> Result<Vec<Vec<Modality>>> {
    let mut sets = Vec::new();
    for group in s.split(';') {
        let mut teachers = Vec::new();
        for name in group.split(',') {
            teachers.push(Modality::parse(name.trim())?);
        }
        sets.push(teachers);
    }
    Ok(sets)
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| anyhow!("option --{key}: bad value `{p}`"))
        })
        .collect()
}

fn cmd_sweep(inv: &Invocation) -> Result<()> {
    let cfg = &inv.cfg;
    let mut grid = SweepGrid::default();
    if let Some(v) = inv.opt("grid.r") {
        grid.r = parse_list("grid.r", v)?;
    }
    if let Some(v) = inv.opt("grid.temperature") {
        grid.temperature = parse_list("grid.temperature", v)?;
    }
    if let Some(v) = inv.opt("grid.teachers") {
        grid.teachers = parse_teacher_sets(v)?;
    }
    if let Some(v) = inv.opt("grid.channels") {
        grid.channels = parse_list("grid.channels", v)?;
    }

    let rows = sweep(cfg, &grid);
    ensure_out(&inv.out)?;
    write_config_snapshot(&inv.out, cfg)?;
    write_text(&inv.out.join("sweep.csv"), &sweep_csv(&rows))?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    println!("sweep: {} cells, {} ok", rows.len(), ok);
    for row in rows.iter().filter(|r| r.status != "ok") {
        println!("cell {}: {}", row.index, row.status);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(inv: &Invocation) -> Result<()> {
    let dir = inv
        .opt("run")
        .map(PathBuf::from)
        .unwrap_or_else(|| inv.out.clone());
    let mut sections: Vec<String> = Vec::new();

    let config_path = dir.join("config.txt");
    if let Ok(text) = fs::read_to_string(&config_path) {
        let mut lines: Vec<&str> = Vec::new();
        for line in text.lines() {
            if line.starts_with("preset") || line.starts_with("seed") {
                lines.push(line);
            }
        }
        sections.push(format!("run {}\n{}\n", dir.display(), lines.join("\n")));
    }

    let loss_path = dir.join("loss.csv");
    if let Ok(text) = fs::read_to_string(&loss_path) {
        let totals: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(3)?.parse().ok())
            .collect();
        if !totals.is_empty() {
            let first = totals[0];
            let last = *totals.last().unwrap();
            let min = totals.iter().cloned().fold(f64::INFINITY, f64::min);
            sections.push(format!(
                "training: {} steps, total loss {first:.6} -> {last:.6} (min {min:.6})\n",
                totals.len()
            ));
        }
    }

    let eval_path = dir.join("eval.json");
    if let Ok(text) = fs::read_to_string(&eval_path) {
        let report = EvalReport::from_json(&text)?;
        sections.push(report.table());
    }

    let sweep_path = dir.join("sweep.csv");
    if let Ok(text) = fs::read_to_string(&sweep_path) {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let mut rows: Vec<&str> = lines.collect();
        // sort by mAP@0.5 (column 8), failed cells (blank) last
        rows.sort_by(|a, b| {
            let score = |l: &str| -> f64 {
                l.split(',')
                    .nth(8)
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(f64::NEG_INFINITY)
            };
            score(b).partial_cmp(&score(a)).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut s = format!("sweep: {} cells; best by mAP@0.50:\n{header}\n", rows.len());
        for row in rows.iter().take(3) {
            s.push_str(row);
            s.push('\n');
        }
        sections.push(s);
    }

    if sections.is_empty() {
        bail!("nothing to report in {}", dir.display());
    }
    let text = sections.join("\n");
    print!("{text}");
    write_text(&dir.join("report.txt"), &text)?;
    Ok(())
}
