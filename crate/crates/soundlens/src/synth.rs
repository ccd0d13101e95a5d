//! Deterministic synthetic world: scenes of moving objects observed by
//! three procedural modality teachers with complementary failure modes,
//! plus matched eight-microphone audio in which each object is a pure
//! tone whose inter-channel gain and delay encode its horizontal
//! position. A fixed calibration tone shared by all channels anchors the
//! per-channel spectrogram normalization, keeping those gains readable in
//! the student's input.
//!
//! Teachers are oracles, not networks: they emit jittered ground-truth
//! boxes (minus dropouts) and Gaussian-bump activation maps on the
//! P3/P4/P5 grids. That keeps every relationship between ground truth,
//! teacher output, and audio exact, which is what the end-to-end tests
//! lean on. All randomness flows from one seeded generator in a fixed
//! draw order, so a seed fully determines every byte of output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ActivationTensor;
use crate::audio::{write_clip_manifest, write_wav_pcm16_mono, ClipManifestEntry, WaveClip};
use crate::boxes::{fuse_teachers, write_detections_jsonl, BBox, DetectionSet, Modality, PyramidLevel};
use crate::container::save_param_set;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Speed of sound used for inter-channel delays, m/s.
const SPEED_OF_SOUND: f64 = 343.0;
/// Image pixels to simulated meters.
const METERS_PER_PIXEL: f64 = 0.1;
/// Mel band reserved for the calibration tone every channel carries at
/// equal amplitude. Object bands stay above it (with one band of
/// separation) so the reference never collides with a tone.
const REFERENCE_BAND: usize = 1;
/// Amplitude of the calibration tone, sized so reference plus mix stays
/// inside [-1, 1] and never clips.
const REFERENCE_AMPLITUDE: f64 = 0.35;

/// Frequency of the calibration tone under the default frontend.
pub fn reference_tone_hz(sample_rate: u32) -> f64 {
    let stft = crate::audio::StftConfig::default();
    crate::audio::mel_band_center_hz(&stft, sample_rate, REFERENCE_BAND)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Night,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Condition::Day),
            "night" => Ok(Condition::Night),
            other => Err(Error::invalid(format!("unknown condition {other:?}"))),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-modality dropout probabilities: how often a teacher misses an
/// object entirely. Complementary by construction: rgb fails at night,
/// thermal struggles by day, depth is uniformly mediocre.
#[derive(Debug, Clone, Copy)]
pub struct DropoutRules {
    pub rgb_day: f64,
    pub rgb_night: f64,
    pub thermal_day: f64,
    pub thermal_night: f64,
    pub depth: f64,
}

impl Default for DropoutRules {
    fn default() -> Self {
        Self {
            rgb_day: 0.05,
            rgb_night: 0.7,
            thermal_day: 0.3,
            thermal_night: 0.05,
            depth: 0.2,
        }
    }
}

impl DropoutRules {
    pub fn probability(&self, modality: Modality, condition: Condition) -> f64 {
        match (modality, condition) {
            (Modality::Rgb, Condition::Day) => self.rgb_day,
            (Modality::Rgb, Condition::Night) => self.rgb_night,
            (Modality::Thermal, Condition::Day) => self.thermal_day,
            (Modality::Thermal, Condition::Night) => self.thermal_night,
            (Modality::Depth, _) => self.depth,
            _ => 0.0,
        }
    }
}

/// Detection noise applied by every teacher to the boxes it does emit.
#[derive(Debug, Clone, Copy)]
pub struct TeacherNoise {
    /// Center jitter standard deviation, pixels per axis.
    pub center_jitter: f64,
    /// Relative size jitter standard deviation (fraction of extent).
    pub size_jitter: f64,
    /// Detection scores are uniform in this range.
    pub score_range: (f64, f64),
    /// Gaussian bump width on activation grids, in cells.
    pub bump_sigma_cells: f64,
}

impl Default for TeacherNoise {
    fn default() -> Self {
        Self {
            center_jitter: 1.0,
            size_jitter: 0.04,
            score_range: (0.7, 0.95),
            bump_sigma_cells: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub seed: u64,
    /// Objects per scene; the source imagery this mimics carried 1..=13.
    pub num_objects: usize,
    pub frames: usize,
    /// (height, width) in pixels; must suit the detector's stride-32 grid.
    pub image_hw: (usize, usize),
    pub condition: Condition,
    pub sample_rate: u32,
    /// White-noise level relative to the tone mix; `None` is noiseless.
    pub audio_snr_db: Option<f64>,
    pub noise: TeacherNoise,
    pub dropout: DropoutRules,
    /// Largest horizontal speed, px/frame.
    pub max_speed: f64,
    pub microphones: usize,
    /// Skip waveform synthesis (frames get an empty clip); useful when
    /// only boxes and activations are needed.
    pub synthesize_audio: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_objects: 3,
            frames: 4,
            image_hw: (96, 96),
            condition: Condition::Day,
            sample_rate: 44_100,
            audio_snr_db: Some(20.0),
            noise: TeacherNoise::default(),
            dropout: DropoutRules::default(),
            max_speed: 3.0,
            microphones: 8,
            synthesize_audio: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=13).contains(&self.num_objects) {
            return Err(Error::invalid(format!(
                "{} objects outside the supported 1..=13",
                self.num_objects
            )));
        }
        if self.frames == 0 {
            return Err(Error::invalid("scene needs at least one frame"));
        }
        let (h, w) = self.image_hw;
        if h < 64 || w < 64 {
            return Err(Error::invalid("image too small for the object sizes"));
        }
        if self.sample_rate == 0 || self.microphones == 0 {
            return Err(Error::invalid("audio config must be positive"));
        }
        if self.max_speed < 0.0 {
            return Err(Error::invalid("max_speed must be nonnegative"));
        }
        Ok(())
    }

    /// Center timestamp of a frame's audio clip, nanoseconds. Frames tick
    /// once per second so every clip is exactly one second of tape.
    pub fn frame_center_ts_ns(frame: u64) -> i64 {
        frame as i64 * 1_000_000_000 + 500_000_000
    }
}

/// One object: a tone-emitting box on a horizontal trajectory.
///
/// Objects move only horizontally, bouncing off the walls, and each one
/// hums a tone centered on a distinct mel band of the default audio
/// frontend. The world pins an object's elevation to its pitch: `center_y`
/// is the image row its mel band lands on after the spectrogram is resized
/// to the image height. Horizontal position reaches the listener through
/// gain and delay across the microphone line, elevation through frequency,
/// so a box is fully recoverable from audio alone.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    /// Center x at frame 0, px.
    pub start_x: f64,
    /// Center y, constant, px; determined by the tone's mel band.
    pub center_y: f64,
    /// Horizontal velocity, px/frame; sign flips at walls.
    pub velocity_x: f64,
    /// (width, height), px.
    pub size: (f64, f64),
    /// Tone frequency, Hz.
    pub base_frequency: f64,
    /// Tone phase at t = 0, radians.
    pub phase: f64,
}

/// Everything one frame of the world produces.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub frame_id: u64,
    pub ground_truth: DetectionSet,
    pub teachers: Vec<TeacherFrame>,
    pub audio: WaveClip,
}

#[derive(Debug, Clone)]
pub struct TeacherFrame {
    pub modality: Modality,
    pub detections: DetectionSet,
    /// Gaussian-bump maps, one per pyramid level in P3/P4/P5 order.
    pub activations: Vec<ActivationTensor>,
}

impl FrameData {
    /// Teacher boxes fused across modalities (concatenate + NMS).
    pub fn fused_teachers(&self) -> Result<DetectionSet> {
        let sets: Vec<DetectionSet> = self.teachers.iter().map(|t| t.detections.clone()).collect();
        fuse_teachers(&sets)
    }

    /// Activation tensors grouped for the distillation loss: outer index
    /// teacher, inner index pyramid level.
    pub fn teacher_activation_stack(&self) -> Vec<Vec<ActivationTensor>> {
        self.teachers.iter().map(|t| t.activations.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SceneData {
    pub config: SceneConfig,
    pub objects: Vec<ObjectSpec>,
    pub frames: Vec<FrameData>,
}

/// The three teacher modalities, in canonical order.
pub const TEACHER_MODALITIES: [Modality; 3] = [Modality::Rgb, Modality::Thermal, Modality::Depth];

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Simulate the whole scene: objects, per-frame ground truth, teacher
/// detections and activations, and audio. Bitwise deterministic given the
/// config (all draws come from one seeded generator in a fixed order).
pub fn generate_scene(config: &SceneConfig) -> Result<SceneData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (img_h, img_w) = (config.image_hw.0 as f64, config.image_hw.1 as f64);

    // --- objects ---
    // Elevation rides on pitch: each object gets a distinct mel band of the
    // default frontend, its tone sits at that band's center frequency, and
    // its center_y is the image row the band maps to. Bands are restricted
    // so the tallest possible box still fits vertically.
    let stft = crate::audio::StftConfig::default();
    let mel_bins = stft.mel_bins as f64;
    let max_half = 26.0 / 2.0;
    let band_lo = (((max_half * mel_bins / img_h) - 0.5).ceil() as i64)
        .max(REFERENCE_BAND as i64 + 2);
    let band_hi = (((img_h - max_half) * mel_bins / img_h) - 0.5).floor() as i64;
    if band_lo > band_hi || (band_hi - band_lo + 1) < config.num_objects as i64 {
        return Err(Error::invalid(format!(
            "image height {img_h} too small for {} tone bands",
            config.num_objects
        )));
    }
    let mut objects = Vec::with_capacity(config.num_objects);
    let mut used_bands: Vec<i64> = Vec::new();
    for _ in 0..config.num_objects {
        let width = rng.gen_range(18.0..26.0);
        let height = rng.gen_range(18.0..26.0);
        let start_x = rng.gen_range(width / 2.0..img_w - width / 2.0);
        let velocity_x = rng.gen_range(-config.max_speed..=config.max_speed);
        let band = loop {
            let b = rng.gen_range(band_lo..=band_hi);
            if !used_bands.contains(&b) {
                break b;
            }
        };
        used_bands.push(band);
        let base_frequency =
            crate::audio::mel_band_center_hz(&stft, config.sample_rate, band as usize);
        let center_y = (band as f64 + 0.5) * img_h / mel_bins;
        let phase = rng.gen_range(0.0..2.0 * PI);
        objects.push(ObjectSpec {
            start_x,
            center_y,
            velocity_x,
            size: (width, height),
            base_frequency,
            phase,
        });
    }

    // --- trajectories (bounce off walls, stay fully inside) ---
    let mut centers_per_frame: Vec<Vec<(f64, f64)>> = Vec::with_capacity(config.frames);
    let mut xs: Vec<f64> = objects.iter().map(|o| o.start_x).collect();
    let mut vs: Vec<f64> = objects.iter().map(|o| o.velocity_x).collect();
    for _ in 0..config.frames {
        centers_per_frame.push(
            objects
                .iter()
                .zip(&xs)
                .map(|(o, &x)| (x, o.center_y))
                .collect(),
        );
        for (i, o) in objects.iter().enumerate() {
            let half = o.size.0 / 2.0;
            let mut next = xs[i] + vs[i];
            if next < half {
                next = half + (half - next);
                vs[i] = -vs[i];
            }
            if next > img_w - half {
                next = (img_w - half) - (next - (img_w - half));
                vs[i] = -vs[i];
            }
            xs[i] = next.clamp(half, img_w - half);
        }
    }

    // --- frames ---
    let mut frames = Vec::with_capacity(config.frames);
    for (f, centers) in centers_per_frame.iter().enumerate() {
        let frame_id = f as u64;
        let gt_boxes: Vec<BBox> = objects
            .iter()
            .zip(centers)
            .map(|(o, &(cx, cy))| {
                BBox::new(
                    cx - o.size.0 / 2.0,
                    cy - o.size.1 / 2.0,
                    cx + o.size.0 / 2.0,
                    cy + o.size.1 / 2.0,
                    1.0,
                    0,
                )
            })
            .collect::<Result<_>>()?;
        let ground_truth = DetectionSet::new(frame_id, Modality::GroundTruth, gt_boxes.clone());

        let mut teachers = Vec::with_capacity(TEACHER_MODALITIES.len());
        for modality in TEACHER_MODALITIES {
            let p_drop = config.dropout.probability(modality, config.condition);
            let mut boxes = Vec::new();
            for gt in &gt_boxes {
                // fixed draw order per object: dropout, 2x center jitter,
                // 2x size jitter, score
                let dropped = rng.gen::<f64>() < p_drop;
                let jx = gaussian(&mut rng) * config.noise.center_jitter;
                let jy = gaussian(&mut rng) * config.noise.center_jitter;
                let sw = 1.0 + gaussian(&mut rng) * config.noise.size_jitter;
                let sh = 1.0 + gaussian(&mut rng) * config.noise.size_jitter;
                let (lo, hi) = config.noise.score_range;
                let score = rng.gen_range(lo..hi);
                if dropped {
                    continue;
                }
                let (cx, cy) = gt.center();
                let w = (gt.width() * sw).max(4.0);
                let h = (gt.height() * sh).max(4.0);
                let jittered = BBox::new(
                    cx + jx - w / 2.0,
                    cy + jy - h / 2.0,
                    cx + jx + w / 2.0,
                    cy + jy + h / 2.0,
                    score,
                    0,
                )?;
                if let Some(clipped) = jittered.clipped(img_w, img_h) {
                    boxes.push(clipped);
                }
            }
            let detections = DetectionSet::new(frame_id, modality, boxes);
            let activations = PyramidLevel::ALL
                .iter()
                .map(|level| {
                    activation_bumps(
                        &detections.boxes,
                        *level,
                        config.image_hw,
                        config.noise.bump_sigma_cells,
                    )
                })
                .collect::<Result<_>>()?;
            teachers.push(TeacherFrame {
                modality,
                detections,
                activations,
            });
        }

        let audio = if config.synthesize_audio {
            synthesize_frame_audio(config, &objects, centers, &mut rng)?
        } else {
            WaveClip::new(Vec::new(), config.sample_rate, 0)?
        };
        frames.push(FrameData {
            frame_id,
            ground_truth,
            teachers,
            audio,
        });
    }

    Ok(SceneData {
        config: config.clone(),
        objects,
        frames,
    })
}

/// Sum of Gaussian bumps on a pyramid-level grid, one bump per detection,
/// centered on the box center (in cell coordinates) and scaled by the
/// detection score. No detections means an all-zero map.
pub fn activation_bumps(
    detections: &[BBox],
    level: PyramidLevel,
    image_hw: (usize, usize),
    sigma_cells: f64,
) -> Result<ActivationTensor> {
    if sigma_cells <= 0.0 {
        return Err(Error::invalid("bump sigma must be positive"));
    }
    let stride = level.stride() as f64;
    let (img_h, img_w) = image_hw;
    let (gh, gw) = (img_h / level.stride(), img_w / level.stride());
    if gh == 0 || gw == 0 {
        return Err(Error::invalid(format!(
            "image {img_h}x{img_w} too small for {level}"
        )));
    }
    let mut values = vec![0.0; gh * gw];
    for det in detections {
        let (cx, cy) = det.center();
        // cell (i, j) is centered at ((j + 0.5) * stride, (i + 0.5) * stride)
        let bx = cx / stride - 0.5;
        let by = cy / stride - 0.5;
        for (idx, v) in values.iter_mut().enumerate() {
            let y = (idx / gw) as f64;
            let x = (idx % gw) as f64;
            let d2 = (x - bx).powi(2) + (y - by).powi(2);
            *v += det.score * (-d2 / (2.0 * sigma_cells * sigma_cells)).exp();
        }
    }
    ActivationTensor::new(level, Tensor::new(vec![1, gh, gw], values)?)
}

/// One second of eight-microphone audio for a frame. Each object is a
/// pure tone; each microphone hears it with a gain that falls off
/// monotonically with horizontal distance and a physical propagation
/// delay, so channel-to-channel level and phase differences encode the
/// object's x-position. Every channel also carries the equal-amplitude
/// calibration tone (see [`reference_tone_hz`]), and optional white noise
/// at the configured SNR.
fn synthesize_frame_audio(
    config: &SceneConfig,
    objects: &[ObjectSpec],
    centers: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<WaveClip> {
    let sr = config.sample_rate as usize;
    let m = config.microphones;
    let img_w = config.image_hw.1 as f64;
    let amplitude = 0.6 / objects.len() as f64;
    let mic_x: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * img_w / m as f64).collect();

    let mut channels = vec![vec![0.0f64; sr]; m];
    for (obj, &(cx, _)) in objects.iter().zip(centers) {
        for (ch, &mx) in channels.iter_mut().zip(&mic_x) {
            let dist_px = (cx - mx).abs();
            let gain = 1.0 / (1.0 + 4.0 * dist_px / img_w);
            let delay_s = dist_px * METERS_PER_PIXEL / SPEED_OF_SOUND;
            let omega = 2.0 * PI * obj.base_frequency;
            for (i, s) in ch.iter_mut().enumerate() {
                let t = i as f64 / sr as f64;
                *s += amplitude * gain * (omega * (t - delay_s) + obj.phase).sin();
            }
        }
    }

    // Noise is scaled to each channel's *object* mix (computed before the
    // reference tone joins, so a quiet channel stays quiet rather than
    // inheriting a floor from the always-loud reference).
    let sigmas: Vec<f64> = match config.audio_snr_db {
        Some(snr_db) => {
            let noise_scale = 10f64.powf(-snr_db / 20.0);
            channels
                .iter()
                .map(|ch| {
                    let rms = (ch.iter().map(|s| s * s).sum::<f64>() / sr as f64).sqrt();
                    rms * noise_scale
                })
                .collect()
        }
        None => vec![0.0; m],
    };

    // Calibration tone: one fixed-amplitude reference in a reserved low
    // band, identical in every channel. The student's frontend min-max
    // normalizes each channel on its own, which would otherwise rescale a
    // lone object's band to the same peak everywhere and hide the gain
    // pattern that encodes x; the ratio of an object's band to this
    // reference survives that normalization.
    let ref_omega = 2.0 * PI * reference_tone_hz(config.sample_rate);
    for ch in &mut channels {
        for (i, s) in ch.iter_mut().enumerate() {
            let t = i as f64 / sr as f64;
            *s += REFERENCE_AMPLITUDE * (ref_omega * t).sin();
        }
    }

    if config.audio_snr_db.is_some() {
        for (ch, &sigma) in channels.iter_mut().zip(&sigmas) {
            for s in ch.iter_mut() {
                *s = (*s + sigma * gaussian(rng)).clamp(-1.0, 1.0);
            }
        }
    }

    WaveClip::new(channels, config.sample_rate, 0)
}

/// Per-channel root-mean-square levels; handy for the monotonicity checks.
pub fn channel_rms(clip: &WaveClip) -> Vec<f64> {
    clip.channels
        .iter()
        .map(|ch| (ch.iter().map(|s| s * s).sum::<f64>() / ch.len().max(1) as f64).sqrt())
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk export: the same formats the real pipeline would consume
// ---------------------------------------------------------------------------

/// Write one scene to `dir`: ground-truth and per-teacher detection
/// JSONL, per-teacher activation containers, WAV files per frame and
/// microphone, and the clip manifest tying frames to their WAVs.
pub fn export_scene(scene: &SceneData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gt: Vec<DetectionSet> = scene.frames.iter().map(|f| f.ground_truth.clone()).collect();
    write_detections_jsonl(&dir.join("groundtruth.jsonl"), &gt)?;

    for (ti, modality) in TEACHER_MODALITIES.iter().enumerate() {
        let sets: Vec<DetectionSet> = scene
            .frames
            .iter()
            .map(|f| f.teachers[ti].detections.clone())
            .collect();
        write_detections_jsonl(&dir.join(format!("{modality}.jsonl")), &sets)?;

        let mut tensors = BTreeMap::new();
        for frame in &scene.frames {
            for act in &frame.teachers[ti].activations {
                tensors.insert(
                    format!("frame{:05}.{}", frame.frame_id, act.level),
                    act.values.clone(),
                );
            }
        }
        save_param_set(
            &dir.join(format!("{modality}_activations.tensors")),
            &tensors,
            BTreeMap::new(),
        )?;
    }

    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut manifest = Vec::with_capacity(scene.frames.len());
    for frame in &scene.frames {
        let mut wavs = Vec::with_capacity(frame.audio.channel_count());
        for (mic, samples) in frame.audio.channels.iter().enumerate() {
            let name = format!("audio/frame{:05}_mic{mic}.wav", frame.frame_id);
            write_wav_pcm16_mono(&dir.join(&name), samples, frame.audio.sample_rate)?;
            wavs.push(name);
        }
        manifest.push(ClipManifestEntry {
            frame: frame.frame_id,
            center_ts_ns: SceneConfig::frame_center_ts_ns(frame.frame_id),
            wavs,
        });
    }
    write_clip_manifest(&dir.join("clips.jsonl"), &manifest)
}
