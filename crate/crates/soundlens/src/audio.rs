//! Audio ingestion and the spectrogram pipeline the student consumes:
//! 1-second clip extraction, Hann-window STFT, 80-bin triangular mel
//! projection, `log(1+x)` compression, per-spectrogram min-max
//! normalization, bilinear resize, and channel stacking.
//!
//! Ordering matters and is load-bearing for two invariants:
//! [`mel_spectrogram`] is linear in signal power (doubling the waveform
//! quadruples its total energy), and [`normalize_and_resize`] is the
//! identity on inputs already spanning `[0,1]` at the target size. Log
//! compression therefore lives between them, applied by [`log_compress`]
//! in the full [`spectrogram_pipeline`].

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-channel waveform with a start timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveClip {
    /// One sample array per microphone, all equal length, values in [-1, 1].
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
    /// Start time of the first sample, in nanoseconds.
    pub timestamp_ns: i64,
}

impl WaveClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32, timestamp_ns: i64) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be > 0"));
        }
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| c.len() != first.len()) {
                return Err(Error::invalid("channels differ in length"));
            }
        }
        Ok(Self {
            channels,
            sample_rate,
            timestamp_ns,
        })
    }

    pub fn len_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// STFT and mel-projection parameters. The defaults reproduce an
/// `80 x 173` spectrogram from one second of 44.1 kHz audio.
#[derive(Debug, Clone)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    /// Pad `window_length / 2` zeros on each side so frames are centered
    /// on their timestamps.
    pub center: bool,
    pub mel_bins: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 1024,
            hop: 256,
            center: true,
            mel_bins: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 || self.hop > self.window_length {
            return Err(Error::invalid(format!(
                "stft window {} / hop {} invalid",
                self.window_length, self.hop
            )));
        }
        if self.mel_bins == 0 {
            return Err(Error::invalid("mel_bins must be >= 1"));
        }
        if self.fmin < 0.0 {
            return Err(Error::invalid("fmin must be >= 0"));
        }
        Ok(())
    }

    pub fn fmax_hz(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }
}

/// A single channel's mel spectrogram, `mel_bins x frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub values: Tensor,
    pub channel_index: usize,
}

/// Extract exactly one second centered on `center_ts_ns`, zero-padding
/// where the window runs off either end of the recording.
pub fn extract_clip(recording: &WaveClip, center_ts_ns: i64) -> Result<WaveClip> {
    if recording.channel_count() == 0 || recording.len_samples() == 0 {
        return Err(Error::invalid("extract_clip on empty recording"));
    }
    let sr = recording.sample_rate as i64;
    let offset_ns = center_ts_ns - recording.timestamp_ns;
    // nearest sample to the requested center
    let center_sample = (offset_ns as i128 * sr as i128 + 500_000_000) / 1_000_000_000;
    let start = center_sample as i64 - sr / 2;
    let len = recording.len_samples() as i64;
    let channels = recording
        .channels
        .iter()
        .map(|ch| {
            (0..sr)
                .map(|i| {
                    let idx = start + i;
                    if (0..len).contains(&idx) {
                        ch[idx as usize]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    WaveClip::new(
        channels,
        recording.sample_rate,
        center_ts_ns - 500_000_000,
    )
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, stored sparsely: each band keeps only the
/// contiguous run of FFT bins where its triangle is nonzero, as
/// `(first_bin, weights)`. Skipping the zero taps leaves every projected
/// energy bitwise identical to the dense sum.
fn mel_filterbank(cfg: &StftConfig, sample_rate: u32) -> Vec<(usize, Vec<f64>)> {
    let n_bins = cfg.window_length / 2 + 1;
    let fmax = cfg.fmax_hz(sample_rate);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.window_length as f64;
    (0..cfg.mel_bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let dense: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rise = (f - left) / (center - left).max(f64::MIN_POSITIVE);
                    let fall = (right - f) / (right - center).max(f64::MIN_POSITIVE);
                    rise.min(fall).max(0.0)
                })
                .collect();
            let first = dense.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = dense.iter().rposition(|&w| w > 0.0).map_or(first, |i| i + 1);
            (first, dense[first..last].to_vec())
        })
        .collect()
}

/// Center frequency (Hz) of one mel band's triangle; a pure tone at this
/// frequency peaks exactly in band `band`.
pub fn mel_band_center_hz(cfg: &StftConfig, sample_rate: u32, band: usize) -> f64 {
    let fmax = cfg.fmax_hz(sample_rate);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    mel_to_hz(mel_lo + (mel_hi - mel_lo) * (band + 1) as f64 / (cfg.mel_bins + 1) as f64)
}

/// Frequency response of each mel filter at a single frequency; useful for
/// predicting which band a pure tone lands in.
pub fn mel_response_at(cfg: &StftConfig, sample_rate: u32, hz: f64) -> Vec<f64> {
    let fmax = cfg.fmax_hz(sample_rate);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let rise = (hz - left) / (center - left).max(f64::MIN_POSITIVE);
            let fall = (right - hz) / (right - center).max(f64::MIN_POSITIVE);
            rise.min(fall).max(0.0)
        })
        .collect()
}

/// Power-mel spectrogram of one channel: `|STFT|^2` through the triangular
/// filterbank. Linear in signal power; no compression or normalization.
/// Frame count with center padding is `1 + floor(samples / hop)`.
pub fn mel_spectrogram(samples: &[f64], cfg: &StftConfig, sample_rate: u32) -> Result<Tensor> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("mel_spectrogram on empty input"));
    }
    if !cfg.center && samples.len() < cfg.window_length {
        return Err(Error::invalid(
            "input shorter than one window and center padding disabled",
        ));
    }
    let n = cfg.window_length;
    let half = n / 2;
    let n_frames = if cfg.center {
        1 + samples.len() / cfg.hop
    } else {
        1 + (samples.len() - n) / cfg.hop
    };
    // periodic Hann window
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let filterbank = mel_filterbank(cfg, sample_rate);
    let n_bins = n / 2 + 1;

    let mut out = vec![0.0; cfg.mel_bins * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - if cfg.center { half as isize } else { 0 };
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, (first, weights)) in filterbank.iter().enumerate() {
            let energy: f64 = weights
                .iter()
                .zip(&power[*first..])
                .map(|(&w, &p)| w * p)
                .sum();
            out[m * n_frames + t] = energy;
        }
    }
    Tensor::new(vec![cfg.mel_bins, n_frames], out)
}

/// `log(1 + x)` compression, elementwise.
pub fn log_compress(values: &Tensor) -> Tensor {
    values.map(f64::ln_1p)
}

/// Min-max normalize to `[0, 1]` (a constant input maps to all zeros),
/// then bilinearly resize to `target_hw = (height, width)`.
pub fn normalize_and_resize(values: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    if values.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "normalize_and_resize".into(),
            expected: vec![0, 0],
            actual: values.shape().to_vec(),
        });
    }
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let lo = values.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let normalized = if range > 0.0 {
        values.map(|v| (v - lo) / range)
    } else {
        Tensor::zeros(values.shape().to_vec())
    };
    Ok(bilinear_resize(&normalized, th, tw))
}

/// Bilinear resampling with half-pixel-center coordinate mapping; exact
/// identity when the target equals the source size.
fn bilinear_resize(values: &Tensor, th: usize, tw: usize) -> Tensor {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    if (h, w) == (th, tw) {
        return values.clone();
    }
    let mut out = vec![0.0; th * tw];
    let at = |y: usize, x: usize| values.data()[y * w + x];
    for ty in 0..th {
        let sy = ((ty as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tw {
            let sx = ((tx as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out[ty * tw + tx] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Tensor::from_parts(vec![th, tw], out)
}

/// Stack per-channel spectrograms into an `N x H x W` tensor in microphone
/// index order. The ablation grid uses N in {2, 4, 6, 8}; any N >= 1 works.
pub fn stack_channels(specs: &[Spectrogram]) -> Result<Tensor> {
    let first = specs
        .first()
        .ok_or_else(|| Error::invalid("stack_channels on empty list"))?;
    let (h, w) = (first.values.shape()[0], first.values.shape()[1]);
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for s in specs {
        if s.values.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                context: format!("stack_channels channel {}", s.channel_index),
                expected: vec![h, w],
                actual: s.values.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.values.data());
    }
    Tensor::new(vec![specs.len(), h, w], data)
}

/// The full front end for one clip: per channel, power-mel, `log(1+x)`,
/// min-max normalize, bilinear resize; then stack to `N x H x W`.
pub fn spectrogram_pipeline(
    clip: &WaveClip,
    cfg: &StftConfig,
    target_hw: (usize, usize),
) -> Result<Tensor> {
    let mut specs = Vec::with_capacity(clip.channel_count());
    for (i, ch) in clip.channels.iter().enumerate() {
        let mel = mel_spectrogram(ch, cfg, clip.sample_rate)?;
        let compressed = log_compress(&mel);
        let resized = normalize_and_resize(&compressed, target_hw)?;
        specs.push(Spectrogram {
            values: resized,
            channel_index: i,
        });
    }
    stack_channels(&specs)
}

// ---------------------------------------------------------------------------
// WAV files and clip manifests
// ---------------------------------------------------------------------------

/// Write mono PCM16 WAV; samples are clamped to [-1, 1] and quantized.
pub fn write_wav_pcm16_mono(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVEfmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes()); // fmt chunk size
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read mono PCM16 WAV; returns samples in [-1, 1] and the sample rate.
pub fn read_wav_pcm16_mono(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad("only PCM16 mono is supported"));
                }
                sample_rate = Some(u32::from_le_bytes(body[4..8].try_into().unwrap()));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let sample_rate = sample_rate.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok((samples, sample_rate))
}

/// One line of a clip manifest: which WAV files make up the clip centered
/// on a frame's timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifestEntry {
    pub frame: u64,
    pub center_ts_ns: i64,
    pub wavs: Vec<String>,
}

pub fn write_clip_manifest(path: &Path, entries: &[ClipManifestEntry]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        serde_json::to_writer(&mut file, e)?;
        file.write_all(b"\n").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_clip_manifest(path: &Path) -> Result<Vec<ClipManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ClipManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 44_100;

    fn sine(hz: f64, seconds: f64, amplitude: f64) -> Vec<f64> {
        let n = (seconds * SR as f64) as usize;
        (0..n)
            .map(|i| amplitude * (2.0 * std::f64::consts::PI * hz * i as f64 / SR as f64).sin())
            .collect()
    }

    #[test]
    fn one_second_clip_yields_80_by_173() {
        let spec = mel_spectrogram(&sine(440.0, 1.0, 0.5), &StftConfig::default(), SR).unwrap();
        assert_eq!(spec.shape(), &[80, 173]);
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let spec = mel_spectrogram(&vec![0.0; SR as usize], &StftConfig::default(), SR).unwrap();
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_tone_lands_in_predicted_mel_band() {
        let cfg = StftConfig::default();
        let spec = mel_spectrogram(&sine(1000.0, 1.0, 0.5), &cfg, SR).unwrap();
        // row energies
        let frames = spec.shape()[1];
        let row_energy: Vec<f64> = (0..80)
            .map(|m| spec.data()[m * frames..(m + 1) * frames].iter().sum())
            .collect();
        let argmax = row_energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let response = mel_response_at(&cfg, SR, 1000.0);
        let predicted = response
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, predicted, "tone fell into band {argmax}, filterbank says {predicted}");
    }

    #[test]
    fn doubling_amplitude_quadruples_energy() {
        let cfg = StftConfig::default();
        let quiet = mel_spectrogram(&sine(700.0, 0.25, 0.2), &cfg, SR).unwrap();
        let loud = mel_spectrogram(&sine(700.0, 0.25, 0.4), &cfg, SR).unwrap();
        let eq: f64 = quiet.data().iter().sum();
        let el: f64 = loud.data().iter().sum();
        assert!((el - 4.0 * eq).abs() <= 1e-9 * el.abs(), "{el} vs {}", 4.0 * eq);
    }

    #[test]
    fn spectrogram_is_deterministic() {
        let samples = sine(333.0, 0.3, 0.4);
        let a = mel_spectrogram(&samples, &StftConfig::default(), SR).unwrap();
        let b = mel_spectrogram(&samples, &StftConfig::default(), SR).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn clip_at_midpoint_is_a_contiguous_slice() {
        let rec_samples: Vec<f64> = (0..2 * SR as usize).map(|i| (i as f64).sin() * 0.1).collect();
        let rec = WaveClip::new(vec![rec_samples.clone()], SR, 0).unwrap();
        let clip = extract_clip(&rec, 1_000_000_000).unwrap();
        assert_eq!(clip.len_samples(), SR as usize);
        let start = SR as usize - SR as usize / 2;
        assert_eq!(clip.channels[0], rec_samples[start..start + SR as usize]);
    }

    #[test]
    fn early_center_zero_pads_the_head() {
        let rec_samples = vec![0.25; 2 * SR as usize];
        let rec = WaveClip::new(vec![rec_samples], SR, 0).unwrap();
        let clip = extract_clip(&rec, 200_000_000).unwrap(); // 0.2 s in
        let zeros = (0.3 * SR as f64) as usize;
        assert!(clip.channels[0][..zeros].iter().all(|&v| v == 0.0));
        assert!(clip.channels[0][zeros..].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn silent_recording_gives_silent_clip() {
        let rec = WaveClip::new(vec![vec![0.0; SR as usize * 2]], SR, 0).unwrap();
        let clip = extract_clip(&rec, 1_000_000_000).unwrap();
        assert!(clip.channels[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_recording_is_rejected() {
        let rec = WaveClip::new(vec![], SR, 0).unwrap();
        assert!(extract_clip(&rec, 0).is_err());
    }

    #[test]
    fn constant_spectrogram_normalizes_to_zero() {
        let t = Tensor::full(vec![4, 5], 3.7).unwrap();
        let n = normalize_and_resize(&t, (4, 5)).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_resize_preserves_unit_range_values() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.4, 1.0, 0.2, 0.9, 0.6]).unwrap();
        let n = normalize_and_resize(&t, (2, 3)).unwrap();
        for (a, b) in n.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_upsample_of_ramp_matches_hand_values() {
        // f(y, x) = 2y + x on a 2x2 grid; half-pixel mapping puts target
        // samples at source coords {0, 0.25, 0.75, 1}, and bilinear is
        // exact for an affine ramp.
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = normalize_and_resize(&t, (4, 4)).unwrap();
        let xs = [0.0, 0.25, 0.75, 1.0];
        for (yi, &y) in xs.iter().enumerate() {
            for (xi, &x) in xs.iter().enumerate() {
                let expected = (2.0 * y + x) / 3.0; // min-max divides by 3
                let got = r.data()[yi * 4 + xi];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "({yi},{xi}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn stacking_orders_and_checks_channels() {
        let mk = |c: usize, v: f64| Spectrogram {
            values: Tensor::full(vec![2, 2], v).unwrap(),
            channel_index: c,
        };
        let t = stack_channels(&[mk(0, 1.0), mk(1, 2.0)]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0; 4]);
        assert_eq!(&t.data()[4..], &[2.0; 4]);

        let bad = Spectrogram {
            values: Tensor::full(vec![3, 2], 0.0).unwrap(),
            channel_index: 1,
        };
        assert!(stack_channels(&[mk(0, 1.0), bad]).is_err());
        assert!(stack_channels(&[]).is_err());

        let single = stack_channels(&[mk(0, 5.0)]).unwrap();
        assert_eq!(single.shape(), &[1, 2, 2]);
    }

    #[test]
    fn wav_roundtrip_is_exact_on_the_pcm16_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        // values already on the 1/32768 grid survive quantization exactly
        let samples: Vec<f64> = (-5i32..6).map(|v| v as f64 * 100.0 / 32768.0).collect();
        write_wav_pcm16_mono(&path, &samples, SR).unwrap();
        let (back, sr) = read_wav_pcm16_mono(&path).unwrap();
        assert_eq!(sr, SR);
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-4 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.jsonl");
        let entries = vec![ClipManifestEntry {
            frame: 4,
            center_ts_ns: 4_000_000_000,
            wavs: vec!["mic0.wav".into(), "mic1.wav".into()],
        }];
        write_clip_manifest(&path, &entries).unwrap();
        assert_eq!(read_clip_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn pipeline_stacks_normalized_channels() {
        let clip = WaveClip::new(
            vec![sine(500.0, 1.0, 0.3), sine(900.0, 1.0, 0.3)],
            SR,
            0,
        )
        .unwrap();
        let t = spectrogram_pipeline(&clip, &StftConfig::default(), (32, 32)).unwrap();
        assert_eq!(t.shape(), &[2, 32, 32]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
