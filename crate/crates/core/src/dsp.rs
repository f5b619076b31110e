//! Log-mel spectrogram front end and the per-track feature store.
//!
//! Frames are centred on multiples of the hop with reflect padding at both
//! ends, so a clip of `n` samples yields exactly `n / hop` frames (3 s at
//! 16 kHz gives 300). Each frame is Hann-windowed, zero-padded to the FFT
//! size, and its power spectrum is pooled by L1-normalised triangular
//! filters spaced on the HTK mel scale.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Feature-store magic.
pub const MAF_MAGIC: &[u8; 4] = b"MAF1";

/// Mono PCM audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    track_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, track_id: impl Into<String>) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                found: sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio clip has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            track_id: track_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn track_id(&self) -> &str {
        &self.track_id
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono WAV file (16-bit PCM or 32-bit float).
    pub fn read_wav(path: &Path, track_id: impl Into<String>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| wav_err(path, e))?
            }
        };
        Self::new(samples, spec.sample_rate, track_id)
    }

    /// Writes 16-bit mono PCM with the same scale `read_wav` uses, so
    /// decoded audio re-encodes exactly; out-of-range samples saturate.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
        for &s in &self.samples {
            let v = (s * 32768.0)
                .round()
                .clamp(i16::MIN as f32, i16::MAX as f32) as i16;
            w.write_sample(v).map_err(|e| wav_err(path, e))?;
        }
        w.finalize().map_err(|e| wav_err(path, e))
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub window_seconds: f64,
    pub fft_size: usize,
    pub hop_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 96,
            window_seconds: 0.025,
            fft_size: 2048,
            hop_seconds: 0.010,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let sr = SAMPLE_RATE as f64;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_mels < 2 {
            return bad(format!("n_mels must be >= 2, got {}", self.n_mels));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= sr / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {} Hz, got {}..{}",
                sr / 2.0,
                self.fmin,
                self.fmax
            ));
        }
        if self.window_len() == 0 || self.window_len() > self.fft_size {
            return bad(format!(
                "window of {} samples does not fit FFT size {}",
                self.window_len(),
                self.fft_size
            ));
        }
        if self.hop_len() == 0 {
            return bad("hop must be at least one sample".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.window_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, n_samples: usize) -> usize {
        n_samples / self.hop_len()
    }
}

/// `96 x T` log-mel energies of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    values: Tensor<f32>,
    frame_hop: f32,
    track_id: String,
}

impl MelFeature {
    pub fn new(values: Tensor<f32>, frame_hop: f32, track_id: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape("mel feature", values.shape(), &[]));
        }
        if !values.all_finite() {
            return Err(Error::InvalidInput(
                "mel feature has non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            frame_hop,
            track_id: track_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame_hop(&self) -> f32 {
        self.frame_hop
    }

    pub fn track_id(&self) -> &str {
        &self.track_id
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values.data()[mel * self.n_frames() + frame]
    }

    /// Copy frames `start..start + width` into a `[n_mels, width]` buffer;
    /// frames past the end are zero.
    pub fn window(&self, start: usize, width: usize) -> Vec<f32> {
        let t = self.n_frames();
        let mut out = vec![0.0; self.n_mels() * width];
        if start >= t {
            return out;
        }
        let take = width.min(t - start);
        for (m, dst) in out.chunks_mut(width).enumerate() {
            let src = &self.values.data()[m * t + start..m * t + start + take];
            dst[..take].copy_from_slice(src);
        }
        out
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over FFT bins, each row summing to one.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Tensor<f32>,
    centers_hz: Vec<f64>,
    /// Non-zero bin range of each row.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let step = (hi - lo) / (cfg.n_mels - 1) as f64;
        let edge = |k: isize| mel_to_hz(lo + k as f64 * step);
        let bin_hz = SAMPLE_RATE as f64 / cfg.fft_size as f64;

        let mut weights = vec![0f32; cfg.n_mels * n_bins];
        let mut centers_hz = Vec::with_capacity(cfg.n_mels);
        let mut support = Vec::with_capacity(cfg.n_mels);
        for k in 0..cfg.n_mels {
            let (left, center, right) =
                (edge(k as isize - 1), edge(k as isize), edge(k as isize + 1));
            centers_hz.push(center);
            let row: Vec<f64> = (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect();
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config(format!(
                    "mel filter {k} covers no FFT bins; increase fft_size or reduce n_mels"
                )));
            }
            let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            support.push((first, last + 1));
            for (dst, w) in weights[k * n_bins..(k + 1) * n_bins].iter_mut().zip(&row) {
                *dst = (w / total) as f32;
            }
        }
        Ok(Self {
            weights: Tensor::new(vec![cfg.n_mels, n_bins], weights)?,
            centers_hz,
            support,
        })
    }

    /// `[n_mels x n_bins]` weights.
    pub fn weights(&self) -> &Tensor<f32> {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f32], out: &mut [f32]) {
        let n_bins = self.weights.shape()[1];
        for (k, o) in out.iter_mut().enumerate() {
            let (a, b) = self.support[k];
            let row = &self.weights.data()[k * n_bins + a..k * n_bins + b];
            *o = row.iter().zip(&power[a..b]).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable STFT and filterbank state for one configuration.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    filterbank: MelFilterbank,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let filterbank = MelFilterbank::new(&cfg)?;
        let n = cfg.window_len();
        // periodic Hann
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    fn check(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                found: clip.sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        if clip.samples.is_empty() {
            return Err(Error::InvalidInput("audio clip has no samples".into()));
        }
        Ok(())
    }

    /// Calls `f(frame, magnitudes)` for each frame in order.
    fn for_each_frame(&self, clip: &AudioClip, mut f: impl FnMut(usize, &[f32])) -> Result<usize> {
        self.check(clip)?;
        let x = &clip.samples;
        let (win, hop, nfft) = (self.cfg.window_len(), self.cfg.hop_len(), self.cfg.fft_size);
        let frames = self.cfg.frames_for(x.len());
        let half = win / 2;
        let mut buf = vec![Complex::new(0f32, 0f32); nfft];
        let mut scratch = vec![Complex::new(0f32, 0f32); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0f32; self.cfg.n_bins()];
        for t in 0..frames {
            let start = (t * hop) as isize - half as isize;
            buf.fill(Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = x[reflect(start + i as isize, x.len())] * w;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            f(t, &mag);
        }
        Ok(frames)
    }

    /// `[frames x (fft_size/2 + 1)]` STFT magnitudes.
    pub fn stft_magnitude(&self, clip: &AudioClip) -> Result<Tensor<f32>> {
        let n_bins = self.cfg.n_bins();
        let mut data = Vec::new();
        let frames = self.for_each_frame(clip, |_, mag| data.extend_from_slice(mag))?;
        Tensor::new(vec![frames, n_bins], data)
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<MelFeature> {
        let n_mels = self.cfg.n_mels;
        let frames = self.cfg.frames_for(clip.samples.len());
        let floor = self.cfg.log_floor as f32;
        let mut values = vec![0f32; n_mels * frames];
        let mut power = vec![0f32; self.cfg.n_bins()];
        let mut energies = vec![0f32; n_mels];
        self.for_each_frame(clip, |t, mag| {
            for (p, m) in power.iter_mut().zip(mag) {
                *p = m * m;
            }
            self.filterbank.apply(&power, &mut energies);
            for (k, e) in energies.iter().enumerate() {
                values[k * frames + t] = e.max(floor).ln();
            }
        })?;
        MelFeature::new(
            Tensor::new(vec![n_mels, frames], values)?,
            self.cfg.hop_seconds as f32,
            clip.track_id.clone(),
        )
    }
}

/// Mirror an out-of-range index back into `0..n` (edge sample not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    (if j >= n as isize { period - j } else { j }) as usize
}

pub fn stft_magnitude(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Tensor<f32>> {
    Frontend::new(cfg.clone())?.stft_magnitude(clip)
}

pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<MelFilterbank> {
    MelFilterbank::new(cfg)
}

pub fn log_mel(clip: &AudioClip, cfg: &FrontendConfig) -> Result<MelFeature> {
    Frontend::new(cfg.clone())?.log_mel(clip)
}

/// Number of distinct snippet start positions in a track.
pub fn snippet_position_count(duration_frames: usize, snippet_frames: usize) -> usize {
    (duration_frames + 1).saturating_sub(snippet_frames)
}

/// Write a feature in the `MAF1` format: magic, `u32` rows, `u32` cols,
/// then little-endian `f32` values row-major.
pub fn write_feature(path: &Path, feature: &MelFeature) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAF_MAGIC).map_err(io)?;
    w.write_all(&(feature.n_mels() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(feature.n_frames() as u32).to_le_bytes())
        .map_err(io)?;
    for v in feature.values.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature(path: &Path, track_id: impl Into<String>) -> Result<MelFeature> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAF_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing MAF1 header",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "{}: header says {rows}x{cols} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    MelFeature::new(Tensor::new(vec![rows, cols], data)?, 0.010, track_id)
}
