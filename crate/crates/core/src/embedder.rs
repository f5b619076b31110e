//! Frozen-model embedding extraction over full track timelines, plus the
//! embedding file format.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dsp::MelFeature;
use crate::error::{Error, Result};
use crate::model::EncoderModel;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MAE1";
/// Windows encoded per forward pass.
const ENCODE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedVariant {
    Default,
    NsynthPitch,
    NsynthInstrument,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub window_seconds: f64,
    pub sample_rate_hz: f64,
    pub aggregate: Aggregate,
    pub variant: EmbedVariant,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            window_seconds: 3.0,
            sample_rate_hz: 0.5,
            aggregate: Aggregate::Mean,
            variant: EmbedVariant::Default,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds > 0.0 && self.sample_rate_hz > 0.0) {
            return Err(Error::Config(
                "window_seconds and sample_rate_hz must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(window, hop)` in frames for a feature with the given frame hop.
    pub fn window_and_hop(&self, frame_hop: f32) -> (usize, usize) {
        let fh = frame_hop as f64;
        let window = (self.window_seconds / fh).round().max(1.0) as usize;
        let hop = (1.0 / (self.sample_rate_hz * fh)).round().max(1.0) as usize;
        (window, hop)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEmbedding {
    pub track_id: String,
    /// `[m]` when aggregated, `[S, m]` per window otherwise.
    pub values: Tensor<f32>,
}

/// Start frames of the windows that fit fully in `frames`. Shorter tracks
/// get a single window at 0 (zero-padded on the right).
pub fn window_starts(frames: usize, window: usize, hop: usize) -> Vec<usize> {
    if frames <= window {
        return vec![0];
    }
    (0..=(frames - window) / hop).map(|i| i * hop).collect()
}

/// Encode `[n_mels x width]` windows of `feature` starting at `starts`.
fn encode_windows(
    model: &EncoderModel,
    feature: &MelFeature,
    starts: &[usize],
    width: usize,
) -> Result<Tensor<f32>> {
    let n_mels = feature.n_mels();
    let m = model.embedding_dim();
    let mut out = Vec::with_capacity(starts.len() * m);
    for chunk in starts.chunks(ENCODE_CHUNK) {
        let data: Vec<f32> = chunk
            .iter()
            .flat_map(|&s| feature.window(s, width))
            .collect();
        let x = Tensor::new(vec![chunk.len(), n_mels, width], data)?;
        out.extend_from_slice(model.encode(&x)?.data());
    }
    Tensor::new(vec![starts.len(), m], out)
}

fn mean_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut acc = vec![0f64; cols];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    Tensor::from_fn(vec![cols], |j| (acc[j] / rows as f64) as f32)
}

/// Embed a whole track by windows sampled along its timeline.
pub fn embed_track(
    model: &EncoderModel,
    feature: &MelFeature,
    cfg: &EmbedConfig,
) -> Result<TrackEmbedding> {
    cfg.validate()?;
    if feature.n_frames() == 0 {
        return Err(Error::InvalidInput(format!(
            "track {} has no frames",
            feature.track_id()
        )));
    }
    if cfg.variant != EmbedVariant::Default {
        return embed_nsynth(model, feature, cfg.variant, cfg.aggregate);
    }
    let (window, hop) = cfg.window_and_hop(feature.frame_hop());
    let starts = window_starts(feature.n_frames(), window, hop);
    let per_window = encode_windows(model, feature, &starts, window)?;
    Ok(TrackEmbedding {
        track_id: feature.track_id().to_string(),
        values: match cfg.aggregate {
            Aggregate::Mean => mean_rows(&per_window),
            Aggregate::None => per_window,
        },
    })
}

pub const NSYNTH_FRAMES: usize = 400;
pub const NSYNTH_PITCH_WINDOWS: usize = 4;

/// NSynth-style note embeddings over the first 4 s (zero-padded): the pitch
/// variant averages four consecutive 1 s windows, the instrument variant
/// encodes one 4 s window.
pub fn embed_nsynth(
    model: &EncoderModel,
    feature: &MelFeature,
    variant: EmbedVariant,
    aggregate: Aggregate,
) -> Result<TrackEmbedding> {
    let (starts, width) = match variant {
        EmbedVariant::NsynthPitch => {
            let w = NSYNTH_FRAMES / NSYNTH_PITCH_WINDOWS;
            ((0..NSYNTH_PITCH_WINDOWS).map(|i| i * w).collect(), w)
        }
        EmbedVariant::NsynthInstrument => (vec![0], NSYNTH_FRAMES),
        EmbedVariant::Default => {
            return Err(Error::InvalidInput(
                "embed_nsynth needs an NSynth variant".into(),
            ))
        }
    };
    let per_window = encode_windows(model, feature, &starts, width)?;
    Ok(TrackEmbedding {
        track_id: feature.track_id().to_string(),
        values: match aggregate {
            Aggregate::Mean => mean_rows(&per_window),
            Aggregate::None => per_window,
        },
    })
}

/// Write aggregated embeddings sorted by track id.
pub fn write_embeddings(embeddings: &[TrackEmbedding], path: &Path) -> Result<()> {
    let mut sorted: Vec<&TrackEmbedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    let dim = sorted.first().map_or(0, |e| e.values.numel());
    for e in &sorted {
        if e.values.ndim() != 1 || e.values.numel() != dim {
            return Err(Error::shape("write_embeddings", e.values.shape(), &[dim]));
        }
        if e.track_id.len() > u16::MAX as usize {
            return Err(Error::InvalidInput(format!(
                "track id too long: {}",
                e.track_id
            )));
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(EMBEDDING_MAGIC).map_err(io)?;
        w.write_all(&(sorted.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        for e in sorted {
            w.write_all(&(e.track_id.len() as u16).to_le_bytes())
                .map_err(io)?;
            w.write_all(e.track_id.as_bytes()).map_err(io)?;
            for v in e.values.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<TrackEmbedding>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(fmt("missing MAE1 header".into()));
    }
    let u32_at =
        |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (u32_at(4), u32_at(8));
    let mut pos = 12;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for k in 0..count {
        let truncated = || fmt(format!("truncated at record {k}"));
        let len_bytes = bytes.get(pos..pos + 2).ok_or_else(truncated)?;
        let len = u16::from_le_bytes(len_bytes.try_into().expect("2 bytes")) as usize;
        pos += 2;
        let id = bytes.get(pos..pos + len).ok_or_else(truncated)?;
        let track_id = String::from_utf8(id.to_vec())
            .map_err(|_| fmt(format!("record {k} id is not UTF-8")))?;
        pos += len;
        let body = bytes.get(pos..pos + 4 * dim).ok_or_else(truncated)?;
        pos += 4 * dim;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(TrackEmbedding {
            track_id,
            values: Tensor::new(vec![dim], data)?,
        });
    }
    if pos != bytes.len() {
        return Err(fmt(format!(
            "{} bytes after {count} records of dimension {dim}",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

/// Embeddings keyed by track id.
pub fn embedding_map(embeddings: Vec<TrackEmbedding>) -> BTreeMap<String, Tensor<f32>> {
    embeddings
        .into_iter()
        .map(|e| (e.track_id, e.values))
        .collect()
}
