//! Track manifests, label vocabularies, the synthetic corpus generator and
//! label statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub track_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    pub duration_frames: usize,
    #[serde(default)]
    pub labels: BTreeSet<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalar_targets: BTreeMap<String, f64>,
}

impl TrackRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.track_id.is_empty() {
            return Err("empty track_id".into());
        }
        if self.duration_frames == 0 {
            return Err(format!("track {} has duration_frames = 0", self.track_id));
        }
        if self.feature_path.is_none() && self.audio_path.is_none() {
            return Err(format!(
                "track {} has neither feature_path nor audio_path",
                self.track_id
            ));
        }
        if self.scalar_targets.values().any(|v| !v.is_finite()) {
            return Err(format!(
                "track {} has a non-finite scalar target",
                self.track_id
            ));
        }
        Ok(())
    }
}

/// Ordered label list with a stable label-to-index map.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate label {l:?} in vocabulary"
                )));
            }
        }
        Ok(Self { labels, index })
    }

    /// Sorted union of all record labels.
    pub fn from_records(records: &[TrackRecord]) -> Self {
        let all: BTreeSet<&String> = records.iter().flat_map(|r| &r.labels).collect();
        Self::new(all.into_iter().cloned().collect()).expect("set has no duplicates")
    }

    /// Labels starting with `prefix`, in vocabulary order.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let sub = self
            .labels
            .iter()
            .filter(|l| l.starts_with(prefix))
            .cloned()
            .collect();
        Self::new(sub).expect("subset has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Multi-hot row for a label set; labels outside the vocabulary are ignored.
    pub fn multi_hot<'a>(&self, labels: impl IntoIterator<Item = &'a String>) -> Vec<f32> {
        let mut row = vec![0.0; self.len()];
        for l in labels {
            if let Some(i) = self.index_of(l) {
                row[i] = 1.0;
            }
        }
        row
    }

    /// One label per line.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for l in &self.labels {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Records loaded from a manifest, plus the directory relative paths in it
/// resolve against.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub records: Vec<TrackRecord>,
    pub vocab: Vocabulary,
    pub base_dir: PathBuf,
}

impl Catalog {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Load a JSONL manifest. The vocabulary is the explicit vocab file when
/// given (labels outside it are an error), else the sorted label union.
pub fn load_manifest(path: &Path, vocab_path: Option<&Path>) -> Result<Catalog> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TrackRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    let vocab = match vocab_path {
        Some(vp) => {
            let v = Vocabulary::read(vp)?;
            if let Some(bad) = records
                .iter()
                .flat_map(|r| &r.labels)
                .find(|l| v.index_of(l).is_none())
            {
                return Err(Error::Vocab { label: bad.clone() });
            }
            v
        }
        None => Vocabulary::from_records(&records),
    };
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Catalog {
        records,
        vocab,
        base_dir,
    })
}

pub fn write_manifest(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_tracks: usize,
    /// Track length range in seconds.
    pub duration_range: [f64; 2],
    pub n_pitch_classes: usize,
    pub n_timbre_classes: usize,
    /// Amplitude of the additive white noise.
    pub noise_floor: f64,
    /// Notes of a track sit in randomly chosen octaves out of this many,
    /// keeping the track's pitch class.
    pub octaves: usize,
    /// Per-note loudness varies uniformly over this many dB.
    pub note_gain_db: f64,
    /// Per-note noise amplitude is `noise_floor * (1 + noise_jitter * u)`
    /// with `u` uniform on `[-1, 1]`.
    pub noise_jitter: f64,
    /// Per-note extra spectral tilt is uniform on `[0, note_tilt]`.
    pub note_tilt: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 500,
            duration_range: [6.0, 12.0],
            n_pitch_classes: 8,
            n_timbre_classes: 4,
            noise_floor: 0.35,
            octaves: 3,
            note_gain_db: 12.0,
            noise_jitter: 1.0,
            note_tilt: 0.0,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_tracks == 0 {
            return bad("n_tracks must be >= 1");
        }
        if self.n_pitch_classes < 2 || self.n_timbre_classes < 2 {
            return bad("need at least 2 pitch and 2 timbre classes");
        }
        let [lo, hi] = self.duration_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("duration_range must satisfy 0 < lo <= hi");
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor < 1.0) {
            return bad("noise_floor must be in [0, 1)");
        }
        if !(self.note_gain_db >= 0.0 && self.note_tilt >= 0.0) {
            return bad("note_gain_db and note_tilt must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.noise_jitter) {
            return bad("noise_jitter must be in [0, 1]");
        }
        if self.n_pitch_classes > 24 {
            return bad("at most 24 pitch classes per octave");
        }
        if self.octaves == 0
            || PITCH_BASE_HZ * 2f64.powi(self.octaves as i32) > NYQUIST_GUARD_HZ / 4.0
        {
            return bad("octaves must leave room for at least four harmonics");
        }
        Ok(())
    }
}

pub const PITCH_BASE_HZ: f64 = 110.0;
/// Fraction of each class's chroma interval the fundamental may occupy; the
/// remainder keeps neighbouring classes apart.
const BAND_FILL: f64 = 0.5;
const NYQUIST_GUARD_HZ: f64 = 7800.0;
const MAX_HARMONICS: usize = 24;

/// Fundamental range `[lo, hi)` of pitch class `c` (of `n`) in the lowest
/// octave. Higher octaves double both ends.
pub fn pitch_band(c: usize, n: usize) -> (f64, f64) {
    let lo = PITCH_BASE_HZ * 2f64.powf(c as f64 / n as f64);
    (lo, lo * 2f64.powf(BAND_FILL / n as f64))
}

/// Pitch class of `freq` when its octave-reduced position falls inside a
/// class band, else `None`.
pub fn pitch_class_of(freq: f64, n: usize) -> Option<usize> {
    if !(freq > 0.0) {
        return None;
    }
    let pos = (freq / PITCH_BASE_HZ).log2().rem_euclid(1.0) * n as f64;
    let c = pos.floor() as usize;
    (pos - c as f64 <= BAND_FILL + 1e-9).then_some(c % n)
}

/// Relative amplitude of harmonic `h` (1-based) under timbre template `t`.
/// The fundamental is always the strongest partial.
pub fn harmonic_amplitude(t: usize, h: usize, freq: f64) -> f64 {
    let family = t % 4;
    let tilt = [1.0, 1.0, 2.0, 1.5][family] + 0.3 * (t / 4) as f64;
    let base = (h as f64).powf(-tilt);
    match family {
        1 if h % 2 == 0 => 0.0,
        3 if h > 1 => base + 0.5 * (-((freq - 2500.0) / 700.0).powi(2)).exp(),
        _ => base,
    }
}

/// One synthetic track, its pitch class, timbre class and split.
#[derive(Debug, Clone)]
pub struct SynthTrack {
    pub clip: AudioClip,
    pub pitch: usize,
    pub timbre: usize,
    /// Fundamental of the track in the lowest octave.
    pub fundamental_hz: f64,
    /// `(onset seconds, fundamental Hz)` of every note.
    pub notes: Vec<(f64, f64)>,
    pub split: Split,
}

pub fn synth_track_id(index: usize) -> String {
    format!("synth{index:05}")
}

/// Generate track `index` of the corpus. Each track draws from its own RNG
/// seeded with `seed ^ index`, so tracks can be built in any order.
pub fn synth_track(cfg: &SynthConfig, index: usize) -> Result<SynthTrack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let pitch = rng.random_range(0..cfg.n_pitch_classes);
    let timbre = rng.random_range(0..cfg.n_timbre_classes);
    let (lo, hi) = pitch_band(pitch, cfg.n_pitch_classes);
    let f0 = lo * (hi / lo).powf(rng.random::<f64>());
    let [dmin, dmax] = cfg.duration_range;
    let seconds = dmin + (dmax - dmin) * rng.random::<f64>();
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let phases: Vec<f64> = (0..MAX_HARMONICS)
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();

    // Notes: onset, decay, octave, loudness and spectral tilt vary per note.
    // Each note's partials are (amplitude, phasor rotation) pairs.
    struct Note {
        onset: f64,
        decay: f64,
        noise: f64,
        fundamental: f64,
        partials: Vec<(usize, f64, f64, f64)>,
    }
    let mut notes = Vec::new();
    let mut t = 0.0;
    while t < seconds {
        let decay = 0.2 + 0.6 * rng.random::<f64>();
        let fundamental = f0 * 2f64.powi(rng.random_range(0..cfg.octaves) as i32);
        let db = cfg.note_gain_db * (rng.random::<f64>() - 0.5);
        let tilt = cfg.note_tilt * rng.random::<f64>();
        let noise = cfg.noise_floor * (1.0 + cfg.noise_jitter * (2.0 * rng.random::<f64>() - 1.0));
        let shaped: Vec<(usize, f64, f64)> = (1..=MAX_HARMONICS)
            .map(|h| (h, h as f64 * fundamental))
            .take_while(|&(_, f)| f < NYQUIST_GUARD_HZ)
            .map(|(h, f)| {
                (
                    h,
                    harmonic_amplitude(timbre, h, f) * (h as f64).powf(-tilt),
                    f,
                )
            })
            .filter(|&(_, a, _)| a > 0.0)
            .collect();
        let norm: f64 = shaped.iter().map(|p| p.1).sum();
        let gain = 10f64.powf(db / 20.0) / norm;
        let partials = shaped
            .iter()
            .map(|&(h, a, f)| {
                let w = std::f64::consts::TAU * f / sr;
                (h, a * gain, w.cos(), w.sin())
            })
            .collect();
        notes.push(Note {
            onset: t,
            decay,
            noise,
            fundamental,
            partials,
        });
        t += 0.4 + 0.8 * rng.random::<f64>();
    }
    let gain = 0.3 + 0.5 * rng.random::<f64>();

    // one phasor per harmonic, rotated at the current note's frequency
    let mut phasors: Vec<(f64, f64)> = phases.iter().map(|p| (p.cos(), p.sin())).collect();
    let mut samples = Vec::with_capacity(n);
    let mut note = 0;
    for i in 0..n {
        let ts = i as f64 / sr;
        while note + 1 < notes.len() && notes[note + 1].onset <= ts {
            note += 1;
        }
        let nt = &notes[note];
        let env = 0.3 + 0.7 * (-(ts - nt.onset) / nt.decay).exp();
        let mut tone = 0.0;
        for &(h, a, c, s) in &nt.partials {
            let p = &mut phasors[h - 1];
            tone += a * p.1;
            *p = (p.0 * c - p.1 * s, p.0 * s + p.1 * c);
        }
        let noise = nt.noise * (2.0 * rng.random::<f64>() - 1.0);
        samples.push((gain * env * tone + noise).clamp(-1.0, 1.0) as f32);
    }
    let draw = rng.random::<f64>();
    let split = if draw < 0.7 {
        Split::Train
    } else if draw < 0.8 {
        Split::Valid
    } else {
        Split::Test
    };
    Ok(SynthTrack {
        clip: AudioClip::new(samples, SAMPLE_RATE, synth_track_id(index))?,
        pitch,
        timbre,
        fundamental_hz: f0,
        notes: notes.iter().map(|n| (n.onset, n.fundamental)).collect(),
        split,
    })
}

pub fn synth_labels(pitch: usize, timbre: usize) -> BTreeSet<String> {
    [format!("pitch:{pitch}"), format!("timbre:{timbre}")].into()
}

/// Write `audio/<track_id>.wav` files and `manifest.jsonl` under `out_dir`.
/// Tracks are generated on all available cores; the output does not depend
/// on the thread count.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Catalog> {
    cfg.validate()?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let hop = crate::dsp::FrontendConfig::default().hop_len();
    let build = |i: usize| -> Result<TrackRecord> {
        let tr = synth_track(cfg, i)?;
        let rel = PathBuf::from("audio").join(format!("{}.wav", tr.clip.track_id()));
        tr.clip.write_wav(&out_dir.join(&rel))?;
        Ok(TrackRecord {
            track_id: tr.clip.track_id().to_string(),
            feature_path: None,
            audio_path: Some(rel),
            duration_frames: tr.clip.samples().len() / hop,
            labels: synth_labels(tr.pitch, tr.timbre),
            split: tr.split,
            scalar_targets: BTreeMap::new(),
        })
    };
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cfg.n_tracks);
    let records: Vec<TrackRecord> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let build = &build;
                scope.spawn(move || {
                    (t..cfg.n_tracks)
                        .step_by(threads)
                        .map(build)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut per_thread = Vec::with_capacity(threads);
        for h in handles {
            per_thread.push(h.join().expect("synth worker panicked")?);
        }
        let mut out = Vec::with_capacity(cfg.n_tracks);
        for i in 0..cfg.n_tracks {
            out.push(per_thread[i % threads][i / threads].clone());
        }
        Ok::<_, Error>(out)
    })?;
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    let vocab = Vocabulary::from_records(&records);
    Ok(Catalog {
        records,
        vocab,
        base_dir: out_dir.to_path_buf(),
    })
}

/// Sorted label counts and the labels-per-item histogram of a record set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    /// Descending by count, ties broken by label.
    pub counts: Vec<(String, usize)>,
    /// `per_item[k]` = number of items carrying exactly `k` labels.
    pub per_item: Vec<usize>,
    pub n_items: usize,
}

pub fn label_stats(records: &[TrackRecord]) -> LabelStats {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_item = vec![0usize; 1];
    for r in records {
        for l in &r.labels {
            *counts.entry(l).or_default() += 1;
        }
        let k = r.labels.len();
        if per_item.len() <= k {
            per_item.resize(k + 1, 0);
        }
        per_item[k] += 1;
    }
    let mut counts: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(l, c)| (l.to_string(), c))
        .collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    LabelStats {
        counts,
        per_item,
        n_items: records.len(),
    }
}

impl LabelStats {
    /// `rank,label,count,density` with density = count / items.
    pub fn counts_csv(&self) -> String {
        let mut s = String::from("rank,label,count,density\n");
        for (i, (l, c)) in self.counts.iter().enumerate() {
            let density = *c as f64 / self.n_items.max(1) as f64;
            writeln!(s, "{},{},{},{}", i + 1, csv_field(l), c, density).expect("string write");
        }
        s
    }

    /// `labels_per_item,items`.
    pub fn per_item_csv(&self) -> String {
        let mut s = String::from("labels_per_item,items\n");
        for (k, n) in self.per_item.iter().enumerate() {
            writeln!(s, "{k},{n}").expect("string write");
        }
        s
    }

    pub fn write(&self, counts_path: &Path, per_item_path: &Path) -> Result<()> {
        write_text(counts_path, &self.counts_csv())?;
        write_text(per_item_path, &self.per_item_csv())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
