//! Training-batch assembly: uniform track sampling with replacement,
//! snippet and positive-pair extraction, mixup, and a worker pipeline that
//! delivers completed batches in order through a bounded queue.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::catalog::{Catalog, TrackRecord, Vocabulary};
use crate::dsp::{read_feature, write_feature, AudioClip, Frontend, MelFeature};
use crate::error::{Error, Result};

pub const SNIPPET_FRAMES: usize = 300;
pub const SUPERVISED_BATCH: usize = 512;
pub const ULARGE_PAIRS: usize = 1920;
pub const USMALL_PAIRS: usize = 256;
/// Positive-pair centres must be closer than this many frames (5 s).
pub const MAX_PAIR_DISTANCE: usize = 500;

/// Read-only map from track id to its log-mel feature.
#[derive(Debug, Default, Clone)]
pub struct FeatureStore {
    features: HashMap<String, MelFeature>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load the feature file of every record in the catalog.
    pub fn load(catalog: &Catalog) -> Result<Self> {
        let mut store = Self::new();
        for r in &catalog.records {
            let path = r.feature_path.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("track {} has no feature_path", r.track_id))
            })?;
            store.insert(read_feature(&catalog.resolve(path), r.track_id.clone())?);
        }
        Ok(store)
    }

    /// Compute log-mel features from each record's audio (loading stored
    /// features where `feature_path` is set). With `out_dir`, features are
    /// written as `<out_dir>/<track_id>.maf` and the returned records point
    /// at those paths.
    pub fn extract(
        catalog: &Catalog,
        frontend: &Frontend,
        out_dir: Option<&Path>,
    ) -> Result<(Self, Vec<TrackRecord>)> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut store = Self::new();
        let mut records = Vec::with_capacity(catalog.records.len());
        for r in &catalog.records {
            let mut rec = r.clone();
            let feature = match (&r.feature_path, &r.audio_path) {
                (Some(fp), _) => read_feature(&catalog.resolve(fp), r.track_id.clone())?,
                (None, Some(ap)) => {
                    let clip = AudioClip::read_wav(&catalog.resolve(ap), r.track_id.clone())?;
                    let f = frontend.log_mel(&clip)?;
                    if let Some(dir) = out_dir {
                        let path = dir.join(format!("{}.maf", r.track_id));
                        write_feature(&path, &f)?;
                        rec.feature_path = Some(path);
                    }
                    f
                }
                (None, None) => {
                    return Err(Error::InvalidInput(format!(
                        "track {} has no audio",
                        r.track_id
                    )))
                }
            };
            rec.duration_frames = feature.n_frames();
            store.insert(feature);
            records.push(rec);
        }
        Ok((store, records))
    }

    pub fn insert(&mut self, feature: MelFeature) {
        self.features
            .insert(feature.track_id().to_string(), feature);
    }

    pub fn get(&self, track_id: &str) -> Result<&MelFeature> {
        self.features
            .get(track_id)
            .ok_or_else(|| Error::InvalidInput(format!("no feature stored for track {track_id}")))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A `[n_mels x SNIPPET_FRAMES]` slice of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub track_id: String,
    pub start: usize,
    pub data: Vec<f32>,
}

fn too_short(track_id: &str, frames: usize) -> Error {
    Error::TooShort {
        track_id: track_id.to_string(),
        frames,
        needed: SNIPPET_FRAMES,
    }
}

/// Uniform snippet start in `0..=frames - SNIPPET_FRAMES`.
pub fn snippet_start<R: Rng + ?Sized>(track_id: &str, frames: usize, rng: &mut R) -> Result<usize> {
    if frames < SNIPPET_FRAMES {
        return Err(too_short(track_id, frames));
    }
    Ok(rng.random_range(0..=frames - SNIPPET_FRAMES))
}

/// Starts of a positive pair. The anchor is uniform; the partner is uniform
/// over starts whose centre lies strictly within `max_distance` frames of
/// the anchor's centre (anywhere in the track when `None`).
pub fn pair_starts<R: Rng + ?Sized>(
    track_id: &str,
    frames: usize,
    max_distance: Option<usize>,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let a = snippet_start(track_id, frames, rng)?;
    let last = frames - SNIPPET_FRAMES;
    let (lo, hi) = match max_distance {
        Some(d) if d >= 1 => (a.saturating_sub(d - 1), (a + d - 1).min(last)),
        Some(_) => (a, a),
        None => (0, last),
    };
    Ok((a, rng.random_range(lo..=hi)))
}

fn copy_snippet(feature: &MelFeature, start: usize) -> Snippet {
    Snippet {
        track_id: feature.track_id().to_string(),
        start,
        data: feature.window(start, SNIPPET_FRAMES),
    }
}

pub fn sample_snippet<R: Rng + ?Sized>(feature: &MelFeature, rng: &mut R) -> Result<Snippet> {
    let start = snippet_start(feature.track_id(), feature.n_frames(), rng)?;
    Ok(copy_snippet(feature, start))
}

pub fn sample_positive_pair<R: Rng + ?Sized>(
    feature: &MelFeature,
    max_distance: Option<usize>,
    rng: &mut R,
) -> Result<(Snippet, Snippet)> {
    let (a, b) = pair_starts(feature.track_id(), feature.n_frames(), max_distance, rng)?;
    Ok((copy_snippet(feature, a), copy_snippet(feature, b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    pub alpha: f64,
    pub beta: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 2.0,
            enabled: true,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(
                "mixup alpha and beta must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SupervisedBatch {
    /// `[N, n_mels, SNIPPET_FRAMES]`
    pub features: Tensor<f32>,
    /// `[N, K]` in `[0, 1]`
    pub labels: Tensor<f32>,
    pub track_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[2N, n_mels, SNIPPET_FRAMES]`; rows `2i` and `2i + 1` form pair `i`.
    pub features: Tensor<f32>,
    pub track_ids: Vec<String>,
}

impl ContrastiveBatch {
    pub fn n_pairs(&self) -> usize {
        self.track_ids.len() / 2
    }
}

/// Permutation and gains drawn for one mixup application.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub permutation: Vec<usize>,
    pub gains: Vec<f32>,
}

pub fn draw_mixup<R: Rng + ?Sized>(n: usize, cfg: &MixupConfig, rng: &mut R) -> Result<MixupDraw> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.beta).map_err(|e| Error::Config(e.to_string()))?;
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(rng);
    let gains = (0..n).map(|_| beta.sample(rng) as f32).collect();
    Ok(MixupDraw { permutation, gains })
}

/// `features[i] += gains[i] * features[perm[i]]` (from the unmixed batch)
/// and `labels[i] = min(1, labels[i] + labels[perm[i]])`.
pub fn apply_mixup(
    features: &mut Tensor<f32>,
    labels: Option<&mut Tensor<f32>>,
    draw: &MixupDraw,
) -> Result<()> {
    let n = features.shape().first().copied().unwrap_or(0);
    if draw.permutation.len() != n || draw.gains.len() != n {
        return Err(Error::shape(
            "mixup",
            features.shape(),
            &[draw.permutation.len()],
        ));
    }
    let row = features.numel() / n.max(1);
    let original = features.data().to_vec();
    for (i, dst) in features.data_mut().chunks_mut(row).enumerate() {
        let src = &original[draw.permutation[i] * row..][..row];
        let g = draw.gains[i];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += g * s;
        }
    }
    if let Some(labels) = labels {
        if labels.shape().first() != Some(&n) {
            return Err(Error::shape(
                "mixup labels",
                labels.shape(),
                features.shape(),
            ));
        }
        let k = labels.numel() / n.max(1);
        let original = labels.data().to_vec();
        for (i, dst) in labels.data_mut().chunks_mut(k).enumerate() {
            let src = &original[draw.permutation[i] * k..][..k];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (*d + s).min(1.0);
            }
        }
    }
    Ok(())
}

pub fn mixup<R: Rng + ?Sized>(
    features: &mut Tensor<f32>,
    labels: Option<&mut Tensor<f32>>,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixupDraw> {
    let n = features.shape().first().copied().unwrap_or(0);
    let draw = draw_mixup(n, cfg, rng)?;
    apply_mixup(features, labels, &draw)?;
    Ok(draw)
}

/// Tracks long enough for one snippet; shorter ones are skipped.
pub fn eligible<'a>(
    records: &'a [TrackRecord],
    store: &FeatureStore,
) -> Result<Vec<&'a TrackRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if store.get(&r.track_id)?.n_frames() >= SNIPPET_FRAMES {
            out.push(r);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    Ok(out)
}

fn stack_rows(rows: Vec<Vec<f32>>, n_mels: usize) -> Result<Tensor<f32>> {
    let n = rows.len();
    Tensor::new(vec![n, n_mels, SNIPPET_FRAMES], rows.concat())
}

/// `n` tracks drawn uniformly with replacement, one snippet each.
pub fn build_supervised_batch<R: Rng + ?Sized>(
    tracks: &[&TrackRecord],
    n: usize,
    vocab: &Vocabulary,
    mixup_cfg: &MixupConfig,
    store: &FeatureStore,
    rng: &mut R,
) -> Result<SupervisedBatch> {
    if tracks.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n * vocab.len());
    let mut ids = Vec::with_capacity(n);
    let mut n_mels = 0;
    for _ in 0..n {
        let rec = tracks[rng.random_range(0..tracks.len())];
        let feat = store.get(&rec.track_id)?;
        n_mels = feat.n_mels();
        rows.push(sample_snippet(feat, rng)?.data);
        labels.extend(vocab.multi_hot(&rec.labels));
        ids.push(rec.track_id.clone());
    }
    let mut features = stack_rows(rows, n_mels)?;
    let mut labels = Tensor::new(vec![n, vocab.len()], labels)?;
    if mixup_cfg.enabled {
        mixup(&mut features, Some(&mut labels), mixup_cfg, rng)?;
    }
    Ok(SupervisedBatch {
        features,
        labels,
        track_ids: ids,
    })
}

/// `n_pairs` positive pairs from tracks drawn uniformly with replacement.
pub fn build_contrastive_batch<R: Rng + ?Sized>(
    tracks: &[&TrackRecord],
    n_pairs: usize,
    max_distance: Option<usize>,
    mixup_cfg: &MixupConfig,
    store: &FeatureStore,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if tracks.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut rows = Vec::with_capacity(2 * n_pairs);
    let mut ids = Vec::with_capacity(2 * n_pairs);
    let mut n_mels = 0;
    for _ in 0..n_pairs {
        let rec = tracks[rng.random_range(0..tracks.len())];
        let feat = store.get(&rec.track_id)?;
        n_mels = feat.n_mels();
        let (a, b) = sample_positive_pair(feat, max_distance, rng)?;
        rows.push(a.data);
        rows.push(b.data);
        ids.push(rec.track_id.clone());
        ids.push(rec.track_id.clone());
    }
    let mut features = stack_rows(rows, n_mels)?;
    if mixup_cfg.enabled {
        mixup(&mut features, None, mixup_cfg, rng)?;
    }
    Ok(ContrastiveBatch {
        features,
        track_ids: ids,
    })
}

/// RNG for batch `index` of a run seeded with `seed`.
pub fn batch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub workers: usize,
    /// Maximum number of completed batches waiting for the consumer.
    pub capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            capacity: 4,
        }
    }
}

/// Build `n_batches` batches on worker threads and hand them to `consume`
/// in index order. Batch `i` is built from [`batch_rng`]`(seed, i)`, so the
/// sequence is identical for any worker count. Workers never run more than
/// `capacity` batches ahead of the consumer.
pub fn run_pipeline<B, F, C>(
    cfg: PipelineConfig,
    seed: u64,
    n_batches: usize,
    build: F,
    mut consume: C,
) -> Result<()>
where
    B: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<B> + Sync,
    C: FnMut(usize, B) -> Result<()>,
{
    let workers = cfg.workers.max(1);
    let capacity = cfg.capacity.max(1);
    let (tx, rx) = crossbeam_channel::bounded::<(usize, Result<B>)>(capacity);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let consumed = (Mutex::new(0usize), Condvar::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, consumed, build) = (&next, &stop, &consumed, &build);
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= n_batches {
                    return;
                }
                {
                    let (lock, cv) = consumed;
                    let mut done = lock.lock().expect("pipeline lock");
                    while idx >= *done + capacity && !stop.load(Ordering::SeqCst) {
                        done = cv.wait(done).expect("pipeline lock");
                    }
                }
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                let mut rng = batch_rng(seed, idx);
                let batch = build(idx, &mut rng);
                if tx.send((idx, batch)).is_err() {
                    return;
                }
            });
        }
        drop(tx);

        let shutdown = || {
            stop.store(true, Ordering::SeqCst);
            consumed.1.notify_all();
        };
        let mut pending: BTreeMap<usize, Result<B>> = BTreeMap::new();
        let mut expected = 0;
        let outcome = (|| {
            while expected < n_batches {
                while let Some(batch) = pending.remove(&expected) {
                    consume(expected, batch?)?;
                    expected += 1;
                    *consumed.0.lock().expect("pipeline lock") = expected;
                    consumed.1.notify_all();
                }
                if expected >= n_batches {
                    break;
                }
                match rx.recv() {
                    Ok((idx, batch)) => {
                        pending.insert(idx, batch);
                    }
                    Err(_) => {
                        return Err(Error::InvalidInput("batch workers exited early".into()));
                    }
                }
            }
            Ok(())
        })();
        shutdown();
        drop(rx);
        outcome
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(id: &str, frames: usize) -> MelFeature {
        let data = (0..96 * frames).map(|i| (i % frames) as f32).collect();
        MelFeature::new(Tensor::new(vec![96, frames], data).unwrap(), 0.01, id).unwrap()
    }

    #[test]
    fn single_position_track() {
        let mut rng = batch_rng(1, 0);
        let f = feature("t", 300);
        for _ in 0..20 {
            assert_eq!(sample_snippet(&f, &mut rng).unwrap().start, 0);
            let (a, b) = sample_positive_pair(&f, Some(MAX_PAIR_DISTANCE), &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn too_short_track() {
        let mut rng = batch_rng(1, 0);
        assert!(matches!(
            sample_snippet(&feature("t", 299), &mut rng),
            Err(Error::TooShort { frames: 299, .. })
        ));
    }

    #[test]
    fn snippet_copies_the_right_frames() {
        let f = feature("t", 700);
        let s = copy_snippet(&f, 123);
        assert_eq!(s.data.len(), 96 * 300);
        assert_eq!(s.data[0], 123.0);
        assert_eq!(s.data[299], 422.0);
        assert_eq!(s.data[300], 123.0);
    }

    #[test]
    fn identity_permutation_scales_features() {
        let mut x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let draw = MixupDraw {
            permutation: vec![0, 1],
            gains: vec![0.5, 0.25],
        };
        apply_mixup(&mut x, Some(&mut y), &draw).unwrap();
        assert_eq!(x.data(), &[1.5, 3.0, 4.5, 5.0, 6.25, 7.5]);
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn swapped_labels_union() {
        let mut x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let mut y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let draw = MixupDraw {
            permutation: vec![1, 0],
            gains: vec![1.0, 1.0],
        };
        apply_mixup(&mut x, Some(&mut y), &draw).unwrap();
        assert_eq!(x.data(), &[3.0, 3.0]);
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn pipeline_is_ordered_and_worker_count_invariant() {
        let collect = |workers| {
            let mut seen = Vec::new();
            run_pipeline(
                PipelineConfig {
                    workers,
                    capacity: 2,
                },
                9,
                25,
                |i, rng| Ok((i, rng.random::<u64>())),
                |i, b| {
                    assert_eq!(i, b.0);
                    seen.push(b);
                    Ok(())
                },
            )
            .unwrap();
            seen
        };
        let one = collect(1);
        assert_eq!(one.len(), 25);
        assert_eq!(one, collect(4));
    }

    #[test]
    fn pipeline_propagates_errors() {
        let r = run_pipeline(
            PipelineConfig {
                workers: 3,
                capacity: 2,
            },
            0,
            50,
            |i, _| {
                if i == 7 {
                    Err(Error::EmptyCatalog)
                } else {
                    Ok(i)
                }
            },
            |_, _| Ok(()),
        );
        assert!(matches!(r, Err(Error::EmptyCatalog)));
        let r = run_pipeline(
            PipelineConfig::default(),
            0,
            50,
            |i, _| Ok(i),
            |i, _| {
                if i == 3 {
                    Err(Error::DegenerateTarget)
                } else {
                    Ok(())
                }
            },
        );
        assert!(matches!(r, Err(Error::DegenerateTarget)));
    }
}
