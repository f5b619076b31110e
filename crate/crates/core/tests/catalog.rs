//! Manifest round trips and errors, label statistics, and the synthetic
//! corpus: determinism, DFT-peak pitch oracle and linear separability.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use musicrep::autodiff::Tensor;
use musicrep::catalog::{
    label_stats, load_manifest, pitch_band, pitch_class_of, synth_corpus, synth_track,
    write_manifest, Split, SynthConfig, TrackRecord, Vocabulary,
};
use musicrep::dsp::{Frontend, FrontendConfig, SAMPLE_RATE};
use musicrep::metrics::accuracy;
use musicrep::prober::{train_probe, ProbeConfig, Targets, TaskKind};
use musicrep::Error;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = TrackRecord> {
    (
        "[a-z][a-z0-9_]{0,11}",
        prop::option::of("[a-z]{1,8}\\.maf"),
        1usize..100_000,
        prop::collection::btree_set("[a-z]{1,3}(:[a-z ]{1,4})?", 0..5),
        prop_oneof![Just(Split::Train), Just(Split::Valid), Just(Split::Test)],
        prop::collection::btree_map("[a-z]{1,6}", -1e6f64..1e6, 0..3),
    )
        .prop_map(|(id, fp, dur, labels, split, targets)| TrackRecord {
            audio_path: if fp.is_none() {
                Some(PathBuf::from(format!("{id}.wav")))
            } else {
                None
            },
            track_id: id,
            feature_path: fp.map(PathBuf::from),
            duration_frames: dur,
            labels,
            split,
            scalar_targets: targets,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trip_is_identity(records in prop::collection::vec(record(), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_manifest(&a, &records).unwrap();
        let cat = load_manifest(&a, None).unwrap();
        prop_assert_eq!(&cat.records, &records);
        let union: BTreeSet<&String> = records.iter().flat_map(|r| &r.labels).collect();
        prop_assert_eq!(cat.vocab.labels().iter().collect::<BTreeSet<_>>(), union);
        write_manifest(&b, &cat.records).unwrap();
        prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn label_count_total_equals_label_set_sizes(records in prop::collection::vec(record(), 1..30)) {
        let s = label_stats(&records);
        let total: usize = s.counts.iter().map(|(_, c)| c).sum();
        let per_record: usize = records.iter().map(|r| r.labels.len()).sum();
        prop_assert_eq!(total, per_record);
        let weighted: usize = s.per_item.iter().enumerate().map(|(k, n)| k * n).sum();
        prop_assert_eq!(weighted, per_record);
        prop_assert_eq!(s.per_item.iter().sum::<usize>(), records.len());
        prop_assert!(s.counts.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn vocabulary_index_is_position(labels in prop::collection::btree_set("[a-z]{1,5}", 1..20)) {
        let v = Vocabulary::new(labels.iter().cloned().collect()).unwrap();
        for (i, l) in labels.iter().enumerate() {
            prop_assert_eq!(v.index_of(l), Some(i));
        }
    }
}

fn manifest(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    fs::write(&p, lines.join("\n")).unwrap();
    (dir, p)
}

const GOOD: &str = r#"{"track_id":"t1","feature_path":"t1.maf","duration_frames":500,"labels":["a","b"],"split":"train"}"#;

#[test]
fn manifest_examples() {
    let (_d, p) = manifest(&[]);
    let cat = load_manifest(&p, None).unwrap();
    assert!(cat.records.is_empty() && cat.vocab.is_empty());

    let lines = [
        GOOD,
        r#"{"track_id":"t2","feature_path":"t2.maf","duration_frames":500,"labels":["a"],"split":"valid"}"#,
        r#"{"track_id":"t3","audio_path":"t3.wav","duration_frames":9,"labels":["b"],"split":"test","scalar_targets":{"valence":0.5}}"#,
    ];
    let (_d, p) = manifest(&lines);
    let cat = load_manifest(&p, None).unwrap();
    assert_eq!(cat.records.len(), 3);
    assert_eq!(cat.vocab.labels(), ["a", "b"]);
    assert_eq!(cat.split(Split::Test).count(), 1);
}

#[test]
fn manifest_errors_name_the_line() {
    let bad = [
        r#"{"track_id":"t","feature_path":"t.maf","duration_frames":0,"labels":[],"split":"train"}"#,
        r#"{"track_id":"t","duration_frames":5,"labels":[],"split":"train"}"#,
        r#"{"track_id":"t","feature_path":"t.maf","duration_frames":5,"labels":[],"split":"dev"}"#,
        r#"{"track_id":"t","feature_path":"t.maf","duration_frames":5,"labels":[],"split":"train","bogus":1}"#,
        "not json",
    ];
    for line in bad {
        let (_d, p) = manifest(&[GOOD, line]);
        match load_manifest(&p, None) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{line}: expected parse error on line 2, got {other:?}"),
        }
    }
    assert!(matches!(
        load_manifest(&PathBuf::from("/nonexistent/m.jsonl"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn explicit_vocabulary_rejects_unknown_labels() {
    let (d, p) = manifest(&[GOOD]);
    let v = d.path().join("vocab.txt");
    fs::write(&v, "b\na\nc\n").unwrap();
    let cat = load_manifest(&p, Some(&v)).unwrap();
    assert_eq!(cat.vocab.labels(), ["b", "a", "c"]);
    assert_eq!(cat.vocab.index_of("a"), Some(1));
    fs::write(&v, "a\n").unwrap();
    assert!(matches!(load_manifest(&p, Some(&v)), Err(Error::Vocab { label }) if label == "b"));
}

#[test]
fn shared_label_counts_every_item() {
    let recs: Vec<TrackRecord> = (0..7)
        .map(|i| TrackRecord {
            track_id: format!("t{i}"),
            feature_path: Some("x.maf".into()),
            audio_path: None,
            duration_frames: 10,
            labels: ["rock".to_string()].into(),
            split: Split::Train,
            scalar_targets: BTreeMap::new(),
        })
        .collect();
    let s = label_stats(&recs);
    assert_eq!(s.counts, vec![("rock".to_string(), 7)]);
    assert_eq!(s.counts_csv(), "rank,label,count,density\n1,rock,7,1\n");
    assert_eq!(s.per_item_csv(), "labels_per_item,items\n0,0\n1,7\n");
}

fn small_synth(n: usize) -> SynthConfig {
    SynthConfig {
        n_tracks: n,
        duration_range: [2.0, 3.0],
        ..SynthConfig::default()
    }
}

#[test]
fn synth_corpus_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_synth(6);
    let ca = synth_corpus(&cfg, a.path()).unwrap();
    synth_corpus(&cfg, b.path()).unwrap();
    assert_eq!(
        fs::read(a.path().join("manifest.jsonl")).unwrap(),
        fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
    for r in &ca.records {
        let rel = r.audio_path.as_ref().unwrap();
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap()
        );
    }
    let text = fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 6);
    let other = synth_corpus(
        &SynthConfig { seed: 99, ..cfg },
        tempfile::tempdir().unwrap().path(),
    )
    .unwrap();
    assert_ne!(other.records, ca.records);
}

#[test]
fn synth_labels_cover_pitch_and_timbre() {
    let cfg = small_synth(40);
    for i in 0..cfg.n_tracks {
        let t = synth_track(&cfg, i).unwrap();
        let (lo, hi) = pitch_band(t.pitch, cfg.n_pitch_classes);
        assert!(t.fundamental_hz >= lo && t.fundamental_hz < hi);
        assert!(t.timbre < cfg.n_timbre_classes);
    }
}

/// Magnitude of the Hann-windowed DTFT of `x` at `freq`.
fn dtft_magnitude(x: &[f32], freq: f64) -> f64 {
    let n = x.len() as f64;
    let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
        let a = w * i as f64;
        re += v as f64 * hann * a.cos();
        im -= v as f64 * hann * a.sin();
    }
    re.hypot(im)
}

#[test]
fn dft_peak_of_every_note_lies_in_its_pitch_band() {
    let cfg = SynthConfig {
        n_tracks: 12,
        ..SynthConfig::default()
    };
    let top = 110.0 * 2f64.powi(cfg.octaves as i32);
    for i in 0..cfg.n_tracks {
        let t = synth_track(&cfg, i).unwrap();
        let samples = t.clip.samples();
        for (k, &(onset, f0)) in t.notes.iter().enumerate() {
            let start = ((onset + 0.02) * SAMPLE_RATE as f64) as usize;
            let end = t
                .notes
                .get(k + 1)
                .map_or(samples.len(), |n| (n.0 * SAMPLE_RATE as f64) as usize);
            let len = (end.saturating_sub(start)).min(6000);
            if len < 4000 {
                continue;
            }
            let seg = &samples[start..start + len];
            // 1 Hz grid over the full fundamental range.
            let peak = (100..top as usize + 20)
                .map(|f| f as f64)
                .max_by(|&a, &b| dtft_magnitude(seg, a).total_cmp(&dtft_magnitude(seg, b)))
                .unwrap();
            assert!(
                (peak - f0).abs() <= 2.0,
                "track {i} note {k}: peak {peak} Hz, fundamental {f0} Hz"
            );
            assert_eq!(pitch_class_of(f0, cfg.n_pitch_classes), Some(t.pitch));
        }
    }
}

/// Track-level chroma from STFT magnitudes: energy folded into 12 bins per
/// class per octave, averaged over frames, then log-compressed.
fn chroma_features(cfg: &SynthConfig, fe: &Frontend, index: usize, bins: usize) -> Vec<f32> {
    let t = synth_track(cfg, index).unwrap();
    let mag = fe.stft_magnitude(&t.clip).unwrap();
    let bin_hz = SAMPLE_RATE as f64 / fe.config().fft_size as f64;
    let mut acc = vec![0f64; bins];
    for f in 0..mag.shape()[0] {
        for (b, &m) in mag.row(f).iter().enumerate().skip(1) {
            let hz = b as f64 * bin_hz;
            if !(100.0..2000.0).contains(&hz) {
                continue;
            }
            let pos = (hz / 110.0).log2().rem_euclid(1.0);
            acc[(pos * bins as f64) as usize % bins] += (m as f64).powi(2);
        }
    }
    let total: f64 = acc.iter().sum();
    acc.iter()
        .map(|a| ((a / total) + 1e-6).ln() as f32)
        .collect()
}

#[test]
fn pitch_is_linearly_separable_on_dft_chroma() {
    let cfg = SynthConfig::default();
    assert_eq!(cfg.n_tracks, 500);
    // 1 s windows in 16384-point FFTs resolve about 1 Hz, finer than the
    // narrowest pitch band.
    let fe = Frontend::new(FrontendConfig {
        window_seconds: 1.0,
        fft_size: 16_384,
        hop_seconds: 0.25,
        ..FrontendConfig::default()
    })
    .unwrap();
    let bins = 12 * cfg.n_pitch_classes;
    let mut split: BTreeMap<Split, (Vec<f32>, Vec<usize>)> = BTreeMap::new();
    for i in 0..cfg.n_tracks {
        let t = synth_track(&cfg, i).unwrap();
        let entry = split.entry(t.split).or_default();
        entry.0.extend(chroma_features(&cfg, &fe, i, bins));
        entry.1.push(t.pitch);
    }
    let mut take = |s: Split| {
        let (x, y) = split.remove(&s).unwrap();
        (Tensor::new(vec![y.len(), bins], x).unwrap(), y)
    };
    let (train_x, train_y) = take(Split::Train);
    let (test_x, test_y) = take(Split::Test);
    let probe_cfg = ProbeConfig {
        hidden_layers: vec![],
        dropout: 0.0,
        batch_size: 64,
        peak_lr: 1e-2,
        total_steps: 1500,
        warmup_steps: 100,
        l2: 0.0,
        task: TaskKind::Multiclass,
        ..ProbeConfig::default()
    };
    let targets = Targets::Multiclass {
        classes: train_y,
        n_classes: cfg.n_pitch_classes,
    };
    let (probe, _) = train_probe(&train_x, &targets, &probe_cfg, None).unwrap();
    let scores = probe.predict(&test_x).unwrap();
    let pred: Vec<usize> = (0..test_y.len())
        .map(|r| {
            let row = scores.row(r);
            (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap()
        })
        .collect();
    let acc = accuracy(&pred, &test_y).unwrap();
    assert!(acc >= 0.99, "linear pitch accuracy on DFT chroma {acc}");
}
