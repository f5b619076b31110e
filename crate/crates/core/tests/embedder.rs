//! Track embedding against per-window encoding, window grids, NSynth
//! variants and the embedding file format.

use musicrep::autodiff::Tensor;
use musicrep::dsp::MelFeature;
use musicrep::embedder::{
    embed_track, embedding_map, read_embeddings, window_starts, write_embeddings, Aggregate,
    EmbedConfig, EmbedVariant, TrackEmbedding, EMBEDDING_MAGIC, NSYNTH_FRAMES,
};
use musicrep::model::{init_model, EncoderConfig, EncoderModel, ProjectorConfig};
use musicrep::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> EncoderModel {
    init_model(
        EncoderConfig {
            n_mels: 5,
            stem_kernel: 4,
            widths: vec![4, 6],
            strides: vec![4, 2],
            residual_gain: 0.2,
            input_mean: 0.0,
            input_std: 1.0,
        },
        ProjectorConfig {
            hidden_layers: 3,
            hidden_width: 8,
            output_dim: 4,
        },
        7,
    )
    .unwrap()
}

fn feature(frames: usize, seed: u64) -> MelFeature {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelFeature::new(
        Tensor::from_fn(vec![5, frames], |_| rng.random_range(-2.0f32..2.0)),
        0.01,
        "trk",
    )
    .unwrap()
}

/// Encode one `[5, width]` window cut by hand, zero-padded past the end.
fn encode_window(m: &EncoderModel, f: &MelFeature, start: usize, width: usize) -> Vec<f32> {
    let x = Tensor::from_fn(vec![1, 5, width], |i| {
        let (k, t) = (i / width, start + i % width);
        if t < f.n_frames() {
            f.get(k, t)
        } else {
            0.0
        }
    });
    m.encode(&x).unwrap().data().to_vec()
}

#[test]
fn mean_embedding_averages_two_second_grid() {
    let m = model();
    let f = feature(1000, 1);
    let cfg = EmbedConfig::default();
    let e = embed_track(&m, &f, &cfg).unwrap();
    assert_eq!(e.values.shape(), &[6]);
    // Windows of 300 frames every 200 frames: 0, 200, 400, 600.
    let wins: Vec<Vec<f32>> = [0, 200, 400, 600]
        .iter()
        .map(|&s| encode_window(&m, &f, s, 300))
        .collect();
    for j in 0..6 {
        let want = wins.iter().map(|w| w[j] as f64).sum::<f64>() / 4.0;
        assert!((e.values.data()[j] as f64 - want).abs() < 1e-5);
    }
    let per = embed_track(
        &m,
        &f,
        &EmbedConfig {
            aggregate: Aggregate::None,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(per.values.shape(), &[4, 6]);
    for (r, w) in wins.iter().enumerate() {
        for (a, b) in per.values.row(r).iter().zip(w) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn short_track_uses_one_padded_window() {
    let m = model();
    let f = feature(120, 2);
    let e = embed_track(&m, &f, &EmbedConfig::default()).unwrap();
    let want = encode_window(&m, &f, 0, 300);
    for (a, b) in e.values.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
    let empty = MelFeature::new(Tensor::zeros(vec![5, 0]), 0.01, "e").unwrap();
    assert!(embed_track(&m, &empty, &EmbedConfig::default()).is_err());
}

#[test]
fn nsynth_variants_cover_first_four_seconds() {
    let m = model();
    let f = feature(350, 3);
    let pitch = EmbedConfig {
        variant: EmbedVariant::NsynthPitch,
        ..EmbedConfig::default()
    };
    let e = embed_track(&m, &f, &pitch).unwrap();
    let wins: Vec<Vec<f32>> = (0..4)
        .map(|i| encode_window(&m, &f, i * 100, 100))
        .collect();
    for j in 0..6 {
        let want = wins.iter().map(|w| w[j] as f64).sum::<f64>() / 4.0;
        assert!((e.values.data()[j] as f64 - want).abs() < 1e-5);
    }
    let inst = EmbedConfig {
        variant: EmbedVariant::NsynthInstrument,
        ..EmbedConfig::default()
    };
    let e = embed_track(&m, &f, &inst).unwrap();
    let want = encode_window(&m, &f, 0, NSYNTH_FRAMES);
    for (a, b) in e.values.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn embedding_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embs: Vec<TrackEmbedding> = ["b", "a", "ü-track", "c"]
        .iter()
        .map(|id| TrackEmbedding {
            track_id: id.to_string(),
            values: Tensor::from_fn(vec![16], |_| rng.random::<f32>()),
        })
        .collect();
    let (p, q) = (dir.path().join("a.mae"), dir.path().join("b.mae"));
    write_embeddings(&embs, &p).unwrap();
    let back = read_embeddings(&p).unwrap();
    let ids: Vec<&str> = back.iter().map(|e| e.track_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c", "ü-track"]);
    let map = embedding_map(back.clone());
    for e in &embs {
        assert_eq!(map[&e.track_id], e.values);
    }
    write_embeddings(&back, &q).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes, std::fs::read(&q).unwrap());
    assert_eq!(&bytes[..4], EMBEDDING_MAGIC);
    std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(read_embeddings(&p), Err(Error::Format(_))));
}

#[test]
fn mixed_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let embs = vec![
        TrackEmbedding {
            track_id: "a".into(),
            values: Tensor::zeros(vec![3]),
        },
        TrackEmbedding {
            track_id: "b".into(),
            values: Tensor::zeros(vec![4]),
        },
    ];
    assert!(write_embeddings(&embs, &dir.path().join("x.mae")).is_err());
}

proptest! {
    #[test]
    fn window_grid_fits_track(frames in 0usize..5000, window in 1usize..400, hop in 1usize..300) {
        let starts = window_starts(frames, window, hop);
        prop_assert!(!starts.is_empty());
        if frames <= window {
            prop_assert_eq!(starts, vec![0]);
        } else {
            prop_assert_eq!(starts.len(), (frames - window) / hop + 1);
            for (i, &s) in starts.iter().enumerate() {
                prop_assert_eq!(s, i * hop);
                prop_assert!(s + window <= frames);
            }
            prop_assert!(starts.last().unwrap() + hop + window > frames);
        }
    }
}
