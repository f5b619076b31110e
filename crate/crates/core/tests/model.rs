//! Encoder and projector forward passes against a plain-loop reference,
//! output-width laws, initialization, and checkpoint files.

use musicrep::autodiff::Tensor;
use musicrep::model::{
    init_model, EncoderConfig, EncoderModel, ModelConfig, ProjectorConfig, CHECKPOINT_MAGIC,
};
use musicrep::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> (EncoderConfig, ProjectorConfig) {
    (
        EncoderConfig {
            n_mels: 8,
            stem_kernel: 4,
            widths: vec![5, 7, 9],
            strides: vec![3, 2, 1],
            residual_gain: 0.3,
            input_mean: -2.0,
            input_std: 1.5,
        },
        ProjectorConfig {
            hidden_layers: 3,
            hidden_width: 12,
            output_dim: 6,
        },
    )
}

/// Feature map `[C][W]` of one item (height is always 1 after the stem).
type Map = Vec<Vec<f64>>;

fn param(model: &EncoderModel, name: &str) -> (Vec<usize>, Vec<f64>) {
    let p = model.param(name).unwrap();
    (
        p.shape().to_vec(),
        p.data().iter().map(|&v| v as f64).collect(),
    )
}

/// Valid convolution of `x` (`[C][H][W]` flattened per channel) with a
/// `[O, C, kh, kw]` kernel and time stride `sw`. Output height must be 1.
fn conv(model: &EncoderModel, name: &str, x: &[Vec<f64>], h: usize, sw: usize) -> Map {
    let (ws, w) = param(model, &format!("{name}.w"));
    let (_, b) = param(model, &format!("{name}.b"));
    let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(kh, h);
    let width = x[0].len() / h;
    let out_w = (width - kw) / sw + 1;
    (0..oc)
        .map(|o| {
            (0..out_w)
                .map(|t| {
                    let mut acc = b[o];
                    for c in 0..ic {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += w[((o * ic + c) * kh + i) * kw + j]
                                    * x[c][i * width + t * sw + j];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn relu(m: Map) -> Map {
    m.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn reference_encode(model: &EncoderModel, item: &[f32], n_mels: usize) -> Vec<f64> {
    let enc = &model.config().encoder;
    let x: Vec<f64> = item
        .iter()
        .map(|&v| (v as f64 - enc.input_mean as f64) / enc.input_std as f64)
        .collect();
    let mut h = relu(conv(model, "stem", &[x], n_mels, enc.strides[0]));
    for s in 0..enc.widths.len() {
        if s > 0 {
            h = relu(conv(
                model,
                &format!("stage{s}.down"),
                &h,
                1,
                enc.strides[s],
            ));
        }
        let y = relu(conv(model, &format!("stage{s}.res1"), &h, 1, 1));
        let y = conv(model, &format!("stage{s}.res2"), &y, 1, 1);
        h = h
            .iter()
            .zip(&y)
            .map(|(hc, yc)| {
                yc.iter()
                    .enumerate()
                    .map(|(t, &v)| hc[t + 1] + enc.residual_gain as f64 * v)
                    .collect()
            })
            .collect();
    }
    relu(h)
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn reference_project(model: &EncoderModel, z: &[f64]) -> Vec<f64> {
    let mut h = z.to_vec();
    for i in 0..=3 {
        let (ws, w) = param(model, &format!("proj.{i}.w"));
        let (_, b) = param(model, &format!("proj.{i}.b"));
        let mut y = b.clone();
        for (k, yk) in y.iter_mut().enumerate() {
            for (j, hj) in h.iter().enumerate() {
                *yk += hj * w[j * ws[1] + k];
            }
        }
        h = if i < 3 {
            y.into_iter().map(|v| v.max(0.0)).collect()
        } else {
            y
        };
    }
    h
}

fn random_model(seed: u64) -> EncoderModel {
    let (enc, proj) = small();
    let mut m = init_model(enc, proj, seed).unwrap();
    // Non-zero biases so every bias path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params_mut() {
        if p.ndim() == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    m
}

#[test]
fn encoder_and_projector_match_reference() {
    for seed in 0..5 {
        let model = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 90;
        let x = Tensor::from_fn(vec![3, 8, width], |_| rng.random_range(-5.0f32..1.0));
        let z = model.encode(&x).unwrap();
        let v = model.project(&z).unwrap();
        assert_eq!(z.shape(), &[3, 9]);
        assert_eq!(v.shape(), &[3, 6]);
        for b in 0..3 {
            let item = &x.data()[b * 8 * width..(b + 1) * 8 * width];
            let zr = reference_encode(&model, item, 8);
            for (got, want) in z.row(b).iter().zip(&zr) {
                assert!(
                    (*got as f64 - want).abs() < 1e-4 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
            let vr = reference_project(
                &model,
                &z.row(b).iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
            for (got, want) in v.row(b).iter().zip(&vr) {
                assert!((*got as f64 - want).abs() < 1e-4 * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn default_encoder_maps_snippets_to_64_dims() {
    let model = EncoderModel::init(
        ModelConfig {
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            head_classes: None,
        },
        1,
    )
    .unwrap();
    let z = model.encode(&Tensor::full(vec![2, 96, 300], -6.0)).unwrap();
    assert_eq!(z.shape(), &[2, 64]);
    assert!(model.encode(&Tensor::full(vec![1, 95, 300], 0.0)).is_err());
}

#[test]
fn init_is_deterministic_and_he_scaled() {
    let (enc, proj) = small();
    let a = init_model(enc.clone(), proj.clone(), 3).unwrap();
    assert_eq!(a, init_model(enc.clone(), proj.clone(), 3).unwrap());
    assert_ne!(a.params(), init_model(enc, proj, 4).unwrap().params());
    let big = init_model(EncoderConfig::default(), ProjectorConfig::default(), 0).unwrap();
    let w = big.param("proj.0.w").unwrap();
    let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.numel() as f64;
    let expected = 2.0 / w.shape()[0] as f64;
    assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    assert!(big
        .param("proj.0.b")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn projector_depth_is_fixed_at_three() {
    let (enc, mut proj) = small();
    proj.hidden_layers = 2;
    assert!(matches!(init_model(enc, proj, 0), Err(Error::Config(_))));
}

#[test]
fn head_is_replaced_not_stacked() {
    let m = random_model(1).with_head(4, 0).unwrap();
    let n = m.params().len();
    let m = m.with_head(7, 0).unwrap();
    assert_eq!(m.params().len(), n);
    assert_eq!(m.param("head.w").unwrap().shape(), &[6, 7]);
    assert!(random_model(1).with_head(0, 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = random_model(2).with_head(3, 5).unwrap();
    m.step = 1234;
    let (a, b) = (dir.path().join("a.mck"), dir.path().join("b.mck"));
    m.save(&a).unwrap();
    let back = EncoderModel::load(&a).unwrap();
    assert_eq!(back, m);
    back.save(&b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mck");
    random_model(0).save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));

    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&p, &extra).unwrap();
    assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&p, &magic).unwrap();
    assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));

    // First stored weight set to NaN: bytes follow the parameter manifest.
    let m = random_model(0);
    let header: usize = 8 + m
        .names()
        .iter()
        .zip(m.params())
        .map(|(n, p)| 2 + n.len() + 1 + 4 * p.ndim())
        .sum::<usize>();
    let mut nan = bytes.clone();
    nan[header..header + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&p, &nan).unwrap();
    assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));

    assert!(matches!(
        EncoderModel::load(&dir.path().join("missing.mck")),
        Err(Error::Io { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_width_matches_forward(width in 1usize..80, s0 in 1usize..4, s1 in 1usize..3) {
        let enc = EncoderConfig {
            n_mels: 3,
            stem_kernel: 3,
            widths: vec![2, 3],
            strides: vec![s0, s1],
            residual_gain: 0.5,
            input_mean: 0.0,
            input_std: 1.0,
        };
        let proj = ProjectorConfig { hidden_layers: 3, hidden_width: 4, output_dim: 2 };
        let model = init_model(enc.clone(), proj, 0).unwrap();
        let x = Tensor::full(vec![1, 3, width], 1.0f32);
        match enc.output_width(width) {
            Some(_) => prop_assert_eq!(model.encode(&x).unwrap().shape().to_vec(), vec![1, 3]),
            None => prop_assert!(model.encode(&x).is_err()),
        }
        let min = enc.min_input_width();
        prop_assert!(enc.output_width(min).is_some());
        prop_assert!(min == enc.stem_kernel || enc.output_width(min - 1).is_none());
    }
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let m = init_model(EncoderConfig::default(), ProjectorConfig::default(), 0).unwrap();
    // conv: out * in * kh * kw + out, dense: in * out + out.
    let stem = 16 * 96 * 8 + 16;
    let stage = |c_in: usize, c: usize, down: bool| {
        let d = if down { c * c_in * 3 + c } else { 0 };
        d + (c * c * 3 + c) + (c * c + c)
    };
    let encoder = stem + stage(16, 16, false) + stage(16, 32, true) + stage(32, 64, true);
    let projector = (64 * 256 + 256) + 2 * (256 * 256 + 256) + (256 * 64 + 64);
    assert_eq!(m.parameter_count(), encoder + projector);
}

#[test]
fn full_scale_dimensions_are_instantiable() {
    let enc = EncoderConfig {
        widths: vec![64, 1728],
        strides: vec![4, 2],
        ..EncoderConfig::default()
    };
    let proj = ProjectorConfig {
        hidden_layers: 3,
        hidden_width: 4096,
        output_dim: 1024,
    };
    let m = init_model(enc, proj, 0).unwrap();
    assert_eq!(m.embedding_dim(), 1728);
    let z = m.encode(&Tensor::full(vec![1, 96, 300], -5.0)).unwrap();
    assert_eq!(z.shape(), &[1, 1728]);
    assert_eq!(m.project(&z).unwrap().shape(), &[1, 1024]);
}
