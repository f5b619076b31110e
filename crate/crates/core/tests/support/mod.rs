//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use musicrep::metrics::{KeyLabel, Mode};

/// Summed NT-Xent with explicit loops over anchors and candidates.
pub fn ntxent_oracle(v: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let rows = v.len();
    let mut total = 0.0;
    for i in 0..rows {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (cos(&v[i], &v[k]) / tau).exp();
            }
        }
        total -= ((cos(&v[i], &v[j]) / tau).exp() / denom).ln();
    }
    total
}

/// AP as the mean, over positives, of the precision among all items scored
/// at least as high as that positive.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len())
                .filter(|&j| scores[j] >= scores[i])
                .collect();
            above.iter().filter(|&&j| labels[j]).count() as f64 / above.len() as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

/// AUC by counting every positive/negative pair; ties count one half.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1;
            wins += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Key relations spelled out per truth key rather than by interval arithmetic.
pub fn key_oracle(pred: KeyLabel, truth: KeyLabel) -> f64 {
    let t = truth.tonic() as i32;
    let k = |tonic: i32, mode: Mode| KeyLabel::new(tonic.rem_euclid(12) as u8, mode).unwrap();
    let other = match truth.mode() {
        Mode::Major => Mode::Minor,
        Mode::Minor => Mode::Major,
    };
    let relative = match truth.mode() {
        Mode::Major => k(t + 9, Mode::Minor),
        Mode::Minor => k(t + 3, Mode::Major),
    };
    if pred == truth {
        1.0
    } else if pred == k(t + 7, truth.mode()) || pred == k(t - 7, truth.mode()) {
        0.5
    } else if pred == relative {
        0.3
    } else if pred == k(t, other) {
        0.2
    } else {
        0.0
    }
}

pub fn r2_oracle(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let n = truth.len() as f64;
    let (s, s2) = truth
        .iter()
        .fold((0.0, 0.0), |(a, b), &t| (a + t, b + t * t));
    let ss_tot = s2 - s * s / n;
    if ss_tot.abs() < 1e-9 {
        return None;
    }
    let ss_res: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p * p - 2.0 * p * t + t * t)
        .sum();
    Some(1.0 - ss_res / ss_tot)
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        _ => false,
    }
}

/// Every `n`-tuple over `0..base`, as `f64`.
pub fn tuples(n: usize, base: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..base.pow(n as u32)).map(move |mut code| {
        (0..n)
            .map(|_| {
                let d = code % base;
                code /= base;
                d as f64
            })
            .collect()
    })
}

pub fn bits(n: usize, mask: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

/// Give every bias a small random value. Zero biases put the last ReLU of
/// a stage exactly on its kink wherever both residual paths are dead,
/// which finite differences cannot check.
pub fn jitter_biases(model: &mut musicrep::model::EncoderModel, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(-0.1f32..0.1);
            }
        }
    }
}
