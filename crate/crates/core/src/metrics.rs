//! Evaluation metrics for tagging, classification, key estimation and
//! regression probes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    Ok(())
}

/// Average precision of one tag, or `None` when it has no positives.
///
/// Items are ranked by descending score; tied scores share one threshold,
/// so the result does not depend on the input order of tied items.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_len("average_precision", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut tp_here = 0;
        while i < order.len() && scores[order[i]] == s {
            tp_here += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        tp += tp_here;
        if tp_here > 0 {
            ap += (tp_here as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(Some(ap))
}

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_len("roc_auc", scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

/// Per-tag results and their macro averages for a multilabel task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScores {
    pub map: Option<f64>,
    pub roc_auc: Option<f64>,
    pub per_tag_ap: Vec<Option<f64>>,
    pub per_tag_auc: Vec<Option<f64>>,
    /// Tags without test positives, excluded from the mAP.
    pub skipped_ap: Vec<usize>,
    /// Tags lacking one of the two classes, excluded from the ROC-AUC mean.
    pub skipped_auc: Vec<usize>,
}

/// Macro mAP and ROC-AUC over the columns of row-major `[items x tags]`
/// score and label matrices.
pub fn tag_scores(scores: &[f64], labels: &[bool], n_tags: usize) -> Result<TagScores> {
    check_len("tag_scores", scores.len(), labels.len())?;
    if n_tags == 0 || scores.len() % n_tags != 0 {
        return Err(Error::shape("tag_scores", &[scores.len()], &[n_tags]));
    }
    let items = scores.len() / n_tags;
    let column = |k: usize| -> (Vec<f64>, Vec<bool>) {
        (0..items)
            .map(|i| (scores[i * n_tags + k], labels[i * n_tags + k]))
            .unzip()
    };
    let mut out = TagScores {
        map: None,
        roc_auc: None,
        per_tag_ap: Vec::with_capacity(n_tags),
        per_tag_auc: Vec::with_capacity(n_tags),
        skipped_ap: Vec::new(),
        skipped_auc: Vec::new(),
    };
    for k in 0..n_tags {
        let (s, l) = column(k);
        let ap = average_precision(&s, &l)?;
        let auc = roc_auc(&s, &l)?;
        if ap.is_none() {
            out.skipped_ap.push(k);
        }
        if auc.is_none() {
            out.skipped_auc.push(k);
        }
        out.per_tag_ap.push(ap);
        out.per_tag_auc.push(auc);
    }
    out.map = mean_some(&out.per_tag_ap);
    out.roc_auc = mean_some(&out.per_tag_auc);
    Ok(out)
}

fn mean_some(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len("accuracy", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::EmptyDataset("accuracy of zero items".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

/// A musical key: tonic pitch class (0 = C) and mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyLabel {
    tonic: u8,
    mode: Mode,
}

const TONIC_NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];

impl KeyLabel {
    pub fn new(tonic: u8, mode: Mode) -> Result<Self> {
        if tonic >= 12 {
            return Err(Error::InvalidInput(format!("tonic {tonic} outside 0..12")));
        }
        Ok(Self { tonic, mode })
    }

    pub fn tonic(self) -> u8 {
        self.tonic
    }

    pub fn mode(self) -> Mode {
        self.mode
    }

    /// Dense index in `0..24`: majors first.
    pub fn index(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= 24 {
            return Err(Error::InvalidInput(format!("key index {i} outside 0..24")));
        }
        let mode = if i < 12 { Mode::Major } else { Mode::Minor };
        Self::new((i % 12) as u8, mode)
    }

    pub fn all() -> impl Iterator<Item = KeyLabel> {
        (0..24).map(|i| KeyLabel::from_index(i).expect("in range"))
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", TONIC_NAMES[self.tonic as usize], mode)
    }
}

impl FromStr for KeyLabel {
    type Err = Error;

    /// Parses forms like `"C major"`, `"F# minor"`, `"Bb:minor"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unparseable key {s:?}"));
        let mut parts = s
            .split(|c: char| c.is_whitespace() || c == ':')
            .filter(|p| !p.is_empty());
        let (name, mode) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        if parts.next().is_some() {
            return Err(bad());
        }
        let mut chars = name.chars();
        let letter = chars.next().ok_or_else(bad)?.to_ascii_uppercase();
        let base: i32 = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let shift: i32 = chars
            .map(|c| match c {
                '#' => Ok(1),
                'b' => Ok(-1),
                _ => Err(bad()),
            })
            .sum::<Result<i32>>()?;
        let mode = match mode.to_ascii_lowercase().as_str() {
            "major" | "maj" => Mode::Major,
            "minor" | "min" => Mode::Minor,
            _ => return Err(bad()),
        };
        Self::new((base + shift).rem_euclid(12) as u8, mode)
    }
}

/// Partial-credit key score: exact 1.0, a fifth apart in the same mode 0.5,
/// relative major/minor 0.3, parallel major/minor 0.2, otherwise 0.
pub fn key_score(pred: KeyLabel, truth: KeyLabel) -> f64 {
    let interval = (pred.tonic as i32 - truth.tonic as i32).rem_euclid(12);
    if pred == truth {
        1.0
    } else if pred.mode == truth.mode && (interval == 7 || interval == 5) {
        0.5
    } else if (pred.mode == Mode::Major && truth.mode == Mode::Minor && interval == 3)
        || (pred.mode == Mode::Minor && truth.mode == Mode::Major && interval == 9)
    {
        0.3
    } else if pred.tonic == truth.tonic {
        0.2
    } else {
        0.0
    }
}

/// Mean of [`key_score`] over paired predictions.
pub fn weighted_key_accuracy(pred: &[KeyLabel], truth: &[KeyLabel]) -> Result<f64> {
    check_len("weighted_key_accuracy", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::EmptyDataset("key accuracy of zero items".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| key_score(p, t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Coefficient of determination; negative when worse than predicting the mean.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("r_squared", pred.len(), truth.len())?;
    if truth.len() < 2 {
        return Err(Error::InvalidInput(
            "r_squared needs at least two items".into(),
        ));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> KeyLabel {
        s.parse().unwrap()
    }

    #[test]
    fn ap_examples() {
        let s = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(
            average_precision(&s, &[true, false, false, false]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            average_precision(&s, &[false, false, false, true]).unwrap(),
            Some(0.25)
        );
        let ap = average_precision(&s, &[true, false, true, false])
            .unwrap()
            .unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&s, &[false; 4]).unwrap(), None);
        assert!(matches!(
            average_precision(&s, &[true]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.5; 4], &[true; 4]).unwrap(), None);
    }

    #[test]
    fn tag_scores_skip_tags_without_positives() {
        // 3 items x 2 tags; tag 1 never positive
        let scores = [0.9, 0.1, 0.2, 0.3, 0.8, 0.4];
        let labels = [true, false, false, false, true, false];
        let t = tag_scores(&scores, &labels, 2).unwrap();
        assert_eq!(t.skipped_ap, vec![1]);
        assert_eq!(t.skipped_auc, vec![1]);
        assert_eq!(t.map, Some(1.0));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn key_score_examples() {
        assert_eq!(key_score(key("C major"), key("C major")), 1.0);
        assert_eq!(key_score(key("C major"), key("G major")), 0.5);
        assert_eq!(key_score(key("G major"), key("C major")), 0.5);
        assert_eq!(key_score(key("C major"), key("A minor")), 0.3);
        assert_eq!(key_score(key("A minor"), key("C major")), 0.3);
        assert_eq!(key_score(key("C major"), key("C minor")), 0.2);
        assert_eq!(key_score(key("C major"), key("G minor")), 0.0);
        assert_eq!(key_score(key("C major"), key("D major")), 0.0);
    }

    #[test]
    fn key_parsing() {
        assert_eq!(key("Bb:minor"), KeyLabel::new(10, Mode::Minor).unwrap());
        assert_eq!(key("F# major").index(), 6);
        assert_eq!(key("Cb major").tonic(), 11);
        assert!("H major".parse::<KeyLabel>().is_err());
        assert!("C".parse::<KeyLabel>().is_err());
        for k in KeyLabel::all() {
            assert_eq!(k.to_string().parse::<KeyLabel>().unwrap(), k);
        }
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((r_squared(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            r_squared(&[1.0, 1.0], &[3.0, 3.0]),
            Err(Error::DegenerateTarget)
        ));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }
}
