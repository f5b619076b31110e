//! Shallow MLP probes trained on frozen embeddings, the per-dataset probe
//! presets, and end-to-end task evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Tensor, Var};
use crate::catalog::{Catalog, Split, TrackRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{self, KeyLabel};
use crate::trainer::{adam_step, lr_at, AdamConfig, AdamState, ScheduleConfig, BCE_CLIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multilabel,
    Multiclass,
    Regression,
    /// 24-way key classification scored by weighted key accuracy.
    Key,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Hidden layer widths; empty means a linear probe.
    pub hidden_layers: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub l2: f64,
    pub task: TaskKind,
    pub seed: u64,
    /// Skip the final partial batch of each epoch.
    pub drop_last: bool,
    /// Number of validation checkpoints spread evenly over training.
    pub eval_points: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![512],
            dropout: 0.5,
            batch_size: 256,
            peak_lr: 1e-3,
            total_steps: 2000,
            warmup_steps: 1000,
            l2: 1e-5,
            task: TaskKind::Multilabel,
            seed: 17,
            drop_last: false,
            eval_points: 10,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("probe dropout must be in [0, 1)".into()));
        }
        if self.total_steps <= self.warmup_steps || self.warmup_steps == 0 {
            return Err(Error::Config(
                "probe needs 0 < warmup_steps < total_steps".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden_layers.contains(&0) || self.eval_points == 0 {
            return Err(Error::Config(
                "probe batch size, widths and eval_points must be positive".into(),
            ));
        }
        if !(self.peak_lr > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::Config(
                "probe peak_lr must be positive and l2 non-negative".into(),
            ));
        }
        Ok(())
    }

    fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }
}

/// Probe hidden layers, dropout, batch size and task type of each
/// downstream dataset. Other fields keep their defaults.
pub const PROBE_DATASETS: [&str; 15] = [
    "MSDS", "MSD50", "MSD100", "MSD500", "AMM", "MuMu", "MTT", "NSynthP", "NSynthI", "GTZAN",
    "Emo", "GS_Key", "Jam-50", "Jam-All", "Jam-MT",
];

pub fn probe_preset(dataset: &str) -> Option<ProbeConfig> {
    use TaskKind::*;
    let (hidden, dropout, batch, task): (&[usize], f64, usize, TaskKind) = match dataset {
        "MSDS" => (&[1024, 1024], 0.5, 256, Multilabel),
        "MSD50" => (&[512], 0.5, 256, Multilabel),
        "MSD100" => (&[2048, 2048], 0.5, 256, Multilabel),
        "MSD500" => (&[4096, 4096, 4096], 0.5, 256, Multilabel),
        "AMM" => (&[1024], 0.5, 256, Multilabel),
        "MuMu" => (&[], 0.3, 256, Multilabel),
        "MTT" => (&[512], 0.5, 256, Multilabel),
        "NSynthP" | "NSynthI" => (&[], 0.0, 64, Multiclass),
        "GTZAN" => (&[], 0.0, 2560, Multiclass),
        "Emo" => (&[1024], 0.5, 512, Regression),
        "GS_Key" => (&[512], 0.8, 512, Key),
        "Jam-50" | "Jam-MT" => (&[512], 0.75, 256, Multilabel),
        "Jam-All" => (&[1024, 1024], 0.5, 256, Multilabel),
        _ => return None,
    };
    Some(ProbeConfig {
        hidden_layers: hidden.to_vec(),
        dropout,
        batch_size: batch,
        task,
        ..ProbeConfig::default()
    })
}

/// Training targets aligned with the rows of an embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `[M, K]` multi-hot.
    Multilabel(Tensor<f32>),
    /// Class index per item and class count.
    Multiclass {
        classes: Vec<usize>,
        n_classes: usize,
    },
    /// `[M, D]` real targets.
    Regression(Tensor<f32>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Multilabel(t) | Targets::Regression(t) => t.shape()[0],
            Targets::Multiclass { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn outputs(&self) -> usize {
        match self {
            Targets::Multilabel(t) | Targets::Regression(t) => t.shape()[1],
            Targets::Multiclass { n_classes, .. } => *n_classes,
        }
    }

    fn select(&self, rows: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Multilabel(t) => Targets::Multilabel(select_rows(t, rows)?),
            Targets::Regression(t) => Targets::Regression(select_rows(t, rows)?),
            Targets::Multiclass { classes, n_classes } => Targets::Multiclass {
                classes: rows.iter().map(|&r| classes[r]).collect(),
                n_classes: *n_classes,
            },
        })
    }
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let cols = t.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&r| t.row(r).iter().copied())
        .collect();
    Tensor::new(vec![rows.len(), cols], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub task: TaskKind,
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_names: Vec<String>,
    /// `(W, b)` per layer.
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
    /// Train-split mean and std of each regression target.
    pub target_mean: Vec<f32>,
    pub target_std: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    task: TaskKind,
    input_dim: usize,
    hidden_layers: Vec<usize>,
    output_names: Vec<String>,
    layers: Vec<[(Vec<usize>, Vec<f32>); 2]>,
    target_mean: Vec<f32>,
    target_std: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeLog {
    pub losses: Vec<f64>,
    /// `(step, validation score)` at each evaluation point.
    pub evals: Vec<(u64, f64)>,
    pub best_step: u64,
}

impl Probe {
    fn init(input_dim: usize, cfg: &ProbeConfig, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden_layers);
        dims.push(outputs);
        let layers = dims
            .windows(2)
            .map(|d| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).expect("positive std");
                let w = Tensor::from_fn(vec![d[0], d[1]], |_| normal.sample(rng) as f32);
                (w, Tensor::zeros(vec![d[1]]))
            })
            .collect();
        Self {
            task: cfg.task,
            input_dim,
            hidden_layers: cfg.hidden_layers.clone(),
            output_names: Vec::new(),
            layers,
            target_mean: Vec::new(),
            target_std: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProbeFile {
            task: self.task,
            input_dim: self.input_dim,
            hidden_layers: self.hidden_layers.clone(),
            output_names: self.output_names.clone(),
            layers: self
                .layers
                .iter()
                .map(|(w, b)| {
                    [
                        (w.shape().to_vec(), w.data().to_vec()),
                        (b.shape().to_vec(), b.data().to_vec()),
                    ]
                })
                .collect(),
            target_mean: self.target_mean.clone(),
            target_std: self.target_std.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ProbeFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let layers = f
            .layers
            .into_iter()
            .map(|[(ws, wd), (bs, bd)]| Ok((Tensor::new(ws, wd)?, Tensor::new(bs, bd)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut dims = vec![f.input_dim];
        dims.extend(&f.hidden_layers);
        let ok = layers.len() == dims.len()
            && layers.iter().enumerate().all(|(i, (w, b))| {
                w.ndim() == 2
                    && w.shape()[0] == dims[i]
                    && b.shape() == [w.shape()[1]]
                    && dims.get(i + 1).is_none_or(|&n| n == w.shape()[1])
            });
        if !ok {
            return Err(Error::Format("probe layer shapes are inconsistent".into()));
        }
        Ok(Self {
            task: f.task,
            input_dim: f.input_dim,
            hidden_layers: f.hidden_layers,
            output_names: f.output_names,
            layers,
            target_mean: f.target_mean,
            target_std: f.target_std,
        })
    }

    fn params(&self) -> Vec<Tensor<f32>> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    fn set_params(&mut self, params: &[Tensor<f32>]) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            *w = params[2 * i].clone();
            *b = params[2 * i + 1].clone();
        }
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("probe.{i}.w"), format!("probe.{i}.b")])
            .collect()
    }

    /// Raw outputs (logits or standardized regression values).
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        x: Var,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let n = self.layers.len();
        let mut h = x;
        let mut dropout = dropout;
        for l in 0..n {
            if l > 0 || n == 1 {
                if let Some((p, rng)) = dropout.as_mut() {
                    h = tape.dropout(h, *p, &mut **rng)?;
                }
            }
            let y = tape.matmul(h, vars[2 * l])?;
            let y = tape.add_broadcast(y, vars[2 * l + 1])?;
            h = if l + 1 < n { tape.relu(y) } else { y };
        }
        Ok(h)
    }

    fn raw_outputs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.ndim() != 2 || x.shape()[1] != self.input_dim {
            return Err(Error::shape("probe", x.shape(), &[0, self.input_dim]));
        }
        let rows = x.shape()[0];
        let outputs = self.layers.last().map_or(0, |(w, _)| w.shape()[1]);
        let mut out = Vec::with_capacity(rows * outputs);
        let chunk = 4096;
        for start in (0..rows).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(rows)).collect();
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = self
                .params()
                .into_iter()
                .map(|p| tape.constant(p))
                .collect();
            let xv = tape.constant(select_rows(x, &idx)?);
            let y = self.forward(&mut tape, &vars, xv, None)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Tensor::new(vec![rows, outputs], out)
    }

    /// Sigmoid scores (multilabel), softmax rows (multiclass and key), or
    /// de-standardized values (regression). Dropout is off.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut y = self.raw_outputs(x)?;
        let k = y.shape()[1];
        match self.task {
            TaskKind::Multilabel => {
                for v in y.data_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            TaskKind::Multiclass | TaskKind::Key => {
                for row in y.data_mut().chunks_mut(k) {
                    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
                    for v in row.iter_mut() {
                        *v = ((*v as f64 - mx).exp() / z) as f32;
                    }
                }
            }
            TaskKind::Regression => {
                for row in y.data_mut().chunks_mut(k) {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = *v * self.target_std[j] + self.target_mean[j];
                    }
                }
            }
        }
        Ok(y)
    }
}

fn standardize(t: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<f32>, Vec<f32>)> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0f64; cols];
    let mut var = vec![0f64; cols];
    for r in 0..rows {
        for (j, &v) in t.row(r).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for r in 0..rows {
        for (j, &v) in t.row(r).iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    // Spreads below f32 resolution of the mean count as constant.
    if var
        .iter()
        .zip(&mean)
        .any(|(&v, &m)| v.sqrt() <= 1e-6 * m.abs().max(1e-30))
    {
        return Err(Error::DegenerateTarget);
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let out = Tensor::from_fn(vec![rows, cols], |i| {
        let j = i % cols;
        ((t.data()[i] as f64 - mean[j]) / std[j]) as f32
    });
    Ok((
        out,
        mean.iter().map(|&m| m as f32).collect(),
        std.iter().map(|&s| s as f32).collect(),
    ))
}

/// Validation score used for model selection; higher is better.
fn selection_score(probe: &Probe, x: &Tensor<f32>, targets: &Targets) -> Result<f64> {
    let y = probe.predict(x)?;
    score_predictions(probe.task, &y, targets).map(|s| s.primary)
}

struct Scores {
    primary: f64,
    metrics: BTreeMap<String, f64>,
    per_tag: BTreeMap<String, BTreeMap<String, f64>>,
    skipped: Vec<usize>,
}

fn argmax_rows(y: &Tensor<f32>) -> Vec<usize> {
    let k = y.shape()[1];
    y.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn score_predictions(task: TaskKind, y: &Tensor<f32>, targets: &Targets) -> Result<Scores> {
    let mut metrics = BTreeMap::new();
    let mut per_tag = BTreeMap::new();
    let mut skipped = Vec::new();
    let primary = match (task, targets) {
        (TaskKind::Multilabel, Targets::Multilabel(t)) => {
            let scores: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            let labels: Vec<bool> = t.data().iter().map(|&v| v >= 0.5).collect();
            let ts = metrics::tag_scores(&scores, &labels, t.shape()[1])?;
            for (k, (ap, auc)) in ts.per_tag_ap.iter().zip(&ts.per_tag_auc).enumerate() {
                let mut m = BTreeMap::new();
                if let Some(ap) = ap {
                    m.insert("ap".to_string(), *ap);
                }
                if let Some(auc) = auc {
                    m.insert("roc_auc".to_string(), *auc);
                }
                per_tag.insert(k.to_string(), m);
            }
            skipped = ts.skipped_ap.clone();
            if let Some(a) = ts.roc_auc {
                metrics.insert("roc_auc".to_string(), a);
            }
            let map = ts.map.unwrap_or(0.0);
            metrics.insert("map".to_string(), map);
            map
        }
        (TaskKind::Multiclass, Targets::Multiclass { classes, .. }) => {
            let acc = metrics::accuracy(&argmax_rows(y), classes)?;
            metrics.insert("accuracy".to_string(), acc);
            acc
        }
        (TaskKind::Key, Targets::Multiclass { classes, .. }) => {
            let pred = argmax_rows(y)
                .into_iter()
                .map(KeyLabel::from_index)
                .collect::<Result<Vec<_>>>()?;
            let truth = classes
                .iter()
                .map(|&c| KeyLabel::from_index(c))
                .collect::<Result<Vec<_>>>()?;
            let w = metrics::weighted_key_accuracy(&pred, &truth)?;
            metrics.insert("weighted_key_accuracy".to_string(), w);
            metrics.insert(
                "accuracy".to_string(),
                metrics::accuracy(&argmax_rows(y), classes)?,
            );
            w
        }
        (TaskKind::Regression, Targets::Regression(t)) => {
            let d = t.shape()[1];
            let mut total = 0.0;
            for j in 0..d {
                let p: Vec<f64> = y
                    .data()
                    .iter()
                    .skip(j)
                    .step_by(d)
                    .map(|&v| v as f64)
                    .collect();
                let q: Vec<f64> = t
                    .data()
                    .iter()
                    .skip(j)
                    .step_by(d)
                    .map(|&v| v as f64)
                    .collect();
                let r2 = metrics::r_squared(&p, &q)?;
                per_tag.insert(j.to_string(), BTreeMap::from([("r2".to_string(), r2)]));
                total += r2;
            }
            let r2 = total / d.max(1) as f64;
            metrics.insert("r2".to_string(), r2);
            r2
        }
        _ => {
            return Err(Error::InvalidInput(
                "targets do not match the task kind".into(),
            ))
        }
    };
    Ok(Scores {
        primary,
        metrics,
        per_tag,
        skipped,
    })
}

fn check_data(x: &Tensor<f32>, targets: &Targets, split: &str) -> Result<()> {
    if x.ndim() != 2 {
        return Err(Error::shape("probe input", x.shape(), &[]));
    }
    if x.shape()[0] == 0 {
        return Err(Error::EmptyDataset(format!("{split} split is empty")));
    }
    if targets.len() != x.shape()[0] {
        return Err(Error::shape("probe targets", x.shape(), &[targets.len()]));
    }
    Ok(())
}

/// Train a probe on `(x, targets)`. With a validation set, the parameters
/// with the best validation score among `eval_points` evenly spaced
/// checkpoints (the last one included) are kept.
pub fn train_probe(
    x: &Tensor<f32>,
    targets: &Targets,
    cfg: &ProbeConfig,
    valid: Option<(&Tensor<f32>, &Targets)>,
) -> Result<(Probe, ProbeLog)> {
    cfg.validate()?;
    check_data(x, targets, "train")?;
    if let Some((vx, vt)) = valid {
        check_data(vx, vt, "valid")?;
        if vx.shape()[1] != x.shape()[1] {
            return Err(Error::shape("probe valid", vx.shape(), x.shape()));
        }
    }
    let kind_ok = matches!(
        (cfg.task, targets),
        (TaskKind::Multilabel, Targets::Multilabel(_))
            | (
                TaskKind::Multiclass | TaskKind::Key,
                Targets::Multiclass { .. }
            )
            | (TaskKind::Regression, Targets::Regression(_))
    );
    if !kind_ok {
        return Err(Error::InvalidInput(
            "targets do not match the task kind".into(),
        ));
    }
    let rows = x.shape()[0];
    if cfg.drop_last && rows < cfg.batch_size {
        return Err(Error::EmptyDataset(format!(
            "{rows} training items cannot fill a batch of {} with drop_last",
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = Probe::init(x.shape()[1], cfg, targets.outputs(), &mut rng);
    let train_targets = match targets {
        Targets::Regression(t) => {
            let (z, mean, std) = standardize(t)?;
            probe.target_mean = mean;
            probe.target_std = std;
            Targets::Regression(z)
        }
        other => other.clone(),
    };

    let names = probe.param_names();
    let mut params = probe.params();
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let sched = cfg.schedule();
    let batch = cfg.batch_size.min(rows);
    let mut log = ProbeLog::default();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut cursor = rows;
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let eval_every = (cfg.total_steps / cfg.eval_points).max(1);

    for step in 1..=cfg.total_steps {
        if cursor + if cfg.drop_last { batch } else { 1 } > rows {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch).min(rows);
        let idx = &order[cursor..end];
        cursor = end;

        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let xb = tape.constant(select_rows(x, idx)?);
        let y = probe.forward(&mut tape, &vars, xb, Some((cfg.dropout, &mut rng)))?;
        let mut loss = match train_targets.select(idx)? {
            Targets::Multilabel(t) => {
                let p = tape.sigmoid(y);
                tape.binary_cross_entropy(p, &t, BCE_CLIP as f32)?
            }
            Targets::Multiclass { classes, .. } => {
                tape.softmax_cross_entropy(y, &classes, Reduction::Mean)?
            }
            Targets::Regression(t) => tape.squared_error(y, &t, Reduction::Mean)?,
        };
        if cfg.l2 > 0.0 {
            for l in 0..probe.layers.len() {
                let w = vars[2 * l];
                let sq = tape.mul(w, w)?;
                let s = tape.sum(sq);
                let pen = tape.scale(s, cfg.l2 as f32);
                loss = tape.add(loss, pen)?;
            }
        }
        log.losses.push(tape.value(loss).item() as f64);
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(&mut params, &names, &g, &mut adam, lr_at(step, &sched))?;

        if let Some((vx, vt)) = valid {
            if step % eval_every == 0 || step == cfg.total_steps {
                probe.set_params(&params);
                let score = selection_score(&probe, vx, vt)?;
                log.evals.push((step, score));
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, params.clone()));
                    log.best_step = step;
                }
            }
        }
    }
    match best {
        Some((_, p)) => probe.set_params(&p),
        None => {
            probe.set_params(&params);
            log.best_step = cfg.total_steps;
        }
    }
    Ok((probe, log))
}

/// A downstream task over a catalog: which labels or targets to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub kind: TaskKind,
    /// Labels starting with this prefix form the task vocabulary.
    #[serde(default)]
    pub label_prefix: String,
    /// Scalar target names for regression tasks.
    #[serde(default)]
    pub targets: Vec<String>,
}

/// Embeddings and targets of one split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub ids: Vec<String>,
    pub x: Tensor<f32>,
    pub targets: Targets,
}

fn task_vocab(catalog: &Catalog, task: &TaskConfig) -> Result<Vocabulary> {
    if task.kind == TaskKind::Key {
        let labels = KeyLabel::all()
            .map(|k| format!("{}{k}", task.label_prefix))
            .collect();
        return Vocabulary::new(labels);
    }
    let v = catalog.vocab.with_prefix(&task.label_prefix);
    if v.is_empty() && task.kind != TaskKind::Regression {
        return Err(Error::InvalidInput(format!(
            "no labels with prefix {:?} for task {}",
            task.label_prefix, task.name
        )));
    }
    Ok(v)
}

fn single_class(r: &TrackRecord, vocab: &Vocabulary, task: &TaskConfig) -> Result<usize> {
    let hits: Vec<usize> = r.labels.iter().filter_map(|l| vocab.index_of(l)).collect();
    if hits.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "track {} needs exactly one label for task {}, found {}",
            r.track_id,
            task.name,
            hits.len()
        )));
    }
    Ok(hits[0])
}

/// Gather embeddings and targets of one split.
pub fn task_data(
    embeddings: &BTreeMap<String, Tensor<f32>>,
    catalog: &Catalog,
    task: &TaskConfig,
    split: Split,
) -> Result<TaskData> {
    let vocab = task_vocab(catalog, task)?;
    let records: Vec<&TrackRecord> = catalog.split(split).collect();
    let dim = embeddings.values().next().map_or(0, Tensor::numel);
    let mut ids = Vec::with_capacity(records.len());
    let mut x = Vec::with_capacity(records.len() * dim);
    for r in &records {
        let e = embeddings
            .get(&r.track_id)
            .ok_or_else(|| Error::InvalidInput(format!("no embedding for track {}", r.track_id)))?;
        if e.numel() != dim {
            return Err(Error::shape("task_data", e.shape(), &[dim]));
        }
        x.extend_from_slice(e.data());
        ids.push(r.track_id.clone());
    }
    let n = records.len();
    let targets = match task.kind {
        TaskKind::Multilabel => {
            let data = records
                .iter()
                .flat_map(|r| vocab.multi_hot(&r.labels))
                .collect();
            Targets::Multilabel(Tensor::new(vec![n, vocab.len()], data)?)
        }
        TaskKind::Multiclass | TaskKind::Key => Targets::Multiclass {
            classes: records
                .iter()
                .map(|r| single_class(r, &vocab, task))
                .collect::<Result<_>>()?,
            n_classes: vocab.len(),
        },
        TaskKind::Regression => {
            if task.targets.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "regression task {} names no targets",
                    task.name
                )));
            }
            let mut data = Vec::with_capacity(n * task.targets.len());
            for r in &records {
                for t in &task.targets {
                    let v = r.scalar_targets.get(t).ok_or_else(|| {
                        Error::InvalidInput(format!("track {} lacks target {t}", r.track_id))
                    })?;
                    data.push(*v as f32);
                }
            }
            Targets::Regression(Tensor::new(vec![n, task.targets.len()], data)?)
        }
    };
    Ok(TaskData {
        ids,
        x: Tensor::new(vec![n, dim], x)?,
        targets,
    })
}

/// Test-split results of one probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    pub per_tag: BTreeMap<String, BTreeMap<String, f64>>,
    /// Tags without test positives, excluded from the mAP.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_tags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub struct TaskRun {
    pub probe: Probe,
    pub log: ProbeLog,
    pub report: MetricsReport,
    /// Track ids the probe was trained on.
    pub train_ids: BTreeSet<String>,
}

fn evaluate_split(
    probe: &Probe,
    data: &TaskData,
    task: &TaskConfig,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    if probe.task != task.kind {
        return Err(Error::Config(format!(
            "probe kind {:?} does not match task {}",
            probe.task, task.name
        )));
    }
    let names = &probe.output_names;
    let y = probe.predict(&data.x)?;
    if y.shape()[1] != names.len() {
        return Err(Error::shape(
            "evaluate",
            y.shape(),
            &[data.ids.len(), names.len()],
        ));
    }
    let scores = score_predictions(task.kind, &y, &data.targets)?;
    let per_tag = scores
        .per_tag
        .into_iter()
        .map(|(k, v)| (names[k.parse::<usize>().expect("index key")].clone(), v))
        .collect();
    Ok(MetricsReport {
        task: task.name.clone(),
        metrics: scores.metrics,
        config_hash: config_hash.to_string(),
        seed,
        model_tag: None,
        per_tag,
        skipped_tags: scores.skipped.iter().map(|&k| names[k].clone()).collect(),
    })
}

/// Score a trained probe on the test split.
pub fn evaluate(
    probe: &Probe,
    embeddings: &BTreeMap<String, Tensor<f32>>,
    catalog: &Catalog,
    task: &TaskConfig,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    let test = task_data(embeddings, catalog, task, Split::Test)?;
    if test.ids.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "task {} has no test items",
            task.name
        )));
    }
    evaluate_split(probe, &test, task, seed, config_hash)
}

/// Train on the train split, select on valid, report on test.
pub fn run_task(
    embeddings: &BTreeMap<String, Tensor<f32>>,
    catalog: &Catalog,
    task: &TaskConfig,
    cfg: &ProbeConfig,
    config_hash: &str,
) -> Result<TaskRun> {
    if cfg.task != task.kind {
        return Err(Error::Config(format!(
            "probe task kind {:?} does not match task {} ({:?})",
            cfg.task, task.name, task.kind
        )));
    }
    let train = task_data(embeddings, catalog, task, Split::Train)?;
    let valid = task_data(embeddings, catalog, task, Split::Valid)?;
    let test = task_data(embeddings, catalog, task, Split::Test)?;
    if test.ids.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "task {} has no test items",
            task.name
        )));
    }
    let valid_ref = (!valid.ids.is_empty()).then_some((&valid.x, &valid.targets));
    let (mut probe, log) = train_probe(&train.x, &train.targets, cfg, valid_ref)?;
    probe.output_names = match task.kind {
        TaskKind::Regression => task.targets.clone(),
        _ => task_vocab(catalog, task)?.labels().to_vec(),
    };
    let report = evaluate_split(&probe, &test, task, cfg.seed, config_hash)?;
    Ok(TaskRun {
        probe,
        log,
        report,
        train_ids: train.ids.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_every_dataset() {
        for d in PROBE_DATASETS {
            probe_preset(d).unwrap().validate().unwrap();
        }
        let mtt = probe_preset("MTT").unwrap();
        assert_eq!(
            (mtt.hidden_layers, mtt.dropout, mtt.batch_size),
            (vec![512], 0.5, 256)
        );
        let key = probe_preset("GS_Key").unwrap();
        assert_eq!(
            (key.hidden_layers, key.dropout, key.batch_size),
            (vec![512], 0.8, 512)
        );
        assert!(probe_preset("nope").is_none());
    }

    #[test]
    fn zero_weight_probe_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ProbeConfig {
            hidden_layers: vec![],
            task: TaskKind::Multiclass,
            ..ProbeConfig::default()
        };
        let mut p = Probe::init(3, &cfg, 4, &mut rng);
        p.layers[0].0 = Tensor::zeros(vec![3, 4]);
        let y = p
            .predict(&Tensor::from_fn(vec![5, 3], |i| i as f32))
            .unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
