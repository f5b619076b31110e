//! Pre-training losses (binary cross entropy and NT-Xent), the warmup-cosine
//! learning-rate schedule, Adam, and the supervised and contrastive
//! training loops.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Reduction, Tape, Tensor, Var};
use crate::catalog::{Catalog, Split, TrackRecord};
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::sampler::{
    build_contrastive_batch, build_supervised_batch, eligible, run_pipeline, FeatureStore,
    MixupConfig, PipelineConfig, MAX_PAIR_DISTANCE,
};

pub const BCE_CLIP: f64 = 1e-7;

/// Mean binary cross entropy of `pred` (probabilities) against `targets`.
pub fn bce_on<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &Tensor<T>) -> Result<Var> {
    tape.binary_cross_entropy(pred, targets, T::cst(BCE_CLIP))
}

/// `bce_on` evaluated in `f64` for plain tensors.
pub fn bce_loss(targets: &Tensor<f64>, pred: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(pred.clone());
    let l = bce_on(&mut tape, p, targets)?;
    Ok(tape.value(l).item())
}

/// Partner row of `i` in an interleaved pair batch.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// Scaled cosine-similarity logits `cos(v_i, v_k) / tau`, with the diagonal
/// masked out.
pub fn ntxent_logits<T: Real>(tape: &mut Tape<T>, v: Var, tau: f64) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 || s[0] < 2 || s[0] % 2 != 0 {
        return Err(Error::shape("ntxent", &s, &[]));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let rows = s[0];
    let u = tape.l2_normalize(v, 1)?;
    let sim = tape.matmul_t(u, u)?;
    let logits = tape.scale(sim, T::cst(1.0 / tau));
    let mask = (0..rows * rows).map(|k| k / rows == k % rows).collect();
    tape.masked_fill(logits, mask)
}

/// NT-Xent over `v` shaped `[2N, n]` whose rows `2i` and `2i + 1` are
/// positives. `Reduction::Sum` sums over all `2N` anchors.
pub fn ntxent_on<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let logits = ntxent_logits(tape, v, tau)?;
    let rows = tape.shape(v)[0];
    let targets: Vec<usize> = (0..rows).map(partner).collect();
    tape.softmax_cross_entropy(logits, &targets, reduction)
}

/// Summed NT-Xent evaluated in `f64`.
pub fn ntxent_loss(v: &Tensor<f64>, tau: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(v.clone());
    let l = ntxent_on(&mut tape, x, tau, Reduction::Sum)?;
    Ok(tape.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_steps: 5000,
            total_steps: 200_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps > 0 && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(
                "schedule needs 0 < warmup_steps < total_steps".into(),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    let (w, t) = (sched.warmup_steps, sched.total_steps);
    if step >= t {
        0.0
    } else if step < w {
        sched.peak_lr * step as f64 / w as f64
    } else {
        let frac = (step - w) as f64 / (t - w) as f64;
        sched.peak_lr * 0.5 * (1.0 + (PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. `grads[i] = None` leaves parameter
/// `i` and its moments untouched. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Nan {
                    param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
    }
    state.t += 1;
    let c = state.cfg;
    let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
    let bc1 = T::cst(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::cst(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::cst(lr), T::cst(c.eps));
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in params[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    Supervised,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    Mean,
}

impl From<LossReduction> for Reduction {
    fn from(r: LossReduction) -> Self {
        match r {
            LossReduction::Sum => Reduction::Sum,
            LossReduction::Mean => Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    /// Tracks per supervised batch, or pairs per contrastive batch.
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub temperature: f64,
    pub reduction: LossReduction,
    /// Positive-pair centre bound in frames; `None` allows the whole track.
    pub max_pair_distance: Option<usize>,
    pub mixup: MixupConfig,
    pub checkpoint_every: u64,
    pub pipeline: PipelineConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Contrastive,
            batch_size: 32,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            temperature: 0.1,
            reduction: LossReduction::Sum,
            max_pair_distance: Some(MAX_PAIR_DISTANCE),
            mixup: MixupConfig::default(),
            checkpoint_every: 1000,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.mixup.validate()?;
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOutput {
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn loss_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in losses {
        s.push_str(&format!("{},{:e},{}\n", r.step, r.lr, r.loss));
    }
    s
}

enum Batch {
    Supervised(crate::sampler::SupervisedBatch),
    Contrastive(crate::sampler::ContrastiveBatch),
}

/// Loss and gradients of one batch, in the model's parameter order.
fn batch_gradients(
    model: &EncoderModel,
    batch: Batch,
    cfg: &PretrainConfig,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::<f32>::new();
    let p = model.bind(&mut tape, true);
    let loss = match batch {
        Batch::Supervised(b) => {
            let x = tape.constant(b.features);
            let z = model.encode_on(&mut tape, &p, x)?;
            let v = model.project_on(&mut tape, &p, z)?;
            let y = model.head_on(&mut tape, &p, v)?;
            bce_on(&mut tape, y, &b.labels)?
        }
        Batch::Contrastive(b) => {
            let x = tape.constant(b.features);
            let z = model.encode_on(&mut tape, &p, x)?;
            let v = model.project_on(&mut tape, &p, z)?;
            ntxent_on(&mut tape, v, cfg.temperature, cfg.reduction.into())?
        }
    };
    let value = tape.value(loss).item() as f64;
    let vars = p.vars().to_vec();
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Run the pre-training loop on the catalog's train split until
/// `model.step == schedule.total_steps`. Checkpoints and `loss.csv` go to
/// `out_dir` when given. Supervised mode adds a head sized to the catalog
/// vocabulary if the model lacks one.
pub fn pretrain(
    cfg: &PretrainConfig,
    catalog: &Catalog,
    store: &FeatureStore,
    model: &mut EncoderModel,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let train: Vec<TrackRecord> = catalog.split(Split::Train).cloned().collect();
    let tracks = eligible(&train, store)?;
    let vocab = &catalog.vocab;
    if cfg.mode == PretrainMode::Supervised {
        if vocab.is_empty() {
            return Err(Error::InvalidInput(
                "supervised pre-training needs labels".into(),
            ));
        }
        if model.config().head_classes != Some(vocab.len()) {
            *model = model.clone().with_head(vocab.len(), seed)?;
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = model.step;
    let remaining = cfg.schedule.total_steps.saturating_sub(start) as usize;
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut out = PretrainOutput::default();
    let names = model.names().to_vec();
    let clock = Instant::now();

    let build = |_: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Batch> {
        Ok(match cfg.mode {
            PretrainMode::Supervised => Batch::Supervised(build_supervised_batch(
                &tracks,
                cfg.batch_size,
                vocab,
                &cfg.mixup,
                store,
                rng,
            )?),
            PretrainMode::Contrastive => Batch::Contrastive(build_contrastive_batch(
                &tracks,
                cfg.batch_size,
                cfg.max_pair_distance,
                &cfg.mixup,
                store,
                rng,
            )?),
        })
    };
    let batch_seed = seed ^ start.rotate_left(32);
    run_pipeline(cfg.pipeline, batch_seed, remaining, build, |_, batch| {
        let step = model.step + 1;
        let lr = lr_at(step, &cfg.schedule);
        let (loss, grads) = batch_gradients(model, batch, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Nan {
                param: "loss".into(),
            });
        }
        adam_step(model.params_mut(), &names, &grads, &mut adam, lr)?;
        model.step = step;
        out.losses.push(LossRecord { step, lr, loss });
        if step % 100 == 0 {
            log::info!(
                "step {step} lr {lr:.2e} loss {loss:.4} ({:.1}s)",
                clock.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.schedule.total_steps {
                let path = dir.join(format!("checkpoint_{step:07}.mck"));
                model.save(&path)?;
                model.save(&dir.join("last.mck"))?;
                out.checkpoints.push(path);
            }
        }
        Ok(())
    })?;
    if let Some(dir) = out_dir {
        let path = dir.join("loss.csv");
        fs::write(&path, loss_csv(&out.losses)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(out)
}
