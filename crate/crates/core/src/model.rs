//! Encoder `f(X) -> z`, projector `h(z) -> v` and the supervised sigmoid
//! head, with parameter initialization and checkpoint I/O.
//!
//! The encoder is a normalizer-free residual conv stack. Its stem spans all
//! mel bins so every later layer works on a `[C, 1, W]` time series; each
//! stage is an optional strided transition conv followed by one residual
//! block `crop(x) + gain * conv1x1(relu(conv1x3(x)))`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    /// Time extent of the stem kernel, which also spans all `n_mels` bins.
    pub stem_kernel: usize,
    pub widths: Vec<usize>,
    /// `strides[0]` is the stem's time stride; `strides[s]` for `s >= 1` is
    /// the stride of stage `s`'s transition conv.
    pub strides: Vec<usize>,
    pub residual_gain: f32,
    /// Inputs are standardized as `(x - input_mean) / input_std`.
    pub input_mean: f32,
    pub input_std: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 96,
            stem_kernel: 8,
            widths: vec![16, 32, 64],
            strides: vec![4, 2, 2],
            residual_gain: 0.2,
            input_mean: -8.0,
            input_std: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "encoder widths and strides must be non-empty and equal in length".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config(
                "encoder widths and strides must be positive".into(),
            ));
        }
        if self.n_mels == 0 || self.stem_kernel == 0 {
            return Err(Error::Config(
                "n_mels and stem_kernel must be positive".into(),
            ));
        }
        if !(self.input_std > 0.0)
            || !self.input_mean.is_finite()
            || !self.residual_gain.is_finite()
        {
            return Err(Error::Config(
                "input_std must be positive and all scalars finite".into(),
            ));
        }
        Ok(())
    }

    /// Embedding dimensionality `m`, the channel count of the last stage.
    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Width of the final feature map for an input `width` frames wide.
    pub fn output_width(&self, width: usize) -> Option<usize> {
        if width < self.stem_kernel {
            return None;
        }
        let mut w = (width - self.stem_kernel) / self.strides[0] + 1;
        for s in 0..self.widths.len() {
            if s > 0 {
                w = w.checked_sub(3)? / self.strides[s] + 1;
            }
            w = w.checked_sub(2).filter(|&w| w > 0)?;
        }
        Some(w)
    }

    /// Narrowest input the encoder accepts.
    pub fn min_input_width(&self) -> usize {
        (self.stem_kernel..)
            .find(|&w| self.output_width(w).is_some())
            .expect("some width is always large enough")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_width: 256,
            output_dim: 64,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers != 3 {
            return Err(Error::Config(
                "projector must have exactly 3 hidden layers".into(),
            ));
        }
        if self.hidden_width == 0 || self.output_dim == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    /// Output size of the supervised head, if present.
    pub head_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    pub step: u64,
}

/// Parameter shapes in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let enc = &cfg.encoder;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, oc, ic, kh, kw| {
        out.push((format!("{name}.w"), vec![oc, ic, kh, kw]));
        out.push((format!("{name}.b"), vec![oc]));
    };
    conv(
        &mut out,
        "stem".into(),
        enc.widths[0],
        1,
        enc.n_mels,
        enc.stem_kernel,
    );
    for (s, &w) in enc.widths.iter().enumerate() {
        if s > 0 {
            conv(
                &mut out,
                format!("stage{s}.down"),
                w,
                enc.widths[s - 1],
                1,
                3,
            );
        }
        conv(&mut out, format!("stage{s}.res1"), w, w, 1, 3);
        conv(&mut out, format!("stage{s}.res2"), w, w, 1, 1);
    }
    let p = &cfg.projector;
    let mut fan_in = enc.embedding_dim();
    for i in 0..p.hidden_layers {
        out.push((format!("proj.{i}.w"), vec![fan_in, p.hidden_width]));
        out.push((format!("proj.{i}.b"), vec![p.hidden_width]));
        fan_in = p.hidden_width;
    }
    out.push((
        format!("proj.{}.w", p.hidden_layers),
        vec![fan_in, p.output_dim],
    ));
    out.push((format!("proj.{}.b", p.hidden_layers), vec![p.output_dim]));
    if let Some(k) = cfg.head_classes {
        out.push(("head.w".into(), vec![p.output_dim, k]));
        out.push(("head.b".into(), vec![k]));
    }
    out
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => 1,
    }
}

fn he_init(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    if shape.len() == 1 {
        return Tensor::zeros(shape.to_vec());
    }
    let std = (2.0 / fan_in(shape) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng) as f32)
}

/// Parameters registered on a tape, keyed by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))
    }

    /// Vars in the model's parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Initialize encoder and projector with He fan-in Gaussian weights and
/// zero biases; deterministic per seed.
pub fn init_model(enc: EncoderConfig, proj: ProjectorConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::init(
        ModelConfig {
            encoder: enc,
            projector: proj,
            head_classes: None,
        },
        seed,
    )
}

impl EncoderModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        config.projector.validate()?;
        if config.head_classes == Some(0) {
            return Err(Error::Config("head must have at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, params) = layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = he_init(&shape, &mut rng);
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
            step: 0,
        })
    }

    /// Same model with a freshly initialized `k`-way supervised head.
    pub fn with_head(mut self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("head must have at least one class".into()));
        }
        self.remove_head();
        let n = self.config.projector.output_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.names.push("head.w".into());
        self.params.push(he_init(&[n, k], &mut rng));
        self.names.push("head.b".into());
        self.params.push(Tensor::zeros(vec![k]));
        self.config.head_classes = Some(k);
        Ok(self)
    }

    fn remove_head(&mut self) {
        if self.config.head_classes.take().is_some() {
            self.names.truncate(self.names.len() - 2);
            self.params.truncate(self.params.len() - 2);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Register every parameter on `tape`, cast to `T`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        let mut order = Vec::with_capacity(self.params.len());
        for (name, p) in self.names.iter().zip(&self.params) {
            let v = tape.leaf(p.cast::<T>(), trainable);
            vars.insert(name.clone(), v);
            order.push(v);
        }
        BoundParams { vars, order }
    }

    /// Bind vars already on a tape, given in parameter order, as this
    /// model's parameters.
    pub fn bind_vars<T: Real>(&self, tape: &Tape<T>, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "bind_vars",
                &[vars.len()],
                &[self.params.len()],
            ));
        }
        for (&v, p) in vars.iter().zip(&self.params) {
            if tape.shape(v) != p.shape() {
                return Err(Error::shape("bind_vars", tape.shape(v), p.shape()));
            }
        }
        Ok(BoundParams {
            vars: self
                .names
                .iter()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
            order: vars.to_vec(),
        })
    }

    /// Encoder forward on `x` shaped `[B, n_mels, W]`; returns `[B, m]`.
    pub fn encode_on<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let enc = &self.config.encoder;
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != enc.n_mels {
            return Err(Error::shape(
                "encode",
                &s,
                &[0, enc.n_mels, enc.min_input_width()],
            ));
        }
        if enc.output_width(s[2]).is_none() {
            return Err(Error::shape(
                "encode",
                &s,
                &[s[0], enc.n_mels, enc.min_input_width()],
            ));
        }
        let x = tape.reshape(x, vec![s[0], 1, s[1], s[2]])?;
        let inv = 1.0 / enc.input_std as f64;
        let x = tape.affine(x, T::cst(inv), T::cst(-(enc.input_mean as f64) * inv));
        let h = tape.conv2d(
            x,
            p.get("stem.w")?,
            Some(p.get("stem.b")?),
            (1, enc.strides[0]),
        )?;
        let mut h = tape.relu(h);
        let gain = T::cst(enc.residual_gain as f64);
        for s in 0..enc.widths.len() {
            if s > 0 {
                let d = format!("stage{s}.down");
                let y = tape.conv2d(
                    h,
                    p.get(&format!("{d}.w"))?,
                    Some(p.get(&format!("{d}.b"))?),
                    (1, enc.strides[s]),
                )?;
                h = tape.relu(y);
            }
            let r1 = format!("stage{s}.res1");
            let r2 = format!("stage{s}.res2");
            let y = tape.conv2d(
                h,
                p.get(&format!("{r1}.w"))?,
                Some(p.get(&format!("{r1}.b"))?),
                (1, 1),
            )?;
            let y = tape.relu(y);
            let y = tape.conv2d(
                y,
                p.get(&format!("{r2}.w"))?,
                Some(p.get(&format!("{r2}.b"))?),
                (1, 1),
            )?;
            let y = tape.scale(y, gain);
            let w = tape.shape(y)[3];
            let skip = tape.crop_width(h, 1, w)?;
            h = tape.add(skip, y)?;
        }
        let h = tape.relu(h);
        tape.global_avg_pool(h)
    }

    /// Projector forward: 3 hidden ReLU layers, then linear to `n`.
    pub fn project_on<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, z: Var) -> Result<Var> {
        let m = self.embedding_dim();
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != m {
            return Err(Error::shape(
                "project",
                s,
                &[s.first().copied().unwrap_or(0), m],
            ));
        }
        let depth = self.config.projector.hidden_layers;
        let mut h = z;
        for i in 0..=depth {
            let y = tape.matmul(h, p.get(&format!("proj.{i}.w"))?)?;
            let y = tape.add_broadcast(y, p.get(&format!("proj.{i}.b"))?)?;
            h = if i < depth { tape.relu(y) } else { y };
        }
        Ok(h)
    }

    /// Supervised head on projector output: `sigmoid(linear(v))`.
    pub fn head_on<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, v: Var) -> Result<Var> {
        if self.config.head_classes.is_none() {
            return Err(Error::InvalidInput("model has no supervised head".into()));
        }
        let y = tape.matmul(v, p.get("head.w")?)?;
        let y = tape.add_broadcast(y, p.get("head.b")?)?;
        Ok(tape.sigmoid(y))
    }

    /// Eval-mode encoder forward on `[B, n_mels, W]`.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, &p, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode projector forward on `[B, m]`.
    pub fn project(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let v = self.project_on(&mut tape, &p, zv)?;
        Ok(tape.value(v).clone())
    }

    /// Write the checkpoint atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let io = |e| Error::io(&tmp, e);
            w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&(self.params.len() as u32).to_le_bytes())
                .map_err(io)?;
            for (name, p) in self.names.iter().zip(&self.params) {
                w.write_all(&(name.len() as u16).to_le_bytes())
                    .map_err(io)?;
                w.write_all(name.as_bytes()).map_err(io)?;
                w.write_all(&[p.ndim() as u8]).map_err(io)?;
                for &d in p.shape() {
                    w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
                }
            }
            for p in &self.params {
                for v in p.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&cfg).map_err(io)?;
            w.write_all(&self.step.to_le_bytes()).map_err(io)?;
            w.flush().map_err(io)?;
            w.get_ref().sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(4).ok_or_else(|| fmt("truncated"))? != CHECKPOINT_MAGIC {
            return Err(fmt("missing MCK1 header"));
        }
        let trunc = || fmt("truncated");
        let count = r.u32().ok_or_else(trunc)? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(trunc)?)
                .map_err(|_| fmt("parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1).ok_or_else(trunc)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(trunc)?;
            manifest.push((name, shape));
        }
        let mut params = Vec::with_capacity(count);
        for (_, shape) in &manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        let cfg_len = r.u32().ok_or_else(trunc)? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len).ok_or_else(trunc)?)
            .map_err(|e| fmt(&format!("bad config: {e}")))?;
        let step = u64::from_le_bytes(r.take(8).ok_or_else(trunc)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        config.encoder.validate()?;
        config.projector.validate()?;
        if layout(&config) != manifest {
            return Err(fmt("parameter manifest does not match the stored config"));
        }
        let names = manifest.into_iter().map(|(n, _)| n).collect();
        let model = Self {
            config,
            names,
            params,
            step,
        };
        if !model.all_finite() {
            return Err(fmt("non-finite parameter"));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2)
            .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
