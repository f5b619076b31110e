//! Command-line entry point for the feature, pre-training, embedding, probe
//! and report pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use musicrep::catalog::{label_stats, load_manifest, synth_corpus, write_manifest, Catalog};
use musicrep::config::RunConfig;
use musicrep::dsp::Frontend;
use musicrep::embedder::{embed_track, embedding_map, read_embeddings, write_embeddings};
use musicrep::model::{EncoderModel, ModelConfig};
use musicrep::prober::{evaluate, run_task, MetricsReport, Probe, TaskConfig};
use musicrep::sampler::FeatureStore;
use musicrep::trainer::pretrain;
use serde_json::json;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "musicrep", version, about = "Music representation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key=value` applied on top of the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (audio and manifest).
    Synth(Common),
    /// Compute log-mel features for every track in the manifest.
    Features(Common),
    /// Label counts and labels-per-item histogram.
    Stats(Common),
    /// Pre-train an encoder (supervised or contrastive).
    Pretrain(Common),
    /// Embed every track with a trained checkpoint.
    Embed(Common),
    /// Train a probe on embeddings and report test metrics.
    Probe(Common),
    /// Score a trained probe on the test split.
    Eval(Common),
    /// Aggregate report JSON files into CSV and markdown tables.
    Report(Common),
}

struct Run {
    cfg: RunConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn new(c: &Common) -> Result<Self> {
        let cfg = RunConfig::load(&c.config, &c.overrides)
            .with_context(|| format!("loading config {}", c.config.display()))?;
        let hash = cfg.config_hash();
        fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
        log::info!("config_hash {hash} seed {}", c.seed);
        Ok(Self {
            cfg,
            hash,
            seed: c.seed,
            out: c.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Write `<artifact>.meta.json` recording provenance.
    fn sidecar(&self, artifact: &Path) -> Result<()> {
        let meta = json!({
            "artifact": artifact.file_name().map(|n| n.to_string_lossy().into_owned()),
            "config_hash": self.hash,
            "seed": self.seed,
            "tool_version": VERSION,
        });
        let mut name = artifact.as_os_str().to_owned();
        name.push(".meta.json");
        fs::write(&name, serde_json::to_string_pretty(&meta)? + "\n")
            .with_context(|| format!("writing sidecar for {}", artifact.display()))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        let tmp = path.with_extension("partial");
        fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path)?;
        self.sidecar(&path)?;
        Ok(path)
    }

    fn require<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
        p.as_ref().with_context(|| format!("config key data.{key} is required"))
    }

    fn catalog(&self) -> Result<Catalog> {
        let d = &self.cfg.data;
        let m = self.require(&d.manifest, "manifest")?;
        Ok(load_manifest(m, d.vocab.as_deref()).with_context(|| format!("loading {}", m.display()))?)
    }

    fn task(&self) -> Result<&TaskConfig> {
        self.cfg.task.as_ref().context("config section [task] is required")
    }

    fn embeddings(&self) -> Result<BTreeMap<String, musicrep::autodiff::Tensor<f32>>> {
        let p = self.require(&self.cfg.data.embeddings, "embeddings")?;
        Ok(embedding_map(read_embeddings(p)?))
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn synth(run: &Run) -> Result<()> {
    let mut cfg = run.cfg.synth.clone();
    cfg.seed = run.seed;
    let catalog = synth_corpus(&cfg, &run.out)?;
    run.sidecar(&run.path("manifest.jsonl"))?;
    println!("wrote {} tracks to {}", catalog.records.len(), run.out.display());
    Ok(())
}

fn features(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    let frontend = Frontend::new(run.cfg.frontend.clone())?;
    let feature_dir = run.path("features");
    let (_, mut records) = FeatureStore::extract(&catalog, &frontend, Some(&feature_dir))?;
    for (rec, orig) in records.iter_mut().zip(&catalog.records) {
        if let Some(fp) = rec.feature_path.take() {
            rec.feature_path = Some(fp.strip_prefix(&run.out).map(Path::to_path_buf).unwrap_or(fp));
        }
        if let Some(ap) = &orig.audio_path {
            rec.audio_path = Some(absolute(&catalog.resolve(ap))?);
        }
    }
    let manifest = run.path("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    run.sidecar(&manifest)?;
    println!("wrote {} feature files to {}", records.len(), feature_dir.display());
    Ok(())
}

fn stats(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    if catalog.records.is_empty() {
        bail!("manifest has no records");
    }
    let s = label_stats(&catalog.records);
    run.write("label_counts.csv", &s.counts_csv())?;
    run.write("labels_per_item.csv", &s.per_item_csv())?;
    println!("{} items, {} distinct labels", s.n_items, s.counts.len());
    Ok(())
}

fn pretrain_cmd(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    let store = FeatureStore::load(&catalog)?;
    let mut model = match &run.cfg.data.checkpoint {
        Some(p) => EncoderModel::load(p)?,
        None => EncoderModel::init(
            ModelConfig {
                encoder: run.cfg.model.encoder.clone(),
                projector: run.cfg.model.projector.clone(),
                head_classes: None,
            },
            run.seed,
        )?,
    };
    let out = pretrain(&run.cfg.pretrain, &catalog, &store, &mut model, run.seed, Some(&run.out))?;
    for p in out.checkpoints.iter().chain([&run.path("last.mck"), &run.path("loss.csv")]) {
        run.sidecar(p)?;
    }
    let last = out.losses.last().map_or(f64::NAN, |r| r.loss);
    println!("trained to step {} (final loss {last:.4})", model.step);
    Ok(())
}

fn embed(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    let store = FeatureStore::load(&catalog)?;
    let ck = run.require(&run.cfg.data.checkpoint, "checkpoint")?;
    let model = EncoderModel::load(ck)?;
    let embeddings = catalog
        .records
        .iter()
        .map(|r| embed_track(&model, store.get(&r.track_id)?, &run.cfg.embed))
        .collect::<musicrep::Result<Vec<_>>>()?;
    let path = run.path("embeddings.mae");
    write_embeddings(&embeddings, &path)?;
    run.sidecar(&path)?;
    println!("wrote {} embeddings to {}", embeddings.len(), path.display());
    Ok(())
}

fn tagged(run: &Run, mut report: MetricsReport) -> MetricsReport {
    report.model_tag = Some(run.cfg.report.model_tag.clone());
    report
}

fn probe(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    let task = run.task()?;
    let mut cfg = run.cfg.probe.clone();
    cfg.seed = run.seed;
    let result = run_task(&run.embeddings()?, &catalog, task, &cfg, &run.hash)?;
    run.write("probe.json", &result.probe.to_json()?)?;
    let report = tagged(run, result.report);
    run.write("report.json", &(report.to_json()? + "\n"))?;
    println!("{}", serde_json::to_string(&report.metrics)?);
    Ok(())
}

fn eval(run: &Run) -> Result<()> {
    let catalog = run.catalog()?;
    let task = run.task()?;
    let p = run.require(&run.cfg.data.probe, "probe")?;
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let probe = Probe::from_json(&text)?;
    let report = evaluate(&probe, &run.embeddings()?, &catalog, task, run.seed, &run.hash)?;
    let report = tagged(run, report);
    run.write("metrics.json", &(report.to_json()? + "\n"))?;
    println!("{}", serde_json::to_string(&report.metrics)?);
    Ok(())
}

fn report(run: &Run) -> Result<()> {
    if run.cfg.data.reports.is_empty() {
        bail!("config key data.reports lists no report files");
    }
    let mut rows = Vec::new();
    for p in &run.cfg.data.reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let tag = r.model_tag.clone().unwrap_or_else(|| run.cfg.report.model_tag.clone());
        for (metric, value) in &r.metrics {
            rows.push((r.task.clone(), metric.clone(), *value, tag.clone()));
        }
    }
    let mut csv = String::from("task,metric,value,model_tag\n");
    let mut md = String::from("| task | metric | value | model_tag |\n|---|---|---|---|\n");
    for (task, metric, value, tag) in &rows {
        csv.push_str(&format!("{task},{metric},{value},{tag}\n"));
        md.push_str(&format!("| {task} | {metric} | {value:.4} | {tag} |\n"));
    }
    run.write("results.csv", &csv)?;
    run.write("results.md", &md)?;
    print!("{md}");
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    let (common, f): (&Common, fn(&Run) -> Result<()>) = match cmd {
        Command::Synth(c) => (c, synth),
        Command::Features(c) => (c, features),
        Command::Stats(c) => (c, stats),
        Command::Pretrain(c) => (c, pretrain_cmd),
        Command::Embed(c) => (c, embed),
        Command::Probe(c) => (c, probe),
        Command::Eval(c) => (c, eval),
        Command::Report(c) => (c, report),
    };
    let run = Run::new(common)?;
    let marker = run.path("FAILED");
    let _ = fs::remove_file(&marker);
    f(&run).inspect_err(|e| {
        let _ = fs::write(&marker, format!("{e:#}\n"));
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
