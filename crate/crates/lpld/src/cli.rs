//! Command-line front end.
//!
//! Every subcommand starts from the pipeline configuration (defaults, or the
//! file given with `--config`) and applies its flags on top. `--seed` and
//! `LPLD_SEED` override the configured seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpld_core::classwise_bn::{self, BoundInputs};
use lpld_core::labelpool::{Granularity, Metric, PruneMode};
use lpld_core::recover::RecoverMode;
use lpld_core::validate::KdLoss;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_net, PipelineConfig, SEED_ENV};
use crate::error::{write_file, Error, Result};
use crate::formats::{checkpoint, pool, stats, store};
use crate::images;
use crate::phases::{self, DataSource, Seeds};
use crate::pipeline::{self, Phase};
use crate::report::{write_csv, FileDigest, Provenance, Report};

#[derive(Debug, Parser)]
#[command(name = "lpld", version, about = "Dataset distillation with pruned soft-label pools")]
pub struct Cli {
    /// Pipeline configuration (TOML) providing defaults for every flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; per-phase seeds are derived from it.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher and estimate class-wise BN statistics.
    Squeeze(SqueezeArgs),
    /// Synthesize the condensed image set.
    Recover(RecoverArgs),
    /// Pre-generate augmentations and teacher soft labels.
    Relabel(RelabelArgs),
    /// Select a label pool from a label store.
    Prune(PruneArgs),
    /// Train and evaluate a student on a label pool.
    Validate(ValidateArgs),
    /// Within-class cosine similarity and MMD of teacher features.
    Analyze(AnalyzeArgs),
    /// Number of estimation batches needed for stable class statistics.
    Bound(BoundArgs),
    /// Run every phase into one output directory.
    Pipeline(PipelineArgs),
    /// Write the synthetic dataset as PNG folders.
    GenData(GenDataArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct SqueezeArgs {
    /// Image folder or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// `cnn:w1,w2,...` or a JSON network spec file.
    #[arg(long)]
    pub net: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub bn_momentum: Option<f32>,
    /// Batch size of the statistics pass.
    #[arg(long)]
    pub stats_batch: Option<usize>,
    #[arg(long, default_value = "teacher.ckpt")]
    pub out: PathBuf,
    #[arg(long, default_value = "stats.bin")]
    pub stats_out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub ipc: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RecoverMode>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one contact sheet per class into this directory.
    #[arg(long)]
    pub sheets: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RelabelArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Condensed set directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Pruning factor r; the pool keeps 1/r of the records.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    /// `random`, `correct`, `diff`, `diff_signed`, `cut_ratio` or `confidence`.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long, value_parser = parse_prune_mode)]
    pub mode: Option<PruneMode>,
    /// Confidence trims `easy,hard` before random pruning.
    #[arg(long, value_parser = parse_pair)]
    pub calibrate: Option<(f64, f64)>,
    /// Condensed set, used only to size the storage report.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Condensed set directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `cnn:w1,w2,...` or a JSON network spec file.
    #[arg(long)]
    pub student: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// `kl` or `msegt`.
    #[arg(long)]
    pub loss: Option<String>,
    /// Hard-label weight of `msegt`.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f32,
    /// Test images: folder or `synthetic`.
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Real images: folder or `synthetic` (its test split).
    #[arg(long)]
    pub real: String,
    #[arg(long)]
    pub syn: PathBuf,
    /// Real images per class (0: all).
    #[arg(long)]
    pub real_per_class: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 0.05)]
    pub failure_prob: f64,
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init_bound: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    /// Smallest class probability.
    #[arg(long, conflicts_with = "class_counts")]
    pub min_pc: Option<f64>,
    /// Comma-separated per-class sample counts.
    #[arg(long, value_delimiter = ',')]
    pub class_counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 32)]
    pub batch: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from this phase, loading earlier artifacts from the output directory.
    #[arg(long, value_enum)]
    pub from: Option<Phase>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<RecoverMode, String> {
    match s {
        "lpld" => Ok(RecoverMode::Lpld),
        "baseline" => Ok(RecoverMode::Baseline),
        _ => Err(format!("expected lpld or baseline, got {s:?}")),
    }
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    Granularity::parse(s).map_err(|e| e.to_string())
}

fn parse_prune_mode(s: &str) -> std::result::Result<PruneMode, String> {
    PruneMode::parse(s).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected e,h, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad number {v:?}"));
    Ok((p(a)?, p(b)?))
}

fn parse_loss(s: &str, gamma: f32) -> Result<KdLoss> {
    match s {
        "kl" => Ok(KdLoss::Kl { temperature: 1.0 }),
        "msegt" | "mse_gt" => Ok(KdLoss::MseGt { gamma }),
        _ => Err(Error::Config(format!("loss {s:?}: expected kl or msegt"))),
    }
}

struct Ctx {
    cfg: PipelineConfig,
    seeds: Seeds,
    threads: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(t) = cli.threads {
            cfg.threads = t.max(1);
        }
        Ok(Ctx { seeds: Seeds::derive(cfg.seed), threads: cfg.threads, cfg })
    }

    fn provenance(&self, command: &str, inputs: &[&Path], outputs: &[&Path]) -> Result<Provenance> {
        let mut p = Provenance::new(command);
        p.seeds = self.seeds.to_map();
        p.config_hash = Some(self.cfg.hash());
        p.inputs = inputs.iter().map(|q| FileDigest::at(q)).collect::<Result<_>>()?;
        p.outputs = outputs.iter().map(|q| FileDigest::at(q)).collect::<Result<_>>()?;
        Ok(p)
    }
}

fn emit<T: Serialize>(kind: &str, prov: Provenance, result: T, path: Option<&Path>) -> Result<()> {
    let r = Report::new(kind, prov, result);
    match path {
        Some(p) => r.save(p),
        None => {
            print!("{}", r.to_json()?);
            Ok(())
        }
    }
}

fn load_teacher(ckpt: &Path, stats_path: Option<&Path>) -> Result<lpld_core::Model> {
    let mut m = checkpoint::load(ckpt)?;
    if let Some(s) = stats_path {
        stats::load(s)?.apply(&mut m)?;
    }
    Ok(m)
}

fn squeeze(ctx: &Ctx, a: &SqueezeArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(v) = &a.net {
        cfg.teacher.net = v.clone();
    }
    if let Some(v) = a.epochs {
        cfg.teacher.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.teacher.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.teacher.batch_size = v;
    }
    if let Some(v) = a.bn_momentum {
        cfg.squeeze.momentum = v;
    }
    if let Some(v) = a.stats_batch {
        cfg.squeeze.batch_size = v;
    }
    let (train, test) = DataSource::parse(&a.data, &cfg.data.synthetic).load(ctx.seeds.data)?;
    let spec = parse_net(&cfg.teacher.net, train.sample_shape(), train.num_classes)?;
    let (model, result) = phases::squeeze(&train, test.as_ref(), spec, &phases::teacher_config(&cfg, ctx.seeds.teacher), &phases::estimate_config(&cfg, ctx.seeds.estimate))?;
    checkpoint::save(&model, &a.out)?;
    stats::save(&stats::ClassStatsTable::from_model(&model)?, &a.stats_out)?;
    for w in &result.estimate.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("teacher train accuracy {:.4}, test {:?}", result.teacher.train_accuracy, result.teacher.test_accuracy);
    emit("squeeze", ctx.provenance("squeeze", &[], &[&a.out, &a.stats_out])?, result, a.report.as_deref())
}

fn recover(ctx: &Ctx, a: &RecoverArgs) -> Result<()> {
    let teacher = load_teacher(&a.teacher, Some(&a.stats))?;
    let mut rcfg = phases::recover_config(&ctx.cfg, ctx.seeds.recover);
    rcfg.ipc = a.ipc.unwrap_or(rcfg.ipc);
    rcfg.mode = a.mode.unwrap_or(rcfg.mode);
    rcfg.iterations = a.iters.unwrap_or(rcfg.iterations);
    rcfg.alpha = a.alpha.unwrap_or(rcfg.alpha);
    rcfg.image_lr = a.lr.unwrap_or(rcfg.image_lr);
    let (ds, logs, result) = phases::recover(&teacher, &rcfg, ctx.threads)?;
    images::export_condensed(&ds, &a.out)?;
    if let Some(dir) = &a.sheets {
        for c in 0..ds.num_classes {
            write_file(&dir.join(format!("class_{c:04}.png")), &images::contact_sheet(&ds, c, 10)?)?;
        }
    }
    write_csv(&a.out.join("losses.csv"), &["group", "iteration", "loss"], &phases::loss_rows(&logs))?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    let manifest = a.out.join(images::MANIFEST);
    emit("recover", ctx.provenance("recover", &[&a.teacher, &a.stats], &[&manifest])?, result, a.report.as_deref())
}

fn relabel(ctx: &Ctx, a: &RelabelArgs) -> Result<()> {
    let teacher = load_teacher(&a.teacher, a.stats.as_deref())?;
    let condensed = images::import_condensed(&a.data)?;
    let mut rcfg = phases::relabel_config(&ctx.cfg, ctx.seeds.relabel);
    rcfg.epochs = a.epochs.unwrap_or(rcfg.epochs);
    rcfg.batch_size = a.batch.unwrap_or(rcfg.batch_size);
    let s = phases::relabel(&teacher, &condensed, &rcfg, ctx.threads)?;
    store::save(&s, &a.out)?;
    let result = phases::relabel_result(&s, phases::condensed_image_bytes(&a.data)?);
    eprintln!("wrote {} records ({} bytes each) to {}", result.records, result.record_bytes, a.out.display());
    let manifest = a.data.join(images::MANIFEST);
    emit("relabel", ctx.provenance("relabel", &[&a.teacher, &manifest], &[&a.out])?, result, a.report.as_deref())
}

fn prune(ctx: &Ctx, a: &PruneArgs) -> Result<()> {
    let s = store::load(&a.labels)?;
    let mut spec = phases::PruneSpec::from_config(&ctx.cfg, ctx.seeds.prune)?;
    spec.ratio = a.ratio.unwrap_or(spec.ratio);
    spec.granularity = a.granularity.unwrap_or(spec.granularity);
    if let Some(m) = &a.metric {
        spec.metric = if m == "random" { None } else { Some(Metric::parse(m)?) };
    }
    spec.mode = a.mode.unwrap_or(spec.mode);
    if a.calibrate.is_some() {
        spec.calibrate = a.calibrate;
    }
    let image_bytes = match &a.data {
        Some(d) => phases::condensed_image_bytes(d)?,
        None => 0,
    };
    let (p, result) = phases::prune(&s, &spec, image_bytes)?;
    pool::save(&p, &a.out)?;
    eprintln!("kept {} of {} records ({:.2}×)", result.kept, result.total, result.storage.compression);
    emit("prune", ctx.provenance("prune", &[&a.labels], &[&a.out])?, result, a.report.as_deref())
}

fn validate(ctx: &Ctx, a: &ValidateArgs) -> Result<()> {
    let condensed = images::import_condensed(&a.data)?;
    let s = store::load(&a.labels)?;
    let p = pool::load(&a.pool)?;
    let data = condensed.to_dataset()?;
    let mut cfg = ctx.cfg.clone();
    if let Some(v) = &a.student {
        cfg.validate.net = v.clone();
    }
    cfg.validate.epochs = a.epochs.unwrap_or(cfg.validate.epochs);
    cfg.validate.lr = a.lr.unwrap_or(cfg.validate.lr);
    cfg.validate.eval_every = a.eval_every.unwrap_or(cfg.validate.eval_every);
    if let Some(l) = &a.loss {
        cfg.validate.loss = parse_loss(l, a.gamma)?;
    }
    let spec = parse_net(&cfg.validate.net, data.sample_shape(), data.num_classes)?;
    let test = match &a.test {
        Some(t) => {
            let (train, test) = DataSource::parse(t, &cfg.data.synthetic).load(ctx.seeds.data)?;
            Some(test.unwrap_or(train))
        }
        None => None,
    };
    let (_, result) = phases::validate(&condensed, &s, &p, spec, &phases::student_config(&cfg, ctx.seeds.validate), test.as_ref(), phases::condensed_image_bytes(&a.data)?)?;
    if let Some(acc) = result.final_accuracy {
        eprintln!("student test accuracy {acc:.4}");
    }
    let manifest = a.data.join(images::MANIFEST);
    emit("validate", ctx.provenance("validate", &[&manifest, &a.labels, &a.pool], &[])?, result, a.report.as_deref())
}

fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> Result<()> {
    let teacher = load_teacher(&a.teacher, a.stats.as_deref())?;
    let syn = images::import_condensed(&a.syn)?.to_dataset()?;
    let (train, test) = DataSource::parse(&a.real, &ctx.cfg.data.synthetic).load(ctx.seeds.data)?;
    let real = phases::per_class_subset(&test.unwrap_or(train), a.real_per_class.unwrap_or(ctx.cfg.analyze.real_per_class))?;
    let result = phases::analyze(&teacher, &real, &syn)?;
    if let Some(c) = &a.csv {
        write_csv(c, &["class", "samples", "synthetic_cosine", "real_cosine"], &phases::cosine_rows(&result))?;
    }
    eprintln!("synthetic cosine {:.4} ± {:.4}, MMD² {:.6}", result.synthetic.mean, result.synthetic.std, result.mmd2);
    let manifest = a.syn.join(images::MANIFEST);
    emit("analyze", ctx.provenance("analyze", &[&a.teacher, &manifest], &[])?, result, a.report.as_deref())
}

fn bound(ctx: &Ctx, a: &BoundArgs) -> Result<()> {
    let min_pc = match (&a.class_counts, a.min_pc) {
        (Some(c), _) => classwise_bn::min_class_prob(c)?,
        (None, Some(p)) => p,
        (None, None) => return Err(Error::Config("give --min-pc or --class-counts".into())),
    };
    let inputs = BoundInputs { failure_prob: a.failure_prob, delta: a.delta, momentum: a.momentum, init_bound: a.init_bound, tolerance: a.tolerance, min_pc, batch_size: a.batch };
    let b = classwise_bn::required_updates(&inputs)?;
    eprintln!("n = {} (chernoff {:.2}, convergence {:.2}, q = {:.4})", b.n, b.n_chernoff, b.n_convergence, b.min_qc);
    let result = json!({ "inputs": inputs, "bound": b });
    emit("bound", ctx.provenance("bound", &[], &[])?, result, a.report.as_deref())
}

fn run_pipeline(ctx: &Ctx, a: &PipelineArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    let m = pipeline::run_pipeline(&cfg, a.from)?;
    for e in &m.result.phases {
        eprintln!("{:<9} {}", e.phase.name(), e.status);
    }
    eprintln!("manifest: {}", cfg.out_dir.join(pipeline::MANIFEST).display());
    Ok(())
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> Result<()> {
    let (train, test) = DataSource::Synthetic(ctx.cfg.data.synthetic.clone()).load(ctx.seeds.data)?;
    images::save_image_dir(&train, &a.out.join("train"))?;
    if let Some(t) = test {
        images::save_image_dir(&t, &a.out.join("test"))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Squeeze(a) => squeeze(&ctx, a),
        Command::Recover(a) => recover(&ctx, a),
        Command::Relabel(a) => relabel(&ctx, a),
        Command::Prune(a) => prune(&ctx, a),
        Command::Validate(a) => validate(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Bound(a) => bound(&ctx, a),
        Command::Pipeline(a) => run_pipeline(&ctx, a),
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Config => {
            print!("{}", ctx.cfg.to_toml()?);
            Ok(())
        }
    }
}

pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
