//! End-to-end runs over an output directory.
//!
//! Each phase leaves its artifacts and a JSON report in the directory and a
//! `manifest.json` lists every phase with the digests of what it read and
//! wrote. A run started from a later phase loads the earlier artifacts from
//! disk and checks them against the previous manifest.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lpld_core::labelpool::LabelPool;
use lpld_core::recover::CondensedDataset;
use lpld_core::relabel::LabelStore;
use lpld_core::{LabeledDataset, Model};
use serde::{Deserialize, Serialize};

use crate::config::{parse_net, PipelineConfig};
use crate::error::{read_file, write_file, Error, Result};
use crate::formats::{checkpoint, pool, stats, store};
use crate::images;
use crate::phases::{self, DataSource, Seeds};
use crate::report::{load_report, write_csv, FileDigest, Provenance, Report};

pub const TEACHER: &str = "teacher.ckpt";
pub const STATS: &str = "stats.bin";
pub const CONDENSED: &str = "condensed";
pub const LABELS: &str = "labels.lpld";
pub const POOL: &str = "pool.lpldp";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Squeeze,
    Recover,
    Relabel,
    Prune,
    Validate,
    Analyze,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Squeeze, Phase::Recover, Phase::Relabel, Phase::Prune, Phase::Validate, Phase::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Squeeze => "squeeze",
            Phase::Recover => "recover",
            Phase::Relabel => "relabel",
            Phase::Prune => "prune",
            Phase::Validate => "validate",
            Phase::Analyze => "analyze",
        }
    }

    /// Artifacts the phase writes, relative to the output directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Phase::Squeeze => &[TEACHER, STATS],
            Phase::Recover => &["condensed/manifest.json"],
            Phase::Relabel => &[LABELS],
            Phase::Prune => &[POOL],
            Phase::Validate | Phase::Analyze => &[],
        }
    }

    pub fn report_file(self) -> &'static str {
        match self {
            Phase::Squeeze => "squeeze.json",
            Phase::Recover => "recover.json",
            Phase::Relabel => "relabel.json",
            Phase::Prune => "prune.json",
            Phase::Validate => "validate.json",
            Phase::Analyze => "diversity.json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: Phase,
    /// `run` or `loaded` (artifacts taken from an earlier run).
    pub status: String,
    pub report: Option<FileDigest>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestBody {
    pub phases: Vec<PhaseEntry>,
}

pub type Manifest = Report<ManifestBody>;

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    seeds: Seeds,
    previous: Option<ManifestBody>,
    entries: Vec<PhaseEntry>,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn digest(&self, rel: &str) -> Result<FileDigest> {
        FileDigest::of(&self.path(rel), rel)
    }

    fn digests(&self, rels: &[&str]) -> Result<Vec<FileDigest>> {
        rels.iter().map(|r| self.digest(r)).collect()
    }

    fn provenance(&self, phase: Phase, inputs: &[&str]) -> Result<Provenance> {
        let mut p = Provenance::new(phase.name());
        p.seeds = self.seeds.to_map();
        p.config_hash = Some(self.cfg.hash());
        p.inputs = self.digests(inputs)?;
        p.outputs = self.digests(phase.outputs())?;
        Ok(p)
    }

    fn finish<T: Serialize>(&mut self, phase: Phase, inputs: &[&str], result: T) -> Result<()> {
        let prov = self.provenance(phase, inputs)?;
        let (ins, outs) = (prov.inputs.clone(), prov.outputs.clone());
        Report::new(phase.name(), prov, result).save(&self.path(phase.report_file()))?;
        let report = Some(self.digest(phase.report_file())?);
        self.entries.push(PhaseEntry { phase, status: "run".into(), report, inputs: ins, outputs: outs });
        Ok(())
    }

    /// Records a skipped phase, verifying its artifacts against the previous manifest.
    fn loaded(&mut self, phase: Phase) -> Result<()> {
        for rel in phase.outputs() {
            if !self.path(rel).exists() {
                return Err(Error::MissingArtifact(self.path(rel)));
            }
        }
        let outputs = self.digests(phase.outputs())?;
        let prev = self.previous.as_ref().and_then(|m| m.phases.iter().find(|e| e.phase == phase)).cloned();
        let entry = match prev {
            Some(prev) => {
                for d in &outputs {
                    if let Some(p) = prev.outputs.iter().find(|p| p.path == d.path) {
                        if p.sha256 != d.sha256 {
                            return Err(Error::Checksum { path: self.path(&d.path), expected: p.sha256.clone(), found: d.sha256.clone() });
                        }
                    }
                }
                PhaseEntry { status: "loaded".into(), ..prev }
            }
            None => PhaseEntry { phase, status: "loaded".into(), report: None, inputs: vec![], outputs },
        };
        self.entries.push(entry);
        Ok(())
    }
}

fn load_teacher(out: &Path) -> Result<Model> {
    let mut teacher = checkpoint::load(&out.join(TEACHER))?;
    stats::load(&out.join(STATS))?.apply(&mut teacher)?;
    Ok(teacher)
}

fn load_condensed(out: &Path) -> Result<CondensedDataset> {
    let dir = out.join(CONDENSED);
    if !dir.join(images::MANIFEST).exists() {
        return Err(Error::MissingArtifact(dir.join(images::MANIFEST)));
    }
    images::import_condensed(&dir)
}

/// Checks that the label store belongs to this condensed set and teacher.
fn check_store(store: &LabelStore, condensed: &CondensedDataset, teacher: &Model, path: &Path) -> Result<()> {
    use lpld_core::digest::to_hex;
    let data = lpld_core::relabel::data_checksum(&condensed.to_dataset()?);
    if store.header.data_checksum != data {
        return Err(Error::Checksum { path: path.to_path_buf(), expected: to_hex(&data), found: to_hex(&store.header.data_checksum) });
    }
    let t = teacher.fingerprint();
    if store.header.teacher_checksum != t {
        return Err(Error::Checksum { path: path.to_path_buf(), expected: to_hex(&t), found: to_hex(&store.header.teacher_checksum) });
    }
    Ok(())
}

fn check_pool(pool: &LabelPool, store: &LabelStore, path: &Path) -> Result<()> {
    use lpld_core::digest::to_hex;
    if pool.store_hash != store.header.hash() {
        return Err(Error::Checksum { path: path.to_path_buf(), expected: to_hex(&store.header.hash()), found: to_hex(&pool.store_hash) });
    }
    Ok(())
}

fn read_previous(out: &Path) -> Result<Option<ManifestBody>> {
    let p = out.join(MANIFEST);
    if !p.exists() {
        return Ok(None);
    }
    let v = load_report(&p)?;
    Ok(Some(serde_json::from_value(v["result"].clone())?))
}

/// Runs the phases from `from` (default: the first) to the end.
pub fn run_pipeline(cfg: &PipelineConfig, from: Option<Phase>) -> Result<Manifest> {
    cfg.validate()?;
    let start = from.unwrap_or(Phase::Squeeze);
    let out = cfg.out_dir.clone();
    let previous = if start > Phase::Squeeze { read_previous(&out)? } else { None };
    let mut run = Run { cfg, out: out.clone(), seeds: Seeds::derive(cfg.seed), previous, entries: vec![] };
    let seeds = run.seeds;
    let threads = cfg.threads;
    // the directory is implied by the file's location
    let recorded = PipelineConfig { out_dir: PathBuf::new(), ..cfg.canonical() };
    write_file(&out.join(CONFIG), recorded.to_toml()?.as_bytes())?;

    let (train, test): (LabeledDataset, Option<LabeledDataset>) = DataSource::from_config(cfg).load(seeds.data)?;
    let shape = train.sample_shape();
    let k = train.num_classes;

    let teacher = if start <= Phase::Squeeze {
        let spec = parse_net(&cfg.teacher.net, shape, k)?;
        let (model, result) = phases::squeeze(&train, test.as_ref(), spec, &phases::teacher_config(cfg, seeds.teacher), &phases::estimate_config(cfg, seeds.estimate))?;
        checkpoint::save(&model, &out.join(TEACHER))?;
        stats::save(&stats::ClassStatsTable::from_model(&model)?, &out.join(STATS))?;
        run.finish(Phase::Squeeze, &[], result)?;
        model
    } else {
        run.loaded(Phase::Squeeze)?;
        load_teacher(&out)?
    };

    let condensed = if start <= Phase::Recover {
        let rcfg = phases::recover_config(cfg, seeds.recover);
        let (ds, logs, result) = phases::recover(&teacher, &rcfg, threads)?;
        let dir = out.join(CONDENSED);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        images::export_condensed(&ds, &dir)?;
        if cfg.recover.contact_sheets {
            for c in 0..ds.num_classes {
                write_file(&out.join(format!("sheets/class_{c:04}.png")), &images::contact_sheet(&ds, c, 10)?)?;
            }
        }
        write_csv(&out.join("recover_losses.csv"), &["group", "iteration", "loss"], &phases::loss_rows(&logs))?;
        run.finish(Phase::Recover, &[TEACHER, STATS], result)?;
        ds
    } else {
        run.loaded(Phase::Recover)?;
        load_condensed(&out)?
    };
    let image_bytes = phases::condensed_image_bytes(&out.join(CONDENSED))?;

    let labels = if start <= Phase::Relabel {
        let store = phases::relabel(&teacher, &condensed, &phases::relabel_config(cfg, seeds.relabel), threads)?;
        store::save(&store, &out.join(LABELS))?;
        run.finish(Phase::Relabel, &[TEACHER, STATS, "condensed/manifest.json"], phases::relabel_result(&store, image_bytes))?;
        store
    } else {
        run.loaded(Phase::Relabel)?;
        let s = store::load(&out.join(LABELS))?;
        check_store(&s, &condensed, &teacher, &out.join(LABELS))?;
        s
    };

    let kept = if start <= Phase::Prune {
        let (p, result) = phases::prune(&labels, &phases::PruneSpec::from_config(cfg, seeds.prune)?, image_bytes)?;
        pool::save(&p, &out.join(POOL))?;
        run.finish(Phase::Prune, &[LABELS], result)?;
        p
    } else {
        run.loaded(Phase::Prune)?;
        let p = pool::load(&out.join(POOL))?;
        check_pool(&p, &labels, &out.join(POOL))?;
        p
    };

    if start <= Phase::Validate {
        let student = parse_net(&cfg.validate.net, shape, k)?;
        let (_, vres) = phases::validate(&condensed, &labels, &kept, student, &phases::student_config(cfg, seeds.validate), test.as_ref(), image_bytes)?;
        write_csv(&out.join("validate_log.csv"), &["epoch", "loss", "test_accuracy"], &phases::epoch_rows(&vres.log))?;
        run.finish(Phase::Validate, &["condensed/manifest.json", LABELS, POOL], vres)?;
    } else {
        run.loaded(Phase::Validate)?;
    }

    if cfg.analyze.enabled {
        let real = phases::per_class_subset(test.as_ref().unwrap_or(&train), cfg.analyze.real_per_class)?;
        let ares = phases::analyze(&teacher, &real, &condensed.to_dataset()?)?;
        write_csv(&out.join("diversity.csv"), &["class", "samples", "synthetic_cosine", "real_cosine"], &phases::cosine_rows(&ares))?;
        run.finish(Phase::Analyze, &[TEACHER, STATS, "condensed/manifest.json"], ares)?;
    }

    let mut prov = Provenance::new("pipeline");
    prov.seeds = seeds.to_map();
    prov.config_hash = Some(cfg.hash());
    prov.inputs = vec![FileDigest::of(&out.join(CONFIG), CONFIG)?];
    prov.outputs = run.entries.iter().flat_map(|e| e.outputs.iter().cloned()).collect();
    let manifest = Report::new("manifest", prov, ManifestBody { phases: run.entries });
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// Reads a manifest written by [`run_pipeline`].
pub fn read_manifest(out: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&read_file(&out.join(MANIFEST))?)?)
}
