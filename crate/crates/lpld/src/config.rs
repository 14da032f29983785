//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use lpld_core::augment::AugConfig;
use lpld_core::digest::{sha256, to_hex};
use lpld_core::labelpool::{Granularity, PruneMode};
use lpld_core::recover::RecoverMode;
use lpld_core::validate::KdLoss;
use lpld_core::{NetworkSpec, SyntheticSpec};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};

pub const SEED_ENV: &str = "LPLD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Folder with `train/` and `test/` class subdirectories; `None` generates data.
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dir: None, synthetic: SyntheticSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub net: String,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection { net: "cnn:16,32".into(), epochs: 15, lr: 0.003, batch_size: 64, weight_decay: 0.0, augment: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqueezeSection {
    pub batch_size: usize,
    pub momentum: f32,
    pub epochs: usize,
    pub failure_prob: f64,
    pub delta: f64,
    pub init_bound: f64,
    pub tolerance: f64,
}

impl Default for SqueezeSection {
    fn default() -> Self {
        let e = lpld_core::squeeze::EstimateConfig::default();
        SqueezeSection { batch_size: e.batch_size, momentum: e.momentum, epochs: e.epochs, failure_prob: e.failure_prob, delta: e.delta, init_bound: e.init_bound, tolerance: e.tolerance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverSection {
    pub ipc: usize,
    pub iterations: usize,
    pub image_lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f32,
    pub mode: RecoverMode,
    /// Also write one contact-sheet PNG per class.
    pub contact_sheets: bool,
}

impl Default for RecoverSection {
    fn default() -> Self {
        let r = lpld_core::recover::RecoverConfig::default();
        RecoverSection { ipc: r.ipc, iterations: r.iterations, image_lr: r.image_lr, beta1: r.beta1, beta2: r.beta2, alpha: r.alpha, mode: r.mode, contact_sheets: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub aug: AugConfig,
}

impl Default for RelabelSection {
    fn default() -> Self {
        RelabelSection { epochs: 30, batch_size: 10, aug: AugConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    /// Pruning factor r; the pool keeps 1/r of the records.
    pub ratio: f64,
    pub granularity: Granularity,
    /// `random` or a metric name.
    pub metric: String,
    pub mode: PruneMode,
    /// `(easy_trim, hard_trim)` applied before random pruning.
    pub calibrate: Option<(f64, f64)>,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection { ratio: 10.0, granularity: Granularity::Batch, metric: "random".into(), mode: PruneMode::Easy, calibrate: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub net: String,
    pub epochs: usize,
    pub lr: f32,
    pub weight_decay: f64,
    pub loss: KdLoss,
    pub eval_every: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { net: "cnn:16,32".into(), epochs: 30, lr: 0.001, weight_decay: 0.01, loss: KdLoss::default(), eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub enabled: bool,
    /// Real test images per class used as the MMD reference (0: all).
    pub real_per_class: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { enabled: true, real_per_class: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub squeeze: SqueezeSection,
    pub recover: RecoverSection,
    pub relabel: RelabelSection,
    pub prune: PruneSection,
    pub validate: ValidateSection,
    pub analyze: AnalyzeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("lpld-run"),
            threads: 1,
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            squeeze: SqueezeSection::default(),
            recover: RecoverSection::default(),
            relabel: RelabelSection::default(),
            prune: PruneSection::default(),
            validate: ValidateSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `LPLD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.prune.ratio >= 1.0) {
            return Err(Error::Config(format!("prune ratio {} must be ≥ 1", self.prune.ratio)));
        }
        if self.prune.metric != "random" {
            lpld_core::labelpool::Metric::parse(&self.prune.metric)?;
        }
        if self.prune.calibrate.is_some() && self.prune.metric != "random" {
            return Err(Error::Config("calibration applies to random pruning only".into()));
        }
        self.relabel.aug.validate()?;
        for net in [&self.teacher.net, &self.validate.net] {
            parse_net(net, [1, 8, 8], 2).map(|_| ()).or_else(|e| if Path::new(net).exists() { Ok(()) } else { Err(e) })?;
        }
        Ok(())
    }

    /// The configuration with the thread count reset; results do not depend on it.
    pub fn canonical(&self) -> Self {
        PipelineConfig { threads: 1, ..self.clone() }
    }

    /// SHA-256 of the canonical JSON form without the output directory,
    /// recorded in manifests.
    pub fn hash(&self) -> String {
        let canon = PipelineConfig { out_dir: PathBuf::new(), ..self.canonical() };
        to_hex(&sha256(serde_json::to_string(&canon).expect("config serializes").as_bytes()))
    }
}

/// `cnn:w1,w2,...` builds the small BN convnet; anything else is read as a
/// JSON [`NetworkSpec`] file.
pub fn parse_net(s: &str, input: [usize; 3], num_classes: usize) -> Result<NetworkSpec> {
    if let Some(rest) = s.strip_prefix("cnn:") {
        let widths = rest
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad width {w:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("network {s:?} needs positive widths")));
        }
        let spec = NetworkSpec::small_cnn(input, &widths, num_classes);
        spec.validate()?;
        return Ok(spec);
    }
    let path = Path::new(s);
    if !path.exists() {
        return Err(Error::Config(format!("network {s:?} is neither cnn:<widths> nor an existing spec file")));
    }
    let spec: NetworkSpec = serde_json::from_slice(&read_file(path)?)?;
    spec.validate()?;
    if spec.input != input || spec.num_classes != num_classes {
        return Err(Error::Config(format!("network file {s} expects {:?}/{} classes, data is {input:?}/{num_classes}", spec.input, spec.num_classes)));
    }
    Ok(spec)
}
