#![allow(dead_code)]

use lpld_core::labelpool::{self, Granularity, LabelPool};
use lpld_core::recover::{quantize_pixel, CondensedDataset, RecoverMode};
use lpld_core::relabel::{generate_labels, LabelStore, RelabelConfig};
use lpld_core::squeeze::{estimate_class_stats, EstimateConfig};
use lpld_core::{rng, Model, NetworkSpec, SyntheticSpec, Tensor};
use rand::Rng;

/// Untrained teacher with class statistics, a random condensed set, its label
/// store and a random pool.
pub struct Fixture {
    pub teacher: Model,
    pub condensed: CondensedDataset,
    pub store: LabelStore,
    pub pool: LabelPool,
}

pub fn fixture() -> Fixture {
    let spec = NetworkSpec::small_cnn([3, 8, 8], &[4, 4], 3);
    let mut teacher = Model::new(spec, 5).unwrap();
    let (train, _) = SyntheticSpec { num_classes: 3, height: 8, width: 8, train_per_class: 12, test_per_class: 1, ..Default::default() }.generate().unwrap();
    estimate_class_stats(&mut teacher, &train, &EstimateConfig { batch_size: 6, ..Default::default() }).unwrap();
    let ipc = 4;
    let mut r = rng::stream(9, &[1]);
    let data = (0..3 * ipc * 3 * 64).map(|_| quantize_pixel(r.random_range(0.0..1.0))).collect();
    let condensed = CondensedDataset { images: Tensor::new(vec![3 * ipc, 3, 8, 8], data).unwrap(), labels: (0..3 * ipc).map(|i| i / ipc).collect(), ipc, num_classes: 3, mode: RecoverMode::Lpld };
    let store = generate_labels(&teacher, &condensed.to_dataset().unwrap(), &RelabelConfig { epochs: 3, batch_size: 4, seed: 2, ..Default::default() }, ipc).unwrap();
    let pool = labelpool::prune_random(&store.header, Granularity::Batch, 0.5, 4).unwrap();
    Fixture { teacher, condensed, store, pool }
}

/// A pipeline configuration that runs end to end in well under a second.
pub const TINY_TOML: &str = r#"
seed = 3
[data.synthetic]
num_classes = 4
channels = 3
height = 8
width = 8
train_per_class = 40
test_per_class = 10
modes_per_class = 2
blobs_per_mode = 2
max_shift = 1.0
noise = 0.05
seed = 0
[teacher]
net = "cnn:4,8"
epochs = 3
batch_size = 16
[recover]
ipc = 4
iterations = 30
[relabel]
epochs = 4
batch_size = 4
[prune]
ratio = 2.0
[validate]
net = "cnn:4,8"
epochs = 4
[analyze]
real_per_class = 5
"#;

pub fn tiny_config(out: &std::path::Path) -> lpld::config::PipelineConfig {
    let mut cfg = lpld::config::PipelineConfig::from_toml(TINY_TOML).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}
