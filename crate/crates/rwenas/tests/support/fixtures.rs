//! Shared run configuration and benchmark-table construction.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Mutex;

use rwenas::commands::ablation_config;
use rwenas::config::RunConfig;
use rwenas_core::bench::{run_ablation, AccuracySource, BenchError, BenchmarkTable, Estimator, NegFlopsEstimator, NoiseEstimator, TableEstimator};
use rwenas_core::genome::Genome;
use rwenas_core::moea::Sequential;

/// A configuration small enough for every command to finish in seconds.
pub const TINY: &str = r#"
seed = 3

[search]
pop_size = 6
max_gen = 2

[rwe]
epochs = 3
batch_size = 64
folds = 2
norm_batch = 64

[scale]
init_channels = 4
layers = 3
resolution = 16
in_channels = 3
classes = 3
op_order = "relu_conv_bn"

[data]
classes = 3
n = 300
resolution = 16

[ablation]
trials = 2
max_gen = 3
estimators = ["table", "noise", "neg_flops"]
"#;

/// Accuracy as a fixed function of the genome, remembering every lookup.
struct Recorder {
    seen: Mutex<BTreeSet<Genome>>,
}

pub fn pseudo_accuracy(g: &Genome) -> f64 {
    (g.stable_hash(11) % 1000) as f64 / 1000.0
}

impl AccuracySource for Recorder {
    fn accuracy(&self, genome: &Genome) -> Result<f64, BenchError> {
        self.seen.lock().unwrap().insert(genome.clone());
        Ok(pseudo_accuracy(genome))
    }
}

/// A table covering every genome an ablation over `table`, `noise` and
/// `neg_flops` visits under `cfg`.
pub fn covering_table(cfg: &RunConfig) -> BenchmarkTable {
    let recorder = Recorder { seen: Mutex::new(BTreeSet::new()) };
    let table_est = TableEstimator { source: &recorder, negate: false };
    let flops_est = NegFlopsEstimator { scale: cfg.scale() };
    let estimators: [&dyn Estimator; 3] = [&table_est, &NoiseEstimator, &flops_est];
    run_ablation(&cfg.search_space(), &ablation_config(cfg), &estimators, &recorder, &Sequential).unwrap();
    let seen = recorder.seen.into_inner().unwrap();
    BenchmarkTable::from_entries(cfg.search_space(), seen.into_iter().map(|g| {
        let acc = pseudo_accuracy(&g);
        (g, acc)
    }))
    .unwrap()
}

