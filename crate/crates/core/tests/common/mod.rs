#![allow(dead_code)]

use std::path::Path;

use trainscope::ingest::{ingest_run, IngestOptions};
use trainscope::store::RunStore;
use trainscope::synthgen::{generate_run, GenerationSummary, LayerConfig, SynthConfig};

pub fn layers(shapes: &[(u32, u32)]) -> Vec<LayerConfig> {
    shapes
        .iter()
        .map(|&(filters, weights_per_filter)| LayerConfig {
            filters,
            weights_per_filter,
        })
        .collect()
}

pub fn small_config(seed: u64) -> SynthConfig {
    SynthConfig::new(seed, layers(&[(8, 9), (16, 4), (4, 27)]), 3, 12, 14)
}

/// Generates `config` under `root/run` and ingests it into `root/store`.
pub fn synth_store(root: &Path, config: &SynthConfig) -> (RunStore, GenerationSummary) {
    let run = root.join("run");
    let summary = generate_run(config, &run).expect("generate");
    let (store, _) = ingest_run(&run, &root.join("store"), &IngestOptions::default()).expect("ingest");
    (store, summary)
}
