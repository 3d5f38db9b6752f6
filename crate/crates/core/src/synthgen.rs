//! Deterministic synthetic training logs.
//!
//! Produces a run directory in the ingest formats with known phenomena
//! planted in it: dead and divergent filters, one-off filter shocks, flip
//! events in a class's validation history, always-misclassified images and
//! per-class learning archetypes. Weights start Gaussian and drift by a
//! relative update of `update_ratio` per dump; initial sd halves from one
//! conv module to the next.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    validation_path, weight_path, write_validation_dump, write_weight_dump, LayerWeights, ValidationDump,
    WeightDump,
};
use crate::model::{
    build_hierarchy, ClassSpec, ImageMeta, NetworkHierarchy, NodeKind, NodeSpec, RunManifest,
    DEFAULT_DUMP_INTERVAL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub filters: u32,
    pub weights_per_filter: u32,
}

/// Sequential grouping of `layers` into bottlenecks and conv modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub bottlenecks_per_module: usize,
    pub layers_per_bottleneck: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    /// Every image learned by dump 3.
    Fast,
    /// Images learned together around the middle of the run.
    Step,
    /// Learning spread evenly over the whole run.
    Slow,
    /// Never learned.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Plant {
    /// Weights byte-identical across every dump.
    DeadFilter { layer: usize, filter: u32 },
    /// Drift scaled by `divergent_factor` at every dump.
    DivergentFilter { layer: usize, filter: u32 },
    /// A single large jump of relative size `magnitude` at `dump`.
    FilterShock {
        layer: usize,
        filters: Vec<u32>,
        dump: usize,
        #[serde(default = "default_shock")]
        magnitude: f64,
    },
    /// `round(fraction·m)` images of the class flip at `dump`, constant for
    /// `pre_stable` dumps before and `post_stable` dumps from it.
    FlipEvent {
        class: u32,
        dump: usize,
        fraction: f64,
        pre_stable: usize,
        post_stable: usize,
    },
    /// Image (index within its class) misclassified at every dump.
    AlwaysWrong { class: u32, image: u32 },
    Archetype { class: u32, archetype: Archetype },
}

fn default_shock() -> f64 {
    1.0
}

fn default_run_id() -> String {
    "synthetic".into()
}

fn default_interval() -> u64 {
    DEFAULT_DUMP_INTERVAL
}

fn default_init_sd() -> f64 {
    0.05
}

fn default_update_ratio() -> f64 {
    1e-3
}

fn default_divergent() -> f64 {
    20.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_interval")]
    pub dump_interval: u64,
    pub dumps: usize,
    /// Layers front to back; ignored when `network` is given.
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
    /// Explicit network tree, overriding `layers` and `grouping`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NodeSpec>,
    pub classes: usize,
    pub images_per_class: usize,
    #[serde(default = "default_init_sd")]
    pub init_sd: f64,
    #[serde(default = "default_update_ratio")]
    pub update_ratio: f64,
    #[serde(default = "default_divergent")]
    pub divergent_factor: f64,
    /// Probability of flipping any validation bit after planting.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_true")]
    pub write_labels: bool,
    #[serde(default)]
    pub plants: Vec<Plant>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    /// A flat run of `layers` without any plants.
    pub fn new(seed: u64, layers: Vec<LayerConfig>, classes: usize, images_per_class: usize, dumps: usize) -> Self {
        SynthConfig {
            seed,
            run_id: default_run_id(),
            dump_interval: DEFAULT_DUMP_INTERVAL,
            dumps,
            layers,
            grouping: None,
            network: None,
            classes,
            images_per_class,
            init_sd: default_init_sd(),
            update_ratio: default_update_ratio(),
            divergent_factor: default_divergent(),
            label_noise: 0.0,
            write_labels: true,
            plants: Vec::new(),
        }
    }

    pub fn network_spec(&self) -> NodeSpec {
        if let Some(net) = &self.network {
            return net.clone();
        }
        let layer = |i: usize| {
            let l = self.layers[i];
            NodeSpec::layer(format!("layer{i:02}"), l.filters, l.weights_per_filter)
        };
        let children = match self.grouping {
            None => (0..self.layers.len()).map(layer).collect(),
            Some(g) => {
                let per_block = g.layers_per_bottleneck.max(1);
                let per_module = per_block * g.bottlenecks_per_module.max(1);
                let mut modules = Vec::new();
                for (m, start) in (0..self.layers.len()).step_by(per_module).enumerate() {
                    let end = (start + per_module).min(self.layers.len());
                    let blocks = (start..end)
                        .step_by(per_block)
                        .enumerate()
                        .map(|(b, bs)| {
                            let be = (bs + per_block).min(end);
                            NodeSpec::group(format!("module{m}.block{b}"), NodeKind::Bottleneck, (bs..be).map(layer).collect())
                        })
                        .collect();
                    modules.push(NodeSpec::group(format!("module{m}"), NodeKind::ConvModule, blocks));
                }
                modules
            }
        };
        NodeSpec::group("model", NodeKind::Model, children)
    }

    pub fn manifest(&self) -> RunManifest {
        let m = self.images_per_class;
        RunManifest {
            run_id: self.run_id.clone(),
            dump_interval: self.dump_interval,
            dump_iterations: (0..self.dumps as u64).map(|j| j * self.dump_interval).collect(),
            network: self.network_spec(),
            classes: (0..self.classes as u32)
                .map(|id| ClassSpec {
                    id,
                    name: format!("class_{id:03}"),
                })
                .collect(),
            images: (0..(self.classes * m) as u32)
                .map(|id| ImageMeta {
                    id,
                    class_id: id / m as u32,
                    uri: format!("val/class_{:03}/{:05}.png", id / m as u32, id),
                })
                .collect(),
        }
    }

    pub fn validate(&self, h: &NetworkHierarchy) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dumps < 2 {
            return bad(format!("need at least 2 dumps, got {}", self.dumps));
        }
        if self.network.is_none() && self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.classes == 0 || self.images_per_class == 0 {
            return bad("need at least one class and one image per class".into());
        }
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        if !positive(self.init_sd) || !non_negative(self.update_ratio) || !non_negative(self.divergent_factor) {
            return bad("init_sd must be positive; update_ratio and divergent_factor non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 1]", self.label_noise));
        }
        let layer_filters = |layer: usize| -> Result<u32> {
            if layer >= h.layer_count() {
                return Err(Error::InvalidConfig(format!("layer {layer} out of range")));
            }
            Ok(h.layer(layer).shape.expect("layer shape").filter_count)
        };
        let class_ok = |class: u32| -> Result<()> {
            if class as usize >= self.classes {
                return Err(Error::InvalidConfig(format!("class {class} out of range")));
            }
            Ok(())
        };
        let mut flips: Vec<(u32, usize, usize, usize)> = Vec::new();
        for p in &self.plants {
            match p {
                Plant::DeadFilter { layer, filter } | Plant::DivergentFilter { layer, filter } => {
                    if *filter >= layer_filters(*layer)? {
                        return bad(format!("filter {filter} out of range in layer {layer}"));
                    }
                }
                Plant::FilterShock {
                    layer,
                    filters,
                    dump,
                    magnitude,
                } => {
                    let n = layer_filters(*layer)?;
                    if let Some(f) = filters.iter().find(|&&f| f >= n) {
                        return bad(format!("filter {f} out of range in layer {layer}"));
                    }
                    if *dump == 0 || *dump >= self.dumps {
                        return bad(format!("shock dump {dump} must lie in 1..{}", self.dumps));
                    }
                    if !positive(*magnitude) {
                        return bad("shock magnitude must be positive".into());
                    }
                }
                Plant::FlipEvent {
                    class,
                    dump,
                    fraction,
                    pre_stable,
                    post_stable,
                } => {
                    class_ok(*class)?;
                    if !(*fraction > 0.0 && *fraction <= 1.0) {
                        return bad(format!("flip fraction {fraction} outside (0, 1]"));
                    }
                    if *dump == 0 || *dump < *pre_stable || dump + post_stable > self.dumps {
                        return bad(format!(
                            "flip at dump {dump} leaves no room for flanks {pre_stable}/{post_stable} in {} dumps",
                            self.dumps
                        ));
                    }
                    flips.push((*class, *dump, *pre_stable, *post_stable));
                }
                Plant::AlwaysWrong { class, image } => {
                    class_ok(*class)?;
                    if *image as usize >= self.images_per_class {
                        return bad(format!("image {image} out of range in class {class}"));
                    }
                }
                Plant::Archetype { class, .. } => class_ok(*class)?,
            }
        }
        flips.sort();
        for pair in flips.windows(2) {
            let (c0, d0, _, post0) = pair[0];
            let (c1, d1, pre1, _) = pair[1];
            if c0 == c1 && d1 - d0 < post0.max(pre1).max(1) {
                return bad(format!("flip events of class {c0} at dumps {d0} and {d1} overlap their flanks"));
            }
        }
        Ok(())
    }
}

/// Bookkeeping of what was planted where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub dump_iterations: Vec<u64>,
    /// For each flip-event plant (in config order): `(class, iteration, image ids)`.
    pub flips: Vec<(u32, u64, Vec<u32>)>,
    pub total_weights: usize,
}

/// Writes `manifest.json` plus one weight and one validation dump per
/// iteration into `out`.
pub fn generate_run(config: &SynthConfig, out: &Path) -> Result<GenerationSummary> {
    let manifest = config.manifest();
    manifest.validate()?;
    let h = build_hierarchy(&manifest)?;
    config.validate(&h)?;

    std::fs::create_dir_all(out.join("weights")).map_err(Error::io(out))?;
    std::fs::create_dir_all(out.join("validation")).map_err(Error::io(out))?;
    manifest.save(&out.join("manifest.json"))?;

    let (sequences, flips) = synth_validation(config, &manifest);
    let mut weights = WeightSynth::new(config, &h);
    for (j, &iteration) in manifest.dump_iterations.iter().enumerate() {
        if j > 0 {
            weights.step(j);
        }
        let dump = weights.dump(&h, iteration);
        let path = weight_path(out, iteration);
        std::fs::write(&path, write_weight_dump(&dump)).map_err(Error::io(&path))?;

        let correct: Vec<bool> = sequences.iter().map(|s| s[j]).collect();
        let labels = config.write_labels.then(|| {
            correct
                .iter()
                .zip(&manifest.images)
                .map(|(&ok, img)| {
                    if ok {
                        img.class_id as u16
                    } else {
                        ((img.class_id as usize + 1) % config.classes) as u16
                    }
                })
                .collect()
        });
        let vdump = ValidationDump {
            iteration,
            correct,
            labels,
        };
        let path = validation_path(out, iteration);
        std::fs::write(&path, write_validation_dump(&vdump)).map_err(Error::io(&path))?;
    }

    Ok(GenerationSummary {
        dump_iterations: manifest.dump_iterations.clone(),
        flips: flips
            .into_iter()
            .map(|(class, dump, images)| (class, manifest.dump_iterations[dump], images))
            .collect(),
        total_weights: h.total_weights(),
    })
}

struct WeightSynth {
    rng: ChaCha8Rng,
    /// `[layer]` filter-major weights.
    layers: Vec<Vec<f32>>,
    wpf: Vec<usize>,
    dead: HashSet<(usize, u32)>,
    divergent: HashSet<(usize, u32)>,
    shocks: Vec<(usize, Vec<u32>, usize, f64)>,
    update_ratio: f64,
    divergent_factor: f64,
}

impl WeightSynth {
    fn new(config: &SynthConfig, h: &NetworkHierarchy) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(h.layer_count());
        let mut wpf = Vec::with_capacity(h.layer_count());
        for pos in 0..h.layer_count() {
            let node = h.layer(pos);
            let shape = node.shape.expect("layer shape");
            let sd = config.init_sd / 2f64.powi(module_ordinal(h, h.layers()[pos]) as i32);
            let dist = Normal::new(0.0, sd).expect("positive sd");
            layers.push((0..shape.weight_count()).map(|_| dist.sample(&mut rng) as f32).collect());
            wpf.push(shape.weights_per_filter as usize);
        }
        let mut dead = HashSet::new();
        let mut divergent = HashSet::new();
        let mut shocks = Vec::new();
        for p in &config.plants {
            match p {
                Plant::DeadFilter { layer, filter } => {
                    dead.insert((*layer, *filter));
                }
                Plant::DivergentFilter { layer, filter } => {
                    divergent.insert((*layer, *filter));
                }
                Plant::FilterShock {
                    layer,
                    filters,
                    dump,
                    magnitude,
                } => shocks.push((*layer, filters.clone(), *dump, *magnitude)),
                _ => {}
            }
        }
        WeightSynth {
            rng,
            layers,
            wpf,
            dead,
            divergent,
            shocks,
            update_ratio: config.update_ratio,
            divergent_factor: config.divergent_factor,
        }
    }

    /// Advances every live filter by one dump of drift, then applies the
    /// shocks scheduled for dump `j`.
    fn step(&mut self, j: usize) {
        for (l, weights) in self.layers.iter_mut().enumerate() {
            let w = self.wpf[l];
            for (f, filter) in weights.chunks_mut(w).enumerate() {
                if self.dead.contains(&(l, f as u32)) {
                    continue;
                }
                let norm = filter.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                let mut scale = self.update_ratio * norm / (w as f64).sqrt();
                if self.divergent.contains(&(l, f as u32)) {
                    scale *= self.divergent_factor;
                }
                for x in filter.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *x = (*x as f64 + scale * z) as f32;
                }
            }
        }
        for (layer, filters, dump, magnitude) in &self.shocks {
            if *dump != j {
                continue;
            }
            let w = self.wpf[*layer];
            for &f in filters {
                let filter = &mut self.layers[*layer][f as usize * w..(f as usize + 1) * w];
                let dir: Vec<f64> = (0..w).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                let dir_norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let norm = filter.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                for (x, d) in filter.iter_mut().zip(&dir) {
                    *x = (*x as f64 + magnitude * norm * d / dir_norm) as f32;
                }
            }
        }
    }

    fn dump(&self, h: &NetworkHierarchy, iteration: u64) -> WeightDump {
        WeightDump {
            iteration,
            layers: h
                .layer_shapes()
                .zip(&self.layers)
                .map(|((id, shape), weights)| LayerWeights {
                    id: id.to_string(),
                    filter_count: shape.filter_count,
                    weights_per_filter: shape.weights_per_filter,
                    weights: weights.clone(),
                })
                .collect(),
            non_finite: 0,
        }
    }
}

/// Number of conv modules strictly before the module containing `node`
/// (0 for nodes outside any module).
fn module_ordinal(h: &NetworkHierarchy, node: usize) -> usize {
    let mut cur = Some(node);
    while let Some(i) = cur {
        let n = h.node(i);
        if n.kind == NodeKind::ConvModule {
            return h
                .nodes()
                .iter()
                .take(i)
                .filter(|m| m.kind == NodeKind::ConvModule)
                .count();
        }
        cur = n.parent;
    }
    0
}

/// Dump at which image `i` of `m` becomes correct, `None` if never.
fn learn_dump(archetype: Archetype, i: usize, m: usize, n: usize) -> Option<usize> {
    match archetype {
        Archetype::Fast => Some(1 + i % 3),
        Archetype::Step => Some(n / 2 + i % 3),
        Archetype::Slow => Some(1 + i * n.saturating_sub(2) / m.max(1)),
        Archetype::Never => None,
    }
}

type FlipRecord = (u32, usize, Vec<u32>);

fn synth_validation(config: &SynthConfig, manifest: &RunManifest) -> (Vec<Vec<bool>>, Vec<FlipRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0ffa_11ed_u64);
    let n = config.dumps;
    let m = config.images_per_class;
    let class_images = manifest.class_images();

    let mut archetype = vec![Archetype::Fast; config.classes];
    let mut always_wrong: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); config.classes];
    let mut flip_classes = BTreeSet::new();
    for p in &config.plants {
        match p {
            Plant::Archetype { class, archetype: a } => archetype[*class as usize] = *a,
            Plant::AlwaysWrong { class, image } => {
                always_wrong[*class as usize].insert(class_images[*class as usize][*image as usize]);
            }
            Plant::FlipEvent { class, .. } => {
                flip_classes.insert(*class);
            }
            _ => {}
        }
    }

    let mut seqs = vec![vec![false; n]; manifest.images.len()];
    for (class, images) in class_images.iter().enumerate() {
        if flip_classes.contains(&(class as u32)) {
            // Flip classes start all-wrong and only change at their events.
            continue;
        }
        for (i, &img) in images.iter().enumerate() {
            if let Some(t) = learn_dump(archetype[class], i, m, n) {
                for bit in seqs[img as usize].iter_mut().skip(t) {
                    *bit = true;
                }
            }
        }
    }

    let mut flips = Vec::new();
    for p in &config.plants {
        if let Plant::FlipEvent {
            class, dump, fraction, ..
        } = p
        {
            let mut candidates: Vec<u32> = class_images[*class as usize]
                .iter()
                .copied()
                .filter(|img| !always_wrong[*class as usize].contains(img))
                .collect();
            candidates.shuffle(&mut rng);
            let count = ((*fraction * m as f64).round() as usize).min(candidates.len());
            let mut chosen: Vec<u32> = candidates[..count].to_vec();
            chosen.sort_unstable();
            for &img in &chosen {
                for bit in seqs[img as usize].iter_mut().skip(*dump) {
                    *bit = !*bit;
                }
            }
            flips.push((*class, *dump, chosen));
        }
    }

    for set in &always_wrong {
        for &img in set {
            seqs[img as usize].iter_mut().for_each(|b| *b = false);
        }
    }

    if config.label_noise > 0.0 {
        for seq in seqs.iter_mut() {
            for bit in seq.iter_mut() {
                if rng.random_bool(config.label_noise) {
                    *bit = !*bit;
                }
            }
        }
    }
    (seqs, flips)
}
