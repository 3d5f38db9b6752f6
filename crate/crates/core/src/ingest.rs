//! Binary dump formats and the streaming ingest of a run directory.
//!
//! A run directory holds `manifest.json`, `weights/iter_<N>.bin` and
//! `validation/iter_<N>.bin` for each dumped iteration `N`. All integers
//! are little-endian.
//!
//! Weight dump:
//!
//! ```text
//! "DTWT" | version u32 | layer_count u32
//! per layer: id_len u16 | id (UTF-8) | filter_count u32 | weights_per_filter u32
//!            | filter_count × weights_per_filter f32
//! ```
//!
//! Validation dump:
//!
//! ```text
//! "DTVL" | version u32 | image_count u32 | ceil(image_count/8) bitmap bytes (LSB first)
//! | has_labels u8 | [image_count × u16 predicted class]
//! ```
//!
//! Gradient dumps (`"DTGR"`, same layout as weights) are reserved and
//! ignored by ingest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::model::{build_hierarchy, NetworkHierarchy, RunManifest};
use crate::stats::{filter_change_degree, update_ratio_chunks, weight_stats_chunks};
use crate::store::{RunStore, StatRow, StoreWriter};

pub const WEIGHT_MAGIC: [u8; 4] = *b"DTWT";
pub const VALIDATION_MAGIC: [u8; 4] = *b"DTVL";
pub const GRADIENT_MAGIC: [u8; 4] = *b"DTGR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub id: String,
    pub filter_count: u32,
    pub weights_per_filter: u32,
    /// Filter-major: filter `f` occupies `f·wpf .. (f+1)·wpf`.
    pub weights: Vec<f32>,
}

impl LayerWeights {
    pub fn filter(&self, f: usize) -> &[f32] {
        let w = self.weights_per_filter as usize;
        &self.weights[f * w..(f + 1) * w]
    }

    pub fn filters(&self) -> impl Iterator<Item = &[f32]> {
        self.weights.chunks(self.weights_per_filter as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDump {
    pub iteration: u64,
    pub layers: Vec<LayerWeights>,
    /// NaN/Inf weights seen while parsing.
    pub non_finite: u64,
}

impl WeightDump {
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Reorders layers into the hierarchy's front-to-back order and checks
    /// the layer set and every shape against it.
    pub fn conform(&mut self, h: &NetworkHierarchy) -> Result<()> {
        if self.layers.len() != h.layer_count() {
            return Err(Error::DumpMismatch(format!(
                "iteration {}: {} layers in dump, {} in manifest",
                self.iteration,
                self.layers.len(),
                h.layer_count()
            )));
        }
        let mut by_id: HashMap<String, LayerWeights> = HashMap::with_capacity(self.layers.len());
        for layer in self.layers.drain(..) {
            let id = layer.id.clone();
            if by_id.insert(id.clone(), layer).is_some() {
                return Err(Error::DumpMismatch(format!("layer `{id}` appears twice")));
            }
        }
        for (id, shape) in h.layer_shapes() {
            let layer = by_id.remove(id).ok_or_else(|| {
                Error::DumpMismatch(format!("iteration {}: layer `{id}` missing", self.iteration))
            })?;
            if layer.filter_count != shape.filter_count
                || layer.weights_per_filter != shape.weights_per_filter
            {
                return Err(Error::DumpMismatch(format!(
                    "layer `{id}`: dump has {}×{}, manifest declares {}×{}",
                    layer.filter_count,
                    layer.weights_per_filter,
                    shape.filter_count,
                    shape.weights_per_filter
                )));
            }
            self.layers.push(layer);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationDump {
    pub iteration: u64,
    /// Bit `i` is image id `i`; `true` means correctly classified.
    pub correct: Vec<bool>,
    pub labels: Option<Vec<u16>>,
}

impl ValidationDump {
    pub fn error_count(&self) -> usize {
        self.correct.iter().filter(|&&c| !c).count()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what: self.what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.bytes.get(..4).unwrap_or(self.bytes);
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::DumpMismatch(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_weight_dump(bytes: &[u8], iteration: u64) -> Result<WeightDump> {
    read_weight_like(bytes, iteration, WEIGHT_MAGIC, "weight dump")
}

fn read_weight_like(bytes: &[u8], iteration: u64, magic: [u8; 4], what: &'static str) -> Result<WeightDump> {
    let mut r = Reader::new(bytes, what);
    r.magic(magic)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { what, version });
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(4096));
    let mut non_finite = 0u64;
    for _ in 0..layer_count {
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::DumpMismatch(format!("layer id is not UTF-8: {e}")))?
            .to_string();
        let filter_count = r.u32()?;
        let weights_per_filter = r.u32()?;
        let n = filter_count as usize * weights_per_filter as usize;
        let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated {
            what,
            offset: r.pos,
            needed: usize::MAX,
            available: bytes.len() - r.pos,
        })?)?;
        let weights: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        non_finite += weights.iter().filter(|v| !v.is_finite()).count() as u64;
        layers.push(LayerWeights {
            id,
            filter_count,
            weights_per_filter,
            weights,
        });
    }
    r.finish()?;
    Ok(WeightDump {
        iteration,
        layers,
        non_finite,
    })
}

/// Parses a weight dump and conforms it to the manifest's layers.
pub fn read_weight_dump_checked(bytes: &[u8], iteration: u64, h: &NetworkHierarchy) -> Result<WeightDump> {
    let mut dump = read_weight_dump(bytes, iteration)?;
    dump.conform(h)?;
    Ok(dump)
}

pub fn write_weight_dump(dump: &WeightDump) -> Vec<u8> {
    write_weight_like(dump, WEIGHT_MAGIC)
}

fn write_weight_like(dump: &WeightDump, magic: [u8; 4]) -> Vec<u8> {
    let payload: usize = dump.layers.iter().map(|l| 14 + l.id.len() + 4 * l.weights.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dump.layers.len() as u32).to_le_bytes());
    for layer in &dump.layers {
        out.extend_from_slice(&(layer.id.len() as u16).to_le_bytes());
        out.extend_from_slice(layer.id.as_bytes());
        out.extend_from_slice(&layer.filter_count.to_le_bytes());
        out.extend_from_slice(&layer.weights_per_filter.to_le_bytes());
        for w in &layer.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

pub fn read_validation_dump(bytes: &[u8], iteration: u64) -> Result<ValidationDump> {
    let what = "validation dump";
    let mut r = Reader::new(bytes, what);
    r.magic(VALIDATION_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { what, version });
    }
    let image_count = r.u32()? as usize;
    let bitmap = r.take(image_count.div_ceil(8))?;
    let correct = (0..image_count)
        .map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0)
        .collect();
    let labels = match r.u8()? {
        0 => None,
        1 => {
            let raw = r.take(image_count * 2)?;
            Some(
                raw.chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            )
        }
        other => {
            return Err(Error::DumpMismatch(format!("has_labels flag must be 0 or 1, found {other}")))
        }
    };
    r.finish()?;
    Ok(ValidationDump {
        iteration,
        correct,
        labels,
    })
}

/// Parses a validation dump and checks its bitmap length against the run.
pub fn read_validation_dump_checked(bytes: &[u8], iteration: u64, image_count: usize) -> Result<ValidationDump> {
    let dump = read_validation_dump(bytes, iteration)?;
    if dump.correct.len() != image_count {
        return Err(Error::DumpMismatch(format!(
            "iteration {iteration}: bitmap covers {} images, manifest lists {image_count}",
            dump.correct.len()
        )));
    }
    Ok(dump)
}

pub fn write_validation_dump(dump: &ValidationDump) -> Vec<u8> {
    let n = dump.correct.len();
    let mut out = Vec::with_capacity(13 + n.div_ceil(8) + 2 * n);
    out.extend_from_slice(&VALIDATION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    let mut bitmap = vec![0u8; n.div_ceil(8)];
    for (i, &c) in dump.correct.iter().enumerate() {
        if c {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    match &dump.labels {
        Some(labels) => {
            out.push(1);
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

pub fn weight_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join("weights").join(format!("iter_{iteration}.bin"))
}

pub fn validation_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join("validation").join(format!("iter_{iteration}.bin"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Skip,
    Fail,
}

impl FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(MissingPolicy::Skip),
            "fail" => Ok(MissingPolicy::Fail),
            other => Err(Error::InvalidParameter(format!("unknown missing-dump policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub missing: MissingPolicy,
    /// Window stored in the class-stat index.
    pub class_window: usize,
    /// Do not keep raw weight dumps in the store.
    pub drop_raw: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            missing: MissingPolicy::Skip,
            class_window: crate::anomaly::DEFAULT_WINDOW,
            drop_raw: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub dumps: usize,
    pub gaps: Vec<u64>,
    pub warnings: Vec<String>,
    pub non_finite_weights: u64,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
}

mod duration_ms {
    use serde::Serializer;
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }
}

/// Statistics of every hierarchy node at one dump, with update ratios
/// against the previous dump when there is one.
pub fn node_stat_rows(h: &NetworkHierarchy, cur: &WeightDump, prev: Option<&WeightDump>) -> Vec<StatRow> {
    h.nodes()
        .par_iter()
        .map(|node| {
            let chunks: Vec<&[f32]> = cur.layers[node.layer_range.clone()]
                .iter()
                .map(|l| l.weights.as_slice())
                .collect();
            let stats = weight_stats_chunks(&chunks).ok();
            let update_ratio = prev.and_then(|p| {
                let prev_chunks: Vec<&[f32]> = p.layers[node.layer_range.clone()]
                    .iter()
                    .map(|l| l.weights.as_slice())
                    .collect();
                update_ratio_chunks(&prev_chunks, &chunks).ok().flatten()
            });
            StatRow::from_stats(stats, update_ratio)
        })
        .collect()
}

/// Change degree of every filter of every layer between two dumps.
pub fn change_columns(prev: &WeightDump, cur: &WeightDump) -> Vec<Vec<f64>> {
    prev.layers
        .par_iter()
        .zip(cur.layers.par_iter())
        .map(|(p, c)| {
            p.filters()
                .zip(c.filters())
                .map(|(a, b)| filter_change_degree(a, b))
                .collect()
        })
        .collect()
}

/// Ingests a run directory into a sealed store at `out`.
pub fn ingest_run(dir: &Path, out: &Path, options: &IngestOptions) -> Result<(RunStore, IngestReport)> {
    let started = Instant::now();
    let mut manifest = RunManifest::load(&dir.join("manifest.json"))?;
    let h = build_hierarchy(&manifest)?;
    if options.class_window == 0 {
        return Err(Error::InvalidParameter("class window must be at least 1".into()));
    }

    let mut present = Vec::with_capacity(manifest.dump_iterations.len());
    let mut gaps = Vec::new();
    let mut warnings = Vec::new();
    for &it in &manifest.dump_iterations {
        let have = weight_path(dir, it).is_file() && validation_path(dir, it).is_file();
        if have {
            present.push(it);
            continue;
        }
        match options.missing {
            MissingPolicy::Fail => return Err(Error::MissingDump(it)),
            MissingPolicy::Skip => {
                let msg = format!("dump for iteration {it} is missing; skipped");
                warn!("{msg}");
                warnings.push(msg);
                gaps.push(it);
            }
        }
    }
    if present.len() < 2 {
        return Err(Error::TooFewDumps {
            needed: 2,
            found: present.len(),
        });
    }
    manifest.dump_iterations = present.clone();

    let mut writer = StoreWriter::create(out, manifest.clone(), h.clone(), gaps.clone(), !options.drop_raw)?;
    let image_count = manifest.images.len();
    let mut prev: Option<WeightDump> = None;
    let mut non_finite = 0u64;
    for &it in &present {
        let wpath = weight_path(dir, it);
        let bytes = std::fs::read(&wpath).map_err(Error::io(&wpath))?;
        let dump = read_weight_dump_checked(&bytes, it, &h)?;
        if dump.non_finite > 0 {
            let msg = format!("iteration {it}: {} non-finite weights", dump.non_finite);
            warn!("{msg}");
            warnings.push(msg);
        }
        non_finite += dump.non_finite;

        let rows = node_stat_rows(&h, &dump, prev.as_ref());
        let changes = prev.as_ref().map(|p| change_columns(p, &dump));
        writer.push_weights(it, rows, changes, &bytes)?;

        let vpath = validation_path(dir, it);
        let vbytes = std::fs::read(&vpath).map_err(Error::io(&vpath))?;
        let validation = read_validation_dump_checked(&vbytes, it, image_count)?;
        writer.push_validation(validation)?;

        prev = Some(dump);
    }
    writer.set_non_finite(non_finite);
    let store = writer.seal(options.class_window)?;
    let report = IngestReport {
        dumps: present.len(),
        gaps,
        warnings,
        non_finite_weights: non_finite,
        wall_time: started.elapsed(),
    };
    info!(
        dumps = report.dumps,
        gaps = report.gaps.len(),
        ms = report.wall_time.as_millis() as u64,
        "ingest finished"
    );
    Ok((store, report))
}
