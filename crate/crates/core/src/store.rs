//! Write-once run store and its five query indexes.
//!
//! Layout of a store directory:
//!
//! ```text
//! store/
//!   manifest.json        effective manifest (only the dumps that were ingested)
//!   meta.json            format version, gaps, seal checksum; written last
//!   segments/ls.seg      layer-stat index     (I_ls)
//!   segments/lf.seg      layer-filter index   (I_lf)
//!   segments/if.seg      iter-filter index    (I_if)
//!   segments/cs.seg      class-stat index     (I_cs)
//!   segments/ci.seg      class-image index    (I_ci)
//!   raw/iter_<N>.bin     retained weight dumps (unless dropped)
//! ```
//!
//! Each segment starts with a 24-byte header: magic `"DTSG"`, version
//! `u32`, namespace tag (4 ASCII bytes), row width `u32`, row count `u64`,
//! followed by fixed-width little-endian rows. Row layouts are documented on
//! the `*_ROW` constants below. A store without `meta.json` is unsealed and
//! cannot be opened.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{self, AnomalyEvent, AnomalyScores};
use crate::error::{Error, Result};
use crate::ingest::{read_weight_dump_checked, ValidationDump, WeightDump};
use crate::model::{build_hierarchy, ImageMeta, NetworkHierarchy, RunManifest, ValidationMatrix, NO_LABEL};
use crate::stats::{normalize_changes, zero_change_filters, FilterChangeMatrix, NormalizeMode, WeightStats};

pub const SEGMENT_MAGIC: [u8; 4] = *b"DTSG";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// `node u32 | dump u32 | mean f64 | sd f64 | sum f64 | min f64 | max f64 |
/// update_ratio f64 (NaN = absent) | count u64 | non_finite u64`
pub const LS_ROW: usize = 72;
/// `layer u32 | filter u32 | column u32 | change f64`
pub const LF_ROW: usize = 20;
/// `column u32 | rank u32 | layer u32 | filter u32 | change f64`
pub const IF_ROW: usize = 24;
/// `class u32 | dump u32 | wrong u32 | left_score u32 | right_score u32`
pub const CS_ROW: usize = 20;

/// `image u32 | class u32 | ceil(dumps/8) bitmap bytes | [dumps × u16 label]`
pub fn ci_row_width(dumps: usize, has_labels: bool) -> usize {
    8 + dumps.div_ceil(8) + if has_labels { 2 * dumps } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Namespace {
    LayerStat,
    LayerFilter,
    IterFilter,
    ClassStat,
    ClassImage,
}

impl Namespace {
    pub const ALL: [Namespace; 5] = [
        Namespace::LayerStat,
        Namespace::LayerFilter,
        Namespace::IterFilter,
        Namespace::ClassStat,
        Namespace::ClassImage,
    ];

    pub fn tag(self) -> [u8; 4] {
        match self {
            Namespace::LayerStat => *b"I_ls",
            Namespace::LayerFilter => *b"I_lf",
            Namespace::IterFilter => *b"I_if",
            Namespace::ClassStat => *b"I_cs",
            Namespace::ClassImage => *b"I_ci",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Namespace::LayerStat => "ls.seg",
            Namespace::LayerFilter => "lf.seg",
            Namespace::IterFilter => "if.seg",
            Namespace::ClassStat => "cs.seg",
            Namespace::ClassImage => "ci.seg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Mean,
    Sd,
    Sum,
    Min,
    Max,
    UpdateRatio,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::Mean,
        Measure::Sd,
        Measure::Sum,
        Measure::Min,
        Measure::Max,
        Measure::UpdateRatio,
    ];
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Measure::Mean),
            "sd" => Ok(Measure::Sd),
            "sum" => Ok(Measure::Sum),
            "min" => Ok(Measure::Min),
            "max" => Ok(Measure::Max),
            "update_ratio" => Ok(Measure::UpdateRatio),
            other => Err(Error::UnknownMeasure(other.to_string())),
        }
    }
}

/// One row of the layer-stat index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub mean: f64,
    pub sd: f64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    /// Absent at the first dump and when the previous weights had zero norm.
    pub update_ratio: Option<f64>,
    pub count: u64,
    pub non_finite: u64,
}

impl StatRow {
    pub fn from_stats(stats: Option<WeightStats>, update_ratio: Option<f64>) -> StatRow {
        match stats {
            Some(s) => StatRow {
                mean: s.mean,
                sd: s.sd,
                sum: s.sum,
                min: s.min,
                max: s.max,
                update_ratio,
                count: s.count,
                non_finite: s.non_finite,
            },
            None => StatRow {
                mean: f64::NAN,
                sd: f64::NAN,
                sum: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
                update_ratio,
                count: 0,
                non_finite: 0,
            },
        }
    }

    pub fn measure(&self, m: Measure) -> Option<f64> {
        match m {
            Measure::Mean => Some(self.mean),
            Measure::Sd => Some(self.sd),
            Measure::Sum => Some(self.sum),
            Measure::Min => Some(self.min),
            Measure::Max => Some(self.max),
            Measure::UpdateRatio => self.update_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub layer: u32,
    pub filter: u32,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFilter {
    pub layer_id: String,
    pub filter: u32,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSeries {
    pub node_id: String,
    pub measure: Measure,
    pub iterations: Vec<u64>,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStatRow {
    pub wrong: u32,
    pub left: u32,
    pub right: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class_id: u32,
    pub name: String,
    pub size: usize,
    pub window: usize,
    pub iterations: Vec<u64>,
    pub error: Vec<f64>,
    pub left_score: Vec<u32>,
    pub right_score: Vec<u32>,
    pub events: Vec<AnomalyEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassImageRow {
    #[serde(flatten)]
    pub meta: ImageMeta,
    /// One entry per dump, 1 = correctly classified.
    pub sequence: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub file: String,
    pub tag: String,
    pub rows: u64,
    pub row_width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub run_id: String,
    pub sealed: bool,
    pub dump_iterations: Vec<u64>,
    /// Listed iterations that were skipped because their dumps were missing.
    pub gaps: Vec<u64>,
    pub class_window: usize,
    pub raw_retained: bool,
    pub has_labels: bool,
    pub non_finite_weights: u64,
    pub segments: Vec<SegmentInfo>,
    /// SHA-256 over `manifest.json` followed by every segment file in order.
    pub checksum: String,
}

/// Accumulates derived rows during ingest. Nothing is queryable until
/// [`StoreWriter::seal`] returns a [`RunStore`].
pub struct StoreWriter {
    dir: PathBuf,
    manifest: RunManifest,
    hierarchy: NetworkHierarchy,
    gaps: Vec<u64>,
    keep_raw: bool,
    iterations: Vec<u64>,
    /// `[node][dump]`
    node_stats: Vec<Vec<StatRow>>,
    /// `[layer][column][filter]`
    changes: Vec<Vec<Vec<f64>>>,
    /// `[image][dump]`
    bits: Vec<Vec<bool>>,
    labels: Vec<Vec<u16>>,
    any_labels: bool,
    validated: usize,
    non_finite: u64,
}

impl StoreWriter {
    pub fn create(
        dir: &Path,
        manifest: RunManifest,
        hierarchy: NetworkHierarchy,
        gaps: Vec<u64>,
        keep_raw: bool,
    ) -> Result<Self> {
        if dir.join("meta.json").exists() {
            return Err(Error::InvalidParameter(format!(
                "{} already holds a sealed store",
                dir.display()
            )));
        }
        fs::create_dir_all(dir.join("segments")).map_err(Error::io(dir))?;
        if keep_raw {
            fs::create_dir_all(dir.join("raw")).map_err(Error::io(dir))?;
        }
        let images = manifest.images.len();
        let nodes = hierarchy.nodes().len();
        let layers = hierarchy.layer_count();
        Ok(StoreWriter {
            dir: dir.to_path_buf(),
            manifest,
            hierarchy,
            gaps,
            keep_raw,
            iterations: Vec::new(),
            node_stats: vec![Vec::new(); nodes],
            changes: vec![Vec::new(); layers],
            bits: vec![Vec::new(); images],
            labels: vec![Vec::new(); images],
            any_labels: false,
            validated: 0,
            non_finite: 0,
        })
    }

    /// Appends one dump's weight-derived rows. `changes` is `None` only for
    /// the first dump.
    pub fn push_weights(
        &mut self,
        iteration: u64,
        rows: Vec<StatRow>,
        changes: Option<Vec<Vec<f64>>>,
        raw: &[u8],
    ) -> Result<()> {
        if let Some(&last) = self.iterations.last() {
            if iteration <= last {
                return Err(Error::NonMonotonic(iteration));
            }
        }
        if rows.len() != self.node_stats.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: self.node_stats.len(),
            });
        }
        match (self.iterations.is_empty(), changes) {
            (true, None) => {}
            (false, Some(cols)) => {
                for (layer, col) in self.changes.iter_mut().zip(cols) {
                    layer.push(col);
                }
            }
            _ => {
                return Err(Error::InvalidParameter(
                    "change columns must be supplied for every dump after the first".into(),
                ))
            }
        }
        for (series, row) in self.node_stats.iter_mut().zip(rows) {
            series.push(row);
        }
        if self.keep_raw {
            let path = raw_path(&self.dir, iteration);
            fs::write(&path, raw).map_err(Error::io(&path))?;
        }
        self.iterations.push(iteration);
        Ok(())
    }

    pub fn push_validation(&mut self, dump: ValidationDump) -> Result<()> {
        if self.iterations.get(self.validated) != Some(&dump.iteration) {
            return Err(Error::InvalidParameter(format!(
                "validation dump for iteration {} does not follow its weight dump",
                dump.iteration
            )));
        }
        if dump.correct.len() != self.bits.len() {
            return Err(Error::LengthMismatch {
                left: dump.correct.len(),
                right: self.bits.len(),
            });
        }
        for (seq, bit) in self.bits.iter_mut().zip(&dump.correct) {
            seq.push(*bit);
        }
        match dump.labels {
            Some(labels) => {
                self.any_labels = true;
                for (seq, l) in self.labels.iter_mut().zip(labels) {
                    seq.push(l);
                }
            }
            None => self.labels.iter_mut().for_each(|seq| seq.push(NO_LABEL)),
        }
        self.validated += 1;
        Ok(())
    }

    pub fn set_non_finite(&mut self, n: u64) {
        self.non_finite = n;
    }

    /// Builds the derived indexes, writes every segment, then `meta.json`.
    pub fn seal(self, class_window: usize) -> Result<RunStore> {
        if self.validated != self.iterations.len() {
            return Err(Error::InvalidParameter(format!(
                "{} weight dumps but {} validation dumps",
                self.iterations.len(),
                self.validated
            )));
        }
        if self.iterations.len() < 2 {
            return Err(Error::TooFewDumps {
                needed: 2,
                found: self.iterations.len(),
            });
        }
        let StoreWriter {
            dir,
            mut manifest,
            hierarchy,
            gaps,
            keep_raw,
            iterations,
            node_stats,
            changes,
            bits,
            labels,
            any_labels,
            non_finite,
            ..
        } = self;
        manifest.dump_iterations = iterations.clone();
        let dumps = iterations.len();

        let change_mats: Vec<FilterChangeMatrix> = changes
            .into_iter()
            .enumerate()
            .map(|(l, cols)| {
                let node = hierarchy.layer(l);
                let filters = node.shape.expect("layer shape").filter_count as usize;
                let mut m = FilterChangeMatrix::zeros(node.id.clone(), filters, cols.len());
                for (c, col) in cols.iter().enumerate() {
                    for (f, &v) in col.iter().enumerate() {
                        m.set(f, c, v);
                    }
                }
                m
            })
            .collect();
        let rankings = build_rankings(&change_mats, dumps - 1);

        let validation = ValidationMatrix::new(&manifest, dumps, bits, any_labels.then_some(labels))?;
        let class_rows = build_class_rows(&validation, class_window)?;

        let data = StoreData {
            manifest,
            hierarchy,
            node_stats,
            changes: change_mats,
            rankings,
            class_rows,
            validation,
        };

        let manifest_bytes = serde_json::to_vec_pretty(&data.manifest).map_err(Error::json(&dir))?;
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, &manifest_bytes).map_err(Error::io(&manifest_path))?;
        let mut hasher = Sha256::new();
        hasher.update(&manifest_bytes);

        let mut segments = Vec::new();
        for ns in Namespace::ALL {
            let (width, rows, body) = encode_namespace(&data, ns);
            let bytes = segment_bytes(ns, width, rows, &body);
            hasher.update(&bytes);
            let path = dir.join("segments").join(ns.file_name());
            fs::write(&path, &bytes).map_err(Error::io(&path))?;
            segments.push(SegmentInfo {
                file: ns.file_name().to_string(),
                tag: String::from_utf8_lossy(&ns.tag()).into_owned(),
                rows,
                row_width: width as u32,
            });
        }

        let meta = StoreMeta {
            format_version: STORE_VERSION,
            run_id: data.manifest.run_id.clone(),
            sealed: true,
            dump_iterations: iterations,
            gaps,
            class_window,
            raw_retained: keep_raw,
            has_labels: any_labels,
            non_finite_weights: non_finite,
            segments,
            checksum: hex::encode(hasher.finalize()),
        };
        let meta_path = dir.join("meta.json");
        let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(Error::json(&meta_path))?;
        fs::write(&meta_path, meta_bytes).map_err(Error::io(&meta_path))?;

        Ok(RunStore { dir, meta, data })
    }
}

fn raw_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join("raw").join(format!("iter_{iteration}.bin"))
}

/// Per column: every filter of every layer, by descending change degree,
/// ties by layer order then filter index.
fn build_rankings(changes: &[FilterChangeMatrix], columns: usize) -> Vec<Vec<RankEntry>> {
    (0..columns)
        .map(|c| {
            let mut entries: Vec<RankEntry> = changes
                .iter()
                .enumerate()
                .flat_map(|(l, m)| {
                    (0..m.filters).map(move |f| RankEntry {
                        layer: l as u32,
                        filter: f as u32,
                        change: m.get(f, c),
                    })
                })
                .collect();
            entries.sort_by(|a, b| {
                b.change
                    .total_cmp(&a.change)
                    .then(a.layer.cmp(&b.layer))
                    .then(a.filter.cmp(&b.filter))
            });
            entries
        })
        .collect()
}

fn build_class_rows(vm: &ValidationMatrix, window: usize) -> Result<Vec<Vec<ClassStatRow>>> {
    (0..vm.class_count() as u32)
        .map(|class| {
            let AnomalyScores { left, right } = anomaly::class_anomaly_scores(vm, class, window)?;
            let mut wrong = vec![0u32; vm.dump_count()];
            for &img in vm.class_images(class)? {
                for (w, &bit) in wrong.iter_mut().zip(vm.sequence(img)) {
                    *w += u32::from(!bit);
                }
            }
            Ok(wrong
                .into_iter()
                .zip(left)
                .zip(right)
                .map(|((wrong, left), right)| ClassStatRow { wrong, left, right })
                .collect())
        })
        .collect()
}

fn segment_bytes(ns: Namespace, width: usize, rows: u64, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&SEGMENT_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&ns.tag());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_namespace(data: &StoreData, ns: Namespace) -> (usize, u64, Vec<u8>) {
    let dumps = data.manifest.dump_iterations.len();
    let mut out = Vec::new();
    let mut rows = 0u64;
    let width = match ns {
        Namespace::LayerStat => {
            for (node, series) in data.node_stats.iter().enumerate() {
                for (dump, r) in series.iter().enumerate() {
                    put_u32(&mut out, node as u32);
                    put_u32(&mut out, dump as u32);
                    for v in [r.mean, r.sd, r.sum, r.min, r.max, r.update_ratio.unwrap_or(f64::NAN)] {
                        put_f64(&mut out, v);
                    }
                    put_u64(&mut out, r.count);
                    put_u64(&mut out, r.non_finite);
                    rows += 1;
                }
            }
            LS_ROW
        }
        Namespace::LayerFilter => {
            for (layer, m) in data.changes.iter().enumerate() {
                for f in 0..m.filters {
                    for (c, &v) in m.row(f).iter().enumerate() {
                        put_u32(&mut out, layer as u32);
                        put_u32(&mut out, f as u32);
                        put_u32(&mut out, c as u32);
                        put_f64(&mut out, v);
                        rows += 1;
                    }
                }
            }
            LF_ROW
        }
        Namespace::IterFilter => {
            for (c, ranking) in data.rankings.iter().enumerate() {
                for (rank, e) in ranking.iter().enumerate() {
                    put_u32(&mut out, c as u32);
                    put_u32(&mut out, rank as u32);
                    put_u32(&mut out, e.layer);
                    put_u32(&mut out, e.filter);
                    put_f64(&mut out, e.change);
                    rows += 1;
                }
            }
            IF_ROW
        }
        Namespace::ClassStat => {
            for (class, series) in data.class_rows.iter().enumerate() {
                for (dump, r) in series.iter().enumerate() {
                    for v in [class as u32, dump as u32, r.wrong, r.left, r.right] {
                        put_u32(&mut out, v);
                    }
                    rows += 1;
                }
            }
            CS_ROW
        }
        Namespace::ClassImage => {
            let vm = &data.validation;
            for image in 0..vm.image_count() as u32 {
                put_u32(&mut out, image);
                put_u32(&mut out, vm.image_class(image));
                let mut bitmap = vec![0u8; dumps.div_ceil(8)];
                for (j, &b) in vm.sequence(image).iter().enumerate() {
                    if b {
                        bitmap[j / 8] |= 1 << (j % 8);
                    }
                }
                out.extend_from_slice(&bitmap);
                if let Some(labels) = vm.labels(image) {
                    for &l in labels {
                        out.extend_from_slice(&l.to_le_bytes());
                    }
                }
                rows += 1;
            }
            ci_row_width(dumps, vm.has_labels())
        }
    };
    (width, rows, out)
}

struct Segment {
    name: String,
    rows: usize,
    width: usize,
    body: Vec<u8>,
}

impl Segment {
    fn parse(ns: Namespace, bytes: Vec<u8>) -> Result<Segment> {
        let name = ns.file_name().to_string();
        let corrupt = |reason: String| Error::CorruptSegment {
            segment: ns.file_name().to_string(),
            reason,
        };
        if bytes.len() < HEADER_LEN || bytes[..4] != SEGMENT_MAGIC {
            return Err(corrupt("bad segment header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "store segment",
                version,
            });
        }
        if bytes[8..12] != ns.tag() {
            return Err(corrupt(format!("namespace tag {:?}", &bytes[8..12])));
        }
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() - HEADER_LEN != rows * width {
            return Err(corrupt(format!(
                "{} body bytes for {rows} rows of width {width}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Segment {
            name,
            rows,
            width,
            body: bytes[HEADER_LEN..].to_vec(),
        })
    }

    fn expect(&self, rows: usize, width: usize) -> Result<()> {
        if self.rows != rows || self.width != width {
            return Err(Error::CorruptSegment {
                segment: self.name.clone(),
                reason: format!(
                    "expected {rows} rows of width {width}, found {} of width {}",
                    self.rows, self.width
                ),
            });
        }
        Ok(())
    }

    fn rows(&self) -> impl Iterator<Item = RowCursor<'_>> {
        self.body.chunks_exact(self.width.max(1)).map(|b| RowCursor { b, pos: 0 })
    }
}

struct RowCursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> RowCursor<'a> {
    fn bytes(&mut self, n: usize) -> &'a [u8] {
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StoreData {
    manifest: RunManifest,
    hierarchy: NetworkHierarchy,
    node_stats: Vec<Vec<StatRow>>,
    changes: Vec<FilterChangeMatrix>,
    rankings: Vec<Vec<RankEntry>>,
    class_rows: Vec<Vec<ClassStatRow>>,
    validation: ValidationMatrix,
}

/// A sealed, read-only run store. All indexes are held in memory after
/// [`RunStore::open`]; every query takes `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStore {
    dir: PathBuf,
    meta: StoreMeta,
    data: StoreData,
}

impl RunStore {
    pub fn open(dir: &Path) -> Result<RunStore> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(Error::NotSealed(dir.to_path_buf()));
        }
        let meta_text = fs::read(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: StoreMeta = serde_json::from_slice(&meta_text).map_err(Error::json(&meta_path))?;
        if !meta.sealed {
            return Err(Error::NotSealed(dir.to_path_buf()));
        }
        if meta.format_version != STORE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "store",
                version: meta.format_version,
            });
        }

        let manifest_path = dir.join("manifest.json");
        let manifest_bytes = fs::read(&manifest_path).map_err(Error::io(&manifest_path))?;
        let mut hasher = Sha256::new();
        hasher.update(&manifest_bytes);
        let manifest: RunManifest =
            serde_json::from_slice(&manifest_bytes).map_err(Error::json(&manifest_path))?;
        manifest.validate()?;
        let hierarchy = build_hierarchy(&manifest)?;

        let mut segs = Vec::with_capacity(5);
        for ns in Namespace::ALL {
            let path = dir.join("segments").join(ns.file_name());
            let bytes = fs::read(&path).map_err(Error::io(&path))?;
            hasher.update(&bytes);
            segs.push(Segment::parse(ns, bytes)?);
        }
        let computed = hex::encode(hasher.finalize());
        if computed != meta.checksum {
            return Err(Error::ChecksumMismatch {
                expected: meta.checksum.clone(),
                computed,
            });
        }

        let dumps = manifest.dump_iterations.len();
        let columns = dumps.saturating_sub(1);
        let total_filters = hierarchy.total_filters();

        let ls = &segs[0];
        ls.expect(hierarchy.nodes().len() * dumps, LS_ROW)?;
        let mut node_stats = vec![Vec::with_capacity(dumps); hierarchy.nodes().len()];
        for mut r in ls.rows() {
            let node = r.u32() as usize;
            let _dump = r.u32();
            let mean = r.f64();
            let sd = r.f64();
            let sum = r.f64();
            let min = r.f64();
            let max = r.f64();
            let ur = r.f64();
            let count = r.u64();
            let non_finite = r.u64();
            node_stats[node].push(StatRow {
                mean,
                sd,
                sum,
                min,
                max,
                update_ratio: (!ur.is_nan()).then_some(ur),
                count,
                non_finite,
            });
        }

        let lf = &segs[1];
        lf.expect(total_filters * columns, LF_ROW)?;
        let mut changes: Vec<FilterChangeMatrix> = hierarchy
            .layer_shapes()
            .map(|(id, s)| FilterChangeMatrix::zeros(id, s.filter_count as usize, columns))
            .collect();
        for mut r in lf.rows() {
            let layer = r.u32() as usize;
            let filter = r.u32() as usize;
            let column = r.u32() as usize;
            changes[layer].set(filter, column, r.f64());
        }

        let iff = &segs[2];
        iff.expect(total_filters * columns, IF_ROW)?;
        let mut rankings = vec![Vec::with_capacity(total_filters); columns];
        for mut r in iff.rows() {
            let column = r.u32() as usize;
            let _rank = r.u32();
            let layer = r.u32();
            let filter = r.u32();
            rankings[column].push(RankEntry {
                layer,
                filter,
                change: r.f64(),
            });
        }

        let cs = &segs[3];
        cs.expect(manifest.classes.len() * dumps, CS_ROW)?;
        let mut class_rows = vec![Vec::with_capacity(dumps); manifest.classes.len()];
        for mut r in cs.rows() {
            let class = r.u32() as usize;
            let _dump = r.u32();
            class_rows[class].push(ClassStatRow {
                wrong: r.u32(),
                left: r.u32(),
                right: r.u32(),
            });
        }

        let ci = &segs[4];
        ci.expect(manifest.images.len(), ci_row_width(dumps, meta.has_labels))?;
        let mut bits = vec![Vec::new(); manifest.images.len()];
        let mut labels = meta.has_labels.then(|| vec![Vec::new(); manifest.images.len()]);
        for mut r in ci.rows() {
            let image = r.u32() as usize;
            let _class = r.u32();
            let bitmap = r.bytes(dumps.div_ceil(8));
            bits[image] = (0..dumps).map(|j| bitmap[j / 8] & (1 << (j % 8)) != 0).collect();
            if let Some(labels) = labels.as_mut() {
                labels[image] = r
                    .bytes(2 * dumps)
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect();
            }
        }
        let validation = ValidationMatrix::new(&manifest, dumps, bits, labels)?;

        Ok(RunStore {
            dir: dir.to_path_buf(),
            meta,
            data: StoreData {
                manifest,
                hierarchy,
                node_stats,
                changes,
                rankings,
                class_rows,
                validation,
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.data.manifest
    }

    pub fn hierarchy(&self) -> &NetworkHierarchy {
        &self.data.hierarchy
    }

    pub fn validation(&self) -> &ValidationMatrix {
        &self.data.validation
    }

    pub fn iterations(&self) -> &[u64] {
        &self.data.manifest.dump_iterations
    }

    pub fn dump_index(&self, iteration: u64) -> Result<usize> {
        self.iterations()
            .binary_search(&iteration)
            .map_err(|_| Error::UnknownIteration(iteration))
    }

    /// Every stat row of a node (any hierarchy level), one per dump.
    pub fn stat_rows(&self, node_id: &str) -> Result<&[StatRow]> {
        let idx = self
            .data
            .hierarchy
            .node_index(node_id)
            .ok_or_else(|| Error::UnknownNode(node_id.to_string()))?;
        Ok(&self.data.node_stats[idx])
    }

    pub fn query_layer_stat(&self, node_id: &str, measure: Measure) -> Result<StatSeries> {
        let rows = self.stat_rows(node_id)?;
        Ok(StatSeries {
            node_id: node_id.to_string(),
            measure,
            iterations: self.iterations().to_vec(),
            values: rows.iter().map(|r| r.measure(measure)).collect(),
        })
    }

    pub fn change_matrix(&self, layer_id: &str) -> Result<&FilterChangeMatrix> {
        let pos = self.data.hierarchy.layer_position(layer_id)?;
        Ok(&self.data.changes[pos])
    }

    /// Filter change matrix of one layer, raw when `normalize` is `None`.
    pub fn query_layer_filters(
        &self,
        layer_id: &str,
        normalize: Option<NormalizeMode>,
    ) -> Result<FilterChangeMatrix> {
        let m = self.change_matrix(layer_id)?;
        Ok(match normalize {
            Some(mode) => normalize_changes(m, mode),
            None => m.clone(),
        })
    }

    pub fn zero_change_filters(&self, layer_id: &str) -> Result<Vec<u32>> {
        Ok(zero_change_filters(self.change_matrix(layer_id)?))
    }

    /// The `k` filters with the largest raw change degree between
    /// `iteration` and the dump before it.
    pub fn query_top_filters(&self, iteration: u64, k: usize) -> Result<Vec<RankedFilter>> {
        if k == 0 {
            return Err(Error::InvalidParameter("top-k must be at least 1".into()));
        }
        let idx = self.dump_index(iteration)?;
        if idx == 0 {
            return Err(Error::NoPredecessor(iteration));
        }
        Ok(self.data.rankings[idx - 1]
            .iter()
            .take(k)
            .map(|e| RankedFilter {
                layer_id: self.data.hierarchy.layer(e.layer as usize).id.clone(),
                filter: e.filter,
                change: e.change,
            })
            .collect())
    }

    pub fn class_rows(&self, class_id: u32) -> Result<&[ClassStatRow]> {
        self.data
            .class_rows
            .get(class_id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class_id))
    }

    /// Error-rate series of a class from the class-stat index.
    pub fn class_error_series(&self, class_id: u32) -> Result<Vec<f64>> {
        let m = self.data.validation.class_size(class_id)? as f64;
        Ok(self.class_rows(class_id)?.iter().map(|r| r.wrong as f64 / m).collect())
    }

    /// `(class id, error series)` for every class, ascending by id.
    pub fn class_error_matrix(&self) -> Vec<(u32, Vec<f64>)> {
        (0..self.data.class_rows.len() as u32)
            .map(|c| (c, self.class_error_series(c).expect("class in range")))
            .collect()
    }

    /// Left/right scores for window `k`, read from the index when `k` is the
    /// stored window and recomputed from the image bits otherwise.
    pub fn class_scores(&self, class_id: u32, k: usize) -> Result<AnomalyScores> {
        let rows = self.class_rows(class_id)?;
        if k == self.meta.class_window {
            return Ok(AnomalyScores {
                left: rows.iter().map(|r| r.left).collect(),
                right: rows.iter().map(|r| r.right).collect(),
            });
        }
        anomaly::class_anomaly_scores(&self.data.validation, class_id, k)
    }

    pub fn query_class_stat(&self, class_id: u32, k: usize, min_fraction: f64) -> Result<ClassStat> {
        anomaly::check_fraction(min_fraction)?;
        let scores = self.class_scores(class_id, k)?;
        let size = self.data.validation.class_size(class_id)?;
        let events = anomaly::events_from_scores(class_id, size, self.iterations(), &scores, min_fraction);
        Ok(ClassStat {
            class_id,
            name: self.data.manifest.classes[class_id as usize].name.clone(),
            size,
            window: k,
            iterations: self.iterations().to_vec(),
            error: self.class_error_series(class_id)?,
            left_score: scores.left,
            right_score: scores.right,
            events,
        })
    }

    /// Images of a class in ascending id order with their correctness
    /// sequences.
    pub fn query_class_images(&self, class_id: u32) -> Result<Vec<ClassImageRow>> {
        let vm = &self.data.validation;
        Ok(vm
            .class_images(class_id)?
            .iter()
            .map(|&img| ClassImageRow {
                meta: self.data.manifest.images[img as usize].clone(),
                sequence: vm.sequence(img).iter().map(|&b| u8::from(b)).collect(),
                labels: vm.labels(img).map(<[u16]>::to_vec),
            })
            .collect())
    }

    /// Anomaly events over every class.
    pub fn detect_anomalies(&self, k: usize, min_fraction: f64) -> Result<Vec<AnomalyEvent>> {
        if k == self.meta.class_window {
            anomaly::check_fraction(min_fraction)?;
            let mut out = Vec::new();
            for class in 0..self.data.class_rows.len() as u32 {
                let scores = self.class_scores(class, k)?;
                let size = self.data.validation.class_size(class)?;
                out.extend(anomaly::events_from_scores(class, size, self.iterations(), &scores, min_fraction));
            }
            return Ok(out);
        }
        anomaly::detect_anomalies(&self.data.validation, self.iterations(), k, min_fraction)
    }

    /// Re-reads a retained raw weight dump.
    pub fn raw_weight_dump(&self, iteration: u64) -> Result<WeightDump> {
        if !self.meta.raw_retained {
            return Err(Error::RawDropped);
        }
        self.dump_index(iteration)?;
        let path = raw_path(&self.dir, iteration);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        read_weight_dump_checked(&bytes, iteration, &self.data.hierarchy)
    }

    /// Rebuilds the top-filter ranking at `iteration` from the retained raw
    /// dumps instead of the iter-filter index.
    pub fn recompute_top_filters(&self, iteration: u64, k: usize) -> Result<Vec<RankedFilter>> {
        let idx = self.dump_index(iteration)?;
        if idx == 0 {
            return Err(Error::NoPredecessor(iteration));
        }
        let prev = self.raw_weight_dump(self.iterations()[idx - 1])?;
        let cur = self.raw_weight_dump(iteration)?;
        let cols = crate::ingest::change_columns(&prev, &cur);
        let mats: Vec<FilterChangeMatrix> = cols
            .into_iter()
            .enumerate()
            .map(|(l, col)| FilterChangeMatrix {
                layer_id: self.data.hierarchy.layer(l).id.clone(),
                filters: col.len(),
                columns: 1,
                values: col,
            })
            .collect();
        Ok(build_rankings(&mats, 1)
            .remove(0)
            .into_iter()
            .take(k)
            .map(|e| RankedFilter {
                layer_id: mats[e.layer as usize].layer_id.clone(),
                filter: e.filter,
                change: e.change,
            })
            .collect())
    }
}
