//! Numeric summaries over weights and validation bits.
//!
//! All accumulation is done in `f64`. Weight vectors arrive as `f32`
//! exactly as they were dumped.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::WeightDump;
use crate::model::{NetworkHierarchy, ValidationMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub sd: f64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    /// Finite values that entered the summary.
    pub count: u64,
    /// NaN and infinite values that were excluded.
    pub non_finite: u64,
}

pub fn weight_stats(values: &[f32]) -> Result<WeightStats> {
    weight_stats_chunks(&[values])
}

/// Statistics over the concatenation of `chunks`, in order. Population sd,
/// computed with a second pass around the mean.
pub fn weight_stats_chunks(chunks: &[&[f32]]) -> Result<WeightStats> {
    let mut sum = 0.0f64;
    let mut count = 0u64;
    let mut non_finite = 0u64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in chunks.iter().flat_map(|c| c.iter()) {
        if !v.is_finite() {
            non_finite += 1;
            continue;
        }
        let v = v as f64;
        sum += v;
        count += 1;
        min = min.min(v);
        max = max.max(v);
    }
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for &v in chunks.iter().flat_map(|c| c.iter()) {
        if v.is_finite() {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    Ok(WeightStats {
        mean,
        sd: (sq / count as f64).sqrt(),
        sum,
        min,
        max,
        count,
        non_finite,
    })
}

/// `‖cur − prev‖₂ / ‖prev‖₂`, or `None` when `prev` has zero norm.
pub fn update_ratio(prev: &[f32], cur: &[f32]) -> Result<Option<f64>> {
    update_ratio_chunks(&[prev], &[cur])
}

pub fn update_ratio_chunks(prev: &[&[f32]], cur: &[&[f32]]) -> Result<Option<f64>> {
    let prev_len: usize = prev.iter().map(|c| c.len()).sum();
    let cur_len: usize = cur.iter().map(|c| c.len()).sum();
    if prev_len != cur_len {
        return Err(Error::LengthMismatch {
            left: prev_len,
            right: cur_len,
        });
    }
    let mut delta = 0.0f64;
    let mut base = 0.0f64;
    let prev_values = prev.iter().flat_map(|c| c.iter());
    let cur_values = cur.iter().flat_map(|c| c.iter());
    for (&p, &c) in prev_values.zip(cur_values) {
        let (p, c) = (p as f64, c as f64);
        delta += (c - p) * (c - p);
        base += p * p;
    }
    if base == 0.0 || !base.is_finite() {
        return Ok(None);
    }
    Ok(Some((delta / base).sqrt()))
}

/// `1 − max(0, cos(prev, cur))`, always in `[0, 1]`.
///
/// Bitwise-identical vectors are exactly 0. Two zero vectors are 0 (a dead
/// filter staying dead); exactly one zero vector is 1. A non-finite cosine
/// counts as a maximal change. Slices must have equal length.
pub fn filter_change_degree(prev: &[f32], cur: &[f32]) -> f64 {
    debug_assert_eq!(prev.len(), cur.len());
    if prev == cur && prev.iter().all(|v| v.is_finite()) {
        return 0.0;
    }
    let mut dot = 0.0f64;
    let mut pp = 0.0f64;
    let mut cc = 0.0f64;
    for (&p, &c) in prev.iter().zip(cur) {
        let (p, c) = (p as f64, c as f64);
        dot += p * c;
        pp += p * p;
        cc += c * c;
    }
    match (pp == 0.0, cc == 0.0) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 1.0,
        _ => {}
    }
    let cos = dot / (pp.sqrt() * cc.sqrt());
    if !cos.is_finite() {
        return 1.0;
    }
    (1.0 - cos.max(0.0)).clamp(0.0, 1.0)
}

/// Statistics of a hierarchy node at one dump: the concatenation of every
/// descendant layer's weights.
pub fn aggregate_stats(h: &NetworkHierarchy, node_id: &str, dump: &WeightDump) -> Result<WeightStats> {
    let node = h.get(node_id)?;
    let chunks: Vec<&[f32]> = dump.layers[node.layer_range.clone()]
        .iter()
        .map(|l| l.weights.as_slice())
        .collect();
    weight_stats_chunks(&chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    /// Min-max per filter row.
    Filter,
    /// Min-max per iteration column.
    Iteration,
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(NormalizeMode::Filter),
            "iteration" => Ok(NormalizeMode::Iteration),
            other => Err(Error::InvalidParameter(format!("unknown normalize mode `{other}`"))),
        }
    }
}

impl fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizeMode::Filter => "filter",
            NormalizeMode::Iteration => "iteration",
        })
    }
}

/// Change degrees of one layer, `filters × columns`, row-major. Column `c`
/// is the change between dump `c` and dump `c + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterChangeMatrix {
    pub layer_id: String,
    pub filters: usize,
    pub columns: usize,
    pub values: Vec<f64>,
}

impl FilterChangeMatrix {
    pub fn zeros(layer_id: impl Into<String>, filters: usize, columns: usize) -> Self {
        FilterChangeMatrix {
            layer_id: layer_id.into(),
            filters,
            columns,
            values: vec![0.0; filters * columns],
        }
    }

    pub fn get(&self, filter: usize, column: usize) -> f64 {
        self.values[filter * self.columns + column]
    }

    pub fn set(&mut self, filter: usize, column: usize, v: f64) {
        self.values[filter * self.columns + column] = v;
    }

    pub fn row(&self, filter: usize) -> &[f64] {
        &self.values[filter * self.columns..(filter + 1) * self.columns]
    }

    pub fn column(&self, column: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.filters).map(move |f| self.get(f, column))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.columns.max(1)).take(self.filters)
    }

    /// Max-pools columns into at most `target` bins of near-equal width so a
    /// pixel chart can request its own column budget.
    pub fn downsample_columns(&self, target: usize) -> FilterChangeMatrix {
        if target == 0 || target >= self.columns {
            return self.clone();
        }
        let bins = column_bins(self.columns, target);
        let mut out = FilterChangeMatrix::zeros(self.layer_id.clone(), self.filters, bins.len());
        for f in 0..self.filters {
            let row = self.row(f);
            for (b, bin) in bins.iter().enumerate() {
                let m = row[bin.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out.set(f, b, m);
            }
        }
        out
    }
}

/// Source columns pooled into each output column by
/// [`FilterChangeMatrix::downsample_columns`].
pub fn column_bins(columns: usize, target: usize) -> Vec<Range<usize>> {
    if target == 0 || target >= columns {
        return (0..columns).map(|c| c..c + 1).collect();
    }
    (0..target)
        .map(|b| {
            let lo = b * columns / target;
            lo..((b + 1) * columns / target).max(lo + 1)
        })
        .collect()
}

fn min_max_in_place(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Min-max normalization per row or per column; a constant row or column
/// maps to zeros.
pub fn normalize_changes(m: &FilterChangeMatrix, mode: NormalizeMode) -> FilterChangeMatrix {
    let mut out = m.clone();
    match mode {
        NormalizeMode::Filter => {
            for row in out.values.chunks_mut(m.columns.max(1)) {
                min_max_in_place(row);
            }
        }
        NormalizeMode::Iteration => {
            let mut col = vec![0.0; m.filters];
            for c in 0..m.columns {
                for (f, v) in col.iter_mut().enumerate() {
                    *v = m.get(f, c);
                }
                min_max_in_place(&mut col);
                for (f, &v) in col.iter().enumerate() {
                    out.set(f, c, v);
                }
            }
        }
    }
    out
}

/// Filters whose change degree is exactly zero at every column.
pub fn zero_change_filters(m: &FilterChangeMatrix) -> Vec<u32> {
    m.rows()
        .enumerate()
        .filter(|(_, row)| row.iter().all(|&v| v == 0.0))
        .map(|(f, _)| f as u32)
        .collect()
}

/// Fraction of a class's images misclassified at every dump.
pub fn class_error_series(vm: &ValidationMatrix, class_id: u32) -> Result<Vec<f64>> {
    let images = vm.class_images(class_id)?;
    let m = images.len() as f64;
    let mut wrong = vec![0u32; vm.dump_count()];
    for &img in images {
        for (w, &bit) in wrong.iter_mut().zip(vm.sequence(img)) {
            *w += u32::from(!bit);
        }
    }
    Ok(wrong.into_iter().map(|w| w as f64 / m).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary, quartiles by linear interpolation between order
/// statistics at position `q·(n−1)`. NaNs are ignored.
pub fn boxplot_summary(values: &[f64]) -> Result<BoxplotSummary> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    Ok(BoxplotSummary {
        min: sorted[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: sorted[sorted.len() - 1],
    })
}
