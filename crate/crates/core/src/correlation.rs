//! Layer × class correlation grid.
//!
//! Rows are layers that own anomaly filters, in network order. Columns are
//! classes with anomaly events, by descending total anomaly score. Each
//! cell counts the distinct anomaly filters of the layer over the class's
//! anomaly iterations; the detailed encoding adds one vertical line per
//! anomaly iteration, one horizontal line per mini-set, and a rectangle
//! wherever a mini-set is part of an iteration's anomaly filter set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::anomaly::{self, AnomalyEvent};
use crate::error::{Error, Result};
use crate::partition::{min_set_partition, miniset_appearances, MiniSetPartition};
use crate::store::RunStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub k: usize,
    pub min_fraction: f64,
    pub top_k: usize,
    pub min_appearance: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            k: anomaly::DEFAULT_WINDOW,
            min_fraction: anomaly::DEFAULT_MIN_FRACTION,
            top_k: anomaly::DEFAULT_TOP_K,
            min_appearance: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRow {
    pub layer_id: String,
    pub layer_filters: u32,
    /// `|s_i|`: distinct anomaly filters of this layer over all iterations.
    pub anomaly_filters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCol {
    pub class_id: u32,
    pub name: String,
    /// Sorted anomaly iterations of the class.
    pub iterations: Vec<u64>,
    pub total_score: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridLine {
    Vertical { col: usize, iter: u64 },
    Horizontal { row: usize, miniset: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRect {
    pub row: usize,
    pub miniset: usize,
    pub col: usize,
    pub iter: u64,
    pub height: usize,
}

/// Mini-set partition of one layer's anomaly filter sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMiniSets {
    pub row: usize,
    pub layer_id: String,
    /// Anomaly iterations at which this layer has anomaly filters; target
    /// `t` of the partition is the filter set at `iterations[t]`.
    pub iterations: Vec<u64>,
    pub partition: MiniSetPartition,
    /// `(class, iteration)` pairs each mini-set takes part in.
    pub appearances: Vec<usize>,
}

impl LayerMiniSets {
    pub fn target_index(&self, iteration: u64) -> Option<usize> {
        self.iterations.binary_search(&iteration).ok()
    }

    pub fn filters_at(&self, iteration: u64) -> BTreeSet<u32> {
        self.target_index(iteration)
            .map(|t| self.partition.reconstruct(t))
            .unwrap_or_default()
    }

    pub fn participates(&self, miniset: usize, iteration: u64) -> bool {
        self.target_index(iteration)
            .is_some_and(|t| self.partition.membership[t].contains(&miniset))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGrid {
    pub params: GridParams,
    pub rows: Vec<GridRow>,
    pub cols: Vec<GridCol>,
    pub cells: Vec<GridCell>,
    pub lines: Vec<GridLine>,
    pub rects: Vec<GridRect>,
    pub minisets: Vec<LayerMiniSets>,
}

impl CorrelationGrid {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.cols.is_empty()
    }

    pub fn row_of(&self, layer_id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.layer_id == layer_id)
    }

    pub fn col_of(&self, class_id: u32) -> Option<usize> {
        self.cols.iter().position(|c| c.class_id == class_id)
    }

    pub fn cell_count(&self, row: usize, col: usize) -> usize {
        self.cells
            .iter()
            .find(|c| c.row == row && c.col == col)
            .map_or(0, |c| c.count)
    }
}

/// Builds the grid from the sealed store for one parameter tuple.
pub fn build_grid(store: &RunStore, params: &GridParams) -> Result<CorrelationGrid> {
    let events = store.detect_anomalies(params.k, params.min_fraction)?;
    build_grid_from_events(store, &events, params)
}

pub fn build_grid_from_events(
    store: &RunStore,
    events: &[AnomalyEvent],
    params: &GridParams,
) -> Result<CorrelationGrid> {
    if params.top_k == 0 {
        return Err(Error::InvalidParameter("top_k must be at least 1".into()));
    }
    let h = store.hierarchy();
    let manifest = store.manifest();

    let mut per_class: BTreeMap<u32, (BTreeSet<u64>, u64)> = BTreeMap::new();
    let mut classes_at: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for e in events {
        let entry = per_class.entry(e.class_id).or_default();
        entry.0.insert(e.iteration);
        entry.1 += e.score as u64;
        classes_at.entry(e.iteration).or_default().insert(e.class_id);
    }
    let mut cols: Vec<GridCol> = per_class
        .into_iter()
        .map(|(class_id, (its, total))| GridCol {
            class_id,
            name: manifest.classes[class_id as usize].name.clone(),
            iterations: its.into_iter().collect(),
            total_score: total,
        })
        .collect();
    cols.sort_by(|a, b| b.total_score.cmp(&a.total_score).then(a.class_id.cmp(&b.class_id)));

    // layer position -> iteration -> anomaly filters
    let mut by_layer: BTreeMap<usize, BTreeMap<u64, BTreeSet<u32>>> = BTreeMap::new();
    for (t, sets) in anomaly::anomaly_filters(store, events, params.top_k)? {
        for set in sets {
            let pos = h.layer_position(&set.layer_id)?;
            by_layer.entry(pos).or_default().insert(t, set.filters);
        }
    }

    let mut rows = Vec::with_capacity(by_layer.len());
    let mut minisets = Vec::with_capacity(by_layer.len());
    for (row, (pos, sets)) in by_layer.iter().enumerate() {
        let node = h.layer(*pos);
        let iterations: Vec<u64> = sets.keys().copied().collect();
        let targets: Vec<BTreeSet<u32>> = sets.values().cloned().collect();
        let partition = min_set_partition(&targets);
        let pairs: Vec<Vec<(u32, u64)>> = iterations
            .iter()
            .map(|t| classes_at[t].iter().map(|&c| (c, *t)).collect())
            .collect();
        let appearances = miniset_appearances(&partition, &pairs);
        let union: BTreeSet<u32> = targets.iter().flatten().copied().collect();
        rows.push(GridRow {
            layer_id: node.id.clone(),
            layer_filters: node.shape.expect("layer shape").filter_count,
            anomaly_filters: union.len(),
        });
        minisets.push(LayerMiniSets {
            row,
            layer_id: node.id.clone(),
            iterations,
            partition,
            appearances,
        });
    }

    let mut cells = Vec::new();
    let mut rects = Vec::new();
    for (row, ms) in minisets.iter().enumerate() {
        for (col, c) in cols.iter().enumerate() {
            let union: BTreeSet<u32> = c.iterations.iter().flat_map(|&t| ms.filters_at(t)).collect();
            if !union.is_empty() {
                cells.push(GridCell {
                    row,
                    col,
                    count: union.len(),
                });
            }
            for (id, mini) in ms.partition.minisets.iter().enumerate() {
                if ms.appearances[id] < params.min_appearance {
                    continue;
                }
                for &t in &c.iterations {
                    if ms.participates(id, t) {
                        rects.push(GridRect {
                            row,
                            miniset: id,
                            col,
                            iter: t,
                            height: mini.len(),
                        });
                    }
                }
            }
        }
    }

    let mut lines = Vec::new();
    for (col, c) in cols.iter().enumerate() {
        lines.extend(c.iterations.iter().map(|&iter| GridLine::Vertical { col, iter }));
    }
    for (row, ms) in minisets.iter().enumerate() {
        for (id, mini) in ms.partition.minisets.iter().enumerate() {
            if ms.appearances[id] >= params.min_appearance {
                lines.push(GridLine::Horizontal {
                    row,
                    miniset: id,
                    size: mini.len(),
                });
            }
        }
    }

    Ok(CorrelationGrid {
        params: *params,
        rows,
        cols,
        cells,
        lines,
        rects,
        minisets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMiniSet {
    pub id: usize,
    pub filters: Vec<u32>,
    /// This class's anomaly iterations in which the mini-set takes part.
    pub iterations: Vec<u64>,
    /// Takes part in at least two of the class's anomaly iterations.
    pub repeated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDetail {
    pub layer_id: String,
    pub class_id: u32,
    pub row: usize,
    pub col: usize,
    pub count: usize,
    pub iterations: Vec<u64>,
    pub minisets: Vec<CellMiniSet>,
    pub rectangles: Vec<GridRect>,
}

pub fn cell_detail(grid: &CorrelationGrid, layer_id: &str, class_id: u32) -> Result<CellDetail> {
    let unknown = || Error::UnknownCell {
        layer: layer_id.to_string(),
        class: class_id,
    };
    let row = grid.row_of(layer_id).ok_or_else(unknown)?;
    let col = grid.col_of(class_id).ok_or_else(unknown)?;
    let rectangles: Vec<GridRect> = grid
        .rects
        .iter()
        .filter(|r| r.row == row && r.col == col)
        .copied()
        .collect();
    let mut by_miniset: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in &rectangles {
        by_miniset.entry(r.miniset).or_default().push(r.iter);
    }
    let ms = &grid.minisets[row];
    let minisets = by_miniset
        .into_iter()
        .map(|(id, iterations)| CellMiniSet {
            id,
            filters: ms.partition.minisets[id].iter().copied().collect(),
            repeated: iterations.len() >= 2,
            iterations,
        })
        .collect();
    Ok(CellDetail {
        layer_id: layer_id.to_string(),
        class_id,
        row,
        col,
        count: grid.cell_count(row, col),
        iterations: grid.cols[col].iterations.clone(),
        minisets,
        rectangles,
    })
}
