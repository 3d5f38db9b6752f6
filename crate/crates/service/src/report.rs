//! Batch export of the same results the API serves.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use trainscope::anomaly::AnomalyEvent;
use trainscope::correlation::{build_grid_from_events, CorrelationGrid, LayerMiniSets};
use trainscope::store::RunStore;

use crate::{QueryParams, ServiceError, ServiceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Anomalies,
    Minisets,
    Grid,
    DeadFilters,
    All,
}

impl FromStr for ReportKind {
    type Err = ServiceError;

    fn from_str(s: &str) -> ServiceResult<Self> {
        match s {
            "anomalies" => Ok(ReportKind::Anomalies),
            "minisets" => Ok(ReportKind::Minisets),
            "grid" => Ok(ReportKind::Grid),
            "dead-filters" | "dead_filters" => Ok(ReportKind::DeadFilters),
            "all" => Ok(ReportKind::All),
            other => Err(ServiceError::UnknownReport(other.to_string())),
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportKind::Anomalies => "anomalies",
            ReportKind::Minisets => "minisets",
            ReportKind::Grid => "grid",
            ReportKind::DeadFilters => "dead-filters",
            ReportKind::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ServiceError;

    fn from_str(s: &str) -> ServiceResult<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(ServiceError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct DeadFilters {
    pub layer_id: String,
    pub filters: Vec<u32>,
}

pub fn dead_filters(store: &RunStore) -> ServiceResult<Vec<DeadFilters>> {
    let h = store.hierarchy();
    let mut out = Vec::new();
    for (id, _) in h.layer_shapes() {
        let filters = store.zero_change_filters(id)?;
        if !filters.is_empty() {
            out.push(DeadFilters {
                layer_id: id.to_string(),
                filters,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FullReport<'a> {
    run_id: &'a str,
    params: &'a QueryParams,
    anomalies: &'a [AnomalyEvent],
    grid: &'a CorrelationGrid,
    dead_filters: &'a [DeadFilters],
}

fn json<T: Serialize + ?Sized>(v: &T) -> ServiceResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| ServiceError::Serialize(e.to_string()))
}

fn csv_text(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> ServiceResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| ServiceError::Serialize(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| ServiceError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ServiceError::Serialize(e.to_string()))
}

fn joined<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn minisets_csv(minisets: &[LayerMiniSets]) -> ServiceResult<String> {
    csv_text(|w| {
        w.write_record(["layer_id", "miniset", "size", "filters", "iterations", "appearances"])?;
        for ms in minisets {
            for (id, set) in ms.partition.minisets.iter().enumerate() {
                let its = ms.iterations.iter().copied().filter(|&t| ms.participates(id, t));
                w.write_record([
                    ms.layer_id.clone(),
                    id.to_string(),
                    set.len().to_string(),
                    joined(set),
                    joined(its),
                    ms.appearances[id].to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

/// Renders one report. Output is a pure function of the store and
/// parameters.
pub fn export_report(
    store: &RunStore,
    kind: ReportKind,
    params: &QueryParams,
    format: ReportFormat,
) -> ServiceResult<String> {
    params.validate()?;
    let events = store.detect_anomalies(params.k, params.min_fraction)?;
    let grid = || build_grid_from_events(store, &events, &params.grid()).map_err(ServiceError::Core);
    match (kind, format) {
        (ReportKind::Anomalies, ReportFormat::Json) => json(&events),
        (ReportKind::Anomalies, ReportFormat::Csv) => {
            let names = &store.manifest().classes;
            csv_text(|w| {
                w.write_record(["class_id", "class_name", "iteration", "kind", "score", "score_fraction"])?;
                for e in &events {
                    w.write_record([
                        e.class_id.to_string(),
                        names[e.class_id as usize].name.clone(),
                        e.iteration.to_string(),
                        e.kind.to_string(),
                        e.score.to_string(),
                        e.score_fraction.to_string(),
                    ])?;
                }
                Ok(())
            })
        }
        (ReportKind::Minisets, ReportFormat::Json) => json(&grid()?.minisets),
        (ReportKind::Minisets, ReportFormat::Csv) => minisets_csv(&grid()?.minisets),
        (ReportKind::Grid, ReportFormat::Json) => json(&grid()?),
        (ReportKind::Grid, ReportFormat::Csv) => {
            let g = grid()?;
            csv_text(|w| {
                w.write_record(["layer_id", "class_id", "count"])?;
                for c in &g.cells {
                    w.write_record([
                        g.rows[c.row].layer_id.clone(),
                        g.cols[c.col].class_id.to_string(),
                        c.count.to_string(),
                    ])?;
                }
                Ok(())
            })
        }
        (ReportKind::DeadFilters, ReportFormat::Json) => json(&dead_filters(store)?),
        (ReportKind::DeadFilters, ReportFormat::Csv) => {
            let dead = dead_filters(store)?;
            csv_text(|w| {
                w.write_record(["layer_id", "filter"])?;
                for d in &dead {
                    for f in &d.filters {
                        w.write_record([d.layer_id.clone(), f.to_string()])?;
                    }
                }
                Ok(())
            })
        }
        (ReportKind::All, ReportFormat::Json) => json(&FullReport {
            run_id: &store.manifest().run_id,
            params,
            anomalies: &events,
            grid: &grid()?,
            dead_filters: &dead_filters(store)?,
        }),
        (ReportKind::All, ReportFormat::Csv) => Err(ServiceError::NoCsv(kind.to_string())),
    }
}
