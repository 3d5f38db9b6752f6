//! HTTP JSON API under `/api/v1`.
//!
//! Every response is a pure function of the sealed store and the query, so
//! serialized bodies are cached by endpoint and canonical query string.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use trainscope::anomaly::AnomalyEvent;
use trainscope::clustering::{kmeans_classes, ClassClustering};
use trainscope::correlation::{build_grid, cell_detail, CorrelationGrid};
use trainscope::model::NodeKind;
use trainscope::stats::{boxplot_summary, column_bins, BoxplotSummary, FilterChangeMatrix, NormalizeMode};
use trainscope::store::{Measure, RunStore, StatSeries};

use crate::params::parse;
use crate::{QueryParams, ServiceError, ServiceResult};

pub struct AppState {
    store: RunStore,
    cache: Mutex<HashMap<String, Arc<String>>>,
}

impl AppState {
    pub fn new(store: RunStore) -> Arc<Self> {
        Arc::new(AppState {
            store,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

type Shared = Arc<AppState>;
type Q = Query<HashMap<String, String>>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/run", get(run))
        .route("/hierarchy", get(hierarchy))
        .route("/clusters", get(clusters))
        .route("/classes", get(classes))
        .route("/classes/{id}", get(class))
        .route("/classes/{id}/images", get(class_images))
        .route("/layers/{id}/stats", get(layer_stats))
        .route("/layers/{id}/filters", get(layer_filters))
        .route("/anomalies", get(anomalies))
        .route("/topfilters", get(top_filters))
        .route("/correlation", get(correlation))
        .route("/correlation/cell", get(correlation_cell))
        .route("/cube", get(cube));
    Router::new().nest("/api/v1", api).with_state(state)
}

/// Serves a cached body or computes, caches and serves it.
async fn respond<T, F>(state: Shared, endpoint: &str, q: &HashMap<String, String>, f: F) -> Response
where
    T: Serialize,
    F: FnOnce(&RunStore) -> ServiceResult<T> + Send + 'static,
{
    let sorted: BTreeMap<&String, &String> = q.iter().collect();
    let key = format!("{endpoint}?{sorted:?}");
    if let Some(body) = state.cache.lock().expect("cache lock").get(&key).cloned() {
        return json_response(body);
    }
    let worker = state.clone();
    let computed = tokio::task::spawn_blocking(move || {
        let value = f(&worker.store)?;
        serde_json::to_string(&value).map_err(|e| ServiceError::Serialize(e.to_string()))
    })
    .await
    .unwrap_or_else(|e| Err(ServiceError::Serialize(e.to_string())));
    match computed {
        Ok(body) => {
            let body = Arc::new(body);
            state.cache.lock().expect("cache lock").insert(key, body.clone());
            json_response(body)
        }
        Err(e) => e.into_response(),
    }
}

fn json_response(body: Arc<String>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body.as_str().to_owned()).into_response()
}

macro_rules! try_params {
    ($q:expr) => {
        match QueryParams::from_query(&$q) {
            Ok(p) => p,
            Err(e) => return e.into_response(),
        }
    };
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dump_interval: u64,
    pub dumps: usize,
    pub iterations: Vec<u64>,
    pub gaps: Vec<u64>,
    pub layers: usize,
    pub total_filters: usize,
    pub total_weights: usize,
    pub classes: usize,
    pub images: usize,
    pub has_labels: bool,
    pub raw_retained: bool,
    pub class_window: usize,
    pub non_finite_weights: u64,
    pub checksum: String,
}

async fn run(State(state): State<Shared>, Query(q): Q) -> Response {
    respond(state, "run", &q, |s| {
        let m = s.manifest();
        let h = s.hierarchy();
        let meta = s.meta();
        Ok(RunSummary {
            run_id: m.run_id.clone(),
            dump_interval: m.dump_interval,
            dumps: s.iterations().len(),
            iterations: s.iterations().to_vec(),
            gaps: meta.gaps.clone(),
            layers: h.layer_count(),
            total_filters: h.total_filters(),
            total_weights: h.total_weights(),
            classes: m.classes.len(),
            images: m.images.len(),
            has_labels: meta.has_labels,
            raw_retained: meta.raw_retained,
            class_window: meta.class_window,
            non_finite_weights: meta.non_finite_weights,
            checksum: meta.checksum.clone(),
        })
    })
    .await
}

#[derive(Debug, Serialize)]
pub struct HierarchyNode {
    pub id: String,
    pub kind: NodeKind,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub depth: usize,
    pub filter_count: Option<u32>,
    pub weights_per_filter: Option<u32>,
    /// Positions of the node's leaf layers in network order.
    pub layers: [usize; 2],
}

async fn hierarchy(State(state): State<Shared>, Query(q): Q) -> Response {
    respond(state, "hierarchy", &q, |s| {
        let h = s.hierarchy();
        Ok(h.nodes()
            .iter()
            .map(|n| HierarchyNode {
                id: n.id.clone(),
                kind: n.kind,
                parent: n.parent.map(|p| h.node(p).id.clone()),
                children: n.children.iter().map(|&c| h.node(c).id.clone()).collect(),
                depth: n.depth,
                filter_count: n.shape.map(|s| s.filter_count),
                weights_per_filter: n.shape.map(|s| s.weights_per_filter),
                layers: [n.layer_range.start, n.layer_range.end],
            })
            .collect::<Vec<_>>())
    })
    .await
}

pub fn clustering(store: &RunStore, k: usize, seed: u64) -> ServiceResult<ClassClustering> {
    Ok(kmeans_classes(&store.class_error_matrix(), k, seed)?)
}

async fn clusters(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    // `k` here is the cluster count.
    let k = if q.contains_key("k") { p.k } else { p.cluster_k };
    respond(state, "clusters", &q, move |s| clustering(s, k, p.seed)).await
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class_id: u32,
    pub name: String,
    pub size: usize,
    pub cluster: usize,
    pub error: Vec<f64>,
    pub left_score: Vec<u32>,
    pub right_score: Vec<u32>,
}

pub fn class_summaries(store: &RunStore, p: &QueryParams, cluster: Option<usize>) -> ServiceResult<Vec<ClassSummary>> {
    let c = clustering(store, p.cluster_k, p.seed)?;
    if let Some(id) = cluster {
        if id >= c.k {
            return Err(trainscope::Error::UnknownCluster(id).into());
        }
    }
    let mut out = Vec::new();
    for (class_id, error) in store.class_error_matrix() {
        let assigned = c.cluster_of(class_id).expect("every class clustered");
        if cluster.is_some_and(|id| id != assigned) {
            continue;
        }
        let scores = store.class_scores(class_id, p.k)?;
        out.push(ClassSummary {
            class_id,
            name: store.manifest().classes[class_id as usize].name.clone(),
            size: store.validation().class_size(class_id)?,
            cluster: assigned,
            error,
            left_score: scores.left,
            right_score: scores.right,
        });
    }
    Ok(out)
}

async fn classes(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    let cluster: Option<usize> = match parse(&q, "cluster") {
        Ok(c) => c,
        Err(e) => return e.into_response(),
    };
    respond(state, "classes", &q, move |s| class_summaries(s, &p, cluster)).await
}

async fn class(State(state): State<Shared>, Path(id): Path<u32>, Query(q): Q) -> Response {
    let p = try_params!(q);
    respond(state, &format!("classes/{id}"), &q, move |s| {
        Ok(s.query_class_stat(id, p.k, p.min_fraction)?)
    })
    .await
}

async fn class_images(State(state): State<Shared>, Path(id): Path<u32>, Query(q): Q) -> Response {
    respond(state, &format!("classes/{id}/images"), &q, move |s| Ok(s.query_class_images(id)?)).await
}

#[derive(Debug, Serialize)]
pub struct LayerStats {
    pub series: StatSeries,
    pub children: Vec<StatSeries>,
    /// What each dump's box summarizes: `children` for group nodes, the
    /// change degrees of the layer's `filters` for layers.
    pub box_over: &'static str,
    pub boxplots: Vec<Option<BoxplotSummary>>,
}

pub fn layer_stats_of(store: &RunStore, id: &str, measure: Measure) -> ServiceResult<LayerStats> {
    let h = store.hierarchy();
    let node = h.get(id)?;
    let series = store.query_layer_stat(id, measure)?;
    let children: Vec<StatSeries> = node
        .children
        .iter()
        .map(|&c| store.query_layer_stat(&h.node(c).id, measure))
        .collect::<Result<_, _>>()?;
    let (box_over, boxplots) = if node.kind == NodeKind::Layer {
        let m = store.change_matrix(id)?;
        let mut b = vec![None];
        b.extend((0..m.columns).map(|c| boxplot_summary(&m.column(c).collect::<Vec<_>>()).ok()));
        ("filters", b)
    } else {
        let b = (0..series.values.len())
            .map(|j| {
                let vals: Vec<f64> = children.iter().filter_map(|c| c.values[j]).collect();
                boxplot_summary(&vals).ok()
            })
            .collect();
        ("children", b)
    };
    Ok(LayerStats {
        series,
        children,
        box_over,
        boxplots,
    })
}

async fn layer_stats(State(state): State<Shared>, Path(id): Path<String>, Query(q): Q) -> Response {
    let measure = match q.get("measure").map(|m| m.parse::<Measure>()).transpose() {
        Ok(m) => m.unwrap_or(Measure::Mean),
        Err(e) => return ServiceError::from(e).into_response(),
    };
    respond(state, &format!("layers/{id}/stats"), &q, move |s| layer_stats_of(s, &id, measure)).await
}

#[derive(Debug, Serialize)]
pub struct LayerFilters {
    pub layer_id: String,
    pub normalize: Option<NormalizeMode>,
    /// `[first, last]` iteration pooled into each output column; a column's
    /// iteration is the later dump of its pair.
    pub column_ranges: Vec<[u64; 2]>,
    pub matrix: FilterChangeMatrix,
}

pub fn layer_filters_of(
    store: &RunStore,
    id: &str,
    normalize: Option<NormalizeMode>,
    cols: Option<usize>,
) -> ServiceResult<LayerFilters> {
    let m = store.query_layer_filters(id, normalize)?;
    let target = cols.unwrap_or(m.columns);
    let its = store.iterations();
    let column_ranges = column_bins(m.columns, target)
        .into_iter()
        .map(|r| [its[r.start + 1], its[r.end]])
        .collect();
    Ok(LayerFilters {
        layer_id: id.to_string(),
        normalize,
        column_ranges,
        matrix: m.downsample_columns(target),
    })
}

async fn layer_filters(State(state): State<Shared>, Path(id): Path<String>, Query(q): Q) -> Response {
    let p = try_params!(q);
    let cols: Option<usize> = match parse(&q, "cols") {
        Ok(Some(0)) => return ServiceError::BadRequest("cols must be at least 1".into()).into_response(),
        Ok(c) => c,
        Err(e) => return e.into_response(),
    };
    respond(state, &format!("layers/{id}/filters"), &q, move |s| {
        layer_filters_of(s, &id, p.normalize, cols)
    })
    .await
}

async fn anomalies(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    respond(state, "anomalies", &q, move |s| Ok(s.detect_anomalies(p.k, p.min_fraction)?)).await
}

async fn top_filters(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    let iter: u64 = match parse(&q, "iter") {
        Ok(Some(it)) => it,
        Ok(None) => return ServiceError::BadRequest("missing `iter`".into()).into_response(),
        Err(e) => return e.into_response(),
    };
    // `k` here is the number of filters.
    let k = if q.contains_key("k") { p.k } else { p.top_k };
    respond(state, "topfilters", &q, move |s| Ok(s.query_top_filters(iter, k)?)).await
}

async fn correlation(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    respond(state, "correlation", &q, move |s| Ok(build_grid(s, &p.grid())?)).await
}

async fn correlation_cell(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    let (Some(layer), class) = (q.get("layer").cloned(), parse::<u32>(&q, "class")) else {
        return ServiceError::BadRequest("missing `layer`".into()).into_response();
    };
    let class = match class {
        Ok(Some(c)) => c,
        Ok(None) => return ServiceError::BadRequest("missing `class`".into()).into_response(),
        Err(e) => return e.into_response(),
    };
    respond(state, "correlation/cell", &q, move |s| {
        let grid = build_grid(s, &p.grid())?;
        Ok(cell_detail(&grid, &layer, class)?)
    })
    .await
}

/// Everything the three stitched views need, on one iteration axis.
#[derive(Debug, Serialize)]
pub struct Cube {
    pub iterations: Vec<u64>,
    pub params: QueryParams,
    pub measure: Measure,
    pub clusters: ClassClustering,
    pub classes: Vec<ClassSummary>,
    pub events: Vec<AnomalyEvent>,
    pub layers: Vec<StatSeries>,
    pub correlation: CorrelationGrid,
}

pub fn cube_of(store: &RunStore, p: &QueryParams, measure: Measure) -> ServiceResult<Cube> {
    let layers = store
        .hierarchy()
        .layer_shapes()
        .map(|(id, _)| store.query_layer_stat(id, measure))
        .collect::<Result<_, _>>()?;
    Ok(Cube {
        iterations: store.iterations().to_vec(),
        params: *p,
        measure,
        clusters: clustering(store, p.cluster_k, p.seed)?,
        classes: class_summaries(store, p, None)?,
        events: store.detect_anomalies(p.k, p.min_fraction)?,
        layers,
        correlation: build_grid(store, &p.grid())?,
    })
}

async fn cube(State(state): State<Shared>, Query(q): Q) -> Response {
    let p = try_params!(q);
    let measure = match q.get("measure").map(|m| m.parse::<Measure>()).transpose() {
        Ok(m) => m.unwrap_or(Measure::Mean),
        Err(e) => return ServiceError::from(e).into_response(),
    };
    respond(state, "cube", &q, move |s| cube_of(s, &p, measure)).await
}
