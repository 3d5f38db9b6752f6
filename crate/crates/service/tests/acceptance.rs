//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use tower::ServiceExt;
use trainscope::anomaly::{left_flags, right_flags, RuleKind};
use trainscope::clustering::{adjusted_rand_index, kmeans_classes};
use trainscope::ingest::{ingest_run, read_validation_dump, read_weight_dump, validation_path, weight_path, IngestOptions};
use trainscope::model::NodeKind;
use trainscope::partition::{min_set_partition, signature_partition};
use trainscope::store::{Measure, RunStore};
use trainscope::synthgen::{generate_run, Archetype, Grouping, LayerConfig, Plant, SynthConfig};
use trainscope_service::{export_report, router, AppState, QueryParams, ReportFormat, ReportKind};

const DEAD_FILTER_BUDGET: Duration = Duration::from_secs(10);
const FLIP_FRACTION: f64 = 0.9;
const FLIP_CLASS_SIZE: usize = 50;
const FLIP_EXPECTED: u32 = 45;
const PARTITION_CASES: usize = 1000;
const PARTITION_MAX_SETS: usize = 10;
const PARTITION_MAX_ELEMENTS: u32 = 50;
const PARTITION_BUDGET: Duration = Duration::from_secs(5);
const INDEX_REL_TOL: f64 = 1e-9;
const MIN_TOTAL_FILTERS: usize = 1000;
const AGGREGATE_REL_TOL: f64 = 1e-12;
const UPDATE_RATIO_RANGE: (f64, f64) = (0.5e-3, 2e-3);
const UPDATE_RATIO_MIN_SHARE: f64 = 0.95;
const TARGET_ARI: f64 = 1.0;
const MIRROR_MAX_LEN: usize = 12;
const MIRROR_MAX_K: usize = 4;
const INGEST_BUDGET: Duration = Duration::from_secs(60);
const STORE_BUDGET_BYTES: u64 = 200 * 1024 * 1024;
const QUERY_BUDGET: Duration = Duration::from_millis(100);

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Population mean and sd by two passes, plus sum, min and max.
fn naive_stats(values: &[f32]) -> [f64; 5] {
    let n = values.len() as f64;
    let sum: f64 = values.iter().map(|&v| v as f64).sum();
    let mean = sum / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().map(|&v| v as f64).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), sum, min, max]
}

fn naive_change(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ if a == b => 0.0,
        _ => 1.0 - (dot / (na * nb)).max(0.0),
    }
}

fn layers(shapes: &[(u32, u32)]) -> Vec<LayerConfig> {
    shapes
        .iter()
        .map(|&(filters, weights_per_filter)| LayerConfig {
            filters,
            weights_per_filter,
        })
        .collect()
}

fn dir_size(dir: &Path) -> u64 {
    let mut total = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let meta = entry.metadata().unwrap();
        total += if meta.is_dir() { dir_size(&entry.path()) } else { meta.len() };
    }
    total
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let tmp = tempdir().unwrap();
    let mut shapes = vec![(64, 27)];
    shapes.extend(std::iter::repeat_n((32, 18), 9));
    let mut config = SynthConfig::new(101, layers(&shapes), 10, 20, 60);
    let dead = [13u32, 50];
    config.plants = dead.iter().map(|&filter| Plant::DeadFilter { layer: 0, filter }).collect();
    generate_run(&config, &tmp.path().join("run")).unwrap();
    let (store, _) = ingest_run(&tmp.path().join("run"), &tmp.path().join("store"), &IngestOptions::default()).unwrap();

    let m = store.change_matrix("layer00").unwrap();
    for &f in &dead {
        ensure!(m.row(f as usize).iter().all(|&v| v == 0.0), "dead filter {f} has non-zero change");
    }
    let mut found = Vec::new();
    for (id, _) in store.hierarchy().layer_shapes() {
        for f in store.zero_change_filters(id).unwrap() {
            found.push(format!("{id}:{f}"));
        }
    }
    let want: Vec<String> = dead.iter().map(|f| format!("layer00:{f}")).collect();
    ensure!(found == want, "zero-change scan reported {found:?}, expected {want:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed < DEAD_FILTER_BUDGET, "took {elapsed:?}");
    Ok(format!("zero-change scan = {found:?} in {:.2} s (< {} s)", elapsed.as_secs_f64(), DEAD_FILTER_BUDGET.as_secs()))
}

fn criterion_2() -> Verdict {
    let tmp = tempdir().unwrap();
    let mut config = SynthConfig::new(202, layers(&[(16, 9), (16, 9)]), 6, FLIP_CLASS_SIZE, 40);
    let k = 5;
    let planted = [(2u32, 14usize), (5, 27)];
    for &(class, dump) in &planted {
        config.plants.push(Plant::FlipEvent {
            class,
            dump,
            fraction: FLIP_FRACTION,
            pre_stable: k,
            post_stable: k,
        });
    }
    config.plants.push(Plant::Archetype {
        class: 3,
        archetype: Archetype::Slow,
    });
    config.plants.push(Plant::Archetype {
        class: 4,
        archetype: Archetype::Step,
    });
    generate_run(&config, &tmp.path().join("run")).unwrap();
    let (store, _) = ingest_run(&tmp.path().join("run"), &tmp.path().join("store"), &IngestOptions::default()).unwrap();

    let mut want = Vec::new();
    for &(class, dump) in &planted {
        let stat = store.query_class_stat(class, k, 0.5).unwrap();
        ensure!(
            stat.left_score[dump] == FLIP_EXPECTED && stat.right_score[dump] == FLIP_EXPECTED,
            "class {class}: left {} right {} at t*, expected {FLIP_EXPECTED}",
            stat.left_score[dump],
            stat.right_score[dump]
        );
        let it = store.iterations()[dump];
        want.push((class, it, RuleKind::Left, FLIP_EXPECTED));
        want.push((class, it, RuleKind::Right, FLIP_EXPECTED));
    }
    let got: Vec<_> = store
        .detect_anomalies(k, 0.5)
        .unwrap()
        .into_iter()
        .map(|e| (e.class_id, e.iteration, e.kind, e.score))
        .collect();
    ensure!(got == want, "detected {got:?}, planted {want:?}");
    Ok(format!("left = right = {FLIP_EXPECTED} at t*; {} events detected, all planted, 0 false positives", got.len()))
}

fn criterion_3() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..PARTITION_CASES {
        let n_sets = rng.random_range(0..=PARTITION_MAX_SETS);
        let targets: Vec<BTreeSet<u32>> = (0..n_sets)
            .map(|_| {
                let size = rng.random_range(0..=PARTITION_MAX_ELEMENTS as usize);
                let mut pool: Vec<u32> = (0..PARTITION_MAX_ELEMENTS).collect();
                pool.shuffle(&mut rng);
                pool.into_iter().take(size).collect()
            })
            .collect();
        let p = min_set_partition(&targets);
        ensure!(
            p.as_set_of_sets() == signature_partition(&targets).as_set_of_sets(),
            "case {case}: differs from signature partition"
        );
        let mut seen = BTreeSet::new();
        for m in &p.minisets {
            for e in m {
                ensure!(seen.insert(*e), "case {case}: element {e} in two mini-sets");
            }
        }
        let union: BTreeSet<u32> = targets.iter().flatten().copied().collect();
        ensure!(seen == union, "case {case}: mini-sets do not cover the union");
        for (t, target) in targets.iter().enumerate() {
            ensure!(p.reconstruct(t) == *target, "case {case}: target {t} not reconstructed");
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < PARTITION_BUDGET, "took {elapsed:?}");
    Ok(format!("{PARTITION_CASES} collections match, invariants hold, {:.3} s (< {} s)", elapsed.as_secs_f64(), PARTITION_BUDGET.as_secs()))
}

struct BigFixture {
    _tmp: tempfile::TempDir,
    run: std::path::PathBuf,
    store: RunStore,
    ingest_time: Duration,
    store_bytes: u64,
}

fn big_config() -> SynthConfig {
    let shapes = [(64, 9), (64, 18), (96, 18), (96, 36), (128, 36), (128, 36), (128, 72), (128, 72), (96, 72), (96, 36)];
    let mut config = SynthConfig::new(404, layers(&shapes), 20, 50, 200);
    config.grouping = Some(Grouping {
        bottlenecks_per_module: 2,
        layers_per_bottleneck: 2,
    });
    config.label_noise = 0.01;
    let archetypes = [Archetype::Fast, Archetype::Step, Archetype::Slow, Archetype::Never];
    for class in 0..20u32 {
        config.plants.push(Plant::Archetype {
            class,
            archetype: archetypes[class as usize % 4],
        });
    }
    for (class, dump) in [(1u32, 60usize), (1, 120), (6, 60), (9, 150)] {
        config.plants.push(Plant::FlipEvent {
            class,
            dump,
            fraction: 0.8,
            pre_stable: 5,
            post_stable: 5,
        });
    }
    config.plants.push(Plant::FilterShock {
        layer: 3,
        filters: vec![4, 8, 15, 16],
        dump: 60,
        magnitude: 1.0,
    });
    config
}

fn big_fixture() -> BigFixture {
    let tmp = tempdir().unwrap();
    let run = tmp.path().join("run");
    generate_run(&big_config(), &run).unwrap();
    let started = Instant::now();
    let (store, _) = ingest_run(&run, &tmp.path().join("store"), &IngestOptions::default()).unwrap();
    let ingest_time = started.elapsed();
    let store_bytes = dir_size(&tmp.path().join("store"));
    BigFixture {
        _tmp: tmp,
        run,
        store,
        ingest_time,
        store_bytes,
    }
}

fn criterion_4(fx: &BigFixture) -> Verdict {
    let store = &fx.store;
    let h = store.hierarchy();
    ensure!(h.layer_count() == 10, "expected 10 layers");
    ensure!(h.total_filters() >= MIN_TOTAL_FILTERS, "only {} filters", h.total_filters());
    let its = store.iterations().to_vec();
    let mut prev: Option<trainscope::ingest::WeightDump> = None;
    let mut checked = [0usize; 5];
    for (j, &it) in its.iter().enumerate() {
        let dump = read_weight_dump(&fs::read(weight_path(&fx.run, it)).unwrap(), it).unwrap();
        // I_ls: per-layer stats.
        for (pos, layer) in dump.layers.iter().enumerate() {
            let row = store.stat_rows(&layer.id).unwrap()[j];
            let want = naive_stats(&layer.weights);
            let got = [row.mean, row.sd, row.sum, row.min, row.max];
            for (g, w) in got.iter().zip(&want) {
                ensure!(rel_close(*g, *w, INDEX_REL_TOL), "{} @ {it}: stat {g} vs {w}", layer.id);
            }
            if let Some(p) = &prev {
                let pl = &p.layers[pos].weights;
                let delta = pl.iter().zip(&layer.weights).map(|(&a, &b)| (b as f64 - a as f64).powi(2)).sum::<f64>().sqrt();
                let norm = pl.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                let ur = row.update_ratio.ok_or("missing update ratio")?;
                ensure!(rel_close(ur, delta / norm, INDEX_REL_TOL), "{} @ {it}: update ratio", layer.id);
            }
            checked[0] += 1;
        }
        // I_lf and I_if: change degrees and ranking.
        if let Some(p) = &prev {
            let mut all = Vec::new();
            for (pos, (a, b)) in p.layers.iter().zip(&dump.layers).enumerate() {
                let m = store.change_matrix(&b.id).unwrap();
                for f in 0..b.filter_count as usize {
                    let want = naive_change(a.filter(f), b.filter(f));
                    let got = m.get(f, j - 1);
                    ensure!((got - want).abs() <= INDEX_REL_TOL * want.abs().max(1e-3), "{} f{f} @ {it}: {got} vs {want}", b.id);
                    all.push((want, pos, f as u32));
                    checked[1] += 1;
                }
            }
            all.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let top = store.query_top_filters(it, 100).unwrap();
            ensure!(top.len() == 100, "@ {it}: ranking has {} entries", top.len());
            for (r, (want, got)) in all.iter().zip(&top).enumerate() {
                ensure!(
                    h.layer(want.1).id == got.layer_id && want.2 == got.filter,
                    "rank {r} @ {it}: {}:{} vs {}:{}",
                    h.layer(want.1).id,
                    want.2,
                    got.layer_id,
                    got.filter
                );
            }
            checked[2] += 1;
        }
        prev = Some(dump);
    }
    // I_ci and I_cs from the raw validation dumps.
    let vdumps: Vec<_> = its
        .iter()
        .map(|&it| read_validation_dump(&fs::read(validation_path(&fx.run, it)).unwrap(), it).unwrap())
        .collect();
    let manifest = store.manifest();
    for class in 0..manifest.classes.len() as u32 {
        let rows = store.query_class_images(class).unwrap();
        let ids: Vec<u32> = manifest.images.iter().filter(|i| i.class_id == class).map(|i| i.id).collect();
        ensure!(rows.iter().map(|r| r.meta.id).collect::<Vec<_>>() == ids, "class {class}: image ids");
        let mut wrong = vec![0u32; its.len()];
        let mut left = vec![0u32; its.len()];
        let mut right = vec![0u32; its.len()];
        for row in &rows {
            let seq: Vec<bool> = vdumps.iter().map(|d| d.correct[row.meta.id as usize]).collect();
            ensure!(row.sequence.iter().map(|&b| b == 1).collect::<Vec<_>>() == seq, "image {} bits", row.meta.id);
            let labels: Vec<u16> = vdumps.iter().map(|d| d.labels.as_ref().unwrap()[row.meta.id as usize]).collect();
            ensure!(row.labels.as_ref() == Some(&labels), "image {} labels", row.meta.id);
            checked[3] += 1;
            for j in 0..seq.len() {
                wrong[j] += u32::from(!seq[j]);
                if j == 0 || seq[j] == seq[j - 1] {
                    continue;
                }
                if j >= 5 && seq[j - 5..j].iter().all(|&b| b == seq[j - 1]) {
                    left[j] += 1;
                }
                if j + 5 <= seq.len() && seq[j..j + 5].iter().all(|&b| b == seq[j]) {
                    right[j] += 1;
                }
            }
        }
        let cs = store.class_rows(class).unwrap();
        ensure!(cs.iter().map(|r| r.wrong).collect::<Vec<_>>() == wrong, "class {class}: wrong counts");
        ensure!(cs.iter().map(|r| r.left).collect::<Vec<_>>() == left, "class {class}: left scores");
        ensure!(cs.iter().map(|r| r.right).collect::<Vec<_>>() == right, "class {class}: right scores");
        checked[4] += 1;
    }
    Ok(format!(
        "layer-stat {} rows, layer-filter {} cells, iter-filter {} rankings, class-image {} sequences, class-stat {} classes match (tol {INDEX_REL_TOL:e})",
        checked[0], checked[1], checked[2], checked[3], checked[4]
    ))
}

fn criterion_5(fx: &BigFixture) -> Verdict {
    let store = &fx.store;
    let h = store.hierarchy();
    let mut groups = 0;
    for &it in store.iterations().iter().step_by(20) {
        let j = store.dump_index(it).unwrap();
        let dump = read_weight_dump(&fs::read(weight_path(&fx.run, it)).unwrap(), it).unwrap();
        for node in h.nodes().iter().filter(|n| n.kind != NodeKind::Layer) {
            let flat: Vec<f32> = dump.layers[node.layer_range.clone()].iter().flat_map(|l| l.weights.iter().copied()).collect();
            let want = naive_stats(&flat);
            let row = store.stat_rows(&node.id).unwrap()[j];
            let got = [row.mean, row.sd, row.sum, row.min, row.max];
            for (g, w) in got.iter().zip(&want) {
                ensure!(rel_close(*g, *w, AGGREGATE_REL_TOL), "{} @ {it}: {g} vs {w}", node.id);
            }
            ensure!(row.count as usize == flat.len(), "{} count", node.id);
            groups += 1;
        }
        let all: Vec<f32> = dump.layers.iter().flat_map(|l| l.weights.iter().copied()).collect();
        let root = store.stat_rows("model").unwrap()[j];
        ensure!(rel_close(root.sum, naive_stats(&all)[2], AGGREGATE_REL_TOL), "root sum");
        ensure!(root.count as usize == h.total_weights(), "root count");
    }
    let modules = h.level_slice(NodeKind::ConvModule).len();
    let bottlenecks = h.level_slice(NodeKind::Bottleneck).len();
    Ok(format!(
        "{groups} group rows ({modules} modules, {bottlenecks} bottlenecks, root) within {AGGREGATE_REL_TOL:e}"
    ))
}

fn criterion_6(fx: &BigFixture) -> Verdict {
    let store = &fx.store;
    let (lo, hi) = UPDATE_RATIO_RANGE;
    let mut ok = 0usize;
    let mut total = 0usize;
    let mut worst_share = 1.0f64;
    for (id, _) in store.hierarchy().layer_shapes() {
        let series = store.query_layer_stat(id, Measure::UpdateRatio).unwrap();
        let vals: Vec<f64> = series.values.iter().flatten().copied().collect();
        let good = vals.iter().filter(|&&v| (lo..=hi).contains(&v)).count();
        worst_share = worst_share.min(good as f64 / vals.len() as f64);
        ok += good;
        total += vals.len();
    }
    ensure!(worst_share >= UPDATE_RATIO_MIN_SHARE, "worst layer share {worst_share:.3}");
    Ok(format!(
        "{ok}/{total} layer-dumps in [{lo:e}, {hi:e}], worst layer {:.1}% (>= {:.0}%)",
        100.0 * worst_share,
        100.0 * UPDATE_RATIO_MIN_SHARE
    ))
}

fn criterion_7() -> Verdict {
    let tmp = tempdir().unwrap();
    let mut config = SynthConfig::new(707, layers(&[(8, 9)]), 20, 50, 60);
    config.label_noise = 0.02;
    let kinds = [Archetype::Fast, Archetype::Step, Archetype::Slow, Archetype::Never];
    let planted: Vec<usize> = (0..20).map(|c| c % 4).collect();
    for (class, &a) in planted.iter().enumerate() {
        config.plants.push(Plant::Archetype {
            class: class as u32,
            archetype: kinds[a],
        });
    }
    generate_run(&config, &tmp.path().join("run")).unwrap();
    let (store, _) = ingest_run(&tmp.path().join("run"), &tmp.path().join("store"), &IngestOptions::default()).unwrap();
    let c = kmeans_classes(&store.class_error_matrix(), 4, 7).unwrap();
    let ari = adjusted_rand_index(&c.assignments, &planted);
    ensure!(ari == TARGET_ARI, "ARI {ari}");
    Ok(format!("ARI = {ari} after {} Lloyd iterations (seed 7)", c.iterations))
}

fn criterion_8() -> Verdict {
    let mut checked = 0usize;
    for n in 1..=MIRROR_MAX_LEN {
        for mask in 0u32..(1 << n) {
            let seq: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let rev: Vec<bool> = seq.iter().rev().copied().collect();
            for k in 1..=MIRROR_MAX_K {
                let mut r = right_flags(&rev, k).unwrap();
                r.reverse();
                let mut want = vec![false];
                want.extend_from_slice(&r[..n - 1]);
                ensure!(left_flags(&seq, k).unwrap() == want, "{seq:?} k={k}");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (sequence, k) pairs, lengths 1..={MIRROR_MAX_LEN}, k 1..={MIRROR_MAX_K}"))
}

async fn timed_get(state: &Arc<AppState>, uri: &str) -> Result<Duration, String> {
    let started = Instant::now();
    let resp = router(state.clone())
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let _ = resp.into_body().collect().await.unwrap();
    let elapsed = started.elapsed();
    if status != StatusCode::OK {
        return Err(format!("{uri} answered {status}"));
    }
    Ok(elapsed)
}

fn criterion_9(fx: BigFixture) -> Verdict {
    ensure!(fx.ingest_time < INGEST_BUDGET, "ingest took {:?}", fx.ingest_time);
    ensure!(fx.store_bytes < STORE_BUDGET_BYTES, "store is {} bytes", fx.store_bytes);
    let store = RunStore::open(fx.store.dir()).unwrap();
    let shocked = store.iterations()[60];
    let state = AppState::new(store);
    let uris = vec![
        "/api/v1/run".to_string(),
        "/api/v1/hierarchy".into(),
        "/api/v1/clusters".into(),
        "/api/v1/classes".into(),
        "/api/v1/classes?cluster=1".into(),
        "/api/v1/classes/1".into(),
        "/api/v1/classes/1?k=3".into(),
        "/api/v1/classes/1/images".into(),
        "/api/v1/layers/model/stats?measure=sd".into(),
        "/api/v1/layers/module0/stats?measure=update_ratio".into(),
        "/api/v1/layers/layer06/stats".into(),
        "/api/v1/layers/layer06/filters".into(),
        "/api/v1/layers/layer06/filters?normalize=iteration&cols=100".into(),
        "/api/v1/anomalies".into(),
        "/api/v1/anomalies?k=3&min_fraction=0.3".into(),
        format!("/api/v1/topfilters?iter={shocked}&k=100"),
        "/api/v1/correlation".into(),
        "/api/v1/correlation?top_k=20&min_appearance=2".into(),
        "/api/v1/correlation/cell?layer=layer03&class=1&top_k=20".into(),
        "/api/v1/cube".into(),
    ];
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut slowest = (Duration::ZERO, String::new());
    for uri in &uris {
        let t = rt.block_on(timed_get(&state, uri))?;
        ensure!(t < QUERY_BUDGET, "{uri} took {t:?}");
        if t > slowest.0 {
            slowest = (t, uri.clone());
        }
    }
    let params = QueryParams::default();
    let kinds = [
        (ReportKind::Anomalies, ReportFormat::Csv),
        (ReportKind::Minisets, ReportFormat::Csv),
        (ReportKind::Grid, ReportFormat::Csv),
        (ReportKind::DeadFilters, ReportFormat::Csv),
        (ReportKind::All, ReportFormat::Json),
    ];
    for (kind, format) in kinds {
        let started = Instant::now();
        export_report(state.store(), kind, &params, format).map_err(|e| e.to_string())?;
        let t = started.elapsed();
        ensure!(t < QUERY_BUDGET, "report {kind} took {t:?}");
        if t > slowest.0 {
            slowest = (t, format!("report {kind}"));
        }
    }
    Ok(format!(
        "ingest {:.2} s (< {} s), store {:.1} MB (< {} MB), {} queries + {} reports, slowest {} at {:.1} ms (< {} ms), no UI built",
        fx.ingest_time.as_secs_f64(),
        INGEST_BUDGET.as_secs(),
        fx.store_bytes as f64 / (1024.0 * 1024.0),
        STORE_BUDGET_BYTES / (1024 * 1024),
        uris.len(),
        kinds.len(),
        slowest.1,
        slowest.0.as_secs_f64() * 1e3,
        QUERY_BUDGET.as_millis()
    ))
}

fn run(id: u8, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &verdict {
        Ok(detail) => println!("PASS  [{id}] {name}: {detail}"),
        Err(why) => println!("FAIL  [{id}] {name}: {why}"),
    }
    verdict.is_ok()
}

fn main() {
    println!("acceptance criteria");
    let mut ok = true;
    ok &= run(1, "dead-filter detection", criterion_1);
    ok &= run(2, "flip-event recall", criterion_2);
    ok &= run(3, "mini-set correctness", criterion_3);
    let fx = big_fixture();
    ok &= run(4, "index-oracle equivalence", || criterion_4(&fx));
    ok &= run(5, "hierarchical aggregation", || criterion_5(&fx));
    ok &= run(6, "update-ratio sanity", || criterion_6(&fx));
    ok &= run(7, "archetype clustering", criterion_7);
    ok &= run(8, "mirror identity", criterion_8);
    ok &= run(9, "end-to-end budget", move || criterion_9(fx));
    if !ok {
        std::process::exit(1);
    }
}
