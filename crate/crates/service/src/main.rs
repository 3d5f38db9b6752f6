use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tower_http::services::ServeDir;
use tracing::info;
use trainscope::ingest::{ingest_run, IngestOptions, MissingPolicy};
use trainscope::store::RunStore;
use trainscope::synthgen::{generate_run, SynthConfig};
use trainscope_service::{export_report, router, AppState, QueryParams, ReportFormat, ReportKind};

#[derive(Parser)]
#[command(name = "trainscope", version, about = "Training-telemetry analytics over weight and validation dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a run directory into a sealed store.
    Ingest {
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// What to do about a listed dump whose files are absent: skip or fail.
        #[arg(long, default_value = "skip")]
        missing: MissingPolicy,
        /// Anomaly window stored in the class-stat index.
        #[arg(long, default_value_t = trainscope::anomaly::DEFAULT_WINDOW)]
        window: usize,
        /// Do not keep raw weight dumps in the store.
        #[arg(long)]
        drop_raw: bool,
    },
    /// Write a synthetic run from a JSON config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the query API (and optionally a built UI bundle).
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Export a report: anomalies, minisets, grid, dead-filters or all.
    Report {
        kind: ReportKind,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = QueryParams::default().k)]
        k: usize,
        #[arg(long, default_value_t = QueryParams::default().min_fraction)]
        min_fraction: f64,
        #[arg(long, default_value_t = QueryParams::default().top_k)]
        top_k: usize,
        #[arg(long, default_value_t = QueryParams::default().min_appearance)]
        min_appearance: usize,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Ingest {
            run,
            out,
            missing,
            window,
            drop_raw,
        } => {
            let options = IngestOptions {
                missing,
                class_window: window,
                drop_raw,
            };
            let (_, report) = ingest_run(&run, &out, &options)
                .with_context(|| format!("ingesting {}", run.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Synth { config, out } => {
            let cfg = SynthConfig::load(&config)?;
            let summary = generate_run(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Serve { store, bind, ui } => {
            let store = RunStore::open(&store).with_context(|| format!("opening {}", store.display()))?;
            let mut app = router(AppState::new(store));
            if let Some(ui) = ui {
                app = app.fallback_service(ServeDir::new(ui));
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(bind)
                    .await
                    .with_context(|| format!("binding {bind}"))?;
                info!(%bind, "serving");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Report {
            kind,
            store,
            format,
            out,
            k,
            min_fraction,
            top_k,
            min_appearance,
        } => {
            let store = RunStore::open(&store).with_context(|| format!("opening {}", store.display()))?;
            let params = QueryParams {
                k,
                min_fraction,
                top_k,
                min_appearance,
                ..QueryParams::default()
            };
            let text = export_report(&store, kind, &params, format)?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
