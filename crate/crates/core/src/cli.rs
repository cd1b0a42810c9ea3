//! `wms` command line: serve, seed, user-create, export, import.
//!
//! Settings resolve as flag, then `WMS_*` environment variable, then the
//! compiled default. Diagnostics go to stderr; results go to stdout, as JSON
//! when `--json` is given.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::api::{self, ApiConfig, AppState};
use crate::clock::SystemClock;
use crate::config::{self, Config};
use crate::domain::Role;
use crate::id::{Entropy, Id};
use crate::seed::{self, Fixture};
use crate::service::{Service, ServiceConfig};
use crate::store::{self, Store, StoreOptions};

#[derive(Debug, Parser)]
#[command(name = "wms", version, about = "Workflow management service")]
pub struct Cli {
    /// Data directory.
    #[arg(long, env = "WMS_DATA_DIR", default_value = "./data", global = true)]
    pub data_dir: PathBuf,
    /// Listen port; 0 picks a free one.
    #[arg(long, env = "WMS_PORT", default_value_t = config::DEFAULT_PORT, global = true)]
    pub port: u16,
    /// Listen address.
    #[arg(long, env = "WMS_HOST", default_value = "127.0.0.1", global = true)]
    pub host: String,
    /// File holding the token signing key (at least 32 bytes).
    #[arg(long, env = "WMS_SECRET_FILE", default_value = config::DEFAULT_SECRET_FILE, global = true)]
    pub secret_file: PathBuf,
    /// Maximum asset size in bytes.
    #[arg(long, env = "WMS_ASSET_LIMIT", default_value_t = crate::domain::DEFAULT_ASSET_LIMIT, global = true)]
    pub asset_limit: u64,
    /// Token lifetime in seconds.
    #[arg(long, env = "WMS_TOKEN_TTL", default_value_t = config::DEFAULT_TOKEN_TTL, global = true)]
    pub token_ttl: i64,
    /// Comma-separated CORS origins.
    #[arg(long, env = "WMS_ORIGINS", value_delimiter = ',', global = true)]
    pub origins: Vec<String>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API until interrupted.
    Serve {
        /// Create the secret file first if it does not exist.
        #[arg(long)]
        generate_secret: bool,
        /// Event stream heartbeat interval in seconds.
        #[arg(long, default_value_t = 15, hide = true)]
        heartbeat: u64,
    },
    /// Populate an empty store with `demo` data or a JSON fixture file.
    Seed { fixture: String },
    /// Create an account. The first account must be an admin.
    UserCreate {
        #[arg(long)]
        name: String,
        #[arg(long)]
        email: String,
        #[arg(long, env = "WMS_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long, default_value = "user")]
        role: Role,
    },
    /// Write a snapshot archive of the store.
    Export { out: PathBuf },
    /// Restore a snapshot archive into an empty data directory.
    Import { archive: PathBuf },
}

impl Cli {
    pub fn config(&self) -> Config {
        let defaults = Config::default();
        Config {
            host: self.host.clone(),
            port: self.port,
            data_dir: self.data_dir.clone(),
            secret_file: self.secret_file.clone(),
            asset_size_limit_bytes: self.asset_limit,
            token_ttl_seconds: self.token_ttl,
            allowed_origins: if self.origins.is_empty() { defaults.allowed_origins } else { self.origins.clone() },
        }
    }
}

type CliResult = Result<(), String>;

fn emit<T: Serialize>(json_mode: bool, value: &T, plain: impl FnOnce() -> String) {
    let line = if json_mode { serde_json::to_string(value).expect("output serializes") } else { plain() };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn open_store(cfg: &Config) -> Result<Arc<Store>, String> {
    let opts = StoreOptions { blob_limit: cfg.asset_size_limit_bytes, ..StoreOptions::default() };
    let store = Store::open_with(&cfg.data_dir, opts).map_err(|e| format!("cannot open store {}: {e}", cfg.data_dir.display()))?;
    let r = store.open_report();
    if r != store::OpenReport::default() {
        tracing::warn!(
            removed_tmp_files = r.removed_tmp_files,
            reconciled_events = r.reconciled_events,
            restored_documents = r.restored_documents,
            "store repaired on open"
        );
    }
    Ok(Arc::new(store))
}

fn service(store: Arc<Store>, cfg: &Config) -> Service {
    Service::new(
        store,
        Arc::new(SystemClock),
        Arc::new(Entropy::from_os()),
        ServiceConfig { token_ttl_secs: cfg.token_ttl_seconds, ..ServiceConfig::default() },
    )
}

pub fn run(cli: Cli) -> CliResult {
    let cfg = cli.config();
    cfg.validate().map_err(|e| e.to_string())?;
    match cli.command {
        Command::Serve { generate_secret, heartbeat } => serve(&cfg, cli.json, generate_secret, heartbeat),
        Command::Seed { ref fixture } => {
            let fx = if fixture == "demo" {
                seed::demo_fixture()
            } else {
                let bytes = std::fs::read(fixture).map_err(|e| format!("cannot read {fixture}: {e}"))?;
                serde_json::from_slice::<Fixture>(&bytes).map_err(|e| format!("invalid fixture {fixture}: {e}"))?
            };
            let store = open_store(&cfg)?;
            let s = seed::seed_fixture(store, &fx).map_err(|e| e.to_string())?;
            emit(cli.json, &s, || format!("seeded {} users and {} tasks (last_event_seq {})", s.users, s.tasks, s.last_event_seq));
            Ok(())
        }
        Command::UserCreate { ref name, ref email, ref password, role } => {
            let store = open_store(&cfg)?;
            let svc = service(store, &cfg);
            let m = svc.create_user(&Id::system(), name, email, password, role).map_err(|e| e.to_string())?;
            emit(cli.json, &m.value.view(), || m.value.id.to_string());
            Ok(())
        }
        Command::Export { ref out } => {
            let store = open_store(&cfg)?;
            store.export_snapshot(out).map_err(|e| format!("export failed: {e}"))?;
            let bytes = std::fs::metadata(out).map(|m| m.len()).unwrap_or(0);
            emit(cli.json, &json!({ "archive": out, "bytes": bytes }), || out.display().to_string());
            Ok(())
        }
        Command::Import { ref archive } => {
            let opts = StoreOptions { blob_limit: cfg.asset_size_limit_bytes, ..StoreOptions::default() };
            let s = store::import_snapshot(&cfg.data_dir, archive, opts).map_err(|e| format!("import failed: {e}"))?;
            emit(cli.json, &s, || {
                format!("imported {} tasks, {} users, {} blobs, {} events", s.tasks, s.users, s.blobs, s.events)
            });
            Ok(())
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn serve(cfg: &Config, json_mode: bool, generate_secret: bool, heartbeat: u64) -> CliResult {
    if generate_secret && config::generate_secret(&cfg.secret_file, &Entropy::from_os()).map_err(|e| e.to_string())? {
        tracing::info!(path = %cfg.secret_file.display(), "generated signing secret");
    }
    let key = config::load_secret(&cfg.secret_file).map_err(|e| e.to_string())?;
    let store = open_store(cfg)?;
    let svc = Arc::new(service(store.clone(), cfg));
    let state = AppState::new(svc, key, Duration::from_secs(heartbeat.max(1)));
    let api_cfg = ApiConfig { allowed_origins: cfg.allowed_origins.clone(), heartbeat: Duration::from_secs(heartbeat.max(1)) };
    let app = api::router(state.clone(), &api_cfg);

    let served = store.clone();
    let rt = tokio::runtime::Runtime::new().map_err(|e| format!("cannot start runtime: {e}"))?;
    rt.block_on(async move {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("cannot bind {addr}: {e}"))?;
        let local: SocketAddr = listener.local_addr().map_err(|e| e.to_string())?;
        let seq = served.events().last_seq();
        tracing::info!(port = local.port(), last_event_seq = seq, "listening on {local}");
        emit(json_mode, &json!({ "event": "listening", "addr": local.to_string(), "port": local.port(), "last_event_seq": seq }), || {
            format!("listening on {local} (last_event_seq {seq})")
        });
        let shutdown = {
            let state = state.clone();
            async move {
                shutdown_signal().await;
                tracing::info!("shutting down");
                state.close_streams();
            }
        };
        axum::serve(listener, app).with_graceful_shutdown(shutdown).await.map_err(|e| format!("server error: {e}"))
    })?;
    tracing::info!(last_event_seq = store.events().last_seq(), "stopped");
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("WMS_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
