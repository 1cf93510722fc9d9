use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tilevault::cutter::{self, CutError, CutOptions, CutOutcome};
use tilevault::gazetteer::Gazetteer;
use tilevault::grid::{SceneId, ThemeId};
use tilevault::jobs::{self, JobFilter, JobsConfig, LoadStatus};
use tilevault::scaler;
use tilevault::server::{self, AppState};
use tilevault::store::{integrity_scan, Store};
use tracing::{error, info};

#[derive(Parser)]
#[command(name = "tilevault", version, about = "Tile warehouse: load, scale, serve")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StoreArg {
    /// Store directory (created on first use).
    #[arg(long)]
    store: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut scene manifests into base tiles.
    Cut {
        #[command(flatten)]
        store: StoreArg,
        /// Manifest files to load, in order.
        manifests: Vec<PathBuf>,
        /// Also load every job queued through the admin endpoint.
        #[arg(long)]
        queued: bool,
        /// Seconds after which another loader's silent job may be taken over.
        #[arg(long, default_value_t = 300)]
        stale_after: u64,
    },
    /// Build pyramid levels for queued scale jobs.
    Scale {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        theme: u16,
        /// Limit to one UTM zone (projected) or scene (raw).
        #[arg(long)]
        zone: Option<u32>,
        /// Drain the queue and exit.
        #[arg(long, conflicts_with = "watch")]
        once: bool,
        /// Keep polling for new jobs.
        #[arg(long)]
        watch: bool,
        #[arg(long, default_value_t = 2)]
        interval: u64,
        #[arg(long, default_value_t = 300)]
        stale_after: u64,
    },
    /// Serve tiles, pages, search and admin endpoints over HTTP.
    Serve {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        gazetteer: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Milliseconds between store refreshes.
        #[arg(long, default_value_t = 1000)]
        refresh_ms: u64,
    },
    /// Check a store's log offline; exit status 0 when consistent.
    Fsck {
        #[command(flatten)]
        store: StoreArg,
    },
    /// List load and scale jobs.
    Jobs {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        theme: Option<u16>,
        #[arg(long)]
        active: bool,
    },
    /// Gazetteer maintenance.
    Gazetteer {
        #[command(subcommand)]
        cmd: GazCmd,
    },
}

#[derive(Subcommand)]
enum GazCmd {
    /// Add places from a tab-separated file.
    Import {
        #[arg(long)]
        gazetteer: PathBuf,
        file: Option<PathBuf>,
        /// JSON list of famous places to append.
        #[arg(long)]
        famous: Option<PathBuf>,
    },
}

fn jobs_config(stale_after: u64) -> JobsConfig {
    JobsConfig { stale_after: Duration::from_secs(stale_after), ..Default::default() }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn open_store(a: &StoreArg) -> Result<Store, ExitCode> {
    Store::open(&a.store).map_err(|e| {
        error!("cannot open store {}: {e}", a.store.display());
        ExitCode::FAILURE
    })
}

/// Exit 0 when every manifest loaded (or was already loaded), 2 when a
/// load stopped part way and can be rerun, 1 for anything else.
fn cut(store: &StoreArg, manifests: Vec<PathBuf>, queued: bool, stale_after: u64) -> ExitCode {
    let store = match open_store(store) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let opts = CutOptions { jobs: jobs_config(stale_after), ..Default::default() };
    let mut paths = manifests;
    if queued {
        let q = jobs::list_jobs(&store, &JobFilter { active_only: true, ..Default::default() });
        paths.extend(q.load_jobs.iter().filter(|j| j.status == LoadStatus::Queued).map(|j| PathBuf::from(&j.source_path)));
    }
    for p in paths {
        match cutter::cut_manifest(&store, &p, &opts) {
            Ok(rep) => {
                if let CutOutcome::Duplicate { completed_job } = rep.outcome {
                    info!("{}: already loaded by job {completed_job}", p.display());
                }
                print_json(&rep);
            }
            Err(e) => {
                error!("{}: {e}", p.display());
                let resumable = e.is_store_crash() || !matches!(e, CutError::Manifest(_) | CutError::Job(_));
                return if resumable { ExitCode::from(2) } else { ExitCode::FAILURE };
            }
        }
    }
    ExitCode::SUCCESS
}

fn scale(store: &StoreArg, theme: u16, zone: Option<u32>, watch: bool, interval: u64, stale_after: u64) -> ExitCode {
    let store = match open_store(store) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let cfg = jobs_config(stale_after);
    let claimer = format!("{}:{}", cfg.machine, std::process::id());
    loop {
        if let Err(e) = store.refresh() {
            error!("refresh: {e}");
            return ExitCode::FAILURE;
        }
        match scaler::run_pending(&store, ThemeId(theme), zone.map(SceneId), &claimer, &cfg) {
            Ok(n) if n > 0 => info!("ran {n} scale jobs"),
            Ok(_) => {}
            Err(e) => {
                error!("scale: {e}");
                return ExitCode::FAILURE;
            }
        }
        if !watch {
            return ExitCode::SUCCESS;
        }
        std::thread::sleep(Duration::from_secs(interval));
    }
}

fn serve(store: &StoreArg, gazetteer: PathBuf, listen: String, refresh_ms: u64) -> ExitCode {
    let store = match open_store(store) {
        Ok(s) => Arc::new(s),
        Err(c) => return c,
    };
    let gaz = match Gazetteer::load(&gazetteer) {
        Ok(g) => Arc::new(g),
        Err(e) => {
            error!("gazetteer {}: {e}", gazetteer.display());
            return ExitCode::FAILURE;
        }
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let res = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&listen).await?;
        server::serve(listener, AppState::new(store, gaz), Duration::from_millis(refresh_ms)).await
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("serve: {e}");
            ExitCode::FAILURE
        }
    }
}

fn fsck(store: &StoreArg) -> ExitCode {
    match integrity_scan(&store.store) {
        Ok(rep) => {
            print_json(&rep);
            if rep.is_consistent() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            error!("fsck {}: {e}", store.store.display());
            ExitCode::FAILURE
        }
    }
}

fn gazetteer_import(dir: PathBuf, file: Option<PathBuf>, famous: Option<PathBuf>) -> ExitCode {
    let mut g = match Gazetteer::load(&dir) {
        Ok(g) => g,
        Err(e) => {
            error!("gazetteer {}: {e}", dir.display());
            return ExitCode::FAILURE;
        }
    };
    let mut code = ExitCode::SUCCESS;
    if let Some(f) = file {
        match g.import_file(&f) {
            Ok(rep) => {
                for r in &rep.rejected {
                    error!("{}:{}: {}", f.display(), r.line, r.reason);
                }
                if !rep.rejected.is_empty() {
                    code = ExitCode::from(2);
                }
                print_json(&rep);
            }
            Err(e) => {
                error!("{}: {e}", f.display());
                return ExitCode::FAILURE;
            }
        }
    }
    if let Some(f) = famous {
        if let Err(e) = g.import_famous(&f) {
            error!("{}: {e}", f.display());
            return ExitCode::FAILURE;
        }
    }
    if let Err(e) = g.save(&dir) {
        error!("saving {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    code
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Cut { store, manifests, queued, stale_after } => cut(&store, manifests, queued, stale_after),
        Cmd::Scale { store, theme, zone, once: _, watch, interval, stale_after } => {
            scale(&store, theme, zone, watch, interval, stale_after)
        }
        Cmd::Serve { store, gazetteer, listen, refresh_ms } => serve(&store, gazetteer, listen, refresh_ms),
        Cmd::Fsck { store } => fsck(&store),
        Cmd::Jobs { store, theme, active } => match open_store(&store) {
            Ok(s) => {
                print_json(&jobs::list_jobs(&s, &JobFilter { theme: theme.map(ThemeId), media_id: None, active_only: active }));
                ExitCode::SUCCESS
            }
            Err(c) => c,
        },
        Cmd::Gazetteer { cmd: GazCmd::Import { gazetteer, file, famous } } => gazetteer_import(gazetteer, file, famous),
    }
}
