//! Booting the registry and resource servers as real HTTP services.

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::auth::{SecretHash, SecureRng};
use crate::clock::SystemClock;
use crate::http::{serve, BindFailed, HttpServer, HttpTransport};
use crate::nmu::{Nmu, NmuHandler, StoreError};
use crate::server::{DirectoryDriver, LevelMap, MemoryDriver, QueryDriver, Server, ServerConfig, ServerHandler};
use crate::store::{DirStore, DocStore, MemStore};

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error(transparent)]
    Bind(#[from] BindFailed),
    #[error("{0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
}

impl From<StoreError> for BootError {
    fn from(e: StoreError) -> Self {
        BootError::State(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct NmuBoot {
    pub bind: String,
    pub admin: SecretHash,
    /// Registry log directory; in memory when absent.
    pub state_dir: Option<PathBuf>,
    pub threads: usize,
}

pub struct RunningNmu {
    pub nmu: Arc<Nmu>,
    pub http: HttpServer,
}

impl RunningNmu {
    pub fn url(&self) -> String {
        self.http.url()
    }
}

/// Replay the registry (if persisted), start the push worker and listen.
pub fn run_nmu(boot: NmuBoot) -> Result<RunningNmu, BootError> {
    let clock = Arc::new(SystemClock);
    let transport = Arc::new(HttpTransport::default());
    let nmu = match &boot.state_dir {
        Some(dir) => Nmu::open(boot.admin, clock, transport, dir)?,
        None => Nmu::new(boot.admin, clock, transport),
    };
    let nmu = Arc::new(nmu);
    nmu.start_background_push();
    let http = serve(&boot.bind, Arc::new(NmuHandler::new(nmu.clone())), boot.threads)?;
    log::info!("nmu listening on {}", http.url());
    Ok(RunningNmu { nmu, http })
}

#[derive(Debug, Clone)]
pub struct ServerBoot {
    pub sid: String,
    pub bind: String,
    pub nmu_url: Option<String>,
    pub txn_timeout: Duration,
    /// Users and workspaces; in memory when absent.
    pub state_dir: Option<PathBuf>,
    /// Directory catalog; an empty in-memory catalog when absent.
    pub catalog_dir: Option<PathBuf>,
    pub levels: LevelMap,
    pub threads: usize,
    pub sweep_every: Duration,
}

impl ServerBoot {
    pub fn new(sid: &str, bind: &str) -> Self {
        ServerBoot {
            sid: sid.to_owned(),
            bind: bind.to_owned(),
            nmu_url: None,
            txn_timeout: ServerConfig::new(sid).txn_timeout,
            state_dir: None,
            catalog_dir: None,
            levels: LevelMap::default(),
            threads: 8,
            sweep_every: Duration::from_secs(5),
        }
    }
}

pub struct RunningServer {
    pub server: Arc<Server>,
    pub http: HttpServer,
    stop: Option<mpsc::Sender<()>>,
    sweeper: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        self.http.url()
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop.take();
        if let Some(h) = self.sweeper.take() {
            let _ = h.join();
        }
    }
}

/// Open a user store under a server state directory.
pub fn user_store(state_dir: Option<&std::path::Path>) -> Result<Arc<dyn DocStore>, BootError> {
    Ok(match state_dir {
        Some(dir) => Arc::new(DirStore::open(dir).map_err(|e| BootError::State(format!("{}: {e}", dir.display())))?),
        None => Arc::new(MemStore::new()),
    })
}

/// Listen, poll the registry once and start the timeout sweeper. An
/// unreachable registry leaves the server degraded, not down.
pub fn run_server(boot: ServerBoot) -> Result<RunningServer, BootError> {
    if !crate::sil::is_valid_url(&format!("http://{}", boot.bind)) {
        return Err(BootError::Config(format!("`{}` is not a host:port", boot.bind)));
    }
    let driver: Arc<dyn QueryDriver> = match &boot.catalog_dir {
        Some(dir) if !dir.is_dir() => return Err(BootError::Config(format!("no catalog directory {}", dir.display()))),
        Some(dir) => Arc::new(DirectoryDriver::new(&boot.sid, dir)),
        None => Arc::new(MemoryDriver::new(&boot.sid)),
    };
    let store = user_store(boot.state_dir.as_deref())?;
    let mut cfg = ServerConfig::new(&boot.sid);
    cfg.txn_timeout = boot.txn_timeout;
    cfg.levels = boot.levels;
    cfg.nmu_url = boot.nmu_url;
    let server = Arc::new(Server::new(
        cfg,
        Arc::new(SystemClock),
        Arc::new(SecureRng::from_entropy()),
        Arc::new(HttpTransport::default()),
        driver,
        store,
    ));
    let http = serve(&boot.bind, Arc::new(ServerHandler::new(server.clone())), boot.threads)?;
    if !server.sync_from_nmu() {
        log::warn!("{}: starting degraded, local queries only", boot.sid);
    }
    let (stop, stopped) = mpsc::channel::<()>();
    let sweeping = server.clone();
    let every = boot.sweep_every;
    let sweeper = std::thread::Builder::new()
        .name("txn-sweeper".into())
        .spawn(move || {
            while let Err(mpsc::RecvTimeoutError::Timeout) = stopped.recv_timeout(every) {
                let closed = sweeping.sweep();
                if closed > 0 {
                    log::debug!("closed {closed} idle transactions");
                }
            }
        })
        .map_err(|e| BootError::State(e.to_string()))?;
    log::info!("{} listening on {}", boot.sid, http.url());
    Ok(RunningServer {
        server,
        http,
        stop: Some(stop),
        sweeper: Some(sweeper),
    })
}
