//! The network management unit: the registry of affiliated servers.
//!
//! Only admin-credentialed calls mutate it. After each mutation the full
//! registry is pushed to every online server; a server that keeps failing
//! is marked offline and the survivors get another push carrying that
//! change.

mod client;
mod handler;
mod store;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use crate::auth::SecretHash;
use crate::clock::Clock;
use crate::sil::{
    self, Delivery, DeliveryOutcome, ServerProfile, ServerRecord, ServerState, SilDocument,
};
use crate::wire::{ApiError, ErrorCode, Request, Transport, XML};
use crate::xml::is_ncname;

pub use client::NmuClient;
pub use handler::NmuHandler;
pub use store::{RegistryStore, StoreError};
pub(crate) use store::net_document;

/// Envelope `sid` and `uid` login used on registry documents.
pub const NMU_SID: &str = "nmu";
/// Server endpoint receiving full-state pushes.
pub const PUSH_PATH: &str = "/nmu/push";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub retries: u32,
    pub spacing: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            spacing: Duration::from_secs(2),
        }
    }
}

/// Fields of a record an admin may change. `name` is only there so that an
/// attempt to rename can be refused.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerChanges {
    pub name: Option<String>,
    pub url: Option<String>,
    pub status: Option<ServerState>,
    pub languages: Option<Vec<String>>,
    pub categories: Option<Vec<String>>,
    pub description: Option<String>,
}

impl ServerChanges {
    /// Changes that turn the current record into `target`.
    pub fn replace_with(target: &ServerRecord) -> Self {
        ServerChanges {
            name: Some(target.name.clone()),
            url: Some(target.url.clone()),
            status: Some(target.status),
            languages: Some(target.profile.languages.clone()),
            categories: Some(target.profile.categories.clone()),
            description: Some(target.profile.description.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Requester<'a> {
    Admin(&'a str),
    Server(&'a str),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeliveryReport {
    /// One entry per target, ordered by sid.
    pub deliveries: Vec<Delivery>,
}

impl DeliveryReport {
    pub fn is_all_ok(&self) -> bool {
        self.deliveries.iter().all(|d| d.outcome == DeliveryOutcome::Ok)
    }

    pub fn outcome(&self, sid: &str) -> Option<DeliveryOutcome> {
        self.deliveries.iter().find(|d| d.sid == sid).map(|d| d.outcome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushMode {
    /// The mutating call runs the push before returning.
    Inline,
    /// A worker thread runs pushes; mutations only signal it.
    Background,
}

pub struct Nmu {
    admin: SecretHash,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    registry: RwLock<BTreeMap<String, ServerRecord>>,
    /// Held for the whole of every mutation: single writer.
    writer: Mutex<Option<RegistryStore>>,
    pushing: Mutex<()>,
    last_report: Mutex<DeliveryReport>,
    signal: Mutex<Option<mpsc::Sender<()>>>,
}

impl std::fmt::Debug for Nmu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nmu").field("servers", &self.registry.read().unwrap().len()).finish()
    }
}

fn auth_failed() -> ApiError {
    ApiError::new(ErrorCode::AdminAuthFailed, "admin credential rejected")
}

fn unknown_server(name: &str) -> ApiError {
    ApiError::new(ErrorCode::UnknownServer, format!("no server named `{name}`"))
}

fn check_profile(p: &ServerProfile) -> Result<(), ApiError> {
    if let Some(bad) = p.languages.iter().find(|l| !sil::is_language_tag(l)) {
        return Err(ApiError::new(ErrorCode::InvalidChange, format!("`{bad}` is not a language tag")));
    }
    if p.categories.iter().any(|c| c.is_empty()) {
        return Err(ApiError::new(ErrorCode::InvalidChange, "empty category"));
    }
    Ok(())
}

impl Nmu {
    /// An unpersisted registry.
    pub fn new(admin: SecretHash, clock: Arc<dyn Clock>, transport: Arc<dyn Transport>) -> Self {
        Nmu {
            admin,
            clock,
            transport,
            retry: RetryPolicy::default(),
            registry: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(None),
            pushing: Mutex::new(()),
            last_report: Mutex::new(DeliveryReport::default()),
            signal: Mutex::new(None),
        }
    }

    /// A registry persisted in `dir`, replaying whatever state it holds.
    pub fn open(
        admin: SecretHash,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
        dir: &Path,
    ) -> Result<Self, StoreError> {
        let (store, records) = RegistryStore::open(dir)?;
        let nmu = Nmu::new(admin, clock, transport);
        *nmu.registry.write().unwrap() = records;
        *nmu.writer.lock().unwrap() = Some(store);
        Ok(nmu)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Switch to [`PushMode::Background`]. Bursts of mutations coalesce into
    /// one push.
    pub fn start_background_push(self: &Arc<Self>) {
        let (tx, rx) = mpsc::channel::<()>();
        let weak = Arc::downgrade(self);
        thread::Builder::new()
            .name("nmu-push".into())
            .spawn(move || {
                while rx.recv().is_ok() {
                    while rx.try_recv().is_ok() {}
                    let Some(nmu) = weak.upgrade() else { break };
                    let report = nmu.push_update();
                    log::info!("push: {} targets, all ok: {}", report.deliveries.len(), report.is_all_ok());
                }
            })
            .expect("spawn push worker");
        *self.signal.lock().unwrap() = Some(tx);
    }

    pub fn push_mode(&self) -> PushMode {
        if self.signal.lock().unwrap().is_some() {
            PushMode::Background
        } else {
            PushMode::Inline
        }
    }

    pub(crate) fn check_admin(&self, credential: &str) -> Result<(), ApiError> {
        if self.admin.verify(credential) {
            Ok(())
        } else {
            Err(auth_failed())
        }
    }

    /// Apply `f` to the registry under the writer lock, persisting the
    /// records it returns.
    fn mutate<T>(
        &self,
        f: impl FnOnce(&mut BTreeMap<String, ServerRecord>) -> Result<(Vec<ServerRecord>, T), ApiError>,
    ) -> Result<T, ApiError> {
        let mut store = self.writer.lock().unwrap();
        let mut next = self.registry.read().unwrap().clone();
        let (changed, out) = f(&mut next)?;
        if let Some(store) = store.as_mut().filter(|_| !changed.is_empty()) {
            store
                .append(&changed)
                .map_err(|e| ApiError::new(ErrorCode::Internal, format!("registry log: {e}")))?;
        }
        *self.registry.write().unwrap() = next;
        Ok(out)
    }

    fn schedule_push(&self) {
        let signal = self.signal.lock().unwrap().clone();
        match signal {
            Some(tx) => {
                let _ = tx.send(());
            }
            None => {
                self.push_update();
            }
        }
    }

    pub fn register_server(
        &self,
        credential: &str,
        name: &str,
        url: &str,
        profile: ServerProfile,
    ) -> Result<ServerRecord, ApiError> {
        self.check_admin(credential)?;
        if !is_ncname(name) {
            return Err(ApiError::new(ErrorCode::InvalidChange, format!("`{name}` is not a valid server name")));
        }
        if !sil::is_valid_url(url) {
            return Err(ApiError::new(ErrorCode::InvalidUrl, format!("`{url}` is not a valid URL")));
        }
        check_profile(&profile)?;
        let now = self.clock.now();
        let rec = self.mutate(|reg| {
            if reg.contains_key(name) {
                return Err(ApiError::new(ErrorCode::DuplicateName, format!("`{name}` is already registered")));
            }
            let rec = ServerRecord {
                name: name.to_owned(),
                url: url.to_owned(),
                status: ServerState::Online,
                profile,
                last_update: now,
            };
            reg.insert(name.to_owned(), rec.clone());
            Ok((vec![rec.clone()], rec))
        })?;
        self.schedule_push();
        Ok(rec)
    }

    pub fn update_server(&self, credential: &str, name: &str, changes: ServerChanges) -> Result<ServerRecord, ApiError> {
        self.check_admin(credential)?;
        if changes.name.as_deref().is_some_and(|n| n != name) {
            return Err(ApiError::new(ErrorCode::InvalidChange, "a server cannot be renamed"));
        }
        if let Some(url) = &changes.url {
            if !sil::is_valid_url(url) {
                return Err(ApiError::new(ErrorCode::InvalidUrl, format!("`{url}` is not a valid URL")));
            }
        }
        let now = self.clock.now();
        let rec = self.mutate(|reg| {
            let rec = reg.get_mut(name).ok_or_else(|| unknown_server(name))?;
            let mut next = rec.clone();
            if let Some(url) = changes.url {
                next.url = url;
            }
            if let Some(status) = changes.status {
                next.status = status;
            }
            if let Some(l) = changes.languages {
                next.profile.languages = l;
            }
            if let Some(c) = changes.categories {
                next.profile.categories = c;
            }
            if let Some(d) = changes.description {
                next.profile.description = d;
            }
            check_profile(&next.profile)?;
            next.last_update = now.max(rec.last_update);
            *rec = next.clone();
            Ok((vec![next.clone()], next))
        })?;
        self.schedule_push();
        Ok(rec)
    }

    /// Idempotent: a second call acknowledges without another push.
    pub fn disconnect_server(&self, credential: &str, name: &str) -> Result<ServerRecord, ApiError> {
        self.check_admin(credential)?;
        let now = self.clock.now();
        let (rec, changed) = self.mutate(|reg| {
            let rec = reg.get_mut(name).ok_or_else(|| unknown_server(name))?;
            if rec.status == ServerState::Disconnected {
                return Ok((Vec::new(), (rec.clone(), false)));
            }
            rec.status = ServerState::Disconnected;
            rec.last_update = now.max(rec.last_update);
            Ok((vec![rec.clone()], (rec.clone(), true)))
        })?;
        if changed {
            self.schedule_push();
        }
        Ok(rec)
    }

    pub fn list_servers(&self, requester: Requester<'_>, include_disconnected: bool) -> Result<Vec<ServerRecord>, ApiError> {
        let reg = self.registry.read().unwrap();
        match requester {
            Requester::Admin(secret) => self.check_admin(secret)?,
            Requester::Server(sid) => match reg.get(sid) {
                Some(r) if r.status != ServerState::Disconnected => {}
                _ => {
                    return Err(ApiError::new(
                        ErrorCode::UnknownRequester,
                        format!("`{sid}` is not an affiliated server"),
                    ))
                }
            },
        }
        Ok(reg
            .values()
            .filter(|r| include_disconnected || r.status != ServerState::Disconnected)
            .cloned()
            .collect())
    }

    /// Every record, disconnected ones included, in name order.
    pub fn records(&self) -> Vec<ServerRecord> {
        self.registry.read().unwrap().values().cloned().collect()
    }

    pub fn last_report(&self, credential: &str) -> Result<DeliveryReport, ApiError> {
        self.check_admin(credential)?;
        Ok(self.last_report.lock().unwrap().clone())
    }

    /// Send the full registry to every online server until a round
    /// produces no new failures.
    pub fn push_update(&self) -> DeliveryReport {
        let _one_at_a_time = self.pushing.lock().unwrap();
        let mut outcomes: BTreeMap<String, Delivery> = BTreeMap::new();
        loop {
            let (body, targets) = {
                let reg = self.registry.read().unwrap();
                let doc = net_document(reg.values().cloned());
                let targets: Vec<(String, String)> = reg
                    .values()
                    .filter(|r| r.status == ServerState::Online)
                    .map(|r| (r.name.clone(), r.url.clone()))
                    .collect();
                (sil::serialize_document(&doc).expect("registry state is valid"), targets)
            };
            let mut failed = Vec::new();
            for (sid, url) in targets {
                let d = self.deliver(&sid, &url, &body);
                if d.outcome == DeliveryOutcome::Failed {
                    failed.push(sid.clone());
                }
                outcomes.insert(sid, d);
            }
            if failed.is_empty() {
                break;
            }
            let now = self.clock.now();
            let marked = self.mutate(|reg| {
                let mut changed = Vec::new();
                for sid in &failed {
                    if let Some(r) = reg.get_mut(sid) {
                        if r.status == ServerState::Online {
                            r.status = ServerState::Offline;
                            r.last_update = now.max(r.last_update);
                            changed.push(r.clone());
                        }
                    }
                }
                let n = changed.len();
                Ok((changed, n))
            });
            match marked {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
        }
        let report = DeliveryReport {
            deliveries: outcomes.into_values().collect(),
        };
        *self.last_report.lock().unwrap() = report.clone();
        report
    }

    fn deliver(&self, sid: &str, url: &str, body: &[u8]) -> Delivery {
        let mut attempts = 0;
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                self.clock.sleep(self.retry.spacing);
            }
            attempts += 1;
            let req = Request::post(PUSH_PATH).body(XML, body.to_vec());
            match self.transport.send(url, req) {
                Ok(resp) if resp.is_success() => {
                    return Delivery {
                        sid: sid.to_owned(),
                        outcome: DeliveryOutcome::Ok,
                        attempts,
                    }
                }
                Ok(resp) => log::warn!("push to {sid}: status {}", resp.status),
                Err(e) => log::warn!("push to {sid}: {e}"),
            }
        }
        Delivery {
            sid: sid.to_owned(),
            outcome: DeliveryOutcome::Failed,
            attempts,
        }
    }

    pub fn registry_document(&self) -> SilDocument {
        net_document(self.records())
    }
}
