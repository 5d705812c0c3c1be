//! A specialized server: users, catalog, sessions and transactions.
//!
//! HTTP is stateless, so a session token (header `X-Session`) stands in
//! for the connection and a transaction keeps result snapshots alive
//! between requests. Each session has at most one open transaction; it
//! closes on request or after `txn_timeout` without use.
//!
//! The broker half (broadcast, double cache, server-to-server calls) lives
//! in [`broker`].

pub mod broker;
pub mod catalog;
mod handler;
pub mod users;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use crate::auth::{SecretHash, SecureRng, Token};
use crate::clock::{Clock, Timestamp};
use crate::nmu::{NmuClient, NMU_SID};
use crate::sil::{self, Payload, Query, ResultEntry, ResultSet, ServerRecord, ServerState, SilDocument, Workspace};
use crate::store::DocStore;
use crate::wire::{ApiError, ErrorCode, Transport};

pub use broker::{BroadcastStats, IdentTag};
pub use catalog::{CatalogEntry, Connection, DirectoryDriver, DriverError, DriverHandle, MemoryDriver, QueryDriver};
pub use handler::ServerHandler;
pub use users::{LevelMap, UserDb, UserRecord};

use broker::Broadcast;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub sid: String,
    pub txn_timeout: Duration,
    pub session_ttl: Duration,
    /// Default page size when a query names none.
    pub page_size: usize,
    /// Bound on the broker's local cache, per broadcast.
    pub cache_capacity: usize,
    pub levels: LevelMap,
    pub nmu_url: Option<String>,
}

impl ServerConfig {
    pub fn new(sid: &str) -> Self {
        ServerConfig {
            sid: sid.to_owned(),
            txn_timeout: Duration::from_secs(300),
            session_ttl: Duration::from_secs(8 * 3600),
            page_size: 50,
            cache_capacity: 1000,
            levels: LevelMap::default(),
            nmu_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub token: Token,
    pub login: String,
    pub level: u32,
    pub expiry: Timestamp,
}

#[derive(Debug, Clone)]
struct Session {
    login: String,
    level: u32,
    expiry: Timestamp,
    txn: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Open,
    Closed,
}

/// A level-filtered result list fixed at query time.
#[derive(Debug, Clone)]
pub(crate) struct Snapshot {
    query_id: String,
    entries: Vec<ResultEntry>,
    cursor: usize,
    cancelled: bool,
}

impl Snapshot {
    fn page(&mut self, handle: &str, max: usize) -> Result<ResultSet, ApiError> {
        if self.cancelled {
            return Err(ApiError::new(ErrorCode::EnumerationCancelled, "transaction aborted"));
        }
        let start = self.cursor;
        let end = (start + max).min(self.entries.len());
        self.cursor = end;
        Ok(ResultSet {
            query_id: self.query_id.clone(),
            handle: Some(handle.to_owned()),
            cursor: start as u64,
            done: end == self.entries.len(),
            count: Some(self.entries.len() as u64),
            statuses: Vec::new(),
            entries: self.entries[start..end].to_vec(),
        })
    }
}

pub(crate) enum Held {
    Snapshot(Snapshot),
    Broadcast(Box<Broadcast>),
}

pub(crate) struct Transaction {
    id: String,
    owner: Token,
    state: TxnState,
    opened_at: Timestamp,
    last_touch: Timestamp,
    conn: Option<Box<dyn Connection>>,
    held: BTreeMap<String, Held>,
    next_handle: u64,
    pending: BTreeMap<String, Workspace>,
}

impl Transaction {
    fn release(&mut self) {
        self.state = TxnState::Closed;
        self.held.clear();
        self.pending.clear();
        if let Some(mut c) = self.conn.take() {
            if let Err(e) = c.end() {
                log::warn!("txn {}: driver end: {e}", self.id);
            }
        }
    }

    fn touch(&mut self, now: Timestamp) {
        self.last_touch = self.last_touch.max(now);
    }

    fn new_handle(&mut self) -> String {
        self.next_handle += 1;
        format!("{}:{}", self.id, self.next_handle)
    }

    fn conn(&mut self) -> Result<&mut Box<dyn Connection>, ApiError> {
        self.conn
            .as_mut()
            .ok_or_else(|| ApiError::new(ErrorCode::NoOpenTransaction, "transaction has no driver connection"))
    }
}

type TxnRef = Arc<Mutex<Transaction>>;

pub struct Server {
    cfg: ServerConfig,
    clock: Arc<dyn Clock>,
    rng: Arc<SecureRng>,
    transport: Arc<dyn Transport>,
    driver: Arc<dyn QueryDriver>,
    users: UserDb,
    sessions: Mutex<HashMap<Token, Session>>,
    remote_sessions: Mutex<HashMap<(String, String, u32), Token>>,
    txns: Mutex<HashMap<String, TxnRef>>,
    mirror: RwLock<Vec<ServerRecord>>,
    degraded: AtomicBool,
    /// Checked against when the login is unknown so both failures cost the same.
    decoy: SecretHash,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server").field("sid", &self.cfg.sid).finish()
    }
}

fn session_expired() -> ApiError {
    ApiError::new(ErrorCode::SessionExpired, "session is unknown or has expired")
}

fn unknown_txn(id: &str) -> ApiError {
    ApiError::new(ErrorCode::UnknownTransaction, format!("no transaction `{id}`"))
}

fn driver_err(e: DriverError) -> ApiError {
    ApiError::new(ErrorCode::DriverError, e.0)
}

impl Server {
    pub fn new(
        cfg: ServerConfig,
        clock: Arc<dyn Clock>,
        rng: Arc<SecureRng>,
        transport: Arc<dyn Transport>,
        driver: Arc<dyn QueryDriver>,
        store: Arc<dyn DocStore>,
    ) -> Self {
        let decoy = SecretHash::new(&rng, "");
        Server {
            users: UserDb::new(&cfg.sid, store),
            cfg,
            clock,
            rng,
            transport,
            driver,
            sessions: Mutex::default(),
            remote_sessions: Mutex::default(),
            txns: Mutex::default(),
            mirror: RwLock::default(),
            degraded: AtomicBool::new(false),
            decoy,
        }
    }

    pub fn sid(&self) -> &str {
        &self.cfg.sid
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn users(&self) -> &UserDb {
        &self.users
    }

    pub fn rng(&self) -> &SecureRng {
        &self.rng
    }

    // ---- registry mirror ----

    /// Fetch the registry from the NMU. On failure the server runs
    /// degraded: local queries only until a push arrives.
    pub fn sync_from_nmu(&self) -> bool {
        let Some(url) = &self.cfg.nmu_url else {
            self.degraded.store(true, Ordering::SeqCst);
            return false;
        };
        match NmuClient::new(self.transport.clone(), url.clone()).list_as_server(&self.cfg.sid, true) {
            Ok(list) => {
                *self.mirror.write().unwrap() = list;
                self.degraded.store(false, Ordering::SeqCst);
                true
            }
            Err(e) => {
                log::warn!("{}: registry unavailable, running degraded: {e}", self.cfg.sid);
                self.degraded.store(true, Ordering::SeqCst);
                false
            }
        }
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::SeqCst)
    }

    /// Replace the mirror with a full-state push from the NMU.
    pub fn apply_push(&self, doc: &SilDocument) -> Result<(), ApiError> {
        if doc.sid != NMU_SID {
            return Err(ApiError::new(ErrorCode::BadRequest, "registry pushes come from the NMU"));
        }
        let servers = doc
            .payloads
            .iter()
            .find_map(|p| match p {
                Payload::Net(n) => Some(n.servers.clone()),
                _ => None,
            })
            .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "push without a net payload"))?;
        *self.mirror.write().unwrap() = servers;
        self.degraded.store(false, Ordering::SeqCst);
        Ok(())
    }

    pub fn mirror(&self) -> Vec<ServerRecord> {
        self.mirror.read().unwrap().clone()
    }

    fn mirror_record(&self, sid: &str) -> Option<ServerRecord> {
        self.mirror.read().unwrap().iter().find(|r| r.name == sid).cloned()
    }

    fn is_affiliated(&self, sid: &str) -> bool {
        self.mirror_record(sid).is_some_and(|r| r.status != ServerState::Disconnected)
    }

    // ---- sessions ----

    pub fn authenticate(&self, login: &str, password: &str) -> Result<SessionInfo, ApiError> {
        let user = self.users.user(login)?;
        let hash = user.as_ref().and_then(UserRecord::password_hash);
        let matched = hash.as_ref().unwrap_or(&self.decoy).verify(password);
        let user = match user {
            Some(u) if matched && hash.is_some() => u,
            _ => return Err(ApiError::new(ErrorCode::AuthFailed, "login or password incorrect")),
        };
        if user.is_disabled() {
            return Err(ApiError::new(ErrorCode::AccountDisabled, "account is disabled"));
        }
        let level = self.cfg.levels.level_of(&user.uid.access.groups);
        let info = SessionInfo {
            token: Token::generate(&self.rng),
            login: user.uid.login.clone(),
            level,
            expiry: self.clock.now().saturating_add(self.cfg.session_ttl),
        };
        self.sessions.lock().unwrap().insert(
            info.token,
            Session {
                login: info.login.clone(),
                level,
                expiry: info.expiry,
                txn: None,
            },
        );
        Ok(info)
    }

    fn session(&self, token: &Token) -> Result<Session, ApiError> {
        let now = self.clock.now();
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions.get(token).ok_or_else(session_expired)?;
        if now < s.expiry {
            return Ok(s.clone());
        }
        let dead = sessions.remove(token);
        drop(sessions);
        if let Some(id) = dead.and_then(|s| s.txn) {
            self.discard_txn(&id);
        }
        Err(session_expired())
    }

    pub fn session_info(&self, token: &Token) -> Result<SessionInfo, ApiError> {
        let s = self.session(token)?;
        Ok(SessionInfo {
            token: *token,
            login: s.login,
            level: s.level,
            expiry: s.expiry,
        })
    }

    /// The hidden session that carries requests made on behalf of a user of
    /// another server.
    fn remote_session(&self, tag: &IdentTag) -> Token {
        let key = (tag.origin.clone(), tag.user.clone(), tag.level);
        let mut remote = self.remote_sessions.lock().unwrap();
        if let Some(t) = remote.get(&key) {
            if self.session(t).is_ok() {
                return *t;
            }
        }
        let token = Token::generate(&self.rng);
        self.sessions.lock().unwrap().insert(
            token,
            Session {
                login: tag.user.clone(),
                level: tag.level,
                expiry: self.clock.now().saturating_add(self.cfg.session_ttl),
                txn: None,
            },
        );
        remote.insert(key, token);
        token
    }

    // ---- transactions ----

    fn txn_ref(&self, id: &str) -> Option<TxnRef> {
        self.txns.lock().unwrap().get(id).cloned()
    }

    fn discard_txn(&self, id: &str) {
        if let Some(t) = self.txns.lock().unwrap().remove(id) {
            t.lock().unwrap().release();
        }
    }

    /// Close `t` if it has sat idle for the timeout. Returns whether it is open.
    fn refresh(&self, t: &mut Transaction) -> bool {
        if t.state == TxnState::Open && self.clock.now().since(t.last_touch) >= self.cfg.txn_timeout {
            log::debug!("txn {} (opened {}) timed out", t.id, t.opened_at);
            t.release();
        }
        t.state == TxnState::Open
    }

    /// The transaction `id`, provided `token` owns it.
    fn owned_txn(&self, token: &Token, id: &str) -> Result<TxnRef, ApiError> {
        self.session(token)?;
        let t = self.txn_ref(id).ok_or_else(|| unknown_txn(id))?;
        if t.lock().unwrap().owner != *token {
            return Err(unknown_txn(id));
        }
        Ok(t)
    }

    /// The session's open transaction, touched.
    fn current_txn(&self, token: &Token) -> Result<(Session, TxnRef), ApiError> {
        let s = self.session(token)?;
        let no_txn = || ApiError::new(ErrorCode::NoOpenTransaction, "open a transaction first");
        let t = s.txn.as_deref().and_then(|id| self.txn_ref(id)).ok_or_else(no_txn)?;
        {
            let mut g = t.lock().unwrap();
            if !self.refresh(&mut g) {
                return Err(no_txn());
            }
            g.touch(self.clock.now());
        }
        Ok((s, t))
    }

    /// Open a transaction, or return the one already open.
    pub fn open_transaction(&self, token: &Token) -> Result<String, ApiError> {
        if let Ok((_, t)) = self.current_txn(token) {
            return Ok(t.lock().unwrap().id.clone());
        }
        self.session(token)?;
        let mut conn = self.driver.open_connection().map_err(driver_err)?;
        conn.begin().map_err(driver_err)?;
        let now = self.clock.now();
        let id = format!("t{}", hex::encode(self.rng.bytes::<8>()));
        let txn = Transaction {
            id: id.clone(),
            owner: *token,
            state: TxnState::Open,
            opened_at: now,
            last_touch: now,
            conn: Some(conn),
            held: BTreeMap::new(),
            next_handle: 0,
            pending: BTreeMap::new(),
        };
        let previous = {
            let mut sessions = self.sessions.lock().unwrap();
            let s = sessions.get_mut(token).ok_or_else(session_expired)?;
            s.txn.replace(id.clone())
        };
        // the previous transaction is closed; drop its tombstone
        if let Some(old) = previous {
            self.discard_txn(&old);
        }
        self.txns.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(txn)));
        Ok(id)
    }

    /// Idempotent on a closed transaction.
    pub fn close_transaction(&self, token: &Token, id: &str) -> Result<(), ApiError> {
        let t = self.owned_txn(token, id)?;
        let mut g = t.lock().unwrap();
        if g.state == TxnState::Open {
            g.release();
        }
        Ok(())
    }

    pub fn is_open(&self, token: &Token, id: &str) -> Result<bool, ApiError> {
        let t = self.owned_txn(token, id)?;
        let mut g = t.lock().unwrap();
        Ok(self.refresh(&mut g))
    }

    fn open_owned(&self, token: &Token, id: &str) -> Result<(Session, TxnRef), ApiError> {
        let s = self.session(token)?;
        let t = self.owned_txn(token, id)?;
        {
            let mut g = t.lock().unwrap();
            if !self.refresh(&mut g) {
                return Err(ApiError::new(ErrorCode::TransactionClosed, format!("`{id}` is closed")));
            }
            g.touch(self.clock.now());
        }
        Ok((s, t))
    }

    /// Apply pending workspace saves. The transaction stays open.
    pub fn commit(&self, token: &Token, id: &str) -> Result<(), ApiError> {
        let (s, t) = self.open_owned(token, id)?;
        let mut g = t.lock().unwrap();
        let pending: Vec<Workspace> = g.pending.values().cloned().collect();
        self.users.put_workspaces(&s.login, &pending)?;
        g.pending.clear();
        Ok(())
    }

    /// Discard pending saves and cancel every held enumeration. The
    /// transaction stays open.
    pub fn abort(&self, token: &Token, id: &str) -> Result<(), ApiError> {
        let (_, t) = self.open_owned(token, id)?;
        let mut g = t.lock().unwrap();
        g.pending.clear();
        for h in g.held.values_mut() {
            match h {
                Held::Snapshot(s) => s.cancelled = true,
                Held::Broadcast(b) => b.cancel(),
            }
        }
        Ok(())
    }

    /// Close idle transactions and drop expired sessions.
    pub fn sweep(&self) -> usize {
        let now = self.clock.now();
        let expired: Vec<(Token, Option<String>)> = {
            let mut sessions = self.sessions.lock().unwrap();
            let dead: Vec<Token> = sessions.iter().filter(|(_, s)| now >= s.expiry).map(|(t, _)| *t).collect();
            dead.into_iter().map(|t| (t, sessions.remove(&t).and_then(|s| s.txn))).collect()
        };
        for (_, txn) in &expired {
            if let Some(id) = txn {
                self.discard_txn(id);
            }
        }
        let all: Vec<TxnRef> = self.txns.lock().unwrap().values().cloned().collect();
        let mut closed = 0;
        for t in all {
            let mut g = t.lock().unwrap();
            if g.state == TxnState::Open && !self.refresh(&mut g) {
                closed += 1;
            }
        }
        closed
    }

    pub fn open_transactions(&self) -> usize {
        let all: Vec<TxnRef> = self.txns.lock().unwrap().values().cloned().collect();
        all.iter().filter(|t| t.lock().unwrap().state == TxnState::Open).count()
    }

    // ---- local queries ----

    fn check_query(q: &Query) -> Result<(), ApiError> {
        let report = sil::check_query(q);
        if report.is_empty() {
            Ok(())
        } else {
            Err(ApiError::new(ErrorCode::BadRequest, report.to_string()))
        }
    }

    /// Evaluate `q` through the driver and keep what `level` may see.
    fn snapshot(&self, t: &mut Transaction, q: &Query, level: u32) -> Result<Snapshot, ApiError> {
        let conn = t.conn()?;
        let h = conn.run(q).map_err(driver_err)?;
        let mut entries = Vec::new();
        loop {
            let batch = conn.next(h, 256).map_err(driver_err)?;
            if batch.is_empty() {
                break;
            }
            entries.extend(batch.iter().filter(|e| e.required_level <= level).map(CatalogEntry::to_result));
        }
        Ok(Snapshot {
            query_id: q.id.clone(),
            entries,
            cursor: 0,
            cancelled: false,
        })
    }

    /// Run `q` against this server's catalog only; returns a result handle.
    pub fn local_query(&self, token: &Token, q: &Query) -> Result<String, ApiError> {
        Self::check_query(q)?;
        let (s, t) = self.current_txn(token)?;
        let mut g = t.lock().unwrap();
        let snap = self.snapshot(&mut g, q, s.level)?;
        let handle = g.new_handle();
        g.held.insert(handle.clone(), Held::Snapshot(snap));
        Ok(handle)
    }

    /// Size of the level-filtered snapshot of `q`.
    pub fn count_query(&self, token: &Token, q: &Query) -> Result<u64, ApiError> {
        Self::check_query(q)?;
        let (s, t) = self.current_txn(token)?;
        let mut g = t.lock().unwrap();
        Ok(self.snapshot(&mut g, q, s.level)?.entries.len() as u64)
    }

    /// Next page of at most `max` entries from any handle: a local snapshot
    /// or a broadcast.
    pub fn fetch_results(&self, token: &Token, handle: &str, max: usize) -> Result<ResultSet, ApiError> {
        if max == 0 {
            return Err(ApiError::new(ErrorCode::BadRequest, "max must be positive"));
        }
        self.session(token)?;
        let unknown = || ApiError::new(ErrorCode::UnknownHandle, format!("no result handle `{handle}`"));
        let txn_id = handle.split_once(':').map(|(t, _)| t).ok_or_else(unknown)?;
        let t = self.txn_ref(txn_id).ok_or_else(unknown)?;
        let mut g = t.lock().unwrap();
        if g.owner != *token {
            return Err(unknown());
        }
        if !self.refresh(&mut g) {
            return Err(unknown_txn(txn_id));
        }
        g.touch(self.clock.now());
        match g.held.get_mut(handle).ok_or_else(unknown)? {
            Held::Snapshot(s) => s.page(handle, max),
            // pulls from remote targets happen under the transaction lock;
            // the session contract already serializes its requests
            Held::Broadcast(b) => b.next_page(handle, max),
        }
    }

    // ---- workspaces ----

    /// Stage `ws` for the next commit of the open transaction.
    pub fn save_workspace(&self, token: &Token, ws: Workspace) -> Result<(), ApiError> {
        users::check_name("workspace", &ws.name)?;
        let doc = SilDocument::new(&self.cfg.sid, sil::Uid::user("check"), Payload::Ws(ws.clone()));
        let report = sil::validate(&doc);
        if !report.is_empty() {
            return Err(ApiError::new(ErrorCode::BadRequest, report.to_string()));
        }
        let (_, t) = self.current_txn(token)?;
        t.lock().unwrap().pending.insert(ws.name.clone(), ws);
        Ok(())
    }

    /// The committed workspace, or the version staged in the open
    /// transaction.
    pub fn load_workspace(&self, token: &Token, name: &str) -> Result<Workspace, ApiError> {
        users::check_name("workspace", name)?;
        let s = self.session(token)?;
        if let Some(t) = s.txn.as_deref().and_then(|id| self.txn_ref(id)) {
            let mut g = t.lock().unwrap();
            if self.refresh(&mut g) {
                if let Some(ws) = g.pending.get(name) {
                    return Ok(ws.clone());
                }
            }
        }
        self.users
            .workspace(&s.login, name)?
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownWorkspace, format!("no workspace `{name}`")))
    }

    pub fn workspace_names(&self, token: &Token) -> Result<Vec<String>, ApiError> {
        let s = self.session(token)?;
        self.users.workspace_names(&s.login)
    }
}

#[cfg(test)]
mod tests;
