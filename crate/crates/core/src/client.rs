//! Client SDK: connect to one local server, pick working servers, query,
//! keep baskets, save the workspace.
//!
//! Speaks only the public HTTP endpoints. The SDK holds at most one result
//! page at a time; [`Client::peak_held`] reports the largest page seen.

use std::cell::Cell;
use std::sync::Arc;

use crate::auth::Token;
use crate::clock::Timestamp;
use crate::server::broker::{parse_resource, result_set_of};
use crate::sil::{Basket, Payload, Query, ResultEntry, ResultSet, ServerRecord, ServerState, SilDocument, Uid, Workspace};
use crate::wire::{self, ApiError, ErrorCode, Request, Response, Transport, H_SESSION, H_TRANSACTION, H_TXN_STATE};

pub const DEFAULT_WORKSPACE: &str = "default";

pub struct Client {
    transport: Arc<dyn Transport>,
    url: String,
    sid: String,
    token: Token,
    login: String,
    level: u32,
    mirror: Vec<ServerRecord>,
    workspace: Workspace,
    txn: Option<String>,
    peak_held: Cell<usize>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("url", &self.url).field("login", &self.login).finish()
    }
}

impl Client {
    /// Log in at the local server and fetch its view of the network.
    pub fn connect(transport: Arc<dyn Transport>, url: &str, login: &str, passwd: &str) -> Result<Client, ApiError> {
        let doc = SilDocument::new("client", Uid::user(login).with_passwd(passwd), Payload::Ui(Default::default()));
        let resp = transport.send(url, Request::post("/session").document(&doc)?)?.into_result()?;
        let token = resp
            .header_value(H_SESSION)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ApiError::new(ErrorCode::Internal, "login answered without a session token"))?;
        let me = resp.into_document()?;
        let mut client = Client {
            transport,
            url: url.to_owned(),
            sid: me.sid,
            token,
            login: me.uid.login,
            level: me.uid.level.unwrap_or(0),
            mirror: Vec::new(),
            workspace: Workspace::new(DEFAULT_WORKSPACE),
            txn: None,
            peak_held: Cell::new(0),
        };
        client.refresh_servers()?;
        Ok(client)
    }

    fn send(&self, req: Request) -> Result<Response, ApiError> {
        self.transport.send(&self.url, req.header(H_SESSION, self.token.to_string()))?.into_result()
    }

    pub fn login(&self) -> &str {
        &self.login
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Id of the local server.
    pub fn local_sid(&self) -> &str {
        &self.sid
    }

    pub fn token(&self) -> Token {
        self.token
    }

    pub fn refresh_servers(&mut self) -> Result<(), ApiError> {
        let doc = self.send(Request::get("/servers"))?.into_document()?;
        self.mirror = doc
            .payloads
            .into_iter()
            .flat_map(|p| match p {
                Payload::Net(n) => n.servers,
                _ => Vec::new(),
            })
            .collect();
        Ok(())
    }

    /// Servers a query may target: the local one and every online server
    /// in its registry mirror.
    pub fn choosable_servers(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .mirror
            .iter()
            .filter(|r| r.status == ServerState::Online)
            .map(|r| r.name.clone())
            .collect();
        if !v.contains(&self.sid) {
            v.push(self.sid.clone());
        }
        v.sort();
        v
    }

    pub fn choose_servers<S: AsRef<str>>(&mut self, ids: &[S]) -> Result<(), ApiError> {
        let choosable = self.choosable_servers();
        let mut chosen = Vec::new();
        for id in ids {
            let id = id.as_ref();
            if !choosable.iter().any(|c| c == id) {
                return Err(ApiError::new(ErrorCode::UnknownTarget, format!("`{id}` is not choosable")));
            }
            if !chosen.iter().any(|c| c == id) {
                chosen.push(id.to_owned());
            }
        }
        self.workspace.servers = chosen;
        Ok(())
    }

    pub fn working_servers(&self) -> &[String] {
        &self.workspace.servers
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn workspace_mut(&mut self) -> &mut Workspace {
        &mut self.workspace
    }

    pub fn page_size(&self) -> Option<usize> {
        self.workspace.prefs.page_size.map(|p| p as usize)
    }

    pub fn set_page_size(&mut self, n: u32) {
        self.workspace.prefs.page_size = Some(n.max(1));
    }

    // ---- transactions ----

    pub fn transaction(&self) -> Option<&str> {
        self.txn.as_deref()
    }

    fn txn_call(&self, path: &str, id: &str) -> Result<bool, ApiError> {
        let req = if path == "/txn/status" { Request::get(path) } else { Request::post(path) };
        let resp = self.send(req.header(H_TRANSACTION, id))?;
        Ok(resp.header_value(H_TXN_STATE) == Some("open"))
    }

    pub fn open(&mut self) -> Result<String, ApiError> {
        let resp = self.send(Request::post("/txn/open"))?;
        let id = resp
            .header_value(H_TRANSACTION)
            .ok_or_else(|| ApiError::new(ErrorCode::Internal, "open answered without a transaction id"))?
            .to_owned();
        self.txn = Some(id.clone());
        Ok(id)
    }

    fn ensure_txn(&mut self) -> Result<String, ApiError> {
        match &self.txn {
            Some(id) => Ok(id.clone()),
            None => self.open(),
        }
    }

    /// Run `f` inside a transaction, reopening once if the server closed
    /// ours in the meantime.
    fn in_txn<T>(&mut self, f: impl Fn(&mut Self) -> Result<T, ApiError>) -> Result<T, ApiError> {
        self.ensure_txn()?;
        match f(self) {
            Err(e) if matches!(e.code, ErrorCode::NoOpenTransaction | ErrorCode::TransactionClosed) => {
                self.open()?;
                f(self)
            }
            r => r,
        }
    }

    pub fn is_open(&self) -> Result<bool, ApiError> {
        match &self.txn {
            Some(id) => self.txn_call("/txn/status", id),
            None => Ok(false),
        }
    }

    pub fn close(&mut self) -> Result<(), ApiError> {
        if let Some(id) = self.txn.take() {
            self.txn_call("/txn/close", &id)?;
        }
        Ok(())
    }

    pub fn commit(&mut self) -> Result<(), ApiError> {
        let id = self.ensure_txn()?;
        self.txn_call("/txn/commit", &id).map(drop)
    }

    pub fn abort(&mut self) -> Result<(), ApiError> {
        let id = self.ensure_txn()?;
        self.txn_call("/txn/abort", &id).map(drop)
    }

    // ---- queries ----

    /// `q` scoped to the working servers unless it names its own targets.
    fn scoped(&self, q: &Query) -> Query {
        let mut q = q.clone();
        if q.targets.is_empty() {
            q.targets = self.workspace.servers.clone();
        }
        if q.max_results.is_none() {
            q.max_results = self.workspace.prefs.page_size;
        }
        q
    }

    fn query_doc(&self, q: &Query) -> SilDocument {
        SilDocument::new(&self.sid, Uid::user(&self.login), Payload::Ql(q.clone()))
    }

    /// Start `q` and iterate its pages. The query is remembered in the
    /// workspace.
    pub fn query(&mut self, q: &Query) -> Result<Pages<'_>, ApiError> {
        let q = self.scoped(q);
        let rs = self.in_txn(|c| {
            let req = Request::post("/query").document(&c.query_doc(&q))?;
            result_set_of(c.send(req)?.into_document()?)
        })?;
        let handle = rs.handle.ok_or_else(|| ApiError::new(ErrorCode::Internal, "query answered without a handle"))?;
        match self.workspace.queries.iter_mut().find(|old| old.id == q.id) {
            Some(old) => *old = q.clone(),
            None => self.workspace.queries.push(q.clone()),
        }
        Ok(Pages {
            client: self,
            handle,
            max: q.max_results.map(|m| m as usize),
            finished: false,
        })
    }

    /// Drain `q` into one list. Convenient for tests; a thin client would
    /// walk [`Client::query`] instead.
    pub fn query_all(&mut self, q: &Query) -> Result<Vec<ResultEntry>, ApiError> {
        let mut out = Vec::new();
        for page in self.query(q)? {
            out.extend(page?.entries);
        }
        Ok(out)
    }

    fn fetch_page(&self, handle: &str, max: Option<usize>) -> Result<ResultSet, ApiError> {
        let max = max.map(|m| m.to_string());
        let mut params = vec![("handle", handle)];
        if let Some(m) = &max {
            params.push(("max", m));
        }
        let rs = result_set_of(self.send(Request::get(wire::target("/results", &params)))?.into_document()?)?;
        self.peak_held.set(self.peak_held.get().max(rs.entries.len()));
        Ok(rs)
    }

    /// Per-server counts and their total.
    pub fn count(&mut self, q: &Query) -> Result<ResultSet, ApiError> {
        let q = self.scoped(q);
        self.in_txn(|c| {
            let req = Request::post("/count").document(&c.query_doc(&q))?;
            result_set_of(c.send(req)?.into_document()?)
        })
    }

    /// Largest page the SDK has held.
    pub fn peak_held(&self) -> usize {
        self.peak_held.get()
    }

    // ---- baskets and workspaces ----

    /// Returns false if the basket already exists.
    pub fn create_basket(&mut self, name: &str, now: Timestamp) -> bool {
        if self.workspace.basket(name).is_some() {
            return false;
        }
        self.workspace.baskets.push(Basket::new(name, now));
        true
    }

    /// Add pointers; returns how many were new.
    pub fn add_to_basket<S: AsRef<str>>(&mut self, basket: &str, uris: &[S]) -> Result<usize, ApiError> {
        let b = self
            .workspace
            .basket_mut(basket)
            .ok_or_else(|| ApiError::new(ErrorCode::BasketUnknown, format!("no basket `{basket}`")))?;
        Ok(uris.iter().filter(|u| b.add(u.as_ref())).count())
    }

    pub fn remove_from_basket(&mut self, basket: &str, uri: &str) -> Result<bool, ApiError> {
        let b = self
            .workspace
            .basket_mut(basket)
            .ok_or_else(|| ApiError::new(ErrorCode::BasketUnknown, format!("no basket `{basket}`")))?;
        let before = b.items.len();
        b.items.retain(|i| i != uri);
        Ok(b.items.len() != before)
    }

    pub fn basket(&self, name: &str) -> Result<&Basket, ApiError> {
        self.workspace
            .basket(name)
            .ok_or_else(|| ApiError::new(ErrorCode::BasketUnknown, format!("no basket `{name}`")))
    }

    /// Store the active workspace and commit.
    pub fn save(&mut self) -> Result<(), ApiError> {
        let ws = self.workspace.clone();
        let path = format!("/workspace/{}", wire::encode_segment(&ws.name));
        let doc = SilDocument::new(&self.sid, Uid::user(&self.login), Payload::Ws(ws));
        self.in_txn(|c| {
            c.send(Request::put(path.clone()).document(&doc)?)?;
            let id = c.txn.clone().unwrap_or_default();
            c.txn_call("/txn/commit", &id).map(drop)
        })
    }

    /// Load a saved workspace and make it active.
    pub fn load(&mut self, name: &str) -> Result<&Workspace, ApiError> {
        let path = format!("/workspace/{}", wire::encode_segment(name));
        let doc = self.send(Request::get(path))?.into_document()?;
        self.workspace = doc
            .payloads
            .into_iter()
            .find_map(|p| match p {
                Payload::Ws(ws) => Some(ws),
                _ => None,
            })
            .ok_or_else(|| ApiError::new(ErrorCode::Internal, "expected a workspace document"))?;
        Ok(&self.workspace)
    }

    /// Metadata and content of one resource, level-checked by the server.
    pub fn fetch_resource(&self, uri: &str) -> Result<(ResultEntry, Vec<u8>), ApiError> {
        let resp = self.send(Request::get(format!("/resource/{}", wire::encode_segment(uri))))?;
        parse_resource(resp.header_value(wire::H_CONTENT_TYPE).unwrap_or_default(), &resp.body)
    }
}

/// Pages of one query, fetched lazily.
pub struct Pages<'a> {
    client: &'a Client,
    handle: String,
    max: Option<usize>,
    finished: bool,
}

impl Pages<'_> {
    pub fn handle(&self) -> &str {
        &self.handle
    }
}

impl Iterator for Pages<'_> {
    type Item = Result<ResultSet, ApiError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let page = self.client.fetch_page(&self.handle, self.max);
        self.finished = page.as_ref().map_or(true, |p| p.done);
        Some(page)
    }
}
