//! Broadcast of one query to several servers and the merge of their
//! answers.
//!
//! Every target keeps its full snapshot (the remote cache); the access
//! server pulls pages from each in ascending sid order into a bounded local
//! cache and hands the client at most `page_size` entries per call.
//! Duplicates are dropped on entry to the cache, first occurrence wins.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::auth::Token;
use crate::mime::{self, Part};
use crate::sil::{self, Payload, Query, ResultEntry, ResultSet, ServerState, ServerStatus, SilDocument, SubState, Uid};
use crate::wire::{self, ApiError, ErrorCode, Request, Response, Transport, H_IDENT_TAG, XML};

use super::{Held, Server, Snapshot};

pub const CONTENT_TYPE_BINARY: &str = "application/octet-stream";

/// Who a forwarded request acts for: `user;level;origin` on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdentTag {
    pub user: String,
    pub level: u32,
    pub origin: String,
}

impl fmt::Display for IdentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};{};{}", self.user, self.level, self.origin)
    }
}

impl FromStr for IdentTag {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, ApiError> {
        let bad = || ApiError::new(ErrorCode::BadRequest, format!("malformed identification tag `{s}`"));
        let mut it = s.split(';');
        let (Some(user), Some(level), Some(origin), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        if user.is_empty() || origin.is_empty() {
            return Err(bad());
        }
        Ok(IdentTag {
            user: user.to_owned(),
            level: level.parse().map_err(|_| bad())?,
            origin: origin.to_owned(),
        })
    }
}

impl IdentTag {
    /// The uid element carried in forwarded documents.
    pub fn uid(&self) -> Uid {
        let mut uid = Uid::user(&self.user);
        uid.level = Some(self.level);
        uid
    }

    /// Reject a document whose envelope disagrees with the tag.
    pub fn check_document(&self, doc: &SilDocument) -> Result<(), ApiError> {
        if doc.sid != self.origin || doc.uid.login != self.user || doc.uid.level != Some(self.level) {
            return Err(ApiError::new(ErrorCode::Forbidden, "document does not match the identification tag"));
        }
        Ok(())
    }
}

/// Instrumentation of one broadcast's local cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BroadcastStats {
    pub capacity: usize,
    pub page_size: usize,
    pub peak_occupancy: usize,
    pub max_page: usize,
    pub pulls: u64,
}

enum Source {
    Local(Snapshot),
    Remote { url: String, handle: String },
}

struct Sub {
    sid: String,
    source: Option<Source>,
    state: SubState,
    count: Option<u64>,
    reason: Option<String>,
}

impl Sub {
    fn finished(&self) -> bool {
        matches!(self.state, SubState::Done | SubState::Failed)
    }

    fn fail(&mut self, reason: impl Into<String>) {
        self.state = SubState::Failed;
        self.reason = Some(reason.into());
        self.source = None;
    }

    fn status(&self) -> ServerStatus {
        ServerStatus {
            sid: self.sid.clone(),
            state: self.state,
            count: self.count,
            reason: self.reason.clone(),
        }
    }
}

pub(crate) struct Broadcast {
    query_id: String,
    tag: IdentTag,
    transport: Arc<dyn Transport>,
    subs: Vec<Sub>,
    cache: VecDeque<ResultEntry>,
    seen: HashSet<String>,
    delivered: u64,
    cancelled: bool,
    stats: BroadcastStats,
}

impl Broadcast {
    pub(crate) fn cancel(&mut self) {
        self.cancelled = true;
        self.cache.clear();
    }

    fn statuses(&self) -> Vec<ServerStatus> {
        self.subs.iter().map(Sub::status).collect()
    }

    fn free(&self) -> usize {
        self.stats.capacity - self.cache.len()
    }

    /// Move up to `page_size` entries from the first unfinished target into
    /// the local cache.
    fn pull(&mut self) {
        let n = self.stats.page_size;
        let Some(sub) = self.subs.iter_mut().find(|s| !s.finished()) else { return };
        let page = match sub.source.as_mut() {
            Some(Source::Local(snap)) => snap.page("local", n),
            Some(Source::Remote { url, handle }) => remote_page(&*self.transport, url, handle, &self.tag, n),
            None => Err(ApiError::new(ErrorCode::Internal, "target has no source")),
        };
        self.stats.pulls += 1;
        match page {
            Ok(rs) => {
                sub.state = if rs.done { SubState::Done } else { SubState::Streaming };
                if rs.done {
                    sub.source = None;
                }
                if rs.entries.len() > n {
                    sub.fail(format!("target sent {} entries, asked for {n}", rs.entries.len()));
                    return;
                }
                for e in rs.entries {
                    if self.seen.insert(e.uri.clone()) {
                        self.cache.push_back(e);
                    }
                }
                self.stats.peak_occupancy = self.stats.peak_occupancy.max(self.cache.len());
            }
            Err(e) => {
                log::warn!("broadcast {}: target {} failed: {e}", self.query_id, sub.sid);
                sub.fail(e.to_string());
            }
        }
    }

    /// Next merged page of at most `max` entries.
    pub(crate) fn next_page(&mut self, handle: &str, max: usize) -> Result<ResultSet, ApiError> {
        if self.cancelled {
            return Err(ApiError::new(ErrorCode::EnumerationCancelled, "transaction aborted"));
        }
        let n = max.min(self.stats.page_size);
        while self.cache.len() < n && self.free() >= self.stats.page_size && self.subs.iter().any(|s| !s.finished()) {
            self.pull();
        }
        let take = n.min(self.cache.len());
        let entries: Vec<ResultEntry> = self.cache.drain(..take).collect();
        self.stats.max_page = self.stats.max_page.max(entries.len());
        let cursor = self.delivered;
        self.delivered += entries.len() as u64;
        let done = self.cache.is_empty() && self.subs.iter().all(Sub::finished);
        Ok(ResultSet {
            query_id: self.query_id.clone(),
            handle: Some(handle.to_owned()),
            cursor,
            done,
            count: done.then_some(self.delivered),
            statuses: self.statuses(),
            entries,
        })
    }
}

fn remote_page(
    transport: &dyn Transport,
    url: &str,
    handle: &str,
    tag: &IdentTag,
    max: usize,
) -> Result<ResultSet, ApiError> {
    let max = max.to_string();
    let req = Request::get(wire::target("/s2s/results", &[("handle", handle), ("max", &max)])).header(H_IDENT_TAG, tag.to_string());
    let resp = transport.send(url, req)?.into_result()?;
    let ct = resp.header_value(wire::H_CONTENT_TYPE).unwrap_or_default();
    let parts = mime::decode_multipart(ct, &resp.body)?;
    let first = parts.first().ok_or_else(|| ApiError::new(ErrorCode::RemoteFailed, "empty multipart answer"))?;
    result_set_of(sil::parse_document(&first.body)?)
}

pub(crate) fn result_set_of(doc: SilDocument) -> Result<ResultSet, ApiError> {
    doc.payloads
        .into_iter()
        .find_map(|p| match p {
            Payload::Rs(rs) => Some(rs),
            _ => None,
        })
        .ok_or_else(|| ApiError::new(ErrorCode::RemoteFailed, "answer carries no result set"))
}

pub(crate) fn query_of(doc: &SilDocument) -> Result<Query, ApiError> {
    doc.payloads
        .iter()
        .find_map(|p| match p {
            Payload::Ql(q) => Some(q.clone()),
            _ => None,
        })
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "expected a query document"))
}

/// Metadata document followed by the raw content.
pub fn resource_parts(sid: &str, entry: &ResultEntry, content: Vec<u8>) -> Vec<Part> {
    let rs = ResultSet {
        query_id: "resource".into(),
        handle: None,
        cursor: 0,
        done: true,
        count: Some(1),
        statuses: Vec::new(),
        entries: vec![entry.clone()],
    };
    let doc = SilDocument::new(sid, Uid::user(sid), Payload::Rs(rs));
    let meta = sil::serialize_document(&doc).expect("result sets always serialize");
    vec![
        Part::new(XML, meta),
        Part::new(CONTENT_TYPE_BINARY, content).with_id(entry.uri.clone()),
    ]
}

/// Inverse of [`resource_parts`].
pub fn parse_resource(content_type: &str, body: &[u8]) -> Result<(ResultEntry, Vec<u8>), ApiError> {
    let mut parts = mime::decode_multipart(content_type, body)?.into_iter();
    let (Some(meta), Some(content)) = (parts.next(), parts.next()) else {
        return Err(ApiError::new(ErrorCode::BadRequest, "resource needs a metadata and a content part"));
    };
    let entry = result_set_of(sil::parse_document(&meta.body)?)?
        .entries
        .into_iter()
        .next()
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "resource metadata is empty"))?;
    Ok((entry, content.body))
}

impl Server {
    pub(crate) fn multipart(&self, parts: Vec<Part>) -> Result<Response, ApiError> {
        let stream = self.rng.with(|r| mime::encode_multipart_with(r, parts))?;
        Ok(Response::ok().body(&stream.content_type(), stream.to_bytes()))
    }

    fn tag_for(&self, token: &Token) -> Result<IdentTag, ApiError> {
        let s = self.session(token)?;
        Ok(IdentTag {
            user: s.login,
            level: s.level,
            origin: self.cfg.sid.clone(),
        })
    }

    fn forward_doc(&self, tag: &IdentTag, q: &Query) -> SilDocument {
        SilDocument::new(&self.cfg.sid, tag.uid(), Payload::Ql(q.clone()))
    }

    /// Resolve the query's targets to `(sid, url)`; `None` is this server.
    /// No targets means every online server in the mirror plus this one.
    fn resolve_targets(&self, q: &Query) -> Result<Vec<(String, Option<String>)>, ApiError> {
        let mirror = self.mirror();
        let online = |r: &&sil::ServerRecord| r.status == ServerState::Online;
        let mut out: Vec<(String, Option<String>)> = if q.targets.is_empty() {
            let mut v: Vec<_> = mirror
                .iter()
                .filter(online)
                .filter(|r| r.name != self.cfg.sid)
                .map(|r| (r.name.clone(), Some(r.url.clone())))
                .collect();
            v.push((self.cfg.sid.clone(), None));
            v
        } else {
            let mut v = Vec::new();
            for t in &q.targets {
                if *t == self.cfg.sid {
                    v.push((t.clone(), None));
                    continue;
                }
                let rec = mirror
                    .iter()
                    .filter(online)
                    .find(|r| r.name == *t)
                    .ok_or_else(|| ApiError::new(ErrorCode::UnknownTarget, format!("`{t}` is not an online server")))?;
                v.push((t.clone(), Some(rec.url.clone())));
            }
            v
        };
        out.sort();
        out.dedup_by(|a, b| a.0 == b.0);
        Ok(out)
    }

    /// Forward `q` to every target and return the broadcast handle.
    pub fn broadcast_query(&self, token: &Token, q: &Query) -> Result<String, ApiError> {
        Self::check_query(q)?;
        let targets = self.resolve_targets(q)?;
        let tag = self.tag_for(token)?;
        let page_size = q
            .max_results
            .map(|m| m as usize)
            .unwrap_or(self.cfg.page_size)
            .clamp(1, self.cfg.cache_capacity.max(1));
        let (_, t) = self.current_txn(token)?;
        let mut g = t.lock().unwrap();
        let mut subs = Vec::with_capacity(targets.len());
        for (sid, url) in targets {
            let mut sub = Sub {
                sid: sid.clone(),
                source: None,
                state: SubState::Pending,
                count: None,
                reason: None,
            };
            let started = match url {
                None => self.snapshot(&mut g, q, tag.level).map(|s| {
                    let n = s.entries.len() as u64;
                    (Source::Local(s), Some(n))
                }),
                Some(url) => self.remote_query(&tag, &url, q).map(|(h, n)| (Source::Remote { url, handle: h }, n)),
            };
            match started {
                Ok((src, count)) => {
                    sub.source = Some(src);
                    sub.count = count;
                    sub.state = SubState::Streaming;
                }
                Err(e) => sub.fail(e.to_string()),
            }
            subs.push(sub);
        }
        if subs.iter().all(|s| s.state == SubState::Failed) {
            let reasons: Vec<String> = subs.iter().map(|s| format!("{}: {}", s.sid, s.reason.as_deref().unwrap_or(""))).collect();
            return Err(ApiError::new(ErrorCode::AllTargetsFailed, reasons.join("; ")));
        }
        let b = Broadcast {
            query_id: q.id.clone(),
            tag,
            transport: self.transport.clone(),
            subs,
            cache: VecDeque::new(),
            seen: HashSet::new(),
            delivered: 0,
            cancelled: false,
            stats: BroadcastStats {
                capacity: self.cfg.cache_capacity.max(1),
                page_size,
                ..Default::default()
            },
        };
        let handle = g.new_handle();
        g.held.insert(handle.clone(), Held::Broadcast(Box::new(b)));
        Ok(handle)
    }

    fn remote_query(&self, tag: &IdentTag, url: &str, q: &Query) -> Result<(String, Option<u64>), ApiError> {
        let req = Request::post("/s2s/query")
            .header(H_IDENT_TAG, tag.to_string())
            .document(&self.forward_doc(tag, q))?;
        let rs = result_set_of(self.transport.send(url, req)?.into_document()?)?;
        let handle = rs.handle.ok_or_else(|| ApiError::new(ErrorCode::RemoteFailed, "answer carries no handle"))?;
        Ok((handle, rs.count))
    }

    /// Per-target counts and their total over the targets that answered.
    pub fn broadcast_count(&self, token: &Token, q: &Query) -> Result<ResultSet, ApiError> {
        Self::check_query(q)?;
        let targets = self.resolve_targets(q)?;
        let tag = self.tag_for(token)?;
        let mut statuses = Vec::new();
        for (sid, url) in targets {
            let counted = match url {
                None => self.count_query(token, q),
                Some(url) => self.current_txn(token).and_then(|_| {
                    let req = Request::post("/s2s/count")
                        .header(H_IDENT_TAG, tag.to_string())
                        .document(&self.forward_doc(&tag, q))?;
                    let rs = result_set_of(self.transport.send(&url, req)?.into_document()?)?;
                    rs.count.ok_or_else(|| ApiError::new(ErrorCode::RemoteFailed, "count missing"))
                }),
            };
            statuses.push(match counted {
                Ok(n) => ServerStatus {
                    sid,
                    state: SubState::Done,
                    count: Some(n),
                    reason: None,
                },
                Err(e) if e.code == ErrorCode::NoOpenTransaction || e.code == ErrorCode::SessionExpired => return Err(e),
                Err(e) => ServerStatus {
                    sid,
                    state: SubState::Failed,
                    count: None,
                    reason: Some(e.to_string()),
                },
            });
        }
        if statuses.iter().all(|s| s.state == SubState::Failed) {
            return Err(ApiError::new(ErrorCode::AllTargetsFailed, "no target could count"));
        }
        Ok(ResultSet {
            query_id: q.id.clone(),
            handle: None,
            cursor: 0,
            done: true,
            count: Some(statuses.iter().filter_map(|s| s.count).sum()),
            statuses,
            entries: Vec::new(),
        })
    }

    pub fn broadcast_stats(&self, token: &Token, handle: &str) -> Result<BroadcastStats, ApiError> {
        let (_, t) = self.current_txn(token)?;
        let g = t.lock().unwrap();
        match g.held.get(handle) {
            Some(Held::Broadcast(b)) => Ok(b.stats),
            _ => Err(ApiError::new(ErrorCode::UnknownHandle, format!("no broadcast `{handle}`"))),
        }
    }

    /// Per-target states of a broadcast without pulling anything.
    pub fn broadcast_statuses(&self, token: &Token, handle: &str) -> Result<Vec<ServerStatus>, ApiError> {
        let (_, t) = self.current_txn(token)?;
        let g = t.lock().unwrap();
        match g.held.get(handle) {
            Some(Held::Broadcast(b)) => Ok(b.statuses()),
            _ => Err(ApiError::new(ErrorCode::UnknownHandle, format!("no broadcast `{handle}`"))),
        }
    }

    // ---- receiving side ----

    /// A forwarded request is accepted from affiliated servers only.
    fn admit(&self, tag: &IdentTag) -> Result<Token, ApiError> {
        if tag.origin == self.cfg.sid || !self.is_affiliated(&tag.origin) {
            return Err(ApiError::new(ErrorCode::UnknownRequester, format!("`{}` is not an affiliated server", tag.origin)));
        }
        Ok(self.remote_session(tag))
    }

    /// Evaluate a forwarded query under the tag's level; the snapshot stays
    /// here until pulled.
    pub fn s2s_query(&self, tag: &IdentTag, doc: &SilDocument) -> Result<ResultSet, ApiError> {
        tag.check_document(doc)?;
        let q = query_of(doc)?;
        let token = self.admit(tag)?;
        self.open_transaction(&token)?;
        let handle = self.local_query(&token, &q)?;
        let (_, t) = self.current_txn(&token)?;
        let count = match t.lock().unwrap().held.get(&handle) {
            Some(Held::Snapshot(s)) => s.entries.len() as u64,
            _ => 0,
        };
        Ok(ResultSet {
            query_id: q.id,
            handle: Some(handle),
            cursor: 0,
            done: count == 0,
            count: Some(count),
            statuses: Vec::new(),
            entries: Vec::new(),
        })
    }

    pub fn s2s_results(&self, tag: &IdentTag, handle: &str, max: usize) -> Result<ResultSet, ApiError> {
        let token = self.admit(tag)?;
        self.fetch_results(&token, handle, max)
    }

    pub fn s2s_count(&self, tag: &IdentTag, doc: &SilDocument) -> Result<u64, ApiError> {
        tag.check_document(doc)?;
        let q = query_of(doc)?;
        let token = self.admit(tag)?;
        self.open_transaction(&token)?;
        self.count_query(&token, &q)
    }

    pub fn s2s_resource(&self, tag: &IdentTag, uri: &str) -> Result<(ResultEntry, Vec<u8>), ApiError> {
        self.admit(tag)?;
        self.local_resource(uri, tag.level)
    }

    fn local_resource(&self, uri: &str, level: u32) -> Result<(ResultEntry, Vec<u8>), ApiError> {
        let local = uri
            .strip_prefix(&self.cfg.sid)
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("`{uri}` is not held here")))?;
        let (entry, content) = self
            .driver
            .resource(local)
            .map_err(super::driver_err)?
            .ok_or_else(|| ApiError::new(ErrorCode::ResourceGone, format!("`{uri}` no longer exists")))?;
        if entry.required_level > level {
            return Err(ApiError::new(ErrorCode::Forbidden, format!("`{uri}` needs a higher level")));
        }
        Ok((entry.to_result(), content))
    }

    /// The resource's metadata and content, from this server or, for
    /// another server's uri, through it.
    pub fn fetch_resource(&self, token: &Token, uri: &str) -> Result<(ResultEntry, Vec<u8>), ApiError> {
        let tag = self.tag_for(token)?;
        let sid = uri.split('/').next().unwrap_or_default();
        if sid == self.cfg.sid {
            return self.local_resource(uri, tag.level);
        }
        let rec = self
            .mirror_record(sid)
            .filter(|r| r.status == ServerState::Online)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownTarget, format!("`{sid}` is not an online server")))?;
        let req = Request::get(wire::target("/s2s/resource", &[("uri", uri)])).header(H_IDENT_TAG, tag.to_string());
        let resp = self.transport.send(&rec.url, req)?.into_result()?;
        parse_resource(resp.header_value(wire::H_CONTENT_TYPE).unwrap_or_default(), &resp.body)
    }
}
