use std::sync::Arc;

use crate::auth::Token;
use crate::sil::{self, Payload, ResultSet, SilDocument, Uid, Workspace};
use crate::wire::{
    self, ApiError, ErrorCode, Handler, Request, Response, H_IDENT_TAG, H_SESSION, H_TRANSACTION, H_TXN_STATE,
};

use super::broker::{query_of, resource_parts, IdentTag};
use super::Server;

/// HTTP face of a server: client endpoints, `/s2s/*` for peers and
/// `/nmu/push` for the registry.
pub struct ServerHandler {
    server: Arc<Server>,
}

fn token(req: &Request) -> Result<Token, ApiError> {
    req.header_value(H_SESSION)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ApiError::new(ErrorCode::SessionExpired, "missing or malformed session token"))
}

fn txn_id(req: &Request) -> Result<String, ApiError> {
    req.header_value(H_TRANSACTION)
        .map(str::to_owned)
        .or_else(|| req.param("txn"))
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "missing transaction id"))
}

fn tag(req: &Request) -> Result<IdentTag, ApiError> {
    req.header_value(H_IDENT_TAG)
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "missing identification tag"))?
        .parse()
}

fn max_param(req: &Request, default: usize) -> Result<usize, ApiError> {
    match req.param("max") {
        None => Ok(default),
        Some(m) => m
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("bad max `{m}`"))),
    }
}

fn body_document(req: &Request) -> Result<SilDocument, ApiError> {
    Ok(sil::parse_document(&req.body)?)
}

fn txn_response(id: &str, open: bool) -> Response {
    Response::ok()
        .header(H_TRANSACTION, id)
        .header(H_TXN_STATE, if open { "open" } else { "closed" })
}

impl ServerHandler {
    pub fn new(server: Arc<Server>) -> Self {
        ServerHandler { server }
    }

    fn doc(&self, login: &str, payload: Payload) -> Response {
        Response::document(&SilDocument::new(self.server.sid(), Uid::user(login), payload))
    }

    fn rs(&self, login: &str, rs: ResultSet) -> Response {
        self.doc(login, Payload::Rs(rs))
    }

    fn route(&self, req: &Request) -> Result<Response, ApiError> {
        let srv = &self.server;
        let path = req.path();
        if let Some(name) = path.strip_prefix("/workspace/") {
            let name = wire::decode_segment(name);
            let t = token(req)?;
            let login = srv.session_info(&t)?.login;
            return match req.method.as_str() {
                "GET" => Ok(self.doc(&login, Payload::Ws(srv.load_workspace(&t, &name)?))),
                "PUT" => {
                    let ws = workspace_of(body_document(req)?)?;
                    if ws.name != name {
                        return Err(ApiError::new(ErrorCode::BadRequest, "workspace name differs from the path"));
                    }
                    srv.save_workspace(&t, ws)?;
                    Ok(Response::ok())
                }
                _ => Err(ErrorCode::MethodNotAllowed.into()),
            };
        }
        if let Some(uri) = path.strip_prefix("/resource/") {
            if req.method != "GET" {
                return Err(ErrorCode::MethodNotAllowed.into());
            }
            let (entry, content) = srv.fetch_resource(&token(req)?, &wire::decode_segment(uri))?;
            return srv.multipart(resource_parts(srv.sid(), &entry, content));
        }
        match (req.method.as_str(), path) {
            ("POST", "/session") => {
                let doc = body_document(req)?;
                let passwd = doc.uid.passwd.as_deref().unwrap_or("");
                let info = srv.authenticate(&doc.uid.login, passwd)?;
                let mut uid = Uid::user(&info.login);
                uid.level = Some(info.level);
                let body = SilDocument::new(srv.sid(), uid, Payload::Ui(Default::default()));
                Ok(Response::document(&body).header(H_SESSION, info.token.to_string()))
            }
            ("POST", "/txn/open") => {
                let id = srv.open_transaction(&token(req)?)?;
                Ok(txn_response(&id, true))
            }
            ("POST", "/txn/close") => {
                let id = txn_id(req)?;
                srv.close_transaction(&token(req)?, &id)?;
                Ok(txn_response(&id, false))
            }
            ("POST", "/txn/commit") => {
                let id = txn_id(req)?;
                srv.commit(&token(req)?, &id)?;
                Ok(txn_response(&id, true))
            }
            ("POST", "/txn/abort") => {
                let id = txn_id(req)?;
                srv.abort(&token(req)?, &id)?;
                Ok(txn_response(&id, true))
            }
            ("GET", "/txn/status") => {
                let id = txn_id(req)?;
                let open = srv.is_open(&token(req)?, &id)?;
                Ok(txn_response(&id, open))
            }
            ("POST", "/query") => {
                let t = token(req)?;
                let login = srv.session_info(&t)?.login;
                let q = query_of(&body_document(req)?)?;
                let local_only = q.targets.len() == 1 && q.targets[0] == srv.sid();
                let handle = if local_only { srv.local_query(&t, &q)? } else { srv.broadcast_query(&t, &q)? };
                let statuses = if local_only { Vec::new() } else { srv.broadcast_statuses(&t, &handle)? };
                Ok(self.rs(
                    &login,
                    ResultSet {
                        query_id: q.id,
                        handle: Some(handle),
                        cursor: 0,
                        done: false,
                        count: None,
                        statuses,
                        entries: Vec::new(),
                    },
                ))
            }
            ("GET", "/results") => {
                let t = token(req)?;
                let login = srv.session_info(&t)?.login;
                let handle = req.param("handle").ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "missing handle"))?;
                let rs = srv.fetch_results(&t, &handle, max_param(req, srv.config().page_size)?)?;
                Ok(self.rs(&login, rs))
            }
            ("GET" | "POST", "/count") => {
                let t = token(req)?;
                let login = srv.session_info(&t)?.login;
                let q = query_of(&body_document(req)?)?;
                let local_only = q.targets.len() == 1 && q.targets[0] == srv.sid();
                let rs = if local_only {
                    ResultSet {
                        query_id: q.id.clone(),
                        handle: None,
                        cursor: 0,
                        done: true,
                        count: Some(srv.count_query(&t, &q)?),
                        statuses: Vec::new(),
                        entries: Vec::new(),
                    }
                } else {
                    srv.broadcast_count(&t, &q)?
                };
                Ok(self.rs(&login, rs))
            }
            ("GET", "/servers") => {
                let servers = srv.mirror();
                Ok(self.doc(
                    srv.sid(),
                    Payload::Net(sil::NetInfo {
                        servers,
                        deliveries: Vec::new(),
                    }),
                ))
            }
            ("POST", "/nmu/push") => {
                srv.apply_push(&body_document(req)?)?;
                Ok(Response::ok())
            }
            ("POST", "/s2s/query") => {
                let tag = tag(req)?;
                let rs = srv.s2s_query(&tag, &body_document(req)?)?;
                Ok(self.rs(&tag.user, rs))
            }
            ("GET", "/s2s/results") => {
                let tag = tag(req)?;
                let handle = req.param("handle").ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "missing handle"))?;
                let rs = srv.s2s_results(&tag, &handle, max_param(req, srv.config().page_size)?)?;
                let mut uid = tag.uid();
                uid.level = None;
                let doc = SilDocument::new(srv.sid(), uid, Payload::Rs(rs));
                srv.multipart(vec![crate::mime::Part::new(wire::XML, sil::serialize_document(&doc)?)])
            }
            ("POST", "/s2s/count") => {
                let tag = tag(req)?;
                let doc = body_document(req)?;
                let q = query_of(&doc)?;
                let n = srv.s2s_count(&tag, &doc)?;
                Ok(self.rs(
                    &tag.user,
                    ResultSet {
                        query_id: q.id,
                        handle: None,
                        cursor: 0,
                        done: true,
                        count: Some(n),
                        statuses: Vec::new(),
                        entries: Vec::new(),
                    },
                ))
            }
            ("GET", "/s2s/resource") => {
                let tag = tag(req)?;
                let uri = req.param("uri").ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "missing uri"))?;
                let (entry, content) = srv.s2s_resource(&tag, &uri)?;
                srv.multipart(resource_parts(srv.sid(), &entry, content))
            }
            (
                _,
                "/session" | "/txn/open" | "/txn/close" | "/txn/commit" | "/txn/abort" | "/txn/status" | "/query"
                | "/results" | "/count" | "/servers" | "/nmu/push" | "/s2s/query" | "/s2s/results" | "/s2s/count"
                | "/s2s/resource",
            ) => Err(ErrorCode::MethodNotAllowed.into()),
            _ => Err(ApiError::new(ErrorCode::NotFound, format!("no route for `{path}`"))),
        }
    }
}

fn workspace_of(doc: SilDocument) -> Result<Workspace, ApiError> {
    doc.payloads
        .into_iter()
        .find_map(|p| match p {
            Payload::Ws(ws) => Some(ws),
            _ => None,
        })
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, "expected a workspace document"))
}

impl Handler for ServerHandler {
    fn handle(&self, req: Request) -> Response {
        match self.route(&req) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("{} {} {}: {e}", self.server.sid(), req.method, req.target);
                Response::error(&e)
            }
        }
    }
}
