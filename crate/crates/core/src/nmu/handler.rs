use std::sync::Arc;

use crate::sil::{self, NetInfo, Payload, ServerRecord, SilDocument, Uid};
use crate::wire::{ApiError, ErrorCode, Handler, Request, Response, H_NMU_ADMIN, H_SERVER_ID};

use super::{net_document, Nmu, Requester, ServerChanges, NMU_SID};

/// HTTP face of the registry.
pub struct NmuHandler {
    nmu: Arc<Nmu>,
}

impl NmuHandler {
    pub fn new(nmu: Arc<Nmu>) -> Self {
        NmuHandler { nmu }
    }

    fn route(&self, req: &Request) -> Result<Response, ApiError> {
        let admin = req.header_value(H_NMU_ADMIN).unwrap_or("");
        match (req.method.as_str(), req.path()) {
            ("POST", "/nmu/admin/register") => {
                self.nmu.check_admin(admin)?;
                let rec = single_record(req)?;
                let rec = self.nmu.register_server(admin, &rec.name, &rec.url, rec.profile)?;
                Ok(Response::document(&net_document([rec])))
            }
            ("POST", "/nmu/admin/update") => {
                self.nmu.check_admin(admin)?;
                let rec = single_record(req)?;
                let name = req.param("name").unwrap_or_else(|| rec.name.clone());
                let rec = self.nmu.update_server(admin, &name, ServerChanges::replace_with(&rec))?;
                Ok(Response::document(&net_document([rec])))
            }
            ("POST", "/nmu/admin/disconnect") => {
                let name = match req.param("name") {
                    Some(n) => n,
                    None => {
                        self.nmu.check_admin(admin)?;
                        single_record(req)?.name
                    }
                };
                let rec = self.nmu.disconnect_server(admin, &name)?;
                Ok(Response::document(&net_document([rec])))
            }
            ("GET", "/nmu/servers") => {
                let include = matches!(req.param("include_disconnected").as_deref(), Some("1" | "true"));
                let requester = match req.header_value(H_SERVER_ID) {
                    Some(sid) if req.header_value(H_NMU_ADMIN).is_none() => Requester::Server(sid),
                    _ => Requester::Admin(admin),
                };
                let list = self.nmu.list_servers(requester, include)?;
                Ok(Response::document(&net_document(list)))
            }
            ("GET", "/nmu/reports/last-push") => {
                let report = self.nmu.last_report(admin)?;
                Ok(Response::document(&SilDocument::new(
                    NMU_SID,
                    Uid::user(NMU_SID),
                    Payload::Net(NetInfo {
                        servers: Vec::new(),
                        deliveries: report.deliveries,
                    }),
                )))
            }
            (_, "/nmu/admin/register" | "/nmu/admin/update" | "/nmu/admin/disconnect" | "/nmu/servers"
            | "/nmu/reports/last-push") => Err(ErrorCode::MethodNotAllowed.into()),
            (_, path) => Err(ApiError::new(ErrorCode::NotFound, path.to_owned())),
        }
    }
}

/// The one `server` record carried by an admin request body.
fn single_record(req: &Request) -> Result<ServerRecord, ApiError> {
    let doc = sil::parse_document(&req.body)?;
    let mut servers = doc.payloads.into_iter().flat_map(|p| match p {
        Payload::Net(n) => n.servers,
        _ => Vec::new(),
    });
    match (servers.next(), servers.next()) {
        (Some(r), None) => Ok(r),
        _ => Err(ApiError::new(ErrorCode::BadRequest, "expected exactly one server record")),
    }
}

impl Handler for NmuHandler {
    fn handle(&self, req: Request) -> Response {
        match self.route(&req) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("{} {} -> {e}", req.method, req.target);
                Response::error(&e)
            }
        }
    }
}
