use std::sync::Arc;

use crate::sil::{self, Payload, ServerProfile, ServerRecord, ServerState, SilDocument};
use crate::wire::{self, ApiError, ErrorCode, Request, Transport, H_NMU_ADMIN, H_SERVER_ID, XML};

use super::{net_document, DeliveryReport};

/// Caller side of the registry endpoints, for admins and servers.
#[derive(Clone)]
pub struct NmuClient {
    transport: Arc<dyn Transport>,
    url: String,
}

fn servers_of(doc: SilDocument) -> Vec<ServerRecord> {
    doc.payloads
        .into_iter()
        .flat_map(|p| match p {
            Payload::Net(n) => n.servers,
            _ => Vec::new(),
        })
        .collect()
}

fn one(doc: SilDocument) -> Result<ServerRecord, ApiError> {
    servers_of(doc)
        .into_iter()
        .next()
        .ok_or_else(|| ApiError::new(ErrorCode::Internal, "registry answered without a record"))
}

impl NmuClient {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>) -> Self {
        NmuClient {
            transport,
            url: url.into(),
        }
    }

    fn call(&self, req: Request) -> Result<SilDocument, ApiError> {
        self.transport.send(&self.url, req)?.into_document()
    }

    fn admin_post(&self, admin: &str, target: String, rec: &ServerRecord) -> Result<ServerRecord, ApiError> {
        let body = sil::serialize_document(&net_document([rec.clone()]))?;
        one(self.call(Request::post(target).header(H_NMU_ADMIN, admin).body(XML, body))?)
    }

    pub fn register(&self, admin: &str, name: &str, url: &str, profile: ServerProfile) -> Result<ServerRecord, ApiError> {
        let rec = ServerRecord {
            name: name.to_owned(),
            url: url.to_owned(),
            status: ServerState::Online,
            profile,
            last_update: Default::default(),
        };
        self.admin_post(admin, "/nmu/admin/register".into(), &rec)
    }

    /// Replace the mutable fields of `name` with those of `rec`.
    pub fn update(&self, admin: &str, name: &str, rec: &ServerRecord) -> Result<ServerRecord, ApiError> {
        self.admin_post(admin, wire::target("/nmu/admin/update", &[("name", name)]), rec)
    }

    pub fn disconnect(&self, admin: &str, name: &str) -> Result<ServerRecord, ApiError> {
        let req = Request::post(wire::target("/nmu/admin/disconnect", &[("name", name)])).header(H_NMU_ADMIN, admin);
        one(self.call(req)?)
    }

    pub fn list_as_admin(&self, admin: &str, include_disconnected: bool) -> Result<Vec<ServerRecord>, ApiError> {
        let flag = if include_disconnected { "1" } else { "0" };
        let req = Request::get(wire::target("/nmu/servers", &[("include_disconnected", flag)])).header(H_NMU_ADMIN, admin);
        Ok(servers_of(self.call(req)?))
    }

    pub fn list_as_server(&self, sid: &str, include_disconnected: bool) -> Result<Vec<ServerRecord>, ApiError> {
        let flag = if include_disconnected { "1" } else { "0" };
        let req = Request::get(wire::target("/nmu/servers", &[("include_disconnected", flag)])).header(H_SERVER_ID, sid);
        Ok(servers_of(self.call(req)?))
    }

    pub fn last_push(&self, admin: &str) -> Result<DeliveryReport, ApiError> {
        let doc = self.call(Request::get("/nmu/reports/last-push").header(H_NMU_ADMIN, admin))?;
        let deliveries = doc
            .payloads
            .into_iter()
            .flat_map(|p| match p {
                Payload::Net(n) => n.deliveries,
                _ => Vec::new(),
            })
            .collect();
        Ok(DeliveryReport { deliveries })
    }
}
