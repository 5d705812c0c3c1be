//! An NMU and a few servers wired over one [`MemNetwork`], with a
//! simulated clock and seeded randomness.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::auth::{SecretHash, SecureRng};
use crate::client::Client;
use crate::clock::{SimClock, Timestamp};
use crate::nmu::{Nmu, NmuHandler};
use crate::server::{CatalogEntry, LevelMap, MemoryDriver, Server, ServerConfig, ServerHandler};
use crate::sil::{ServerProfile, UserInfo};
use crate::store::MemStore;
use crate::wire::{ApiError, Transport};

use super::fabric::Fabric;
use super::net::{MemNetwork, Recorder};
use crate::http::BindFailed;

pub const MESH_ADMIN: &str = "mesh-admin";
pub const NMU_NODE: &str = "nmu";

/// Groups every mesh server maps, `l0` through `l9`.
pub fn standard_levels() -> LevelMap {
    (0..10).fold(LevelMap::default(), |m, l| m.with(&format!("l{l}"), l))
}

pub struct Node {
    pub server: Arc<Server>,
    pub driver: MemoryDriver,
    pub url: String,
}

pub struct Mesh {
    pub net: Arc<dyn Fabric>,
    pub clock: Arc<SimClock>,
    pub nmu: Arc<Nmu>,
    pub nmu_url: String,
    pub nodes: BTreeMap<String, Node>,
    seed: u64,
}

impl Mesh {
    /// A mesh on the in-memory network.
    pub fn new(seed: u64) -> Mesh {
        let net: Arc<dyn Fabric> = MemNetwork::new();
        Mesh::with_fabric(seed, net).expect("in-memory attach cannot fail")
    }

    pub fn with_fabric(seed: u64, net: Arc<dyn Fabric>) -> Result<Mesh, BindFailed> {
        let clock = Arc::new(SimClock::new(Timestamp::from_secs(1_000_000_000)));
        let admin = SecretHash::new(&SecureRng::seeded(seed), MESH_ADMIN);
        let nmu = Arc::new(Nmu::new(admin, clock.clone(), net.endpoint(NMU_NODE)));
        let nmu_url = net.attach(NMU_NODE, Arc::new(NmuHandler::new(nmu.clone())))?;
        Ok(Mesh {
            net,
            clock,
            nmu,
            nmu_url,
            nodes: BTreeMap::new(),
            seed,
        })
    }

    pub fn recorder(&self) -> &Arc<Recorder> {
        self.net.recorder()
    }

    /// Boot server `sid`, register it and push the registry everywhere.
    pub fn add_server(&mut self, sid: &str, tune: impl FnOnce(&mut ServerConfig)) -> &Node {
        self.try_add_server(sid, tune).expect("mesh server")
    }

    pub fn try_add_server(&mut self, sid: &str, tune: impl FnOnce(&mut ServerConfig)) -> Result<&Node, ApiError> {
        if self.nodes.contains_key(sid) {
            return Err(ApiError::new(crate::wire::ErrorCode::DuplicateName, format!("`{sid}` already booted")));
        }
        let mut cfg = ServerConfig::new(sid);
        cfg.levels = standard_levels();
        cfg.nmu_url = Some(self.nmu_url.clone());
        tune(&mut cfg);
        let driver = MemoryDriver::new(sid);
        let n = self.nodes.len() as u64 + 1;
        let server = Arc::new(Server::new(
            cfg,
            self.clock.clone(),
            Arc::new(SecureRng::seeded(self.seed.wrapping_mul(1000).wrapping_add(n))),
            self.net.endpoint(sid),
            Arc::new(driver.clone()),
            Arc::new(MemStore::new()),
        ));
        let url = self
            .net
            .attach(sid, Arc::new(ServerHandler::new(server.clone())))
            .map_err(|e| ApiError::new(crate::wire::ErrorCode::Internal, e.to_string()))?;
        self.nmu.register_server(MESH_ADMIN, sid, &url, ServerProfile::default())?;
        self.nodes.insert(sid.to_owned(), Node { server, driver, url });
        Ok(&self.nodes[sid])
    }

    pub fn server(&self, sid: &str) -> &Arc<Server> {
        &self.nodes[sid].server
    }

    pub fn driver(&self, sid: &str) -> &MemoryDriver {
        &self.nodes[sid].driver
    }

    /// Add `local` to `sid`'s catalog, content being the title's bytes.
    pub fn add_resource(&self, sid: &str, local: &str, title: &str, lang: &str, category: &str, level: u32) -> CatalogEntry {
        let e = CatalogEntry::new(sid, local, title, lang, category, level);
        self.driver(sid).insert(e.clone(), title.as_bytes().to_vec());
        e
    }

    /// A user of `sid` at `level`, password equal to the login.
    pub fn add_user(&self, sid: &str, login: &str, level: u32) {
        let srv = self.server(sid);
        srv.users()
            .add_user(srv.rng(), login, login, &[&format!("l{level}")], UserInfo::default())
            .expect("mesh user");
    }

    /// Transport for an outside actor, recorded under `name`.
    pub fn endpoint(&self, name: &str) -> Arc<dyn Transport> {
        self.net.endpoint(name)
    }

    /// Log `login` in at `sid`; its traffic is recorded under the login.
    pub fn connect(&self, sid: &str, login: &str) -> Result<Client, ApiError> {
        let url = self
            .nodes
            .get(sid)
            .map(|n| n.url.clone())
            .ok_or_else(|| ApiError::new(crate::wire::ErrorCode::UnknownServer, format!("no server `{sid}`")))?;
        Client::connect(self.endpoint(login), &url, login, login)
    }
}
