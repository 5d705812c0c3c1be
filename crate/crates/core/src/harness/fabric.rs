//! What a mesh runs on: the in-memory network or real loopback HTTP.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use crate::http::{serve, BindFailed, HttpServer, HttpTransport};
use crate::wire::{Handler, Transport};

use super::net::{Recorder, RecordingTransport};

pub trait Fabric: Send + Sync {
    /// Expose `handler` as node `name`; re-attaching a name swaps the
    /// handler and keeps the URL.
    fn attach(&self, name: &str, handler: Arc<dyn Handler>) -> Result<String, BindFailed>;
    /// A recording transport attributed to `from`.
    fn endpoint(&self, from: &str) -> Arc<dyn Transport>;
    fn set_reachable(&self, name: &str, up: bool) -> Result<(), BindFailed>;
    fn recorder(&self) -> &Arc<Recorder>;
}

struct HttpNode {
    handler: Arc<dyn Handler>,
    addr: SocketAddr,
    listener: Option<HttpServer>,
}

/// Every node gets its own listener on 127.0.0.1.
pub struct HttpFabric {
    recorder: Arc<Recorder>,
    transport: Arc<HttpTransport>,
    nodes: Mutex<BTreeMap<String, HttpNode>>,
}

impl Default for HttpFabric {
    fn default() -> Self {
        HttpFabric {
            recorder: Recorder::new(),
            transport: Arc::new(HttpTransport::default()),
            nodes: Mutex::default(),
        }
    }
}

impl HttpFabric {
    pub fn new() -> Arc<Self> {
        Arc::new(HttpFabric::default())
    }

    fn listen(&self, name: &str, bind: &str, handler: Arc<dyn Handler>) -> Result<HttpServer, BindFailed> {
        let server = serve(bind, handler, 4)?;
        self.recorder.name_url(&server.url(), name);
        Ok(server)
    }
}

impl Fabric for HttpFabric {
    fn attach(&self, name: &str, handler: Arc<dyn Handler>) -> Result<String, BindFailed> {
        let mut nodes = self.nodes.lock().unwrap();
        if let Some(node) = nodes.get_mut(name) {
            node.handler = handler.clone();
            node.listener = None;
            node.listener = Some(self.listen(name, &node.addr.to_string(), handler)?);
            return Ok(format!("http://{}", node.addr));
        }
        let listener = self.listen(name, "127.0.0.1:0", handler.clone())?;
        let addr = listener.addr();
        nodes.insert(
            name.to_owned(),
            HttpNode {
                handler,
                addr,
                listener: Some(listener),
            },
        );
        Ok(format!("http://{addr}"))
    }

    fn endpoint(&self, from: &str) -> Arc<dyn Transport> {
        Arc::new(RecordingTransport::new(self.transport.clone(), from, self.recorder.clone()))
    }

    fn set_reachable(&self, name: &str, up: bool) -> Result<(), BindFailed> {
        let mut nodes = self.nodes.lock().unwrap();
        let Some(node) = nodes.get_mut(name) else { return Ok(()) };
        if !up {
            node.listener = None;
        } else if node.listener.is_none() {
            node.listener = Some(self.listen(name, &node.addr.to_string(), node.handler.clone())?);
        }
        Ok(())
    }

    fn recorder(&self) -> &Arc<Recorder> {
        &self.recorder
    }
}
