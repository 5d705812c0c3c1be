//! In-memory network and the wire recorder.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use crate::wire::{Handler, Request, Response, Transport, TransportError};

use super::fabric::Fabric;
use super::transcript::{Exchange, RecordedResponse, Transcript};
use crate::http::BindFailed;

pub const MEM_SCHEME: &str = "mem://";

pub fn mem_url(name: &str) -> String {
    format!("{MEM_SCHEME}{name}")
}

/// Single recording point for every message crossing the mesh.
#[derive(Debug, Default)]
pub struct Recorder {
    log: Mutex<Vec<Exchange>>,
    names: RwLock<BTreeMap<String, String>>,
}

impl Recorder {
    pub fn new() -> Arc<Self> {
        Arc::new(Recorder::default())
    }

    /// Record `url` under the logical node `name`.
    pub fn name_url(&self, url: &str, name: &str) {
        self.names.write().unwrap().insert(url.trim_end_matches('/').to_owned(), name.to_owned());
    }

    fn node_name(&self, url: &str) -> String {
        let url = url.trim_end_matches('/');
        self.names.read().unwrap().get(url).cloned().unwrap_or_else(|| url.to_owned())
    }

    /// Reserve the next sequence number for a request being sent, so nested
    /// calls appear in send order.
    fn begin(&self, from: &str, to_url: &str, req: &Request) -> usize {
        let mut ex = Exchange::capture(0, from, &self.node_name(to_url), req);
        ex.body = self.normalize(ex.body);
        let mut log = self.log.lock().unwrap();
        ex.seq = log.len() as u64 + 1;
        log.push(ex);
        log.len() - 1
    }

    fn finish(&self, slot: usize, resp: Option<&Response>) {
        let recorded = resp.map(|r| {
            let mut rec = RecordedResponse::of(r);
            rec.body = self.normalize(rec.body);
            rec
        });
        if let Some(ex) = self.log.lock().unwrap().get_mut(slot) {
            ex.response = recorded;
        }
    }

    /// Replace real listener URLs in bodies by their `mem://` names so
    /// transcripts do not depend on ports.
    fn normalize(&self, body: Vec<u8>) -> Vec<u8> {
        let names = self.names.read().unwrap();
        let rewrites: Vec<(&String, String)> = names
            .iter()
            .map(|(url, name)| (url, mem_url(name)))
            .filter(|(url, m)| *url != m)
            .collect();
        if rewrites.is_empty() {
            return body;
        }
        match String::from_utf8(body) {
            Ok(mut text) => {
                for (url, m) in rewrites {
                    text = text.replace(url.as_str(), &m);
                }
                text.into_bytes()
            }
            Err(e) => e.into_bytes(),
        }
    }

    pub fn len(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            exchanges: self.log.lock().unwrap().clone(),
        }
    }

    /// Exchanges recorded after the first `from` ones.
    pub fn since(&self, from: usize) -> Vec<Exchange> {
        let log = self.log.lock().unwrap();
        log[from.min(log.len())..].to_vec()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

/// Wraps any transport and records each exchange as sent by `from`.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    from: String,
    recorder: Arc<Recorder>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, from: &str, recorder: Arc<Recorder>) -> Self {
        RecordingTransport {
            inner,
            from: from.to_owned(),
            recorder,
        }
    }
}

impl Transport for RecordingTransport {
    fn send(&self, base_url: &str, req: Request) -> Result<Response, TransportError> {
        let slot = self.recorder.begin(&self.from, base_url, &req);
        let out = self.inner.send(base_url, req);
        self.recorder.finish(slot, out.as_ref().ok());
        out
    }
}

/// Routes `mem://name` URLs to attached handlers. Nodes can be made
/// unreachable to simulate outages.
#[derive(Default)]
pub struct MemNetwork {
    inner: Arc<MemInner>,
}

#[derive(Default)]
struct MemInner {
    nodes: RwLock<BTreeMap<String, Arc<dyn Handler>>>,
    down: RwLock<BTreeSet<String>>,
    recorder: Arc<Recorder>,
}

impl MemNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(MemNetwork::default())
    }

    pub fn recorder(&self) -> &Arc<Recorder> {
        &self.inner.recorder
    }

    /// Attach `handler` as node `name`, returning its URL.
    pub fn attach(&self, name: &str, handler: Arc<dyn Handler>) -> String {
        self.inner.nodes.write().unwrap().insert(name.to_owned(), handler);
        let url = mem_url(name);
        self.inner.recorder.name_url(&url, name);
        url
    }

    pub fn detach(&self, name: &str) {
        self.inner.nodes.write().unwrap().remove(name);
    }

    pub fn set_reachable(&self, name: &str, up: bool) {
        let mut down = self.inner.down.write().unwrap();
        if up {
            down.remove(name);
        } else {
            down.insert(name.to_owned());
        }
    }

    /// A recording transport whose messages are attributed to `from`.
    pub fn endpoint(&self, from: &str) -> Arc<dyn Transport> {
        Arc::new(RecordingTransport::new(
            Arc::new(MemTransport { net: self.inner.clone() }),
            from,
            self.inner.recorder.clone(),
        ))
    }
}

impl Fabric for MemNetwork {
    fn attach(&self, name: &str, handler: Arc<dyn Handler>) -> Result<String, BindFailed> {
        Ok(MemNetwork::attach(self, name, handler))
    }

    fn endpoint(&self, from: &str) -> Arc<dyn Transport> {
        MemNetwork::endpoint(self, from)
    }

    fn set_reachable(&self, name: &str, up: bool) -> Result<(), BindFailed> {
        MemNetwork::set_reachable(self, name, up);
        Ok(())
    }

    fn recorder(&self) -> &Arc<Recorder> {
        MemNetwork::recorder(self)
    }
}

struct MemTransport {
    net: Arc<MemInner>,
}

impl Transport for MemTransport {
    fn send(&self, base_url: &str, req: Request) -> Result<Response, TransportError> {
        let name = base_url
            .strip_prefix(MEM_SCHEME)
            .map(|n| n.trim_end_matches('/'))
            .ok_or_else(|| TransportError::Unreachable(base_url.to_owned()))?;
        if self.net.down.read().unwrap().contains(name) {
            return Err(TransportError::Unreachable(base_url.to_owned()));
        }
        let handler = self.net.nodes.read().unwrap().get(name).cloned();
        match handler {
            Some(h) => Ok(h.handle(req)),
            None => Err(TransportError::Unreachable(base_url.to_owned())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_records_and_fails_when_down() {
        let net = MemNetwork::new();
        net.attach("echo", Arc::new(|req: Request| Response::ok().body("text/plain", req.body)));
        let t = net.endpoint("client");
        let resp = t.send("mem://echo", Request::post("/x").body("text/plain", b"hi".to_vec())).unwrap();
        assert_eq!(resp.body, b"hi");
        net.set_reachable("echo", false);
        assert!(t.send("mem://echo", Request::get("/x")).is_err());
        assert!(t.send("mem://nobody", Request::get("/x")).is_err());
        let tr = net.recorder().transcript();
        assert_eq!(tr.exchanges.len(), 3);
        assert_eq!(tr.exchanges[0].from, "client");
        assert_eq!(tr.exchanges[0].to, "echo");
        assert!(tr.exchanges[1].response.is_none());
    }
}
