//! Real HTTP: a threaded `tiny_http` front for any [`Handler`] and a
//! blocking `ureq` [`Transport`].

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::wire::{Handler, Request, Response, Transport, TransportError};

#[derive(Debug, thiserror::Error)]
#[error("cannot bind {addr}: {reason}")]
pub struct BindFailed {
    pub addr: String,
    pub reason: String,
}

/// A running listener; stops when dropped.
pub struct HttpServer {
    inner: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for HttpServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpServer").field("addr", &self.addr).finish()
    }
}

fn to_request(req: &mut tiny_http::Request) -> std::io::Result<Request> {
    let mut body = Vec::new();
    req.as_reader().read_to_end(&mut body)?;
    let mut out = Request::new(req.method().as_str(), req.url());
    for h in req.headers() {
        out.headers.push((h.field.as_str().as_str().to_owned(), h.value.as_str().to_owned()));
    }
    out.body = body;
    Ok(out)
}

fn respond(req: tiny_http::Request, resp: Response) {
    let mut out = tiny_http::Response::from_data(resp.body).with_status_code(resp.status);
    for (k, v) in &resp.headers {
        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
            out.add_header(h);
        }
    }
    if let Err(e) = req.respond(out) {
        log::debug!("response not delivered: {e}");
    }
}

/// Serve `handler` on `bind` (`host:port`, port 0 for any) with `threads`
/// workers.
pub fn serve(bind: &str, handler: Arc<dyn Handler>, threads: usize) -> Result<HttpServer, BindFailed> {
    let inner = tiny_http::Server::http(bind).map_err(|e| BindFailed {
        addr: bind.to_owned(),
        reason: e.to_string(),
    })?;
    let addr = inner.server_addr().to_ip().ok_or_else(|| BindFailed {
        addr: bind.to_owned(),
        reason: "not an IP listener".into(),
    })?;
    let inner = Arc::new(inner);
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = inner.clone();
            let handler = handler.clone();
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let resp = match to_request(&mut req) {
                        Ok(r) => handler.handle(r),
                        Err(e) => Response::new(400).body("text/plain", e.to_string().into_bytes()),
                    };
                    respond(req, resp);
                }
            })
        })
        .collect();
    Ok(HttpServer { inner, addr, workers })
}

impl HttpServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the listener stops.
    pub fn join(mut self) {
        for w in std::mem::take(&mut self.workers) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.inner.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Blocking HTTP client transport.
#[derive(Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::unpooled(Duration::from_secs(2), Duration::from_secs(30))
    }
}

impl HttpTransport {
    pub fn new(connect_timeout: Duration, timeout: Duration) -> Self {
        HttpTransport {
            agent: ureq::AgentBuilder::new().timeout_connect(connect_timeout).timeout(timeout).build(),
        }
    }

    /// A fresh connection per request: a listener that goes away cannot
    /// leave a pooled socket behind.
    pub fn unpooled(connect_timeout: Duration, timeout: Duration) -> Self {
        HttpTransport {
            agent: ureq::AgentBuilder::new()
                .timeout_connect(connect_timeout)
                .timeout(timeout)
                .max_idle_connections(0)
                .build(),
        }
    }
}

fn from_ureq(resp: ureq::Response) -> Result<Response, TransportError> {
    let mut out = Response::new(resp.status());
    for name in resp.headers_names() {
        for v in resp.all(&name) {
            out.headers.push((name.clone(), v.to_owned()));
        }
    }
    resp.into_reader()
        .read_to_end(&mut out.body)
        .map_err(|e| TransportError::Io(e.to_string()))?;
    Ok(out)
}

impl Transport for HttpTransport {
    fn send(&self, base_url: &str, req: Request) -> Result<Response, TransportError> {
        let url = format!("{}{}", base_url.trim_end_matches('/'), req.target);
        let mut call = self.agent.request(&req.method, &url);
        for (k, v) in &req.headers {
            call = call.set(k, v);
        }
        match call.send_bytes(&req.body) {
            Ok(resp) | Err(ureq::Error::Status(_, resp)) => from_ureq(resp),
            Err(ureq::Error::Transport(t)) => Err(TransportError::Unreachable(format!("{url}: {t}"))),
        }
    }
}
