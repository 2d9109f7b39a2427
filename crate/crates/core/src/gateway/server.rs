//! Minimal loopback HTTP server used to expose local models and to stand in
//! for inference servers in tests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

pub struct HttpRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self { status, body: body.into() }
    }
}

pub type Handler = dyn Fn(&HttpRequest) -> HttpResponse + Send + Sync + 'static;

/// Serves requests sequentially on a background thread until dropped.
pub struct LoopbackServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn start<H>(bind: &str, handler: H) -> std::io::Result<Self>
    where
        H: Fn(&HttpRequest) -> HttpResponse + Send + Sync + 'static,
    {
        let server = Arc::new(tiny_http::Server::http(bind).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let worker_server = Arc::clone(&server);
        let worker = thread::spawn(move || {
            for mut request in worker_server.incoming_requests() {
                let mut body = String::new();
                let _ = request.as_reader().read_to_string(&mut body);
                let req = HttpRequest { method: request.method().to_string(), path: request.url().to_string(), body };
                let resp = handler(&req);
                let header =
                    tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header is valid");
                let _ = request.respond(
                    tiny_http::Response::from_string(resp.body).with_status_code(resp.status).with_header(header),
                );
            }
        });
        Ok(Self { addr, server, worker: Some(worker) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops (it never does on its own).
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
