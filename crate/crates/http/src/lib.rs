//! HTTP transports around the core library: a blocking client that speaks
//! the backend wire contract, the review service API, and a server that
//! exposes any in-process backend (such as the deterministic mock) over
//! HTTP.

pub mod client;
pub mod mock_server;
pub mod review_api;

use std::net::SocketAddr;

use axum::Router;

pub use client::{BackendMap, HttpBackend};
pub use mock_server::mock_router;
pub use review_api::{review_router, ReviewService};

/// Serves `router` until the process exits. `on_bound` receives the bound
/// address (useful with port 0).
pub async fn serve(router: Router, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tracing::info!(addr = %bound, "listening");
    on_bound(bound);
    axum::serve(listener, router).await
}

/// A server running on its own thread and runtime; used by tests and by
/// tools that need a local endpoint for the duration of a run.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `127.0.0.1:0` and serves `router` in the background.
    pub fn start(router: Router) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
