//! Runs a [`Platform`] behind two TCP listeners. The secure listener stands
//! in for the TLS front end; transport encryption is outside this binary,
//! so both listeners speak plain HTTP/1.1 and differ only in how the
//! gateway treats them.

use std::io::Write;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{ConnectInfo, Request, State};
use axum::response::Response;
use axum::Router;
use bytes::Bytes;
use tokio::net::TcpListener;
use workbench_core::audit::{AppendSink, SinkError};
use workbench_core::gateway::Listener;
use workbench_core::Platform;

/// Largest request body accepted from a client.
pub const MAX_BODY: usize = 16 * 1024 * 1024;

/// Writes each record as one JSON line to standard output.
#[derive(Debug, Default)]
pub struct StdoutLines;

impl<T: serde::Serialize> AppendSink<T> for StdoutLines {
    fn append(&self, record: &T) -> Result<(), SinkError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut out = std::io::stdout().lock();
        out.write_all(&line)?;
        out.flush()?;
        Ok(())
    }
}

/// Reports each record through `tracing` at info level.
#[derive(Debug, Default)]
pub struct TracingSink;

impl<T: serde::Serialize> AppendSink<T> for TracingSink {
    fn append(&self, record: &T) -> Result<(), SinkError> {
        tracing::info!(target: "workbench::events", "{}", serde_json::to_string(record)?);
        Ok(())
    }
}

#[derive(Clone)]
struct Front {
    platform: Arc<Platform>,
    listener: Listener,
}

async fn forward(State(front): State<Front>, ConnectInfo(peer): ConnectInfo<SocketAddr>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let body = match axum::body::to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(_) => {
            return Response::builder()
                .status(413)
                .body(Body::from("request body too large\n"))
                .expect("static response");
        }
    };
    let req = http::Request::from_parts(parts, body);
    let platform = front.platform.clone();
    let client = peer.ip().to_string();
    let resp = tokio::task::spawn_blocking(move || platform.request(front.listener, &client, req)).await;
    match resp {
        Ok(resp) => resp.map(Body::from),
        Err(e) => {
            tracing::error!("request handler failed: {e}");
            Response::builder()
                .status(500)
                .body(Body::from(Bytes::from_static(b"internal error\n")))
                .expect("static response")
        }
    }
}

fn router(platform: Arc<Platform>, listener: Listener) -> Router {
    Router::new().fallback(forward).with_state(Front { platform, listener })
}

/// Performs due platform work every `tick` until the task is dropped.
async fn drive(platform: Arc<Platform>, tick: Duration) {
    let mut interval = tokio::time::interval(tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let p = platform.clone();
        if let Err(e) = tokio::task::spawn_blocking(move || p.run_due()).await {
            tracing::error!("scheduler pass failed: {e}");
        }
    }
}

/// Serves both listeners and drives the scheduler until `shutdown`
/// resolves or a listener fails.
pub async fn serve(
    platform: Arc<Platform>,
    secure: TcpListener,
    insecure: TcpListener,
    tick: Duration,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let secure_app = router(platform.clone(), Listener::Secure).into_make_service_with_connect_info::<SocketAddr>();
    let insecure_app = router(platform.clone(), Listener::Insecure).into_make_service_with_connect_info::<SocketAddr>();
    let scheduler = tokio::spawn(drive(platform, tick));
    let result = tokio::select! {
        r = axum::serve(secure, secure_app) => r,
        r = axum::serve(insecure, insecure_app) => r,
        () = shutdown => Ok(()),
    };
    scheduler.abort();
    result
}
