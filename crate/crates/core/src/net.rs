//! Transport abstraction between the gateway and upstream targets.

use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// User agent of gateway health checks; applications do not count these
/// as user activity.
pub const HEALTH_CHECK_USER_AGENT: &str = "ELB-HealthChecker/2.0";

pub type HttpRequest = http::Request<Bytes>;
pub type HttpResponse = http::Response<Bytes>;

/// A `(host, port)` endpoint: a target-group member or a task's mapped port.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetAddr {
    pub host: String,
    pub port: u16,
}

impl TargetAddr {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for TargetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection refused by {0}")]
    ConnectionRefused(TargetAddr),
    #[error("transport failure talking to {addr}: {message}")]
    Failed { addr: TargetAddr, message: String },
}

pub trait Transport: Send + Sync {
    fn send(&self, target: &TargetAddr, request: HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// An in-process HTTP endpoint: the hub, a simulated application.
pub trait HttpHandler: Send + Sync {
    fn handle(&self, request: HttpRequest) -> HttpResponse;
}

/// Builds a response with a body; panics only on invalid static header data.
pub fn response(status: u16, content_type: &str, body: impl Into<Bytes>) -> HttpResponse {
    http::Response::builder()
        .status(status)
        .header(http::header::CONTENT_TYPE, content_type)
        .body(body.into())
        .expect("static response parts are valid")
}

pub fn redirect(status: u16, location: &str) -> HttpResponse {
    let mut resp = response(status, "text/plain; charset=utf-8", Bytes::new());
    match http::HeaderValue::from_str(location) {
        Ok(v) => {
            resp.headers_mut().insert(http::header::LOCATION, v);
        }
        Err(_) => *resp.status_mut() = http::StatusCode::BAD_REQUEST,
    }
    resp
}

pub fn json_response(status: u16, value: &serde_json::Value) -> HttpResponse {
    response(
        status,
        "application/json",
        serde_json::to_vec(value).unwrap_or_default(),
    )
}

pub fn is_health_check(req: &HttpRequest) -> bool {
    req.headers()
        .get(http::header::USER_AGENT)
        .is_some_and(|v| v.as_bytes() == HEALTH_CHECK_USER_AGENT.as_bytes())
}

/// Path plus query, as it appears in a request line.
pub fn path_and_query(req: &HttpRequest) -> String {
    req.uri()
        .path_and_query()
        .map(|pq| pq.as_str().to_string())
        .unwrap_or_else(|| "/".to_string())
}

/// Parses the query string of a request into ordered key/value pairs.
pub fn query_pairs(req: &HttpRequest) -> Vec<(String, String)> {
    req.uri()
        .query()
        .map(|q| form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

pub fn query_param(req: &HttpRequest, name: &str) -> Option<String> {
    query_pairs(req).into_iter().find(|(k, _)| k == name).map(|(_, v)| v)
}

/// Returns the value of a named cookie from every `Cookie` header.
pub fn cookie(headers: &http::HeaderMap, name: &str) -> Option<String> {
    headers
        .get_all(http::header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v.to_string())
}
