//! The edge gateway: HTTPS enforcement, session authentication against the
//! built-in identity provider, identity-header injection, rule-based
//! routing to health-checked target groups, and the access log.
//!
//! Internal endpoints live under `/oauth2/`: the login form, logout, and the
//! public-key server that verifiers fetch `/oauth2/keys/<kid>` from.

mod log;
mod rules;
mod session;
mod targets;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use log::{AccessLogRecord, AuthOutcome};
pub use rules::{glob_match, match_request, ListenerRule, RuleAction};
pub use session::{Session, SessionStore};
pub use targets::{HealthCheckConfig, TargetGroup, TargetGroupSpec, TargetHealth, TargetStatus};

use crate::adapters::jupyter::redirect_safe;
use crate::audit::AppendSink;
use crate::auth::{
    mint_token, strip_oidc_headers, Algorithm, OidcHeaderSet, SigningKey, StaticKeyProvider, TokenClaims,
};
use crate::clock::{Clock, Timestamp};
use crate::net::{
    cookie, path_and_query, redirect, response, HttpRequest, HttpResponse, TargetAddr, Transport,
    HEALTH_CHECK_USER_AGENT,
};

pub const LOGIN_PATH: &str = "/oauth2/login";
pub const LOGOUT_PATH: &str = "/oauth2/logout";
pub const KEYS_PATH: &str = "/oauth2/keys/";
const INTERNAL_PREFIX: &str = "/oauth2/";
/// Identity tokens are re-minted once less than this much lifetime is left.
const TOKEN_REFRESH_MARGIN: i64 = 120;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("a rule with priority {0} already exists")]
    DuplicatePriority(u32),
    #[error("no rule with priority {0}")]
    NoSuchRule(u32),
    #[error("target group {0:?} already exists")]
    DuplicateGroup(String),
    #[error("no target group {0:?}")]
    NoSuchGroup(String),
    #[error("target group {0:?} is still referenced by a rule")]
    GroupInUse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Listener {
    Secure,
    Insecure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub signing_kid: String,
    pub algorithm: Algorithm,
    #[serde(with = "crate::clock::duration_secs")]
    pub session_idle: Duration,
    #[serde(with = "crate::clock::duration_secs")]
    pub token_lifetime: Duration,
    pub health: HealthCheckConfig,
    pub session_cookie: String,
    /// Accounts of the built-in identity provider: user id to password.
    pub users: BTreeMap<String, String>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            signing_kid: "gateway-key-1".into(),
            algorithm: Algorithm::Es256,
            session_idle: Duration::from_secs(8 * 3600),
            token_lifetime: Duration::from_secs(900),
            health: HealthCheckConfig::default(),
            session_cookie: "workbench-session".into(),
            users: BTreeMap::new(),
        }
    }
}

/// Told about every forwarded request, so idle clocks can be reset.
pub trait ActivityObserver: Send + Sync {
    fn forwarded(&self, target_group: &str, at: Timestamp);
}

/// A change of health state produced by a round of checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HealthChange {
    pub target_group: String,
    pub target: TargetAddr,
    pub from: TargetHealth,
    pub to: TargetHealth,
}

pub struct Gateway {
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    signing_key: SigningKey,
    keys: Arc<StaticKeyProvider>,
    rules: RwLock<Vec<ListenerRule>>,
    groups: RwLock<BTreeMap<String, TargetGroup>>,
    sessions: Mutex<SessionStore>,
    log: Arc<dyn AppendSink<AccessLogRecord>>,
    log_failures: AtomicU64,
    activity: RwLock<Option<Arc<dyn ActivityObserver>>>,
}

impl Gateway {
    pub fn new(
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
        log: Arc<dyn AppendSink<AccessLogRecord>>,
    ) -> Self {
        let signing_key = SigningKey::generate(config.algorithm);
        Self::with_signing_key(config, clock, transport, log, signing_key)
    }

    pub fn with_signing_key(
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn Transport>,
        log: Arc<dyn AppendSink<AccessLogRecord>>,
        signing_key: SigningKey,
    ) -> Self {
        let keys = Arc::new(StaticKeyProvider::new());
        keys.insert(config.signing_kid.clone(), signing_key.public_key_pem());
        Self {
            sessions: Mutex::new(SessionStore::new(config.session_idle)),
            config,
            clock,
            transport,
            signing_key,
            keys,
            rules: RwLock::new(Vec::new()),
            groups: RwLock::new(BTreeMap::new()),
            log,
            log_failures: AtomicU64::new(0),
            activity: RwLock::new(None),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// The key server's contents, usable directly as a key provider.
    pub fn key_provider(&self) -> Arc<StaticKeyProvider> {
        self.keys.clone()
    }

    pub fn set_activity_observer(&self, observer: Arc<dyn ActivityObserver>) {
        *self.activity.write() = Some(observer);
    }

    /// Access-log appends that failed. Requests are served regardless.
    pub fn log_failures(&self) -> u64 {
        self.log_failures.load(Ordering::Relaxed)
    }

    pub fn add_rule(&self, rule: ListenerRule) -> Result<(), GatewayError> {
        let mut rules = self.rules.write();
        match rules.binary_search_by_key(&rule.priority, |r| r.priority) {
            Ok(_) => Err(GatewayError::DuplicatePriority(rule.priority)),
            Err(pos) => {
                rules.insert(pos, rule);
                Ok(())
            }
        }
    }

    pub fn remove_rule(&self, priority: u32) -> Result<ListenerRule, GatewayError> {
        let mut rules = self.rules.write();
        let pos = rules
            .binary_search_by_key(&priority, |r| r.priority)
            .map_err(|_| GatewayError::NoSuchRule(priority))?;
        Ok(rules.remove(pos))
    }

    pub fn rules(&self) -> Vec<ListenerRule> {
        self.rules.read().clone()
    }

    pub fn match_request(&self, host: &str, path: &str) -> Option<ListenerRule> {
        match_request(&self.rules.read(), host, path).cloned()
    }

    pub fn add_target_group(&self, spec: TargetGroupSpec) -> Result<(), GatewayError> {
        let mut groups = self.groups.write();
        if groups.contains_key(&spec.id) {
            return Err(GatewayError::DuplicateGroup(spec.id));
        }
        groups.insert(spec.id.clone(), TargetGroup::new(spec));
        Ok(())
    }

    pub fn remove_target_group(&self, id: &str) -> Result<TargetGroup, GatewayError> {
        if self.rules.read().iter().any(|r| r.action.target_group() == Some(id)) {
            return Err(GatewayError::GroupInUse(id.to_string()));
        }
        self.groups
            .write()
            .remove(id)
            .ok_or_else(|| GatewayError::NoSuchGroup(id.to_string()))
    }

    pub fn target_group(&self, id: &str) -> Option<TargetGroup> {
        self.groups.read().get(id).cloned()
    }

    pub fn target_group_ids(&self) -> Vec<String> {
        self.groups.read().keys().cloned().collect()
    }

    pub fn register_target(&self, group: &str, addr: TargetAddr) -> Result<(), GatewayError> {
        self.groups
            .write()
            .get_mut(group)
            .ok_or_else(|| GatewayError::NoSuchGroup(group.to_string()))?
            .register(addr);
        Ok(())
    }

    pub fn deregister_target(&self, group: &str, addr: &TargetAddr) -> Result<bool, GatewayError> {
        Ok(self
            .groups
            .write()
            .get_mut(group)
            .ok_or_else(|| GatewayError::NoSuchGroup(group.to_string()))?
            .deregister(addr))
    }

    pub fn target_health(&self, group: &str, addr: &TargetAddr) -> Option<TargetHealth> {
        self.groups.read().get(group)?.targets.get(addr).map(|s| s.health)
    }

    pub fn has_healthy_target(&self, group: &str) -> bool {
        self.groups.read().get(group).is_some_and(|g| !g.healthy().is_empty())
    }

    /// One round of checks over every registered target.
    pub fn run_health_checks(&self) -> Vec<HealthChange> {
        let plan: Vec<(String, TargetAddr, String, BTreeSet<u16>)> = self
            .groups
            .read()
            .values()
            .flat_map(|g| {
                g.targets.keys().map(move |addr| {
                    (
                        g.spec.id.clone(),
                        addr.clone(),
                        g.spec.health_check_path.clone(),
                        g.spec.expected_status.clone(),
                    )
                })
            })
            .collect();

        let results: Vec<(String, TargetAddr, bool)> = plan
            .into_iter()
            .map(|(group, addr, path, expected)| {
                let req = http::Request::get(path.as_str())
                    .header(http::header::HOST, addr.to_string())
                    .header(http::header::USER_AGENT, HEALTH_CHECK_USER_AGENT)
                    .body(Bytes::new());
                let passed = match req {
                    Ok(req) => self
                        .transport
                        .send(&addr, req)
                        .map(|resp| expected.contains(&resp.status().as_u16()))
                        .unwrap_or(false),
                    Err(_) => false,
                };
                (group, addr, passed)
            })
            .collect();

        let mut changes = Vec::new();
        let mut groups = self.groups.write();
        for (group, addr, passed) in results {
            let Some(status) = groups.get_mut(&group).and_then(|g| g.targets.get_mut(&addr)) else {
                continue;
            };
            let from = status.health;
            status.record(passed, &self.config.health);
            if status.health != from {
                tracing::info!(target_group = %group, target = %addr, ?from, to = ?status.health, "target health changed");
                changes.push(HealthChange {
                    target_group: group,
                    target: addr,
                    from,
                    to: status.health,
                });
            }
        }
        changes
    }

    /// Opens a session directly, bypassing the login form.
    pub fn create_session(&self, user: &str) -> String {
        self.sessions.lock().create(user, self.clock.now())
    }

    pub fn session_cookie_name(&self) -> &str {
        &self.config.session_cookie
    }

    /// Serves one request and appends exactly one access-log record.
    pub fn handle(&self, listener: Listener, client: &str, req: HttpRequest) -> HttpResponse {
        let now = self.clock.now();
        let host = request_host(&req);
        let mut rec = AccessLogRecord {
            timestamp: now,
            client: client.to_string(),
            method: req.method().to_string(),
            host: host.clone(),
            path: req.uri().path().to_string(),
            rule_priority: None,
            auth: AuthOutcome::NotRequired,
            upstream: None,
            status: 0,
        };
        let resp = self.route(listener, &host, req, now, &mut rec);
        rec.status = resp.status().as_u16();
        if let Err(e) = self.log.append(&rec) {
            self.log_failures.fetch_add(1, Ordering::Relaxed);
            tracing::error!("access log append failed: {e}");
        }
        resp
    }

    fn route(
        &self,
        listener: Listener,
        host: &str,
        req: HttpRequest,
        now: Timestamp,
        rec: &mut AccessLogRecord,
    ) -> HttpResponse {
        if listener == Listener::Insecure {
            return secure_redirect(host, &req);
        }
        if req.uri().path().starts_with(INTERNAL_PREFIX) {
            return self.internal(req, now, rec);
        }
        let Some(rule) = self.match_request(strip_port(host), req.uri().path()) else {
            return response(404, "text/plain; charset=utf-8", "not found\n");
        };
        rec.rule_priority = Some(rule.priority);
        match rule.action {
            RuleAction::RedirectToSecure => secure_redirect(host, &req),
            RuleAction::Forward(group) => self.forward(&group, req, None, now, rec),
            RuleAction::PublicForward(group) => {
                let identity = self.session_identity(&req, now);
                if identity.is_some() {
                    rec.auth = AuthOutcome::Success;
                }
                self.forward(&group, req, identity, now, rec)
            }
            RuleAction::AuthenticateThenForward(group) => match self.session_identity(&req, now) {
                Some(identity) => {
                    rec.auth = AuthOutcome::Success;
                    self.forward(&group, req, Some(identity), now, rec)
                }
                None => {
                    rec.auth = AuthOutcome::Failure("no-session".into());
                    let back = form_urlencoded::Serializer::new(String::new())
                        .append_pair("redirect", &path_and_query(&req))
                        .finish();
                    redirect(302, &format!("{LOGIN_PATH}?{back}"))
                }
            },
        }
    }

    /// Headers for the request's session, minting a fresh identity token
    /// when the cached one is close to expiry.
    fn session_identity(&self, req: &HttpRequest, now: Timestamp) -> Option<OidcHeaderSet> {
        let id = cookie(req.headers(), &self.config.session_cookie)?;
        let mut sessions = self.sessions.lock();
        let session = sessions.touch(&id, now)?;
        let fresh = session
            .token
            .as_ref()
            .filter(|(_, exp)| exp - now.timestamp() > TOKEN_REFRESH_MARGIN)
            .map(|(t, _)| t.clone());
        let token = match fresh {
            Some(t) => t,
            None => {
                let lifetime = i64::try_from(self.config.token_lifetime.as_secs()).unwrap_or(i64::MAX);
                let exp = now.timestamp().saturating_add(lifetime);
                let claims = TokenClaims::new(session.user.clone(), exp).with("iss", "workbench-gateway");
                let t = mint_token(&self.signing_key, &claims, &self.config.signing_kid).ok()?;
                session.token = Some((t.clone(), exp));
                t
            }
        };
        Some(OidcHeaderSet {
            access_token: Some(session.access_token.clone()),
            identity: Some(session.user.clone()),
            data: Some(token),
        })
    }

    fn forward(
        &self,
        group: &str,
        mut req: HttpRequest,
        identity: Option<OidcHeaderSet>,
        now: Timestamp,
        rec: &mut AccessLogRecord,
    ) -> HttpResponse {
        strip_oidc_headers(req.headers_mut());
        strip_cookie(req.headers_mut(), &self.config.session_cookie);
        if let Some(identity) = &identity {
            identity.apply_to(req.headers_mut());
        }
        let target = self.groups.write().get_mut(group).and_then(TargetGroup::pick);
        let Some(target) = target else {
            return response(503, "text/plain; charset=utf-8", "no healthy targets\n");
        };
        rec.upstream = Some(target.clone());
        if let Some(observer) = self.activity.read().clone() {
            observer.forwarded(group, now);
        }
        match self.transport.send(&target, req) {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if rec.auth == AuthOutcome::Success && (status == 401 || status == 403) {
                    rec.auth = AuthOutcome::Failure("upstream-denied".into());
                }
                resp
            }
            Err(e) => {
                tracing::warn!("upstream failure: {e}");
                response(502, "text/plain; charset=utf-8", "bad gateway\n")
            }
        }
    }

    fn internal(&self, req: HttpRequest, now: Timestamp, rec: &mut AccessLogRecord) -> HttpResponse {
        let path = req.uri().path().to_string();
        if let Some(kid) = path.strip_prefix(KEYS_PATH) {
            return match self.keys.get(kid) {
                Some(pem) if req.method() == http::Method::GET => response(200, "text/plain; charset=utf-8", pem),
                Some(_) => response(405, "text/plain; charset=utf-8", "method not allowed\n"),
                None => response(404, "text/plain; charset=utf-8", "no such key\n"),
            };
        }
        match (req.method().as_str(), path.as_str()) {
            ("GET", LOGIN_PATH) => {
                let back = redirect_safe(crate::net::query_param(&req, "redirect").as_deref(), "/");
                response(200, "text/html; charset=utf-8", login_form(&back))
            }
            ("POST", LOGIN_PATH) => {
                let form: BTreeMap<String, String> = form_urlencoded::parse(req.body()).into_owned().collect();
                let user = form.get("username").map(String::as_str).unwrap_or("");
                let password = form.get("password").map(String::as_str).unwrap_or("");
                let known = self.config.users.get(user).is_some_and(|p| p == password);
                if !known {
                    rec.auth = AuthOutcome::Failure("bad-credentials".into());
                    return response(401, "text/html; charset=utf-8", login_form("/"));
                }
                rec.auth = AuthOutcome::Success;
                let id = self.sessions.lock().create(user, now);
                let back = redirect_safe(form.get("redirect").map(String::as_str), "/");
                let mut resp = redirect(302, &back);
                let c = format!(
                    "{}={id}; Path=/; Secure; HttpOnly; SameSite=Lax",
                    self.config.session_cookie
                );
                if let Ok(v) = http::HeaderValue::from_str(&c) {
                    resp.headers_mut().append(http::header::SET_COOKIE, v);
                }
                resp
            }
            (_, LOGOUT_PATH) => {
                if let Some(id) = cookie(req.headers(), &self.config.session_cookie) {
                    self.sessions.lock().remove(&id);
                }
                let mut resp = redirect(302, "/");
                let c = format!("{}=; Path=/; Max-Age=0; Secure; HttpOnly", self.config.session_cookie);
                if let Ok(v) = http::HeaderValue::from_str(&c) {
                    resp.headers_mut().append(http::header::SET_COOKIE, v);
                }
                resp
            }
            _ => response(404, "text/plain; charset=utf-8", "not found\n"),
        }
    }
}

fn login_form(back: &str) -> String {
    let back = back.replace('&', "&amp;").replace('"', "&quot;").replace('<', "&lt;");
    format!(
        "<!doctype html><html><body><form method=\"post\" action=\"{LOGIN_PATH}\">\
         <input name=\"username\"><input name=\"password\" type=\"password\">\
         <input type=\"hidden\" name=\"redirect\" value=\"{back}\">\
         <button type=\"submit\">Sign in</button></form></body></html>"
    )
}

fn request_host(req: &HttpRequest) -> String {
    req.headers()
        .get(http::header::HOST)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or_else(|| req.uri().authority().map(|a| a.to_string()))
        .unwrap_or_default()
}

fn strip_port(host: &str) -> &str {
    match host.rsplit_once(':') {
        Some((h, port)) if port.chars().all(|c| c.is_ascii_digit()) && !h.ends_with(']') || host.starts_with('[') => {
            if host.starts_with('[') {
                host.split_once(']').map(|(h, _)| &h[1..]).unwrap_or(host)
            } else {
                h
            }
        }
        _ => host,
    }
}

fn secure_redirect(host: &str, req: &HttpRequest) -> HttpResponse {
    redirect(301, &format!("https://{}{}", strip_port(host), path_and_query(req)))
}

fn strip_cookie(headers: &mut http::HeaderMap, name: &str) {
    let kept: Vec<String> = headers
        .get_all(http::header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .map(str::trim)
        .filter(|pair| !pair.is_empty() && pair.split_once('=').map(|(k, _)| k) != Some(name))
        .map(str::to_string)
        .collect();
    headers.remove(http::header::COOKIE);
    if !kept.is_empty() {
        if let Ok(v) = http::HeaderValue::from_str(&kept.join("; ")) {
            headers.insert(http::header::COOKIE, v);
        }
    }
}

impl crate::lifecycle::TargetRegistry for Gateway {
    fn register(&self, target_group: &str, addr: TargetAddr) -> Result<(), String> {
        self.register_target(target_group, addr).map_err(|e| e.to_string())
    }

    fn deregister(&self, target_group: &str, addr: &TargetAddr) -> Result<(), String> {
        self.deregister_target(target_group, addr)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn is_healthy(&self, target_group: &str, addr: &TargetAddr) -> bool {
        self.target_health(target_group, addr) == Some(TargetHealth::Healthy)
    }
}
