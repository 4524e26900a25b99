//! Simulated workspace applications for the in-memory backend.
//!
//! Each one reads its user, base path and mounts from the task definition,
//! validates requests with the matching adapter, and records the time of
//! the last user request (health checks excluded).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;
use rand::RngCore;

use super::guard::{AppAuth, WorkspaceGuard};
use super::jupyter::{jupyter_get_user_token, jupyter_login_get, LoginOutcome};
use super::proxy::{reverse_location, rewrite_prefix};
use super::rstudio::{self, rstudio_auth_signin, rstudio_verify_cookie};
use super::vnc::{vnc_authenticate, VNC_INTERNAL_PORT};
use crate::auth::{extract_oidc_headers, KeyProvider, Verifier};
use crate::backend::{AppFactory, SimApp, TaskContext};
use crate::clock::Timestamp;
use crate::net::{cookie, is_health_check, query_param, redirect, response, HttpRequest, HttpResponse};
use crate::storage::HomeDirectory;

pub const JUPYTER_IMAGE: &str = "workbench/jupyter";
pub const RSTUDIO_IMAGE: &str = "workbench/rstudio";
pub const VNC_IMAGE: &str = "workbench/vnc";

/// Environment variables every workspace task carries.
pub const ENV_USER: &str = "WORKSPACE_USER";
pub const ENV_APP: &str = "WORKSPACE_APP";
pub const ENV_BASE_URL: &str = "BASE_URL";
pub const ENV_COOKIE_KEY_PATH: &str = "RSTUDIO_COOKIE_KEY_PATH";

pub const JUPYTER_HOME: &str = "/home/jovyan";
pub const RSTUDIO_HOME: &str = "/home/rstudio";
pub const VNC_HOME: &str = "/headless";

const JUPYTER_SESSION_COOKIE: &str = "jupyter-session";
const HTML: &str = "text/html; charset=utf-8";
const TEXT: &str = "text/plain; charset=utf-8";

/// Shared settings for the simulated applications.
#[derive(Clone)]
pub struct SimAppConfig {
    pub provider: Arc<dyn KeyProvider>,
    pub verifier: Verifier,
    /// Lifetime of the RStudio session cookie.
    pub cookie_days: i64,
}

impl SimAppConfig {
    pub fn new(provider: Arc<dyn KeyProvider>) -> Self {
        Self {
            provider,
            verifier: Verifier::default(),
            cookie_days: 1,
        }
    }

    fn auth(&self, ctx: &TaskContext, home_path: &str) -> AppAuth {
        let guard = WorkspaceGuard {
            expected_user: ctx.env(ENV_USER).unwrap_or_default().to_string(),
            home: ctx
                .definition
                .host_path_for(home_path)
                .map(|p| HomeDirectory::from_mount(Path::new(p))),
        };
        AppAuth::new(self.verifier, self.provider.clone(), ctx.clock.clone(), guard)
    }
}

fn base_path(ctx: &TaskContext) -> String {
    let base = ctx.env(ENV_BASE_URL).unwrap_or("/");
    base.strip_suffix('/').unwrap_or(base).to_string()
}

#[derive(Default)]
struct Activity(Mutex<Option<Timestamp>>);

impl Activity {
    fn touch(&self, req: &HttpRequest, now: Timestamp) {
        if !is_health_check(req) {
            let mut last = self.0.lock();
            *last = Some(last.map_or(now, |t| t.max(now)));
        }
    }

    fn get(&self) -> Option<Timestamp> {
        *self.0.lock()
    }
}

fn denied(code: &str) -> HttpResponse {
    response(403, TEXT, format!("{code}\n"))
}

/// Notebook server with the replacement login handler.
pub struct JupyterApp {
    base: String,
    auth: AppAuth,
    sessions: Mutex<HashMap<String, String>>,
    activity: Activity,
}

impl JupyterApp {
    pub fn start(ctx: &TaskContext, cfg: &SimAppConfig) -> Self {
        Self {
            base: base_path(ctx),
            auth: cfg.auth(ctx, JUPYTER_HOME),
            sessions: Mutex::new(HashMap::new()),
            activity: Activity::default(),
        }
    }

    fn base_url(&self) -> String {
        format!("{}/", self.base)
    }

    fn current_user(&self, req: &HttpRequest) -> Option<String> {
        let token = cookie(req.headers(), JUPYTER_SESSION_COOKIE)?;
        self.sessions.lock().get(&token).cloned()
    }

    fn login(&self, req: &HttpRequest) -> HttpResponse {
        let headers = extract_oidc_headers(req.headers());
        let current = self.current_user(req);
        let next = query_param(req, "next");
        let decision = jupyter_login_get(
            current.as_deref(),
            &headers,
            &self.base_url(),
            next.as_deref(),
            &self.auth,
        );
        match decision.outcome {
            LoginOutcome::Redirect(url) => {
                let mut resp = redirect(302, &url);
                if let (Some(token), Some(user)) = (decision.session_token, headers.identity) {
                    self.sessions.lock().insert(token.clone(), user);
                    let c = format!(
                        "{JUPYTER_SESSION_COOKIE}={token}; Path={}; Secure; HttpOnly",
                        self.base_url()
                    );
                    if let Ok(v) = http::HeaderValue::from_str(&c) {
                        resp.headers_mut().append(http::header::SET_COOKIE, v);
                    }
                }
                resp
            }
            // Headers that were presented and refused are a denial, not a
            // first visit.
            LoginOutcome::RenderLogin if !headers.is_empty() => response(
                403,
                HTML,
                "<html><body><h1>Sign in</h1><p>Access denied.</p></body></html>",
            ),
            LoginOutcome::RenderLogin => response(200, HTML, "<html><body><h1>Sign in</h1></body></html>"),
        }
    }

    fn protected(&self, req: &HttpRequest, rest: &str) -> HttpResponse {
        let headers = extract_oidc_headers(req.headers());
        let authenticated = match self.current_user(req) {
            Some(user) => self.auth.guard.admit(&user).is_ok(),
            None => jupyter_get_user_token(&headers, &self.auth).is_some(),
        };
        if authenticated {
            return response(200, HTML, format!("<html><body>jupyter {}</body></html>", rest));
        }
        if !headers.is_empty() {
            // The token path could not decide from the cache alone; the
            // login handler will, but only send the browser there if it
            // would succeed.
            if let Err(denial) = self.auth.verify(&headers) {
                return denied(denial.code());
            }
        }
        let next = req.uri().path();
        let target = form_urlencoded::Serializer::new(String::new())
            .append_pair("next", next)
            .finish();
        redirect(302, &format!("{}login?{target}", self.base_url()))
    }
}

impl SimApp for JupyterApp {
    fn handle(&self, req: HttpRequest) -> HttpResponse {
        self.activity.touch(&req, self.auth.clock.now());
        let path = req.uri().path().to_string();
        let Ok(rest) = rewrite_prefix(&self.base, &path) else {
            return response(404, TEXT, "not found\n");
        };
        match rest.trim_start_matches('/') {
            "" => redirect(302, &format!("{}tree", self.base_url())),
            "login" => self.login(&req),
            "logout" => {
                if let Some(token) = cookie(req.headers(), JUPYTER_SESSION_COOKIE) {
                    self.sessions.lock().remove(&token);
                }
                redirect(302, &format!("{}login", self.base_url()))
            }
            other => self.protected(&req, other),
        }
    }

    fn last_activity(&self) -> Option<Timestamp> {
        self.activity.get()
    }
}

/// RStudio Server behind its rewriting proxy, with the sign-in app that
/// issues the session cookie and answers health checks.
pub struct RStudioApp {
    prefix: String,
    auth: AppAuth,
    files: Arc<Mutex<std::collections::BTreeMap<String, Vec<u8>>>>,
    key_path: String,
    cookie_days: i64,
    activity: Activity,
}

impl RStudioApp {
    pub fn start(ctx: &TaskContext, cfg: &SimAppConfig) -> Self {
        let key_path = ctx.env(ENV_COOKIE_KEY_PATH).unwrap_or(rstudio::SECRET_PATH).to_string();
        // The server generates its cookie key at startup.
        let mut secret = vec![0u8; 32];
        rand::thread_rng().fill_bytes(&mut secret);
        ctx.files.lock().insert(key_path.clone(), secret);
        Self {
            prefix: base_path(ctx),
            auth: cfg.auth(ctx, RSTUDIO_HOME),
            files: ctx.files.clone(),
            key_path,
            cookie_days: cfg.cookie_days,
            activity: Activity::default(),
        }
    }

    fn secret(&self) -> Vec<u8> {
        self.files.lock().get(&self.key_path).cloned().unwrap_or_default()
    }

    /// RStudio Server proper, seeing only rewritten paths.
    fn server(&self, req: &HttpRequest, upstream: &str) -> HttpResponse {
        let now = self.auth.clock.now();
        let user = cookie(req.headers(), rstudio::COOKIE_NAME)
            .and_then(|wire| rstudio_verify_cookie(&wire, &self.secret(), now).ok());
        match user {
            Some(u) if u == rstudio::DEFAULT_USERNAME => {
                response(200, HTML, format!("<html><body>rstudio {upstream}</body></html>"))
            }
            _ => {
                let location = format!("http://localhost:8787{}", rstudio::SIGN_IN_PATH);
                redirect(302, &reverse_location(&self.prefix, &location))
            }
        }
    }
}

impl SimApp for RStudioApp {
    fn handle(&self, req: HttpRequest) -> HttpResponse {
        self.activity.touch(&req, self.auth.clock.now());
        let path = req.uri().path().to_string();
        if path == rstudio::PING_PATH {
            return response(200, TEXT, "pong\n");
        }
        let Ok(upstream) = rewrite_prefix(&self.prefix, &path) else {
            return response(404, TEXT, "not found\n");
        };
        match upstream.as_str() {
            rstudio::PING_PATH => response(200, TEXT, "pong\n"),
            rstudio::SIGN_IN_PATH => {
                let headers = extract_oidc_headers(req.headers());
                rstudio_auth_signin(&headers, &self.auth, &self.secret(), &self.prefix, self.cookie_days)
            }
            other => self.server(&req, other),
        }
    }

    fn last_activity(&self) -> Option<Timestamp> {
        self.activity.get()
    }
}

/// noVNC web client with the websockify authentication plugin, in front of
/// a stub VNC server reachable only from inside the task.
pub struct VncApp {
    prefix: String,
    auth: AppAuth,
    activity: Activity,
}

impl VncApp {
    pub fn start(ctx: &TaskContext, cfg: &SimAppConfig) -> Self {
        Self {
            prefix: base_path(ctx),
            auth: cfg.auth(ctx, VNC_HOME),
            activity: Activity::default(),
        }
    }
}

impl SimApp for VncApp {
    fn handle(&self, req: HttpRequest) -> HttpResponse {
        self.activity.touch(&req, self.auth.clock.now());
        let path = req.uri().path().to_string();
        let Ok(rest) = rewrite_prefix(&self.prefix, &path) else {
            return response(404, TEXT, "not found\n");
        };
        match rest.as_str() {
            "/" | "/vnc.html" => response(200, HTML, "<html><body>noVNC</body></html>"),
            "/websockify" => {
                let upgrade = req
                    .headers()
                    .get(http::header::UPGRADE)
                    .is_some_and(|v| v.as_bytes().eq_ignore_ascii_case(b"websocket"));
                if !upgrade {
                    return response(400, TEXT, "websocket upgrade required\n");
                }
                let headers = extract_oidc_headers(req.headers());
                match vnc_authenticate(&headers, "localhost", VNC_INTERNAL_PORT, &self.auth) {
                    Ok(()) => http::Response::builder()
                        .status(101)
                        .header(http::header::UPGRADE, "websocket")
                        .header(http::header::CONNECTION, "Upgrade")
                        .body(Bytes::new())
                        .expect("static response parts are valid"),
                    Err(e) => denied(e.0.code()),
                }
            }
            _ => response(404, TEXT, "not found\n"),
        }
    }

    fn handle_local(&self, port: u16, _request: HttpRequest) -> Option<HttpResponse> {
        (port == VNC_INTERNAL_PORT).then(|| response(200, TEXT, "RFB 003.008\n"))
    }

    fn last_activity(&self) -> Option<Timestamp> {
        self.activity.get()
    }
}

pub fn jupyter_factory(cfg: SimAppConfig) -> Arc<dyn AppFactory> {
    Arc::new(move |ctx: &TaskContext| Arc::new(JupyterApp::start(ctx, &cfg)) as Arc<dyn SimApp>)
}

pub fn rstudio_factory(cfg: SimAppConfig) -> Arc<dyn AppFactory> {
    Arc::new(move |ctx: &TaskContext| Arc::new(RStudioApp::start(ctx, &cfg)) as Arc<dyn SimApp>)
}

pub fn vnc_factory(cfg: SimAppConfig) -> Arc<dyn AppFactory> {
    Arc::new(move |ctx: &TaskContext| Arc::new(VncApp::start(ctx, &cfg)) as Arc<dyn SimApp>)
}

/// Registers the three images with `backend`.
pub fn register_images(backend: &crate::backend::InMemoryBackend, cfg: &SimAppConfig) {
    backend.register_image(JUPYTER_IMAGE, jupyter_factory(cfg.clone()));
    backend.register_image(RSTUDIO_IMAGE, rstudio_factory(cfg.clone()));
    backend.register_image(VNC_IMAGE, vnc_factory(cfg.clone()));
}
