//! Wiring of the whole system over the in-memory backend, plus the
//! scheduler that drives periodic work from the clock: health checks,
//! reconcile sweeps, cull scans, application shutdown hooks and task
//! startup completions.
//!
//! [`Browser`] is a minimal cookie-keeping client for driving the
//! platform the way a user's browser would.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::sim::{register_images, SimAppConfig};
use crate::audit::AppendSink;
use crate::auth::{Verifier, VerifierConfig};
use crate::backend::{BackendConfig, EgressWorld, InMemoryBackend, TaskId};
use crate::clock::{self, Clock, Timestamp, VirtualClock};
use crate::control_plane::{ControlPlane, HubApi, HubConfig, StackTemplate, TemplateError};
use crate::gateway::{AccessLogRecord, Gateway, GatewayConfig, GatewayError, Listener};
use crate::hardening::{proxy_env_map, EgressConfig};
use crate::lifecycle::{ServiceEvent, Supervisor, SupervisorConfig};
use crate::net::{HttpRequest, HttpResponse, TargetAddr};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cannot read platform config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid platform config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub gateway: GatewayConfig,
    pub supervisor: SupervisorConfig,
    pub hub: HubConfig,
    pub backend: BackendConfig,
    pub egress: EgressConfig,
    pub verifier: VerifierConfig,
    /// Install the egress firewall and give every task the proxy variables.
    pub hardened: bool,
    pub hub_address: TargetAddr,
    /// Directory of stack templates; the built-in set when absent.
    pub templates_dir: Option<PathBuf>,
    /// Let simulated applications cull themselves through the shutdown hook.
    pub app_shutdown_hooks: bool,
    /// Time for a desired-count update to take effect at the backend.
    #[serde(with = "clock::duration_secs")]
    pub count_update_latency: Duration,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            gateway: GatewayConfig::default(),
            supervisor: SupervisorConfig::default(),
            hub: HubConfig::default(),
            backend: BackendConfig::default(),
            egress: EgressConfig::default(),
            verifier: VerifierConfig::default(),
            hardened: true,
            hub_address: TargetAddr::new("10.0.0.2", 8000),
            templates_dir: None,
            app_shutdown_hooks: true,
            count_update_latency: Duration::from_secs(1),
        }
    }
}

impl PlatformConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PlatformError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PlatformError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pending {
    CountUpdate { service: String },
    Exit { service: String, task: TaskId },
}

#[derive(Debug)]
struct Schedule {
    next_health: Timestamp,
    next_sweep: Timestamp,
    next_cull: Timestamp,
    pending: Vec<(Timestamp, Pending)>,
}

pub struct Platform {
    config: PlatformConfig,
    clock: Arc<dyn Clock>,
    backend: Arc<InMemoryBackend>,
    gateway: Arc<Gateway>,
    supervisor: Arc<Supervisor>,
    control: Arc<ControlPlane>,
    hub: Arc<HubApi>,
    schedule: Mutex<Schedule>,
}

impl Platform {
    pub fn new(
        config: PlatformConfig,
        clock: Arc<dyn Clock>,
        access_log: Arc<dyn AppendSink<AccessLogRecord>>,
        service_events: Arc<dyn AppendSink<ServiceEvent>>,
    ) -> Result<Self, PlatformError> {
        let templates = match &config.templates_dir {
            Some(dir) => StackTemplate::load_dir(dir)?,
            None => StackTemplate::builtin(),
        };

        let backend = Arc::new(InMemoryBackend::new(clock.clone(), config.backend.clone()));
        let mut hub_config = config.hub.clone();
        if config.hardened {
            backend.set_egress(EgressWorld::hardened(config.egress.clone()));
            let mut env = proxy_env_map(&config.egress);
            env.extend(hub_config.extra_env);
            hub_config.extra_env = env;
        } else {
            backend.set_egress(EgressWorld::unhardened(config.egress.clone()));
        }

        let gateway = Arc::new(Gateway::new(
            config.gateway.clone(),
            clock.clone(),
            backend.clone(),
            access_log,
        ));
        let verifier = Verifier::new(config.verifier);
        let mut app_config = SimAppConfig::new(gateway.key_provider());
        app_config.verifier = verifier;
        register_images(&backend, &app_config);

        let supervisor = Arc::new(Supervisor::new(
            clock.clone(),
            backend.clone(),
            gateway.clone(),
            service_events,
            config.supervisor,
        ));
        gateway.set_activity_observer(supervisor.clone());

        let control = Arc::new(ControlPlane::new(
            hub_config,
            templates,
            clock.clone(),
            gateway.clone(),
            supervisor.clone(),
        ));
        let hub = Arc::new(HubApi::new(
            control.clone(),
            verifier,
            gateway.key_provider(),
            clock.clone(),
        ));
        backend.bind(config.hub_address.clone(), hub.clone());
        HubApi::install_routes(&gateway, config.hub_address.clone())?;

        let now = clock.now();
        let platform = Self {
            schedule: Mutex::new(Schedule {
                next_health: now,
                next_sweep: clock::add(now, config.supervisor.sweep_interval),
                next_cull: clock::add(now, config.supervisor.default_policy.cull_interval),
                pending: Vec::new(),
            }),
            config,
            clock,
            backend,
            gateway,
            supervisor,
            control,
            hub,
        };
        Ok(platform)
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn backend(&self) -> &Arc<InMemoryBackend> {
        &self.backend
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn supervisor(&self) -> &Arc<Supervisor> {
        &self.supervisor
    }

    pub fn control(&self) -> &Arc<ControlPlane> {
        &self.control
    }

    pub fn hub(&self) -> &Arc<HubApi> {
        &self.hub
    }

    /// Serves one request arriving at the gateway.
    pub fn request(&self, listener: Listener, client: &str, req: HttpRequest) -> HttpResponse {
        self.gateway.handle(listener, client, req)
    }

    /// Runs the application-side shutdown hook for `service`: the count
    /// update lands after the configured latency, the task exits after
    /// the policy's grace period.
    pub fn invoke_shutdown_hook(&self, service: &str) -> bool {
        let plan = match self.supervisor.shutdown_hook(service, self.config.count_update_latency) {
            Ok(Some(plan)) => plan,
            _ => return false,
        };
        let mut s = self.schedule.lock();
        if s.pending
            .iter()
            .any(|(_, p)| matches!(p, Pending::Exit { task, .. } if *task == plan.task))
        {
            return false;
        }
        s.pending.push((
            plan.count_update_at,
            Pending::CountUpdate {
                service: service.to_string(),
            },
        ));
        s.pending.push((
            plan.exit_at,
            Pending::Exit {
                service: service.to_string(),
                task: plan.task,
            },
        ));
        true
    }

    /// Earliest time at which there is scheduled work.
    pub fn next_event_at(&self) -> Timestamp {
        let s = self.schedule.lock();
        let mut next = s.next_health.min(s.next_sweep).min(s.next_cull);
        if let Some(t) = s.pending.iter().map(|(t, _)| *t).min() {
            next = next.min(t);
        }
        drop(s);
        if let Some(t) = self.backend.next_ready_at() {
            next = next.min(t);
        }
        if let Some(t) = self.supervisor.next_retry_at() {
            next = next.min(t);
        }
        next
    }

    /// Performs all work due at the current clock reading.
    pub fn run_due(&self) {
        let now = self.clock.now();
        let (health, sweep, cull, due) = {
            let mut s = self.schedule.lock();
            let health = s.next_health <= now;
            if health {
                s.next_health = clock::add(now, self.config.gateway.health.interval);
            }
            let sweep = s.next_sweep <= now;
            if sweep {
                s.next_sweep = clock::add(now, self.config.supervisor.sweep_interval);
            }
            let cull = s.next_cull <= now;
            if cull {
                s.next_cull = clock::add(now, self.config.supervisor.default_policy.cull_interval);
            }
            let (due, later): (Vec<_>, Vec<_>) =
                std::mem::take(&mut s.pending).into_iter().partition(|(t, _)| *t <= now);
            s.pending = later;
            (health, sweep, cull, due)
        };

        let mut due = due;
        due.sort_by_key(|(t, _)| *t);
        for (_, action) in due {
            match action {
                Pending::CountUpdate { service } => {
                    if let Err(e) = self.supervisor.set_desired_count(&service, 0) {
                        tracing::warn!(service, "count update from shutdown hook failed: {e}");
                    }
                }
                Pending::Exit { service, task } => {
                    let _ = self.backend.exit_task(&task);
                    let _ = self.supervisor.reconcile(&service);
                }
            }
        }

        let startups_due = self.backend.next_ready_at().is_some_and(|t| t <= now);
        let retries_due = self.supervisor.next_retry_at().is_some_and(|t| t <= now);
        if sweep || startups_due || retries_due {
            self.supervisor.reconcile_all();
        }
        if cull {
            self.supervisor.cull_scan(now);
            if self.config.app_shutdown_hooks {
                self.run_app_hooks(now);
            }
        }
        if health {
            self.gateway.run_health_checks();
        }
    }

    /// Each running application decides from its own activity record
    /// whether to shut itself down.
    fn run_app_hooks(&self, now: Timestamp) {
        for id in self.supervisor.service_ids() {
            let Ok(rec) = self.supervisor.snapshot(&id) else {
                continue;
            };
            if rec.desired_count != 1 {
                continue;
            }
            let Some(task) = rec.tasks.first() else { continue };
            let Some(app) = self.backend.app(&task.handle.task_id) else {
                continue;
            };
            let last = app
                .last_activity()
                .unwrap_or(task.handle.started_at)
                .max(task.handle.started_at);
            if clock::elapsed(last, now) > rec.policy.idle_timeout {
                self.invoke_shutdown_hook(&id);
            }
        }
    }

    /// Advances `clock` by `by`, performing scheduled work at each event
    /// time along the way.
    pub fn run_for(&self, clock: &VirtualClock, by: Duration) {
        let end = clock::add(clock.now(), by);
        loop {
            self.run_due();
            let next = self.next_event_at();
            if next > end {
                break;
            }
            if next <= clock.now() {
                // Work scheduled for now was just run; step past it.
                clock.advance(Duration::from_millis(1));
            } else {
                clock.set(next);
            }
        }
        clock.set(end);
        self.run_due();
    }

    /// Runs until `done` holds or `limit` elapses; returns whether it held.
    pub fn run_until(&self, clock: &VirtualClock, limit: Duration, mut done: impl FnMut(&Self) -> bool) -> bool {
        let end = clock::add(clock.now(), limit);
        loop {
            self.run_due();
            if done(self) {
                return true;
            }
            let next = self.next_event_at();
            if next > end || clock.now() >= end {
                return false;
            }
            clock.set(next.max(clock::add(clock.now(), Duration::from_millis(1))));
        }
    }
}

/// A cookie jar and redirect-following client against a [`Platform`].
pub struct Browser<'a> {
    platform: &'a Platform,
    client: String,
    host: String,
    cookies: BTreeMap<String, String>,
}

/// The final response of a navigation and how many requests it took.
#[derive(Debug)]
pub struct Navigation {
    pub response: HttpResponse,
    pub requests: usize,
    pub path: String,
}

const MAX_REDIRECTS: usize = 10;

impl<'a> Browser<'a> {
    pub fn new(platform: &'a Platform, client: impl Into<String>) -> Self {
        Self {
            platform,
            client: client.into(),
            host: "workbench.test".into(),
            cookies: BTreeMap::new(),
        }
    }

    pub fn cookies(&self) -> &BTreeMap<String, String> {
        &self.cookies
    }

    pub fn set_cookie(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.cookies.insert(name.into(), value.into());
    }

    fn build(&self, method: &http::Method, path: &str, body: Bytes, extra: &[(&str, &str)]) -> HttpRequest {
        let mut b = http::Request::builder()
            .method(method.clone())
            .uri(path)
            .header(http::header::HOST, &self.host);
        if !self.cookies.is_empty() {
            let c: Vec<String> = self.cookies.iter().map(|(k, v)| format!("{k}={v}")).collect();
            b = b.header(http::header::COOKIE, c.join("; "));
        }
        if method == http::Method::POST && !body.is_empty() {
            b = b.header(http::header::CONTENT_TYPE, "application/x-www-form-urlencoded");
        }
        for (k, v) in extra {
            b = b.header(*k, *v);
        }
        b.body(body).unwrap_or_else(|_| http::Request::new(Bytes::new()))
    }

    fn absorb(&mut self, resp: &HttpResponse) {
        for v in resp.headers().get_all(http::header::SET_COOKIE) {
            let Ok(v) = v.to_str() else { continue };
            let mut parts = v.split(';').map(str::trim);
            let Some((name, value)) = parts.next().and_then(|p| p.split_once('=')) else {
                continue;
            };
            let expired = parts.any(|a| a.eq_ignore_ascii_case("max-age=0"));
            if expired || value.is_empty() {
                self.cookies.remove(name);
            } else {
                self.cookies.insert(name.to_string(), value.to_string());
            }
        }
    }

    /// One request, no redirect following.
    pub fn send(&mut self, method: http::Method, path: &str, body: Bytes, extra: &[(&str, &str)]) -> HttpResponse {
        let req = self.build(&method, path, body, extra);
        let resp = self.platform.request(Listener::Secure, &self.client, req);
        self.absorb(&resp);
        resp
    }

    /// Sends a request and follows same-site redirects.
    pub fn navigate(&mut self, method: http::Method, path: &str, body: Bytes) -> Navigation {
        let mut method = method;
        let mut path = path.to_string();
        let mut body = body;
        let mut requests = 0;
        loop {
            let resp = self.send(method.clone(), &path, body.clone(), &[]);
            requests += 1;
            let status = resp.status().as_u16();
            let location = resp
                .headers()
                .get(http::header::LOCATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|l| self.same_site(l));
            match location {
                Some(next) if matches!(status, 301 | 302 | 303 | 307 | 308) && requests <= MAX_REDIRECTS => {
                    if matches!(status, 301..=303) {
                        method = http::Method::GET;
                        body = Bytes::new();
                    }
                    path = next;
                }
                _ => {
                    return Navigation {
                        response: resp,
                        requests,
                        path,
                    }
                }
            }
        }
    }

    pub fn get(&mut self, path: &str) -> Navigation {
        self.navigate(http::Method::GET, path, Bytes::new())
    }

    pub fn post(&mut self, path: &str) -> Navigation {
        self.navigate(http::Method::POST, path, Bytes::new())
    }

    fn same_site(&self, location: &str) -> Option<String> {
        if location.starts_with('/') && !location.starts_with("//") {
            return Some(location.to_string());
        }
        let rest = location.strip_prefix("https://")?;
        let (host, path) = rest.split_at(rest.find('/').unwrap_or(rest.len()));
        (host == self.host).then(|| {
            if path.is_empty() {
                "/".to_string()
            } else {
                path.to_string()
            }
        })
    }

    /// Signs in through the gateway's login form.
    pub fn login(&mut self, user: &str, password: &str) -> Navigation {
        let body = form_urlencoded::Serializer::new(String::new())
            .append_pair("username", user)
            .append_pair("password", password)
            .append_pair("redirect", "/")
            .finish();
        self.navigate(http::Method::POST, crate::gateway::LOGIN_PATH, Bytes::from(body))
    }
}
