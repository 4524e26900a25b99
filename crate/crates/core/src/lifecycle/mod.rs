//! Service supervision: reconciles each service's tasks to a desired count
//! of 0 or 1, registers started tasks with their target group, tracks
//! request activity and culls idle services.
//!
//! Culling has two entry points that both end in a desired count of 0: the
//! supervisor's periodic [`Supervisor::cull_scan`] and the application-side
//! [`Supervisor::shutdown_hook`], which lowers the count and only then lets
//! the task exit after a grace period.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AppendSink;
use crate::backend::{BackendError, ContainerBackend, TaskDefinitionRecord, TaskHandle, TaskId, TaskState};
use crate::clock::{self, Clock, Timestamp};
use crate::gateway::ActivityObserver;
use crate::net::TargetAddr;

/// Where running tasks are announced. Implemented by the gateway.
pub trait TargetRegistry: Send + Sync {
    fn register(&self, target_group: &str, addr: TargetAddr) -> Result<(), String>;
    fn deregister(&self, target_group: &str, addr: &TargetAddr) -> Result<(), String>;
    fn is_healthy(&self, target_group: &str, addr: &TargetAddr) -> bool;
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("no such service {0:?}")]
    NoSuchService(String),
    #[error("service {0:?} already exists")]
    ServiceExists(String),
    #[error("desired count must be 0 or 1, got {0}")]
    InvalidCount(u32),
    #[error("invalid cull policy: {0}")]
    InvalidPolicy(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CullPolicy {
    #[serde(with = "clock::duration_secs")]
    pub idle_timeout: Duration,
    #[serde(with = "clock::duration_secs")]
    pub cull_interval: Duration,
    #[serde(with = "clock::duration_secs")]
    pub kernel_cull_timeout: Duration,
    #[serde(with = "clock::duration_secs")]
    pub shell_timeout: Duration,
    /// Delay between the count update and the task's own exit.
    #[serde(with = "clock::duration_secs")]
    pub shutdown_grace: Duration,
}

impl Default for CullPolicy {
    fn default() -> Self {
        Self {
            idle_timeout: Duration::from_secs(30 * 60),
            cull_interval: Duration::from_secs(60),
            kernel_cull_timeout: Duration::from_secs(30 * 60),
            shell_timeout: Duration::from_secs(30 * 60),
            shutdown_grace: Duration::from_secs(120),
        }
    }
}

impl CullPolicy {
    pub fn validate(&self) -> Result<(), LifecycleError> {
        if self.idle_timeout.is_zero() {
            return Err(LifecycleError::InvalidPolicy("idle_timeout must be positive"));
        }
        if self.cull_interval.is_zero() {
            return Err(LifecycleError::InvalidPolicy("cull_interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisorConfig {
    pub default_policy: CullPolicy,
    /// Period of the background reconcile sweep.
    #[serde(with = "clock::duration_secs")]
    pub sweep_interval: Duration,
    #[serde(with = "clock::duration_secs")]
    pub backoff_base: Duration,
    #[serde(with = "clock::duration_secs")]
    pub backoff_max: Duration,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            default_policy: CullPolicy::default(),
            sweep_interval: Duration::from_secs(5),
            backoff_base: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
        }
    }
}

/// What a reconcile pass (or a count change) did to one service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum ServiceEventKind {
    DesiredCount {
        from: u32,
        to: u32,
    },
    Started {
        task: TaskId,
        restart: bool,
    },
    Registered {
        task: TaskId,
        target: TargetAddr,
    },
    Deregistered {
        task: TaskId,
        target: TargetAddr,
    },
    Stopped {
        task: TaskId,
    },
    /// The task ended without being asked to.
    Exited {
        task: TaskId,
    },
    Culled {
        idle_secs: u64,
    },
    StartFailed {
        error: String,
        attempt: u32,
    },
    StopFailed {
        task: TaskId,
        error: String,
    },
    RegistrationFailed {
        task: TaskId,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEvent {
    pub at: Timestamp,
    pub service: String,
    #[serde(flatten)]
    pub kind: ServiceEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrackedTask {
    pub handle: TaskHandle,
    pub registered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSpec {
    pub id: String,
    pub target_group: String,
    pub definition: TaskDefinitionRecord,
    pub policy: Option<CullPolicy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceRecord {
    pub id: String,
    pub target_group: String,
    pub definition: TaskDefinitionRecord,
    pub desired_count: u32,
    pub tasks: Vec<TrackedTask>,
    pub last_activity: Timestamp,
    pub policy: CullPolicy,
    /// Consecutive failed starts; drives the backoff.
    pub start_failures: u32,
    pub retry_at: Option<Timestamp>,
    /// Set when a task ended on its own while the count was 1.
    restart_pending: bool,
}

impl ServiceRecord {
    pub fn running_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn idle_for(&self, now: Timestamp) -> Duration {
        clock::elapsed(self.last_activity, now)
    }
}

/// Timeline produced by the application-side shutdown hook. The caller
/// applies the count update at `count_update_at` and lets the task exit at
/// `exit_at`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShutdownPlan {
    pub service: String,
    pub task: TaskId,
    pub count_update_at: Timestamp,
    pub exit_at: Timestamp,
}

pub struct Supervisor {
    clock: Arc<dyn Clock>,
    backend: Arc<dyn ContainerBackend>,
    registry: Arc<dyn TargetRegistry>,
    events: Arc<dyn AppendSink<ServiceEvent>>,
    config: SupervisorConfig,
    services: RwLock<BTreeMap<String, Arc<Mutex<ServiceRecord>>>>,
    by_group: RwLock<BTreeMap<String, String>>,
}

impl Supervisor {
    pub fn new(
        clock: Arc<dyn Clock>,
        backend: Arc<dyn ContainerBackend>,
        registry: Arc<dyn TargetRegistry>,
        events: Arc<dyn AppendSink<ServiceEvent>>,
        config: SupervisorConfig,
    ) -> Self {
        Self {
            clock,
            backend,
            registry,
            events,
            config,
            services: RwLock::new(BTreeMap::new()),
            by_group: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.config
    }

    fn service(&self, id: &str) -> Result<Arc<Mutex<ServiceRecord>>, LifecycleError> {
        self.services
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| LifecycleError::NoSuchService(id.to_string()))
    }

    fn emit(&self, service: &str, kind: ServiceEventKind) {
        let event = ServiceEvent {
            at: self.clock.now(),
            service: service.to_string(),
            kind,
        };
        if let Err(e) = self.events.append(&event) {
            tracing::error!("service event append failed: {e}");
        }
    }

    /// Adds a service with desired count 0.
    pub fn create_service(&self, spec: ServiceSpec) -> Result<ServiceRecord, LifecycleError> {
        let policy = spec.policy.unwrap_or(self.config.default_policy);
        policy.validate()?;
        let mut services = self.services.write();
        if services.contains_key(&spec.id) {
            return Err(LifecycleError::ServiceExists(spec.id));
        }
        let record = ServiceRecord {
            id: spec.id.clone(),
            target_group: spec.target_group.clone(),
            definition: spec.definition,
            desired_count: 0,
            tasks: Vec::new(),
            last_activity: self.clock.now(),
            policy,
            start_failures: 0,
            retry_at: None,
            restart_pending: false,
        };
        services.insert(spec.id.clone(), Arc::new(Mutex::new(record.clone())));
        self.by_group.write().insert(spec.target_group, spec.id);
        Ok(record)
    }

    /// Stops and deregisters any tasks, then forgets the service.
    pub fn delete_service(&self, id: &str) -> Result<(), LifecycleError> {
        let svc = self.service(id)?;
        let mut rec = svc.lock();
        rec.desired_count = 0;
        let events = self.converge(&mut rec);
        drop(rec);
        for e in events {
            self.emit(id, e);
        }
        let rec = svc.lock();
        if !rec.tasks.is_empty() {
            tracing::warn!(service = id, "deleting service with tasks that failed to stop");
        }
        self.by_group.write().remove(&rec.target_group);
        self.services.write().remove(id);
        Ok(())
    }

    pub fn snapshot(&self, id: &str) -> Result<ServiceRecord, LifecycleError> {
        Ok(self.service(id)?.lock().clone())
    }

    pub fn service_ids(&self) -> Vec<String> {
        self.services.read().keys().cloned().collect()
    }

    pub fn service_for_group(&self, target_group: &str) -> Option<String> {
        self.by_group.read().get(target_group).cloned()
    }

    /// Sets the desired count and reconciles right away.
    pub fn set_desired_count(&self, id: &str, n: u32) -> Result<ServiceRecord, LifecycleError> {
        if n > 1 {
            return Err(LifecycleError::InvalidCount(n));
        }
        let svc = self.service(id)?;
        let mut rec = svc.lock();
        let from = rec.desired_count;
        let mut events = Vec::new();
        if from != n {
            rec.desired_count = n;
            events.push(ServiceEventKind::DesiredCount { from, to: n });
            if n == 1 {
                rec.last_activity = rec.last_activity.max(self.clock.now());
                rec.start_failures = 0;
                rec.retry_at = None;
            } else {
                rec.restart_pending = false;
            }
        }
        events.extend(self.converge(&mut rec));
        let snapshot = rec.clone();
        drop(rec);
        for e in events {
            self.emit(id, e);
        }
        Ok(snapshot)
    }

    pub fn record_activity(&self, id: &str, at: Timestamp) -> Result<Timestamp, LifecycleError> {
        let svc = self.service(id)?;
        let mut rec = svc.lock();
        rec.last_activity = rec.last_activity.max(at);
        Ok(rec.last_activity)
    }

    pub fn is_idle(&self, id: &str, now: Timestamp) -> Result<bool, LifecycleError> {
        let svc = self.service(id)?;
        let rec = svc.lock();
        Ok(rec.idle_for(now) > rec.policy.idle_timeout)
    }

    /// One pass over a single service.
    pub fn reconcile(&self, id: &str) -> Result<Vec<ServiceEventKind>, LifecycleError> {
        let svc = self.service(id)?;
        let mut rec = svc.lock();
        let events = self.converge(&mut rec);
        drop(rec);
        for e in &events {
            self.emit(id, e.clone());
        }
        Ok(events)
    }

    pub fn reconcile_all(&self) -> BTreeMap<String, Vec<ServiceEventKind>> {
        self.service_ids()
            .into_iter()
            .filter_map(|id| {
                let events = self.reconcile(&id).ok()?;
                (!events.is_empty()).then_some((id, events))
            })
            .collect()
    }

    /// Lowers every idle service with desired count 1 to 0.
    pub fn cull_scan(&self, now: Timestamp) -> Vec<String> {
        let mut culled = Vec::new();
        for id in self.service_ids() {
            let Ok(svc) = self.service(&id) else { continue };
            let idle = {
                let rec = svc.lock();
                (rec.desired_count == 1 && rec.idle_for(now) > rec.policy.idle_timeout).then(|| rec.idle_for(now))
            };
            if let Some(idle) = idle {
                self.emit(
                    &id,
                    ServiceEventKind::Culled {
                        idle_secs: idle.as_secs(),
                    },
                );
                if self.set_desired_count(&id, 0).is_ok() {
                    culled.push(id);
                }
            }
        }
        culled
    }

    /// Plans the application-side shutdown: the count update lands after
    /// `api_latency`, the task exits after the policy's grace period.
    pub fn shutdown_hook(&self, id: &str, api_latency: Duration) -> Result<Option<ShutdownPlan>, LifecycleError> {
        let svc = self.service(id)?;
        let rec = svc.lock();
        let now = self.clock.now();
        Ok(rec.tasks.first().map(|t| ShutdownPlan {
            service: id.to_string(),
            task: t.handle.task_id.clone(),
            count_update_at: clock::add(now, api_latency),
            exit_at: clock::add(now, rec.policy.shutdown_grace),
        }))
    }

    /// Earliest pending start retry across all services.
    pub fn next_retry_at(&self) -> Option<Timestamp> {
        self.services
            .read()
            .values()
            .filter_map(|s| {
                let rec = s.lock();
                (rec.desired_count as usize > rec.tasks.len())
                    .then_some(rec.retry_at)
                    .flatten()
            })
            .min()
    }

    /// True when every service has as many tasks as it wants and each of
    /// them is registered.
    pub fn quiescent(&self) -> bool {
        self.services.read().values().all(|s| {
            let rec = s.lock();
            rec.tasks.len() == rec.desired_count as usize && rec.tasks.iter().all(|t| t.registered)
        })
    }

    fn backoff(&self, failures: u32) -> Duration {
        let factor = 1u32.checked_shl(failures.saturating_sub(1).min(16)).unwrap_or(u32::MAX);
        self.config
            .backoff_base
            .saturating_mul(factor)
            .min(self.config.backoff_max)
    }

    fn converge(&self, rec: &mut ServiceRecord) -> Vec<ServiceEventKind> {
        let now = self.clock.now();
        let mut events = Vec::new();

        // Observe the current state of every tracked task.
        let mut kept = Vec::with_capacity(rec.tasks.len());
        for mut t in std::mem::take(&mut rec.tasks) {
            let state = self
                .backend
                .task_status(&t.handle.task_id)
                .unwrap_or(TaskState::Stopped);
            match state {
                TaskState::Stopped => {
                    if t.registered {
                        self.deregister(rec, &t, &mut events);
                    }
                    events.push(ServiceEventKind::Exited {
                        task: t.handle.task_id.clone(),
                    });
                    if rec.desired_count == 1 {
                        rec.restart_pending = true;
                    }
                }
                TaskState::Running => {
                    t.handle.state = TaskState::Running;
                    if !t.registered {
                        match self.registry.register(&rec.target_group, t.handle.addr()) {
                            Ok(()) => {
                                t.registered = true;
                                events.push(ServiceEventKind::Registered {
                                    task: t.handle.task_id.clone(),
                                    target: t.handle.addr(),
                                });
                            }
                            Err(error) => events.push(ServiceEventKind::RegistrationFailed {
                                task: t.handle.task_id.clone(),
                                error,
                            }),
                        }
                    }
                    kept.push(t);
                }
                TaskState::Provisioning => kept.push(t),
            }
        }
        rec.tasks = kept;

        let desired = rec.desired_count as usize;
        if rec.tasks.len() < desired {
            let due = rec.retry_at.is_none_or(|at| at <= now);
            if due {
                match self.backend.run_task(&rec.definition) {
                    Ok(handle) => {
                        rec.start_failures = 0;
                        rec.retry_at = None;
                        events.push(ServiceEventKind::Started {
                            task: handle.task_id.clone(),
                            restart: std::mem::take(&mut rec.restart_pending),
                        });
                        let mut t = TrackedTask {
                            handle,
                            registered: false,
                        };
                        if t.handle.state == TaskState::Running {
                            if let Ok(()) = self.registry.register(&rec.target_group, t.handle.addr()) {
                                t.registered = true;
                                events.push(ServiceEventKind::Registered {
                                    task: t.handle.task_id.clone(),
                                    target: t.handle.addr(),
                                });
                            }
                        }
                        rec.tasks.push(t);
                    }
                    Err(e) => {
                        rec.start_failures += 1;
                        rec.retry_at = Some(clock::add(now, self.backoff(rec.start_failures)));
                        events.push(ServiceEventKind::StartFailed {
                            error: e.to_string(),
                            attempt: rec.start_failures,
                        });
                    }
                }
            }
        }
        while rec.tasks.len() > desired {
            let t = rec.tasks.pop().expect("non-empty");
            if t.registered {
                self.deregister(rec, &t, &mut events);
            }
            match self.backend.stop_task(&t.handle.task_id) {
                Ok(()) | Err(BackendError::AlreadyStopped(_)) | Err(BackendError::NoSuchTask(_)) => {
                    events.push(ServiceEventKind::Stopped {
                        task: t.handle.task_id.clone(),
                    });
                }
                Err(e) => {
                    events.push(ServiceEventKind::StopFailed {
                        task: t.handle.task_id.clone(),
                        error: e.to_string(),
                    });
                    rec.tasks.push(TrackedTask { registered: false, ..t });
                    break;
                }
            }
        }
        events
    }

    fn deregister(&self, rec: &ServiceRecord, t: &TrackedTask, events: &mut Vec<ServiceEventKind>) {
        let target = t.handle.addr();
        if let Err(e) = self.registry.deregister(&rec.target_group, &target) {
            tracing::warn!(service = %rec.id, "deregistration failed: {e}");
        }
        events.push(ServiceEventKind::Deregistered {
            task: t.handle.task_id.clone(),
            target,
        });
    }
}

impl ActivityObserver for Supervisor {
    fn forwarded(&self, target_group: &str, at: Timestamp) {
        if let Some(id) = self.service_for_group(target_group) {
            let _ = self.record_activity(&id, at);
        }
    }
}
