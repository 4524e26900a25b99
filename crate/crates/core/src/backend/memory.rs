use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::egress::{EgressOutcome, EgressWorld};
use super::{BackendError, ContainerBackend, TaskDefinitionRecord, TaskHandle, TaskId, TaskState};
use crate::clock::{self, Clock, Timestamp};
use crate::hardening::EgressConfig;
use crate::net::{HttpHandler, HttpRequest, HttpResponse, TargetAddr, Transport, TransportError};

/// A workspace application running inside a simulated task.
pub trait SimApp: Send + Sync {
    fn handle(&self, request: HttpRequest) -> HttpResponse;

    /// A connection made from inside the task to one of its own ports.
    fn handle_local(&self, _port: u16, _request: HttpRequest) -> Option<HttpResponse> {
        None
    }

    /// Time of the last user request the application served, if tracked.
    fn last_activity(&self) -> Option<Timestamp> {
        None
    }
}

/// Starts the application for one image id.
pub trait AppFactory: Send + Sync {
    fn start(&self, ctx: &TaskContext) -> Arc<dyn SimApp>;
}

impl<F> AppFactory for F
where
    F: Fn(&TaskContext) -> Arc<dyn SimApp> + Send + Sync,
{
    fn start(&self, ctx: &TaskContext) -> Arc<dyn SimApp> {
        self(ctx)
    }
}

/// What a starting application sees of its task.
#[derive(Clone)]
pub struct TaskContext {
    pub task_id: TaskId,
    pub definition: TaskDefinitionRecord,
    pub host: String,
    pub mapped_port: u16,
    pub clock: Arc<dyn Clock>,
    /// Files private to the task, keyed by absolute container path.
    pub files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl TaskContext {
    pub fn env(&self, name: &str) -> Option<&str> {
        self.definition.environment.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Address every task's mapped port is published on.
    pub host: String,
    pub port_range: RangeInclusive<u16>,
    #[serde(with = "crate::clock::duration_secs")]
    pub startup_delay: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            host: "10.0.1.10".into(),
            port_range: 32768..=61000,
            startup_delay: Duration::from_millis(500),
        }
    }
}

/// How a task came to be stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    /// Stopped through the backend interface.
    Stopped,
    /// The application exited on its own.
    Exited,
    /// Killed abruptly.
    Killed,
}

struct SimTask {
    handle: TaskHandle,
    ready_at: Timestamp,
    app: Arc<dyn SimApp>,
    ctx: TaskContext,
    exit: Option<(ExitKind, Timestamp)>,
}

impl SimTask {
    fn state(&self, now: Timestamp) -> TaskState {
        if self.exit.is_some() {
            TaskState::Stopped
        } else if now >= self.ready_at {
            TaskState::Running
        } else {
            TaskState::Provisioning
        }
    }

    fn snapshot(&self, now: Timestamp) -> TaskHandle {
        TaskHandle {
            state: self.state(now),
            ..self.handle.clone()
        }
    }
}

struct State {
    tasks: BTreeMap<TaskId, SimTask>,
    free_ports: BTreeSet<u16>,
    next_id: u64,
    failing_runs: u32,
}

/// Runs simulated applications in-process.
///
/// Also the network: [`Transport::send`] reaches a task through its mapped
/// port only while it is Running, and reaches fixed endpoints such as the hub
/// through [`bind`](Self::bind).
pub struct InMemoryBackend {
    clock: Arc<dyn Clock>,
    config: BackendConfig,
    images: RwLock<HashMap<String, Arc<dyn AppFactory>>>,
    state: Mutex<State>,
    statics: RwLock<HashMap<TargetAddr, Arc<dyn HttpHandler>>>,
    egress: RwLock<EgressWorld>,
    hits: Mutex<HashMap<TargetAddr, u64>>,
}

impl InMemoryBackend {
    pub fn new(clock: Arc<dyn Clock>, config: BackendConfig) -> Self {
        let free_ports = config.port_range.clone().collect();
        Self {
            clock,
            config,
            images: RwLock::new(HashMap::new()),
            state: Mutex::new(State {
                tasks: BTreeMap::new(),
                free_ports,
                next_id: 1,
                failing_runs: 0,
            }),
            statics: RwLock::new(HashMap::new()),
            egress: RwLock::new(EgressWorld::hardened(EgressConfig::default())),
            hits: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn register_image(&self, image: impl Into<String>, factory: Arc<dyn AppFactory>) {
        self.images.write().insert(image.into(), factory);
    }

    /// Serves `handler` at a fixed address.
    pub fn bind(&self, addr: TargetAddr, handler: Arc<dyn HttpHandler>) {
        self.statics.write().insert(addr, handler);
    }

    pub fn unbind(&self, addr: &TargetAddr) {
        self.statics.write().remove(addr);
    }

    pub fn set_egress(&self, world: EgressWorld) {
        *self.egress.write() = world;
    }

    /// The next `n` calls to `run_task` fail as if the backend were down.
    pub fn fail_next_runs(&self, n: u32) {
        self.state.lock().failing_runs = n;
    }

    /// Abrupt termination, as from an out-of-memory kill.
    pub fn kill_task(&self, task: &TaskId) -> Result<(), BackendError> {
        self.terminate(task, ExitKind::Killed)
    }

    /// The application process exits by itself.
    pub fn exit_task(&self, task: &TaskId) -> Result<(), BackendError> {
        self.terminate(task, ExitKind::Exited)
    }

    pub fn exit_kind(&self, task: &TaskId) -> Option<ExitKind> {
        self.state.lock().tasks.get(task).and_then(|t| t.exit.map(|(k, _)| k))
    }

    pub fn task(&self, task: &TaskId) -> Option<TaskHandle> {
        let now = self.clock.now();
        self.state.lock().tasks.get(task).map(|t| t.snapshot(now))
    }

    pub fn definition(&self, task: &TaskId) -> Option<TaskDefinitionRecord> {
        self.state.lock().tasks.get(task).map(|t| t.ctx.definition.clone())
    }

    pub fn app(&self, task: &TaskId) -> Option<Arc<dyn SimApp>> {
        self.state.lock().tasks.get(task).map(|t| t.app.clone())
    }

    /// Tasks not yet stopped.
    pub fn live_tasks(&self) -> Vec<TaskHandle> {
        let now = self.clock.now();
        self.state
            .lock()
            .tasks
            .values()
            .filter(|t| t.exit.is_none())
            .map(|t| t.snapshot(now))
            .collect()
    }

    pub fn live_port_count(&self) -> usize {
        let st = self.state.lock();
        self.config.port_range.clone().count() - st.free_ports.len()
    }

    /// Earliest time a provisioning task becomes Running.
    pub fn next_ready_at(&self) -> Option<Timestamp> {
        let now = self.clock.now();
        self.state
            .lock()
            .tasks
            .values()
            .filter(|t| t.exit.is_none() && t.ready_at > now)
            .map(|t| t.ready_at)
            .min()
    }

    /// Number of requests delivered to `addr`.
    pub fn hits(&self, addr: &TargetAddr) -> u64 {
        self.hits.lock().get(addr).copied().unwrap_or(0)
    }

    /// A connection from outside the task straight to one of its container
    /// ports. Only the published container port is reachable.
    pub fn connect_container_port(
        &self,
        task: &TaskId,
        container_port: u16,
        request: HttpRequest,
    ) -> Result<HttpResponse, TransportError> {
        let (addr, app) = {
            let now = self.clock.now();
            let st = self.state.lock();
            let t = st.tasks.get(task).ok_or_else(|| {
                TransportError::ConnectionRefused(TargetAddr::new(self.config.host.clone(), container_port))
            })?;
            let addr = t.handle.addr();
            if container_port != t.ctx.definition.container_port || t.state(now) != TaskState::Running {
                return Err(TransportError::ConnectionRefused(TargetAddr::new(
                    t.handle.host.clone(),
                    container_port,
                )));
            }
            (addr, t.app.clone())
        };
        self.count_hit(&addr);
        Ok(app.handle(request))
    }

    /// A connection from inside the task to one of its own ports.
    pub fn connect_local(
        &self,
        task: &TaskId,
        port: u16,
        request: HttpRequest,
    ) -> Result<HttpResponse, TransportError> {
        let (app, published) = {
            let st = self.state.lock();
            let t = st
                .tasks
                .get(task)
                .filter(|t| t.exit.is_none())
                .ok_or_else(|| TransportError::ConnectionRefused(TargetAddr::new("localhost", port)))?;
            (t.app.clone(), t.ctx.definition.container_port)
        };
        if port == published {
            return Ok(app.handle(request));
        }
        app.handle_local(port, request)
            .ok_or_else(|| TransportError::ConnectionRefused(TargetAddr::new("localhost", port)))
    }

    /// Attempts an outbound connection to `url` from inside `task`.
    pub fn egress_probe(&self, task: &TaskId, url: &str) -> Result<EgressOutcome, BackendError> {
        let env = self
            .state
            .lock()
            .tasks
            .get(task)
            .filter(|t| t.exit.is_none())
            .map(|t| t.ctx.definition.environment.clone())
            .ok_or_else(|| BackendError::NoSuchTask(task.clone()))?;
        Ok(self.egress.read().probe(&env, url))
    }

    fn terminate(&self, task: &TaskId, kind: ExitKind) -> Result<(), BackendError> {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let t = st
            .tasks
            .get_mut(task)
            .ok_or_else(|| BackendError::NoSuchTask(task.clone()))?;
        if t.exit.is_some() {
            return Err(BackendError::AlreadyStopped(task.clone()));
        }
        t.exit = Some((kind, now));
        let port = t.handle.mapped_port;
        st.free_ports.insert(port);
        tracing::debug!(task = %task, ?kind, "task stopped");
        Ok(())
    }

    fn count_hit(&self, addr: &TargetAddr) {
        *self.hits.lock().entry(addr.clone()).or_default() += 1;
    }
}

impl ContainerBackend for InMemoryBackend {
    fn run_task(&self, def: &TaskDefinitionRecord) -> Result<TaskHandle, BackendError> {
        let factory = self
            .images
            .read()
            .get(&def.image)
            .cloned()
            .ok_or_else(|| BackendError::UnknownImage(def.image.clone()))?;
        let now = self.clock.now();
        let ctx = {
            let mut st = self.state.lock();
            if st.failing_runs > 0 {
                st.failing_runs -= 1;
                return Err(BackendError::Unavailable("injected run failure".into()));
            }
            let port = st.free_ports.pop_first().ok_or(BackendError::PortExhaustion)?;
            let id = TaskId(format!("task-{:06}", st.next_id));
            st.next_id += 1;
            TaskContext {
                task_id: id,
                definition: def.clone(),
                host: self.config.host.clone(),
                mapped_port: port,
                clock: self.clock.clone(),
                files: Arc::new(Mutex::new(BTreeMap::new())),
            }
        };
        // The factory may be arbitrary code; run it without the state lock.
        let app = factory.start(&ctx);
        let handle = TaskHandle {
            task_id: ctx.task_id.clone(),
            host: ctx.host.clone(),
            mapped_port: ctx.mapped_port,
            state: TaskState::Provisioning,
            started_at: now,
        };
        let task = SimTask {
            handle: handle.clone(),
            ready_at: clock::add(now, self.config.startup_delay),
            app,
            ctx,
            exit: None,
        };
        let snapshot = task.snapshot(now);
        self.state.lock().tasks.insert(handle.task_id.clone(), task);
        tracing::debug!(task = %handle.task_id, image = %def.image, port = handle.mapped_port, "task started");
        Ok(snapshot)
    }

    fn stop_task(&self, task: &TaskId) -> Result<(), BackendError> {
        self.terminate(task, ExitKind::Stopped)
    }

    fn task_status(&self, task: &TaskId) -> Result<TaskState, BackendError> {
        let now = self.clock.now();
        self.state
            .lock()
            .tasks
            .get(task)
            .map(|t| t.state(now))
            .ok_or_else(|| BackendError::NoSuchTask(task.clone()))
    }
}

impl Transport for InMemoryBackend {
    fn send(&self, target: &TargetAddr, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        if let Some(handler) = self.statics.read().get(target).cloned() {
            self.count_hit(target);
            return Ok(handler.handle(request));
        }
        let app = {
            let now = self.clock.now();
            let st = self.state.lock();
            st.tasks
                .values()
                .find(|t| {
                    t.handle.host == target.host
                        && t.handle.mapped_port == target.port
                        && t.state(now) == TaskState::Running
                })
                .map(|t| t.app.clone())
        };
        match app {
            Some(app) => {
                self.count_hit(target);
                Ok(app.handle(request))
            }
            None => Err(TransportError::ConnectionRefused(target.clone())),
        }
    }
}
