//! The hub: per-(user, application) workspace stacks built from templates,
//! the three-way connect flow, home provisioning and decommissioning, and
//! the HTTP API the dashboard consumes.
//!
//! A stack is five resources: a role, a target group, a task definition, a
//! service and a listener rule. They are created in that order, rolled back
//! in reverse on failure, and deleted together.

mod api;
mod provisioner;
mod resources;
mod template;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use api::{HubApi, HUB_TARGET_GROUP};
pub use provisioner::{provision_home, ProvisionError, Provisioner};
pub use resources::{Inventory, ResourceKind, ResourceStore, RoleRecord};
pub use template::{
    render_task_definition, validate_user_id, MountTemplate, RenderContext, RenderError, RoleTemplate, StackTemplate,
    TemplateError,
};

use crate::clock::{Clock, Timestamp};
use crate::gateway::{Gateway, ListenerRule, RuleAction, TargetGroupSpec};
use crate::lifecycle::{ServiceSpec, Supervisor};

/// Listener rules for workspaces take priorities from here upwards.
pub const FIRST_USER_RULE_PRIORITY: u32 = 100;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("unknown application {0:?}")]
    UnknownApplication(String),
    #[error("request for {requested:?} does not match verified identity {verified:?}")]
    IdentityMismatch { requested: String, verified: String },
    #[error("unsafe user id {0:?}")]
    UnsafeUserId(String),
    #[error("stack {user}/{app} already exists")]
    StackExists { user: String, app: String },
    #[error("no stack {user}/{app}")]
    NoSuchStack { user: String, app: String },
    #[error("backend failure: {0}")]
    BackendFailure(String),
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::UnknownApplication(_) => "unknown_application",
            ControlError::IdentityMismatch { .. } => "identity_mismatch",
            ControlError::UnsafeUserId(_) => "unsafe_user_id",
            ControlError::StackExists { .. } => "stack_exists",
            ControlError::NoSuchStack { .. } => "no_such_stack",
            ControlError::BackendFailure(_) => "backend_failure",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ControlError::UnknownApplication(_) | ControlError::NoSuchStack { .. } => 404,
            ControlError::IdentityMismatch { .. } => 403,
            ControlError::UnsafeUserId(_) => 400,
            ControlError::StackExists { .. } => 409,
            ControlError::BackendFailure(_) => 502,
        }
    }
}

impl From<RenderError> for ControlError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::UnsafeUserId(u) => ControlError::UnsafeUserId(u),
            other => ControlError::BackendFailure(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackState {
    Active,
    Deleting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkspaceStack {
    pub user: String,
    pub app: String,
    pub role: String,
    pub target_group: String,
    pub task_definition: String,
    pub service: String,
    pub rule_priority: u32,
    pub state: StackState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ConnectOutcome {
    RedirectNow { url: String },
    Starting { poll_url: String },
    ProvisioningThenStarting { poll_url: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkspaceState {
    NotProvisioned,
    Starting,
    Running,
    Culled,
    Deleting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkspaceStatus {
    pub app: String,
    pub display_name: String,
    pub state: WorkspaceState,
    pub url: Option<String>,
    pub last_activity: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    pub storage_root: PathBuf,
    /// Variables added to every workspace task, typically the proxy set.
    pub extra_env: BTreeMap<String, String>,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            storage_root: PathBuf::from("/media"),
            extra_env: BTreeMap::new(),
        }
    }
}

type StackKey = (String, String);

pub struct ControlPlane {
    clock: Arc<dyn Clock>,
    gateway: Arc<Gateway>,
    supervisor: Arc<Supervisor>,
    provisioner: Provisioner,
    resources: ResourceStore,
    render: RenderContext,
    templates: BTreeMap<String, StackTemplate>,
    stacks: RwLock<BTreeMap<StackKey, WorkspaceStack>>,
    locks: Mutex<HashMap<StackKey, Arc<Mutex<()>>>>,
    /// Serializes listener-rule priority allocation.
    priorities: Mutex<()>,
}

/// Resources created so far by a stack under construction.
enum Created {
    Role(String),
    TargetGroup(String),
    TaskDefinition(String),
    Service(String),
    Rule(u32),
}

impl ControlPlane {
    pub fn new(
        config: HubConfig,
        templates: Vec<StackTemplate>,
        clock: Arc<dyn Clock>,
        gateway: Arc<Gateway>,
        supervisor: Arc<Supervisor>,
    ) -> Self {
        Self {
            clock,
            gateway,
            supervisor,
            provisioner: Provisioner::new(config.storage_root.clone()),
            resources: ResourceStore::new(),
            render: RenderContext {
                storage_root: config.storage_root,
                extra_env: config.extra_env,
            },
            templates: templates.into_iter().map(|t| (t.app.clone(), t)).collect(),
            stacks: RwLock::new(BTreeMap::new()),
            locks: Mutex::new(HashMap::new()),
            priorities: Mutex::new(()),
        }
    }

    pub fn resources(&self) -> &ResourceStore {
        &self.resources
    }

    pub fn templates(&self) -> impl Iterator<Item = &StackTemplate> {
        self.templates.values()
    }

    pub fn template(&self, app: &str) -> Result<&StackTemplate, ControlError> {
        self.templates
            .get(app)
            .ok_or_else(|| ControlError::UnknownApplication(app.to_string()))
    }

    pub fn stack(&self, user: &str, app: &str) -> Option<WorkspaceStack> {
        self.stacks.read().get(&(user.to_string(), app.to_string())).cloned()
    }

    pub fn stack_count(&self) -> usize {
        self.stacks.read().len()
    }

    /// Counts every resource kind at its owner.
    pub fn inventory(&self) -> Inventory {
        Inventory {
            roles: self.resources.role_count(),
            target_groups: self.gateway.target_group_ids().len(),
            task_definitions: self.resources.task_definition_count(),
            services: self.supervisor.service_ids().len(),
            listener_rules: self.gateway.rules().len(),
        }
    }

    fn lock(&self, key: &StackKey) -> Arc<Mutex<()>> {
        self.locks.lock().entry(key.clone()).or_default().clone()
    }

    fn check_caller(user: &str, verified: &str) -> Result<(), ControlError> {
        if user != verified {
            return Err(ControlError::IdentityMismatch {
                requested: user.to_string(),
                verified: verified.to_string(),
            });
        }
        validate_user_id(user).map_err(ControlError::from)
    }

    pub fn workspace_url(user: &str, app: &str) -> String {
        format!("/{user}/{app}")
    }

    pub fn poll_url(app: &str) -> String {
        format!("/api/poll/{app}")
    }

    /// Brings up `user`'s workspace for `app` under the three circumstances:
    /// already running, stack present but scaled to zero, or no stack yet.
    pub fn connect(&self, user: &str, app: &str, verified: &str) -> Result<ConnectOutcome, ControlError> {
        Self::check_caller(user, verified)?;
        let template = self.template(app)?.clone();
        let key = (user.to_string(), app.to_string());
        let lock = self.lock(&key);
        let _guard = lock.lock();

        if let Some(stack) = self.stack(user, app) {
            if stack.state == StackState::Deleting {
                return Err(ControlError::BackendFailure("stack is being deleted".into()));
            }
            let svc = self
                .supervisor
                .snapshot(&stack.service)
                .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
            if svc.desired_count == 1 {
                if self.gateway.has_healthy_target(&stack.target_group) {
                    return Ok(ConnectOutcome::RedirectNow {
                        url: Self::workspace_url(user, app),
                    });
                }
                return Ok(ConnectOutcome::Starting {
                    poll_url: Self::poll_url(app),
                });
            }
            self.supervisor
                .set_desired_count(&stack.service, 1)
                .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
            return Ok(ConnectOutcome::Starting {
                poll_url: Self::poll_url(app),
            });
        }

        let stack = self.create_stack(user, &template)?;
        if !self.provisioner.home_exists(user) {
            match self.provisioner.provision_home(user, &template.starter_files) {
                Ok(_) | Err(ProvisionError::AlreadyProvisioned(_)) => {}
                Err(e) => {
                    self.destroy_stack(&stack);
                    self.stacks.write().remove(&key);
                    return Err(ControlError::BackendFailure(e.to_string()));
                }
            }
        }
        self.supervisor
            .set_desired_count(&stack.service, 1)
            .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
        Ok(ConnectOutcome::ProvisioningThenStarting {
            poll_url: Self::poll_url(app),
        })
    }

    /// Creates the five resources with the service at desired count 0.
    pub fn instantiate_stack(&self, user: &str, app: &str) -> Result<WorkspaceStack, ControlError> {
        validate_user_id(user)?;
        let template = self.template(app)?.clone();
        let key = (user.to_string(), app.to_string());
        let lock = self.lock(&key);
        let _guard = lock.lock();
        self.create_stack(user, &template)
    }

    fn create_stack(&self, user: &str, template: &StackTemplate) -> Result<WorkspaceStack, ControlError> {
        let app = template.app.as_str();
        let key = (user.to_string(), app.to_string());
        if self.stacks.read().contains_key(&key) {
            return Err(ControlError::StackExists {
                user: user.into(),
                app: app.into(),
            });
        }
        let definition = render_task_definition(template, &self.render, user)?;
        let base = format!("{user}-{app}");
        let mut created = Vec::new();
        let result = self.create_resources(user, template, &base, definition, &mut created);
        match result {
            Ok(priority) => {
                let stack = WorkspaceStack {
                    user: user.into(),
                    app: app.into(),
                    role: format!("{base}-role"),
                    target_group: base.clone(),
                    task_definition: format!("{base}:1"),
                    service: base,
                    rule_priority: priority,
                    state: StackState::Active,
                };
                self.stacks.write().insert(key, stack.clone());
                tracing::info!(user, app, "stack created");
                Ok(stack)
            }
            Err(e) => {
                for c in created.into_iter().rev() {
                    self.undo(c);
                }
                tracing::warn!(user, app, "stack creation rolled back: {e}");
                Err(e)
            }
        }
    }

    fn fault(&self, kind: ResourceKind) -> Result<(), ControlError> {
        if self.resources.take_fault(kind) {
            return Err(ControlError::BackendFailure(format!("{kind} creation failed")));
        }
        Ok(())
    }

    fn create_resources(
        &self,
        user: &str,
        template: &StackTemplate,
        base: &str,
        definition: crate::backend::TaskDefinitionRecord,
        created: &mut Vec<Created>,
    ) -> Result<u32, ControlError> {
        let exists = |kind: ResourceKind| ControlError::BackendFailure(format!("{kind} {base} already exists"));

        self.fault(ResourceKind::Role)?;
        let role = format!("{base}-role");
        if !self.resources.put_role(RoleRecord {
            id: role.clone(),
            policy: template.role.policy.clone(),
            boundary_policy: template.role.boundary_policy.clone(),
        }) {
            return Err(exists(ResourceKind::Role));
        }
        created.push(Created::Role(role));

        self.fault(ResourceKind::TargetGroup)?;
        self.gateway
            .add_target_group(TargetGroupSpec {
                id: base.to_string(),
                health_check_path: template.health_check_path_for(user),
                expected_status: template.expected_status.clone(),
            })
            .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
        created.push(Created::TargetGroup(base.to_string()));

        self.fault(ResourceKind::TaskDefinition)?;
        let task_definition = format!("{base}:1");
        if !self.resources.put_task_definition(&task_definition, definition.clone()) {
            return Err(exists(ResourceKind::TaskDefinition));
        }
        created.push(Created::TaskDefinition(task_definition));

        self.fault(ResourceKind::Service)?;
        self.supervisor
            .create_service(ServiceSpec {
                id: base.to_string(),
                target_group: base.to_string(),
                definition,
                policy: template.cull_policy,
            })
            .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
        created.push(Created::Service(base.to_string()));

        self.fault(ResourceKind::ListenerRule)?;
        let _alloc = self.priorities.lock();
        let mut priority = FIRST_USER_RULE_PRIORITY;
        for r in self.gateway.rules() {
            if r.priority == priority {
                priority += 1;
            }
        }
        let pattern = format!("{}*", Self::workspace_url(user, &template.app));
        self.gateway
            .add_rule(ListenerRule::new(
                priority,
                pattern,
                RuleAction::AuthenticateThenForward(base.to_string()),
            ))
            .map_err(|e| ControlError::BackendFailure(e.to_string()))?;
        created.push(Created::Rule(priority));
        Ok(priority)
    }

    fn undo(&self, c: Created) {
        let result = match &c {
            Created::Rule(p) => self.gateway.remove_rule(*p).map(|_| ()).map_err(|e| e.to_string()),
            Created::Service(id) => self.supervisor.delete_service(id).map_err(|e| e.to_string()),
            Created::TaskDefinition(id) => {
                self.resources.delete_task_definition(id);
                Ok(())
            }
            Created::TargetGroup(id) => self
                .gateway
                .remove_target_group(id)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            Created::Role(id) => {
                self.resources.delete_role(id);
                Ok(())
            }
        };
        if let Err(e) = result {
            tracing::error!("resource cleanup failed: {e}");
        }
    }

    fn destroy_stack(&self, stack: &WorkspaceStack) {
        for c in [
            Created::Rule(stack.rule_priority),
            Created::Service(stack.service.clone()),
            Created::TaskDefinition(stack.task_definition.clone()),
            Created::TargetGroup(stack.target_group.clone()),
            Created::Role(stack.role.clone()),
        ] {
            self.undo(c);
        }
    }

    /// Stops the workspace and deletes its five resources. The home
    /// directory is kept.
    pub fn decommission(&self, user: &str, app: &str, verified: &str) -> Result<(), ControlError> {
        Self::check_caller(user, verified)?;
        self.template(app)?;
        let key = (user.to_string(), app.to_string());
        let lock = self.lock(&key);
        let _guard = lock.lock();
        let stack = {
            let mut stacks = self.stacks.write();
            let stack = stacks.get_mut(&key).ok_or_else(|| ControlError::NoSuchStack {
                user: user.into(),
                app: app.into(),
            })?;
            stack.state = StackState::Deleting;
            stack.clone()
        };
        self.destroy_stack(&stack);
        self.stacks.write().remove(&key);
        tracing::info!(user, app, "stack decommissioned");
        Ok(())
    }

    pub fn status(&self, user: &str, app: &str) -> Result<WorkspaceStatus, ControlError> {
        let template = self.template(app)?;
        let mut status = WorkspaceStatus {
            app: app.to_string(),
            display_name: template.display_name().to_string(),
            state: WorkspaceState::NotProvisioned,
            url: None,
            last_activity: None,
        };
        let Some(stack) = self.stack(user, app) else {
            return Ok(status);
        };
        if stack.state == StackState::Deleting {
            status.state = WorkspaceState::Deleting;
            return Ok(status);
        }
        let Ok(svc) = self.supervisor.snapshot(&stack.service) else {
            status.state = WorkspaceState::Deleting;
            return Ok(status);
        };
        status.last_activity = Some(svc.last_activity);
        status.state = if svc.desired_count == 0 {
            WorkspaceState::Culled
        } else if self.gateway.has_healthy_target(&stack.target_group) {
            status.url = Some(Self::workspace_url(user, app));
            WorkspaceState::Running
        } else {
            WorkspaceState::Starting
        };
        Ok(status)
    }

    pub fn workspaces(&self, user: &str) -> Vec<WorkspaceStatus> {
        self.templates
            .keys()
            .filter_map(|app| self.status(user, app).ok())
            .collect()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }
}
