use std::collections::BTreeMap;
use std::fmt;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::backend::TaskDefinitionRecord;

/// The five resources that make up one workspace stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceKind {
    Role,
    TargetGroup,
    TaskDefinition,
    Service,
    ListenerRule,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Role => "role",
            ResourceKind::TargetGroup => "target group",
            ResourceKind::TaskDefinition => "task definition",
            ResourceKind::Service => "service",
            ResourceKind::ListenerRule => "listener rule",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRecord {
    pub id: String,
    pub policy: String,
    pub boundary_policy: String,
}

/// Counts of every resource kind, taken from the component that owns it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Inventory {
    pub roles: usize,
    pub target_groups: usize,
    pub task_definitions: usize,
    pub services: usize,
    pub listener_rules: usize,
}

/// Roles and registered task definitions, plus injectable create failures
/// for every resource kind.
#[derive(Debug, Default)]
pub struct ResourceStore {
    roles: Mutex<BTreeMap<String, RoleRecord>>,
    task_definitions: Mutex<BTreeMap<String, TaskDefinitionRecord>>,
    faults: Mutex<BTreeMap<ResourceKind, u32>>,
}

impl ResourceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the next `n` creations of `kind` fail.
    pub fn fail_next(&self, kind: ResourceKind, n: u32) {
        *self.faults.lock().entry(kind).or_default() += n;
    }

    /// Consumes one pending fault for `kind`, if any.
    pub(crate) fn take_fault(&self, kind: ResourceKind) -> bool {
        let mut faults = self.faults.lock();
        match faults.get_mut(&kind) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }

    pub(crate) fn put_role(&self, role: RoleRecord) -> bool {
        let mut roles = self.roles.lock();
        if roles.contains_key(&role.id) {
            return false;
        }
        roles.insert(role.id.clone(), role);
        true
    }

    pub(crate) fn delete_role(&self, id: &str) -> bool {
        self.roles.lock().remove(id).is_some()
    }

    pub fn role(&self, id: &str) -> Option<RoleRecord> {
        self.roles.lock().get(id).cloned()
    }

    pub(crate) fn put_task_definition(&self, id: &str, def: TaskDefinitionRecord) -> bool {
        let mut defs = self.task_definitions.lock();
        if defs.contains_key(id) {
            return false;
        }
        defs.insert(id.to_string(), def);
        true
    }

    pub(crate) fn delete_task_definition(&self, id: &str) -> bool {
        self.task_definitions.lock().remove(id).is_some()
    }

    pub fn task_definition(&self, id: &str) -> Option<TaskDefinitionRecord> {
        self.task_definitions.lock().get(id).cloned()
    }

    pub fn role_count(&self) -> usize {
        self.roles.lock().len()
    }

    pub fn task_definition_count(&self) -> usize {
        self.task_definitions.lock().len()
    }
}
