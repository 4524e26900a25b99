//! Container backend interface and its in-memory implementation.
//!
//! [`ContainerBackend`] is the whole surface the lifecycle supervisor uses;
//! a real cloud backend would implement only these three calls. The
//! [`InMemoryBackend`] runs simulated applications in-process and doubles as
//! the network [`Transport`](crate::net::Transport) that reaches them.

mod egress;
mod memory;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub use egress::{EgressOutcome, EgressWorld, ExternalHost};
pub use memory::{AppFactory, BackendConfig, ExitKind, InMemoryBackend, SimApp, TaskContext};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountBinding {
    pub host_path: PathBuf,
    pub container_path: String,
    #[serde(default)]
    pub read_only: bool,
}

/// Recipe for one task: image, single container port, environment, mounts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinitionRecord {
    pub family: String,
    pub image: String,
    pub container_port: u16,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    #[serde(default)]
    pub mounts: Vec<MountBinding>,
    #[serde(default)]
    pub command: Option<Vec<String>>,
    pub log_stream: String,
}

impl TaskDefinitionRecord {
    /// Host side of the mount at `container_path`, if any.
    pub fn host_path_for(&self, container_path: &str) -> Option<&PathBuf> {
        self.mounts
            .iter()
            .find(|m| m.container_path == container_path)
            .map(|m| &m.host_path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Provisioning,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHandle {
    pub task_id: TaskId,
    pub host: String,
    pub mapped_port: u16,
    pub state: TaskState,
    pub started_at: Timestamp,
}

impl TaskHandle {
    pub fn addr(&self) -> crate::net::TargetAddr {
        crate::net::TargetAddr::new(self.host.clone(), self.mapped_port)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("no free host port")]
    PortExhaustion,
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("task {0} already stopped")]
    AlreadyStopped(TaskId),
    #[error("no such task {0}")]
    NoSuchTask(TaskId),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

pub trait ContainerBackend: Send + Sync {
    fn run_task(&self, def: &TaskDefinitionRecord) -> Result<TaskHandle, BackendError>;
    fn stop_task(&self, task: &TaskId) -> Result<(), BackendError>;
    fn task_status(&self, task: &TaskId) -> Result<TaskState, BackendError>;
}

impl<T: ContainerBackend + ?Sized> ContainerBackend for Arc<T> {
    fn run_task(&self, def: &TaskDefinitionRecord) -> Result<TaskHandle, BackendError> {
        (**self).run_task(def)
    }

    fn stop_task(&self, task: &TaskId) -> Result<(), BackendError> {
        (**self).stop_task(task)
    }

    fn task_status(&self, task: &TaskId) -> Result<TaskState, BackendError> {
        (**self).task_status(task)
    }
}
