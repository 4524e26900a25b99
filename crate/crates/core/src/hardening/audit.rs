//! Static checks over a deployment description.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::vnc::VNC_INTERNAL_PORT;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeploymentDescription {
    pub listeners: Vec<ListenerSpec>,
    pub roles: Vec<RoleSpec>,
    pub storage: Vec<StorageSpec>,
    pub task_definitions: Vec<TaskDefinitionSpec>,
    pub log_sinks: Vec<LogSinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerSpec {
    pub name: String,
    /// `HTTP` or `HTTPS`, case-insensitive.
    pub protocol: String,
    #[serde(default)]
    pub redirect_to_https: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    #[serde(default)]
    pub boundary_policy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageSpec {
    pub name: String,
    pub encrypted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinitionSpec {
    pub name: String,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    #[serde(default)]
    pub exposed_ports: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSinkSpec {
    pub name: String,
    #[serde(default)]
    pub allow_delete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    InsecureListener,
    RoleWithoutBoundary,
    StorageUnencrypted,
    ProxyEnvMissing,
    VncPortExposed,
    LogSinkDeletable,
}

impl FindingKind {
    pub fn id(self) -> &'static str {
        match self {
            FindingKind::InsecureListener => "insecure-listener",
            FindingKind::RoleWithoutBoundary => "role-without-boundary",
            FindingKind::StorageUnencrypted => "storage-unencrypted",
            FindingKind::ProxyEnvMissing => "proxy-env-missing",
            FindingKind::VncPortExposed => "vnc-port-exposed",
            FindingKind::LogSinkDeletable => "log-sink-deletable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.kind.id(), self.subject, self.detail)
    }
}

const PROXY_VARS: [&str; 3] = ["http_proxy", "https_proxy", "no_proxy"];

/// One finding per violated rule per offending item, in description order.
pub fn audit_deployment(desc: &DeploymentDescription) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |kind, subject: &str, detail: String| {
        findings.push(Finding {
            kind,
            subject: subject.to_string(),
            detail,
        })
    };

    for l in &desc.listeners {
        if l.protocol.eq_ignore_ascii_case("http") && !l.redirect_to_https {
            push(
                FindingKind::InsecureListener,
                &l.name,
                "plain HTTP listener does not redirect to HTTPS".into(),
            );
        }
    }
    for r in &desc.roles {
        if r.boundary_policy.as_deref().is_none_or(str::is_empty) {
            push(
                FindingKind::RoleWithoutBoundary,
                &r.name,
                "role has no boundary policy attached".into(),
            );
        }
    }
    for s in &desc.storage {
        if !s.encrypted {
            push(
                FindingKind::StorageUnencrypted,
                &s.name,
                "persistent storage is not encrypted".into(),
            );
        }
    }
    for t in &desc.task_definitions {
        let missing: Vec<&str> = PROXY_VARS
            .iter()
            .copied()
            .filter(|v| t.environment.get(*v).is_none_or(|x| x.is_empty()))
            .collect();
        if !missing.is_empty() {
            push(
                FindingKind::ProxyEnvMissing,
                &t.name,
                format!("missing {}", missing.join(", ")),
            );
        }
        if t.exposed_ports.contains(&VNC_INTERNAL_PORT) {
            push(
                FindingKind::VncPortExposed,
                &t.name,
                format!("VNC server port {VNC_INTERNAL_PORT} is exposed; expose only the web client port"),
            );
        }
    }
    for s in &desc.log_sinks {
        if s.allow_delete {
            push(
                FindingKind::LogSinkDeletable,
                &s.name,
                "log writer may delete records".into(),
            );
        }
    }
    findings
}
