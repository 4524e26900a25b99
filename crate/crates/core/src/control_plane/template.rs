use std::collections::{BTreeMap, BTreeSet};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::sim::{ENV_APP, ENV_BASE_URL, ENV_USER};
use crate::backend::{MountBinding, TaskDefinitionRecord};
use crate::lifecycle::CullPolicy;

const USER_PLACEHOLDER: &str = "{user}";
const MAX_USER_ID_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse template: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid template {app:?}: {reason}")]
    Invalid { app: String, reason: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("unsafe user id {0:?}")]
    UnsafeUserId(String),
    #[error("mount {0:?} escapes the shared storage root")]
    PathEscape(String),
}

/// `[a-z0-9_-]{1,32}`: always a single safe path segment.
pub fn validate_user_id(user: &str) -> Result<(), RenderError> {
    let ok = !user.is_empty()
        && user.len() <= MAX_USER_ID_LEN
        && user
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(RenderError::UnsafeUserId(user.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountTemplate {
    /// Relative to the shared storage root; may contain `{user}`.
    pub host: String,
    pub container: String,
    #[serde(default)]
    pub read_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleTemplate {
    /// Opaque permissions document.
    #[serde(default)]
    pub policy: String,
    pub boundary_policy: String,
}

/// Declarative description of one application's per-user stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackTemplate {
    pub app: String,
    #[serde(default)]
    pub display_name: Option<String>,
    pub image: String,
    pub container_port: u16,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    #[serde(default)]
    pub mounts: Vec<MountTemplate>,
    pub health_check_path: String,
    pub expected_status: BTreeSet<u16>,
    pub role: RoleTemplate,
    #[serde(default)]
    pub cull_policy: Option<CullPolicy>,
    /// Files seeded into a new home, relative path to content.
    #[serde(default)]
    pub starter_files: BTreeMap<String, String>,
}

const BUILTIN: [&str; 3] = [
    include_str!("../../templates/jupyter.toml"),
    include_str!("../../templates/rstudio.toml"),
    include_str!("../../templates/vnc.toml"),
];

impl StackTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self, TemplateError> {
        let t: Self = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Every `*.toml` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, TemplateError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }

    /// The Jupyter, RStudio and desktop templates shipped with the crate.
    pub fn builtin() -> Vec<Self> {
        BUILTIN
            .iter()
            .map(|t| Self::from_toml_str(t).expect("built-in templates are valid"))
            .collect()
    }

    pub fn display_name(&self) -> &str {
        self.display_name.as_deref().unwrap_or(&self.app)
    }

    fn invalid(&self, reason: impl Into<String>) -> TemplateError {
        TemplateError::Invalid {
            app: self.app.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.app.is_empty() || !self.app.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()) {
            return Err(self.invalid("application id must be [a-z0-9]+"));
        }
        if self.role.boundary_policy.trim().is_empty() {
            return Err(self.invalid("role boundary policy is mandatory"));
        }
        if !self.health_check_path.starts_with('/') {
            return Err(self.invalid("health check path must be absolute"));
        }
        if self.expected_status.is_empty() {
            return Err(self.invalid("expected_status is empty"));
        }
        if let Some(p) = &self.cull_policy {
            p.validate().map_err(|e| self.invalid(e.to_string()))?;
        }
        for m in &self.mounts {
            if !m.container.starts_with('/') {
                return Err(self.invalid(format!("container path {:?} is not absolute", m.container)));
            }
            safe_relative(&m.host.replace(USER_PLACEHOLDER, "user"))
                .map_err(|_| self.invalid(format!("mount {:?} escapes the storage root", m.host)))?;
        }
        for rel in self.starter_files.keys() {
            safe_relative(rel).map_err(|_| self.invalid(format!("starter file {rel:?} escapes the home")))?;
        }
        Ok(())
    }

    pub fn health_check_path_for(&self, user: &str) -> String {
        self.health_check_path.replace(USER_PLACEHOLDER, user)
    }
}

/// A relative path made only of ordinary components.
pub(crate) fn safe_relative(rel: &str) -> Result<PathBuf, RenderError> {
    let path = Path::new(rel);
    let ok = !rel.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(path.to_path_buf())
    } else {
        Err(RenderError::PathEscape(rel.to_string()))
    }
}

/// Inputs to rendering that come from the deployment rather than the
/// template: the shared storage root and variables added to every task.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RenderContext {
    pub storage_root: PathBuf,
    pub extra_env: BTreeMap<String, String>,
}

/// Substitutes `user` into `template`. Depends on nothing else.
pub fn render_task_definition(
    template: &StackTemplate,
    ctx: &RenderContext,
    user: &str,
) -> Result<TaskDefinitionRecord, RenderError> {
    validate_user_id(user)?;
    let sub = |s: &str| s.replace(USER_PLACEHOLDER, user);

    let mounts = template
        .mounts
        .iter()
        .map(|m| {
            let rel = safe_relative(&sub(&m.host))?;
            Ok(MountBinding {
                host_path: ctx.storage_root.join(rel),
                container_path: sub(&m.container),
                read_only: m.read_only,
            })
        })
        .collect::<Result<Vec<_>, RenderError>>()?;

    let mut environment: BTreeMap<String, String> = ctx.extra_env.clone();
    environment.extend(template.environment.iter().map(|(k, v)| (k.clone(), sub(v))));
    environment.insert(ENV_USER.into(), user.into());
    environment.insert(ENV_APP.into(), template.app.clone());
    environment.insert(ENV_BASE_URL.into(), format!("/{user}/{}/", template.app));

    Ok(TaskDefinitionRecord {
        family: format!("{user}-{}", template.app),
        image: template.image.clone(),
        container_port: template.container_port,
        environment,
        mounts,
        command: None,
        log_stream: format!("workspaces/{user}/{}", template.app),
    })
}
