use std::collections::BTreeMap;
use std::fs::{self, OpenOptions, Permissions};
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::template::{safe_relative, validate_user_id};
use crate::storage::HomeDirectory;

/// Home directories are writable by the workspace user.
const HOME_MODE: u32 = 0o777;
/// The marker is readable by everyone and writable by no one.
const MARKER_MODE: u32 = 0o444;
const STARTER_MODE: u32 = 0o666;

#[derive(Debug, Error)]
pub enum ProvisionError {
    #[error("home {0} already exists")]
    AlreadyProvisioned(PathBuf),
    #[error("unsafe user id {0:?}")]
    UnsafeUserId(String),
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
}

/// The only component holding write access to the shared storage root.
/// It runs as a separate, short-lived step and is handed nothing else.
#[derive(Debug, Clone)]
pub struct Provisioner {
    root: PathBuf,
}

impl Provisioner {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn home_exists(&self, user: &str) -> bool {
        HomeDirectory::new(&self.root, user).exists()
    }

    pub fn provision_home(
        &self,
        user: &str,
        starter_files: &BTreeMap<String, String>,
    ) -> Result<HomeDirectory, ProvisionError> {
        provision_home(&self.root, user, starter_files)
    }
}

/// Creates `<root>/home/<user>`, seeds `starter_files` and writes the
/// read-only `.id` marker containing `user`.
pub fn provision_home(
    root: &Path,
    user: &str,
    starter_files: &BTreeMap<String, String>,
) -> Result<HomeDirectory, ProvisionError> {
    validate_user_id(user).map_err(|_| ProvisionError::UnsafeUserId(user.to_string()))?;
    let home = HomeDirectory::new(root, user);
    let dir = home.path();
    fs::create_dir_all(root.join("home"))?;
    match fs::create_dir(&dir) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(ProvisionError::AlreadyProvisioned(dir)),
        Err(e) => return Err(e.into()),
    }
    fs::set_permissions(&dir, Permissions::from_mode(HOME_MODE))?;

    for (rel, content) in starter_files {
        let Ok(rel) = safe_relative(rel) else { continue };
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, content)?;
        fs::set_permissions(&path, Permissions::from_mode(STARTER_MODE))?;
    }

    let mut marker = OpenOptions::new().write(true).create_new(true).open(&home.marker)?;
    marker.write_all(user.as_bytes())?;
    marker.sync_all()?;
    fs::set_permissions(&home.marker, Permissions::from_mode(MARKER_MODE))?;
    tracing::info!(user, "provisioned home directory");
    Ok(home)
}
