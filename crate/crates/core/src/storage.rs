//! Layout of the shared persistent filesystem that every workspace
//! bind-mounts: `<root>/home/<user>` and `<root>/projects/<project>`.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

pub const ID_MARKER: &str = ".id";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedStorage {
    root: PathBuf,
}

impl SharedStorage {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn home(&self, user: &str) -> HomeDirectory {
        HomeDirectory::new(&self.root, user)
    }

    pub fn project_path(&self, project: &str) -> PathBuf {
        self.root.join("projects").join(project)
    }
}

/// A user's home under the shared root, with its ownership marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomeDirectory {
    pub root: PathBuf,
    pub user: String,
    pub marker: PathBuf,
}

impl HomeDirectory {
    pub fn new(root: impl Into<PathBuf>, user: &str) -> Self {
        let root = root.into();
        let marker = root.join("home").join(user).join(ID_MARKER);
        Self {
            root,
            user: user.to_string(),
            marker,
        }
    }

    /// The home a workspace actually has mounted, identified by the host
    /// side of its bind mount. The directory name is only a label here;
    /// ownership is decided by the marker's content.
    pub fn from_mount(host_path: &Path) -> Self {
        let user = host_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let root = host_path
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self {
            root,
            user,
            marker: host_path.join(ID_MARKER),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.marker.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    pub fn exists(&self) -> bool {
        self.path().is_dir()
    }
}

/// True iff the `.id` marker exists and its trimmed content equals
/// `verified_user`. Missing or unreadable markers fail closed.
pub fn check_home_ownership(home: &HomeDirectory, verified_user: &str) -> bool {
    match fs::read_to_string(&home.marker) {
        Ok(content) => !verified_user.is_empty() && content.trim() == verified_user,
        Err(_) => false,
    }
}

/// File access as the unprivileged workspace user: a non-owner, non-group
/// principal, so only the "other" permission bits apply. Needed because the
/// provisioning principal and the workspace user share a uid in-process.
#[derive(Debug, Clone)]
pub struct WorkspaceUserView {
    home: PathBuf,
}

impl WorkspaceUserView {
    pub fn new(home: &HomeDirectory) -> Self {
        Self { home: home.path() }
    }

    fn mode(path: &Path) -> io::Result<u32> {
        Ok(fs::metadata(path)?.permissions().mode())
    }

    pub fn read(&self, relative: &str) -> io::Result<String> {
        let path = self.home.join(relative);
        if Self::mode(&path)? & 0o004 == 0 {
            return Err(io::Error::from(io::ErrorKind::PermissionDenied));
        }
        fs::read_to_string(path)
    }

    pub fn write(&self, relative: &str, contents: &str) -> io::Result<()> {
        let path = self.home.join(relative);
        let allowed = match Self::mode(&path) {
            Ok(mode) => mode & 0o002 != 0,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Self::mode(&self.home)? & 0o002 != 0,
            Err(e) => return Err(e),
        };
        if !allowed {
            return Err(io::Error::from(io::ErrorKind::PermissionDenied));
        }
        fs::write(path, contents)
    }
}
