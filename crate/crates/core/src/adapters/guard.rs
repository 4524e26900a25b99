use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::auth::{KeyCache, KeyProvider, OidcHeaderSet, VerificationFailure, VerifiedIdentity, Verifier};
use crate::clock::Clock;
use crate::storage::{check_home_ownership, HomeDirectory};

/// Why an adapter refused a request.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AdapterDenial {
    #[error(transparent)]
    Verification(#[from] VerificationFailure),
    #[error("workspace belongs to {expected:?}, not {user:?}")]
    WrongUser { expected: String, user: String },
    #[error("mounted home is not owned by {user:?}")]
    HomeNotOwned { user: String },
}

impl AdapterDenial {
    pub fn code(&self) -> &'static str {
        match self {
            AdapterDenial::Verification(f) => f.code(),
            AdapterDenial::WrongUser { .. } => "wrong-user",
            AdapterDenial::HomeNotOwned { .. } => "home-not-owned",
        }
    }
}

/// The per-task ownership check: the verified user must be the one the
/// workspace was started for, and the mounted home's marker must name them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkspaceGuard {
    pub expected_user: String,
    /// The home the task has mounted; none means nothing to check against.
    #[serde(skip)]
    pub home: Option<HomeDirectory>,
}

impl WorkspaceGuard {
    pub fn new(expected_user: impl Into<String>, home: HomeDirectory) -> Self {
        Self {
            expected_user: expected_user.into(),
            home: Some(home),
        }
    }

    pub fn admit(&self, user: &str) -> Result<(), AdapterDenial> {
        if user != self.expected_user {
            return Err(AdapterDenial::WrongUser {
                expected: self.expected_user.clone(),
                user: user.to_string(),
            });
        }
        if !self.home.as_ref().is_some_and(|h| check_home_ownership(h, user)) {
            return Err(AdapterDenial::HomeNotOwned { user: user.to_string() });
        }
        Ok(())
    }
}

/// Everything one workspace task needs to validate its requests: the
/// verifier settings, the task's single-user key cache, the key provider,
/// a clock and the ownership guard.
pub struct AppAuth {
    pub verifier: Verifier,
    pub cache: Mutex<KeyCache>,
    pub provider: Arc<dyn KeyProvider>,
    pub clock: Arc<dyn Clock>,
    pub guard: WorkspaceGuard,
}

impl AppAuth {
    pub fn new(
        verifier: Verifier,
        provider: Arc<dyn KeyProvider>,
        clock: Arc<dyn Clock>,
        guard: WorkspaceGuard,
    ) -> Self {
        Self {
            verifier,
            cache: Mutex::new(KeyCache::default()),
            provider,
            clock,
            guard,
        }
    }

    /// Full header validation followed by the ownership guard.
    pub fn verify(&self, headers: &OidcHeaderSet) -> Result<VerifiedIdentity, AdapterDenial> {
        let now = self.clock.now();
        let identity = {
            let mut cache = self.cache.lock();
            self.verifier
                .verify_jwt(headers, &mut cache, self.provider.as_ref(), now)?
        };
        self.guard.admit(&identity.oidc_id)?;
        Ok(identity)
    }
}
