//! Public-key retrieval by key id.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;

use parking_lot::RwLock;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum KeyFetchError {
    #[error("key id is empty")]
    EmptyKeyId,
    #[error("no public key published for kid {0:?}")]
    KeyNotFound(String),
    #[error("key provider returned status {0}")]
    BadStatus(u16),
    #[error("key provider unreachable: {0}")]
    ProviderUnreachable(String),
}

/// Source of public-key text (SubjectPublicKeyInfo PEM) keyed by kid.
pub trait KeyProvider: Send + Sync {
    fn fetch_public_key(&self, kid: &str) -> Result<String, KeyFetchError>;
}

/// Fetches the key for `kid`, refusing empty ids before touching the
/// provider.
pub fn fetch_public_key(kid: &str, provider: &dyn KeyProvider) -> Result<String, KeyFetchError> {
    if kid.is_empty() {
        return Err(KeyFetchError::EmptyKeyId);
    }
    provider.fetch_public_key(kid)
}

/// In-process key server. Counts every fetch and can be switched offline to
/// prove that cached paths never reach it.
#[derive(Debug, Default)]
pub struct StaticKeyProvider {
    keys: RwLock<HashMap<String, String>>,
    calls: AtomicUsize,
    offline: AtomicBool,
}

impl StaticKeyProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, kid: impl Into<String>, pem: impl Into<String>) {
        self.keys.write().insert(kid.into(), pem.into());
    }

    pub fn remove(&self, kid: &str) {
        self.keys.write().remove(kid);
    }

    pub fn get(&self, kid: &str) -> Option<String> {
        self.keys.read().get(kid).cloned()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn set_offline(&self, offline: bool) {
        self.offline.store(offline, Ordering::SeqCst);
    }
}

impl KeyProvider for StaticKeyProvider {
    fn fetch_public_key(&self, kid: &str) -> Result<String, KeyFetchError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.offline.load(Ordering::SeqCst) {
            return Err(KeyFetchError::ProviderUnreachable("provider offline".into()));
        }
        self.keys
            .read()
            .get(kid)
            .cloned()
            .ok_or_else(|| KeyFetchError::KeyNotFound(kid.to_string()))
    }
}

/// Fetches `GET <base>/<kid>` and returns the response body verbatim.
/// Any non-success status is a failure; nothing is cached here.
pub struct HttpKeyProvider {
    base: String,
    agent: ureq::Agent,
}

impl HttpKeyProvider {
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_timeout(base, Duration::from_secs(5))
    }

    pub fn with_timeout(base: impl Into<String>, timeout: Duration) -> Self {
        let mut base = base.into();
        if !base.ends_with('/') {
            base.push('/');
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self { base, agent }
    }

    pub fn url_for(&self, kid: &str) -> String {
        format!("{}{}", self.base, kid)
    }
}

impl KeyProvider for HttpKeyProvider {
    fn fetch_public_key(&self, kid: &str) -> Result<String, KeyFetchError> {
        match self.agent.get(&self.url_for(kid)).call() {
            Ok(mut resp) => resp
                .body_mut()
                .read_to_string()
                .map_err(|e| KeyFetchError::ProviderUnreachable(e.to_string())),
            Err(ureq::Error::StatusCode(404)) => Err(KeyFetchError::KeyNotFound(kid.to_string())),
            Err(ureq::Error::StatusCode(code)) => Err(KeyFetchError::BadStatus(code)),
            Err(e) => Err(KeyFetchError::ProviderUnreachable(e.to_string())),
        }
    }
}
