use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::net::TargetAddr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "kebab-case")]
pub enum AuthOutcome {
    Success,
    Failure(String),
    NotRequired,
}

impl AuthOutcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, AuthOutcome::Failure(_))
    }
}

/// One line of the access log. Every request produces exactly one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLogRecord {
    pub timestamp: Timestamp,
    pub client: String,
    pub method: String,
    pub host: String,
    pub path: String,
    pub rule_priority: Option<u32>,
    pub auth: AuthOutcome,
    pub upstream: Option<TargetAddr>,
    pub status: u16,
}
