use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::net::TargetAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetHealth {
    Unknown,
    Healthy,
    Unhealthy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealthCheckConfig {
    #[serde(with = "crate::clock::duration_secs")]
    pub interval: Duration,
    /// Consecutive passes needed to become Healthy.
    pub healthy_threshold: u32,
    /// Consecutive failures needed to become Unhealthy.
    pub unhealthy_threshold: u32,
}

impl Default for HealthCheckConfig {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(10),
            healthy_threshold: 2,
            unhealthy_threshold: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetGroupSpec {
    pub id: String,
    pub health_check_path: String,
    pub expected_status: BTreeSet<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetStatus {
    pub health: TargetHealth,
    pub consecutive_passes: u32,
    pub consecutive_failures: u32,
}

impl TargetStatus {
    fn new() -> Self {
        Self {
            health: TargetHealth::Unknown,
            consecutive_passes: 0,
            consecutive_failures: 0,
        }
    }

    /// Applies one check result under `cfg`'s thresholds.
    pub(crate) fn record(&mut self, passed: bool, cfg: &HealthCheckConfig) {
        if passed {
            self.consecutive_passes += 1;
            self.consecutive_failures = 0;
            if self.consecutive_passes >= cfg.healthy_threshold.max(1) {
                self.health = TargetHealth::Healthy;
            }
        } else {
            self.consecutive_failures += 1;
            self.consecutive_passes = 0;
            if self.consecutive_failures >= cfg.unhealthy_threshold.max(1) {
                self.health = TargetHealth::Unhealthy;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetGroup {
    pub spec: TargetGroupSpec,
    pub targets: BTreeMap<TargetAddr, TargetStatus>,
    #[serde(skip)]
    next: usize,
}

impl TargetGroup {
    pub fn new(spec: TargetGroupSpec) -> Self {
        Self {
            spec,
            targets: BTreeMap::new(),
            next: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub(crate) fn register(&mut self, addr: TargetAddr) {
        self.targets.entry(addr).or_insert_with(TargetStatus::new);
    }

    pub(crate) fn deregister(&mut self, addr: &TargetAddr) -> bool {
        self.targets.remove(addr).is_some()
    }

    pub fn healthy(&self) -> Vec<&TargetAddr> {
        self.targets
            .iter()
            .filter(|(_, s)| s.health == TargetHealth::Healthy)
            .map(|(a, _)| a)
            .collect()
    }

    /// Round-robin over the Healthy targets.
    pub(crate) fn pick(&mut self) -> Option<TargetAddr> {
        let healthy = self.healthy();
        if healthy.is_empty() {
            return None;
        }
        let chosen = healthy[self.next % healthy.len()].clone();
        self.next = self.next.wrapping_add(1);
        Some(chosen)
    }
}
