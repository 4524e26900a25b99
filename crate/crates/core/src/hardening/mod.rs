//! Host egress controls for workspace containers.
//!
//! Containers on the bridge may reach nothing outside the host directly;
//! their only way out is an HTTP(S) proxy listening on the bridge gateway.
//! The four firewall commands and the three proxy variables are generated
//! from an [`EgressConfig`]; the same rule objects also evaluate packets so
//! the simulation can enforce exactly what is emitted.

mod audit;
mod firewall;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{
    audit_deployment, DeploymentDescription, Finding, FindingKind, ListenerSpec, LogSinkSpec, RoleSpec, StorageSpec,
    TaskDefinitionSpec,
};
pub use firewall::{firewall_rules, Firewall, FirewallRule, Packet, Verdict};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read egress config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid egress config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("proxy port and sink port must differ (both {0})")]
    PortClash(u16),
}

/// Every field defaults to the stock single-bridge host layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgressConfig {
    pub external_interface: String,
    pub bridge_interface: String,
    pub bridge_gateway: Ipv4Addr,
    pub proxy_port: u16,
    pub metadata_address: Ipv4Addr,
    pub agent_address: Ipv4Addr,
    /// Port with no listener; all other host-bound bridge traffic lands here.
    pub sink_port: u16,
}

impl Default for EgressConfig {
    fn default() -> Self {
        Self {
            external_interface: "eth0".into(),
            bridge_interface: "docker0".into(),
            bridge_gateway: Ipv4Addr::new(172, 17, 0, 1),
            proxy_port: 8888,
            metadata_address: Ipv4Addr::new(169, 254, 169, 254),
            agent_address: Ipv4Addr::new(169, 254, 170, 2),
            sink_port: 2,
        }
    }
}

impl EgressConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.proxy_port == self.sink_port {
            return Err(ConfigError::PortClash(self.proxy_port));
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; absent keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn proxy_url(&self) -> String {
        format!("http://{}:{}/", self.bridge_gateway, self.proxy_port)
    }

    pub fn no_proxy(&self) -> String {
        format!("localhost,127.0.0.1,{},{}", self.metadata_address, self.agent_address)
    }
}

/// The four firewall commands, one per line, in application order.
pub fn emit_firewall_rules(cfg: &EgressConfig) -> Vec<String> {
    firewall_rules(cfg).iter().map(FirewallRule::command).collect()
}

/// `name=value` assignments for the container environment.
pub fn emit_proxy_env(cfg: &EgressConfig) -> Vec<String> {
    proxy_env(cfg).into_iter().map(|(k, v)| format!("{k}={v}")).collect()
}

/// The proxy variables as an ordered map, for merging into task definitions.
pub fn proxy_env(cfg: &EgressConfig) -> Vec<(&'static str, String)> {
    vec![
        ("http_proxy", cfg.proxy_url()),
        ("https_proxy", cfg.proxy_url()),
        ("no_proxy", cfg.no_proxy()),
    ]
}

pub fn proxy_env_map(cfg: &EgressConfig) -> BTreeMap<String, String> {
    proxy_env(cfg).into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// The proxy variables as Dockerfile `ENV` instructions.
pub fn render_dockerfile_env(cfg: &EgressConfig) -> String {
    emit_proxy_env(cfg).iter().map(|line| format!("ENV {line}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rules_carry_the_expected_fragments() {
        let rules = emit_firewall_rules(&EgressConfig::default());
        assert_eq!(rules.len(), 4);
        assert!(rules[1].contains("--destination 169.254.169.254 --jump REJECT"));
        assert!(rules[2].contains("-d 172.17.0.1 -p tcp --dport 8888 -j RETURN"));
    }

    #[test]
    fn proxy_port_substitution_touches_only_dport() {
        let base = emit_firewall_rules(&EgressConfig::default());
        let cfg = EgressConfig {
            proxy_port: 3128,
            ..EgressConfig::default()
        };
        let changed = emit_firewall_rules(&cfg);
        for (i, (a, b)) in base.iter().zip(&changed).enumerate() {
            if i == 2 {
                assert_eq!(a.replace("--dport 8888", "--dport 3128"), *b);
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn default_env_lines() {
        let env = emit_proxy_env(&EgressConfig::default());
        assert_eq!(env[0], "http_proxy=http://172.17.0.1:8888/");
        assert_eq!(env[1], "https_proxy=http://172.17.0.1:8888/");
        assert_eq!(env[2], "no_proxy=localhost,127.0.0.1,169.254.169.254,169.254.170.2");
    }

    #[test]
    fn gateway_address_flows_into_both_proxies() {
        let cfg = EgressConfig {
            bridge_gateway: Ipv4Addr::new(10, 0, 0, 1),
            ..EgressConfig::default()
        };
        let env = emit_proxy_env(&cfg);
        assert_eq!(env[0], "http_proxy=http://10.0.0.1:8888/");
        assert_eq!(env[1], "https_proxy=http://10.0.0.1:8888/");
    }

    #[test]
    fn config_file_overrides_and_validates() {
        let cfg = EgressConfig::from_toml_str("proxy_port = 3128\nbridge_gateway = \"10.0.0.1\"\n").unwrap();
        assert_eq!(cfg.proxy_port, 3128);
        assert_eq!(cfg.external_interface, "eth0");
        assert!(matches!(
            EgressConfig::from_toml_str("proxy_port = 2\n"),
            Err(ConfigError::PortClash(2))
        ));
        assert!(EgressConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
