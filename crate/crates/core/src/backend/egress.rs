//! Outbound reachability from inside a simulated task.
//!
//! A connection attempt is resolved the way a containerized HTTP client
//! would: pick the proxy from the environment unless `no_proxy` exempts the
//! host, then push the first packet through the host firewall. The proxy on
//! the bridge gateway forwards only to allowlisted hosts.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::Serialize;

use crate::hardening::{firewall_rules, EgressConfig, Firewall, Packet, Verdict};

/// A host outside the instance that may accept connections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalHost {
    pub name: String,
    pub address: Ipv4Addr,
    pub ports: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "outcome")]
pub enum EgressOutcome {
    Reached {
        host: String,
        via_proxy: bool,
    },
    /// Silently dropped; the client would time out.
    Dropped,
    /// Actively rejected by the firewall.
    Rejected,
    /// Nothing listening at the (possibly rewritten) destination.
    Refused,
    /// The proxy refused to forward to this host.
    ProxyDenied,
    ResolveFailed,
    BadUrl,
}

impl EgressOutcome {
    pub fn reached(&self) -> bool {
        matches!(self, EgressOutcome::Reached { .. })
    }
}

#[derive(Debug, Clone)]
pub struct EgressWorld {
    cfg: EgressConfig,
    firewall: Firewall,
    proxy_running: bool,
    allowlist: BTreeSet<String>,
    hosts: BTreeMap<String, ExternalHost>,
}

impl EgressWorld {
    /// A host with the four egress rules installed and the proxy running.
    pub fn hardened(cfg: EgressConfig) -> Self {
        let firewall = Firewall::install(&cfg, &firewall_rules(&cfg));
        Self {
            cfg,
            firewall,
            proxy_running: true,
            allowlist: BTreeSet::new(),
            hosts: BTreeMap::new(),
        }
    }

    /// A host with no firewall rules and no proxy.
    pub fn unhardened(cfg: EgressConfig) -> Self {
        let firewall = Firewall::open(&cfg);
        Self {
            cfg,
            firewall,
            proxy_running: false,
            allowlist: BTreeSet::new(),
            hosts: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &EgressConfig {
        &self.cfg
    }

    pub fn add_host(&mut self, host: ExternalHost) {
        self.hosts.insert(host.name.clone(), host);
    }

    pub fn allow(&mut self, host: impl Into<String>) {
        self.allowlist.insert(host.into());
    }

    pub fn hosts(&self) -> impl Iterator<Item = &ExternalHost> {
        self.hosts.values()
    }

    fn resolve(&self, host: &str) -> Option<Ipv4Addr> {
        host.parse().ok().or_else(|| self.hosts.get(host).map(|h| h.address))
    }

    fn listening(&self, address: Ipv4Addr, port: u16) -> Option<&ExternalHost> {
        self.hosts
            .values()
            .find(|h| h.address == address && h.ports.contains(&port))
    }

    /// Attempts `url` from a task whose environment is `env`.
    pub fn probe(&self, env: &BTreeMap<String, String>, url: &str) -> EgressOutcome {
        let Ok(uri) = url.parse::<http::Uri>() else {
            return EgressOutcome::BadUrl;
        };
        let (Some(scheme), Some(host)) = (uri.scheme_str(), uri.host()) else {
            return EgressOutcome::BadUrl;
        };
        let port = uri.port_u16().unwrap_or(if scheme == "https" { 443 } else { 80 });
        let var = format!("{scheme}_proxy");
        let proxy = env_lookup(env, &var).filter(|p| !p.is_empty());
        let exempt = env_lookup(env, "no_proxy").is_some_and(|list| no_proxy_matches(list, host));

        match proxy {
            Some(proxy) if !exempt => self.via_proxy(proxy, host, port),
            _ => self.direct(host, port),
        }
    }

    fn direct(&self, host: &str, port: u16) -> EgressOutcome {
        let Some(address) = self.resolve(host) else {
            return EgressOutcome::ResolveFailed;
        };
        match self.first_packet(address, port) {
            Verdict::Forwarded { destination, port } => match self.listening(destination, port) {
                Some(h) => EgressOutcome::Reached {
                    host: h.name.clone(),
                    via_proxy: false,
                },
                None => EgressOutcome::Refused,
            },
            // Plain requests to a host port are not proxied requests.
            Verdict::Local { .. } => EgressOutcome::Refused,
            Verdict::Dropped => EgressOutcome::Dropped,
            Verdict::Rejected => EgressOutcome::Rejected,
        }
    }

    fn via_proxy(&self, proxy: &str, host: &str, port: u16) -> EgressOutcome {
        let Ok(proxy_uri) = proxy.parse::<http::Uri>() else {
            return EgressOutcome::BadUrl;
        };
        let Some(proxy_addr) = proxy_uri.host().and_then(|h| self.resolve(h)) else {
            return EgressOutcome::ResolveFailed;
        };
        let proxy_port = proxy_uri.port_u16().unwrap_or(80);
        match self.first_packet(proxy_addr, proxy_port) {
            Verdict::Local { port: p } if p == self.cfg.proxy_port && self.proxy_running => {
                // The proxy itself runs on the host, outside the bridge rules.
                if !self.allowlist.contains(host) {
                    return EgressOutcome::ProxyDenied;
                }
                let Some(address) = self.resolve(host) else {
                    return EgressOutcome::ResolveFailed;
                };
                match self.listening(address, port) {
                    Some(h) => EgressOutcome::Reached {
                        host: h.name.clone(),
                        via_proxy: true,
                    },
                    None => EgressOutcome::Refused,
                }
            }
            Verdict::Local { .. } => EgressOutcome::Refused,
            Verdict::Forwarded { .. } => EgressOutcome::Refused,
            Verdict::Dropped => EgressOutcome::Dropped,
            Verdict::Rejected => EgressOutcome::Rejected,
        }
    }

    fn first_packet(&self, destination: Ipv4Addr, port: u16) -> Verdict {
        self.firewall.route(&Packet {
            in_interface: self.cfg.bridge_interface.clone(),
            destination,
            port,
        })
    }
}

fn env_lookup<'a>(env: &'a BTreeMap<String, String>, name: &str) -> Option<&'a str> {
    env.get(name)
        .or_else(|| env.get(&name.to_ascii_uppercase()))
        .map(String::as_str)
}

fn no_proxy_matches(list: &str, host: &str) -> bool {
    list.split(',').map(str::trim).filter(|e| !e.is_empty()).any(|entry| {
        entry == "*"
            || entry.eq_ignore_ascii_case(host)
            || (entry.starts_with('.') && host.ends_with(entry))
            || host.ends_with(&format!(".{entry}"))
    })
}
