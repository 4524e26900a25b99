use std::net::Ipv4Addr;

use super::EgressConfig;

/// One host firewall rule. Each variant renders to a fixed command line and
/// can match packets for the egress simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FirewallRule {
    /// Bridge traffic may not leave through the external interface.
    DropBridgeEgress { bridge: String, external: String },
    /// Nothing forwarded may reach the instance metadata service.
    RejectMetadata { address: Ipv4Addr },
    /// Bridge traffic to the proxy port on the gateway is left alone by NAT.
    ProxyPassthrough {
        bridge: String,
        gateway: Ipv4Addr,
        port: u16,
    },
    /// Any other bridge traffic to the gateway is rewritten to the sink port.
    SinkHostTraffic {
        bridge: String,
        gateway: Ipv4Addr,
        sink_port: u16,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    Insert,
    Append,
}

impl FirewallRule {
    pub fn command(&self) -> String {
        match self {
            FirewallRule::DropBridgeEgress { bridge, external } => {
                format!("iptables --insert DOCKER-USER --in-interface {bridge} -o {external} -j DROP")
            }
            FirewallRule::RejectMetadata { address } => format!(
                "iptables --insert DOCKER-USER --destination {address} --jump REJECT --reject-with icmp-port-unreachable"
            ),
            FirewallRule::ProxyPassthrough { bridge, gateway, port } => {
                format!("iptables -t nat -A PREROUTING -i {bridge} -d {gateway} -p tcp --dport {port} -j RETURN")
            }
            FirewallRule::SinkHostTraffic {
                bridge,
                gateway,
                sink_port,
            } => format!("iptables -t nat -A PREROUTING -i {bridge} -d {gateway} -p tcp -j DNAT --to-destination :{sink_port}"),
        }
    }

    fn is_nat(&self) -> bool {
        matches!(
            self,
            FirewallRule::ProxyPassthrough { .. } | FirewallRule::SinkHostTraffic { .. }
        )
    }

    fn placement(&self) -> Placement {
        if self.is_nat() {
            Placement::Append
        } else {
            Placement::Insert
        }
    }
}

pub fn firewall_rules(cfg: &EgressConfig) -> Vec<FirewallRule> {
    vec![
        FirewallRule::DropBridgeEgress {
            bridge: cfg.bridge_interface.clone(),
            external: cfg.external_interface.clone(),
        },
        FirewallRule::RejectMetadata {
            address: cfg.metadata_address,
        },
        FirewallRule::ProxyPassthrough {
            bridge: cfg.bridge_interface.clone(),
            gateway: cfg.bridge_gateway,
            port: cfg.proxy_port,
        },
        FirewallRule::SinkHostTraffic {
            bridge: cfg.bridge_interface.clone(),
            gateway: cfg.bridge_gateway,
            sink_port: cfg.sink_port,
        },
    ]
}

/// A new TCP connection attempt leaving a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub in_interface: String,
    pub destination: Ipv4Addr,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Delivered to a local socket on the host at this port.
    Local {
        port: u16,
    },
    /// Forwarded out of the host.
    Forwarded {
        destination: Ipv4Addr,
        port: u16,
    },
    Dropped,
    Rejected,
}

/// The rule set as installed: inserts go to the head of their chain,
/// appends to the tail.
#[derive(Debug, Clone)]
pub struct Firewall {
    prerouting: Vec<FirewallRule>,
    docker_user: Vec<FirewallRule>,
    host_addresses: Vec<Ipv4Addr>,
    external_interface: String,
}

impl Firewall {
    pub fn install(cfg: &EgressConfig, rules: &[FirewallRule]) -> Self {
        let mut fw = Firewall {
            prerouting: Vec::new(),
            docker_user: Vec::new(),
            host_addresses: vec![cfg.bridge_gateway],
            external_interface: cfg.external_interface.clone(),
        };
        for rule in rules {
            let chain = if rule.is_nat() {
                &mut fw.prerouting
            } else {
                &mut fw.docker_user
            };
            match rule.placement() {
                Placement::Insert => chain.insert(0, rule.clone()),
                Placement::Append => chain.push(rule.clone()),
            }
        }
        fw
    }

    /// No rules at all: the unhardened host.
    pub fn open(cfg: &EgressConfig) -> Self {
        Self::install(cfg, &[])
    }

    pub fn route(&self, packet: &Packet) -> Verdict {
        let destination = packet.destination;
        let mut port = packet.port;
        for rule in &self.prerouting {
            match rule {
                FirewallRule::ProxyPassthrough {
                    bridge,
                    gateway,
                    port: p,
                } if *bridge == packet.in_interface && *gateway == destination && *p == port => break,
                FirewallRule::SinkHostTraffic {
                    bridge,
                    gateway,
                    sink_port,
                } if *bridge == packet.in_interface && *gateway == destination => {
                    port = *sink_port;
                    break;
                }
                _ => {}
            }
        }
        if self.host_addresses.contains(&destination) {
            return Verdict::Local { port };
        }
        // Everything not addressed to the host is forwarded out the external
        // interface, including link-local service addresses.
        let out = self.external_interface.as_str();
        for rule in &self.docker_user {
            match rule {
                FirewallRule::RejectMetadata { address } if *address == destination => return Verdict::Rejected,
                FirewallRule::DropBridgeEgress { bridge, external }
                    if *bridge == packet.in_interface && external == out =>
                {
                    return Verdict::Dropped
                }
                _ => {}
            }
        }
        Verdict::Forwarded { destination, port }
    }
}
