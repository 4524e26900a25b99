//! `harden`: emits the host egress controls and audits deployment
//! descriptions.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use workbench_core::hardening::{
    audit_deployment, emit_firewall_rules, emit_proxy_env, render_dockerfile_env, DeploymentDescription, EgressConfig,
    Finding,
};

#[derive(Debug, Parser)]
#[command(name = "harden", about = "Host egress controls and deployment audit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the firewall commands, one per line.
    EmitFirewall {
        /// Key/value egress config; stock layout when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the proxy variables as NAME=VALUE lines.
    EmitEnv {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print a Dockerfile ENV instruction instead.
        #[arg(long)]
        dockerfile: bool,
    },
    /// Check a JSON deployment description; exits 1 when anything is found.
    Audit { description: PathBuf },
}

/// What a run printed and how it should exit.
#[derive(Debug, PartialEq, Eq)]
pub struct Report {
    pub output: String,
    pub findings: usize,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<EgressConfig> {
    let cfg = match path {
        Some(p) => EgressConfig::load(p)?,
        None => EgressConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn lines(items: impl IntoIterator<Item = String>) -> String {
    items.into_iter().map(|l| l + "\n").collect()
}

pub fn run(command: &Command) -> anyhow::Result<Report> {
    let output = match command {
        Command::EmitFirewall { config } => lines(emit_firewall_rules(&load_config(config.as_deref())?)),
        Command::EmitEnv { config, dockerfile } => {
            let cfg = load_config(config.as_deref())?;
            if *dockerfile {
                render_dockerfile_env(&cfg)
            } else {
                lines(emit_proxy_env(&cfg))
            }
        }
        Command::Audit { description } => {
            let text = std::fs::read_to_string(description)
                .with_context(|| format!("cannot read {}", description.display()))?;
            let desc: DeploymentDescription = serde_json::from_str(&text)
                .with_context(|| format!("invalid description {}", description.display()))?;
            let findings = audit_deployment(&desc);
            return Ok(Report {
                output: lines(findings.iter().map(Finding::to_string)),
                findings: findings.len(),
            });
        }
    };
    Ok(Report { output, findings: 0 })
}
