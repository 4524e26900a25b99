use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;
use workbench_cli::server::{serve, StdoutLines, TracingSink};
use workbench_core::audit::{AppendSink, JsonLinesFile};
use workbench_core::control_plane::HUB_TARGET_GROUP;
use workbench_core::gateway::AccessLogRecord;
use workbench_core::{Platform, PlatformConfig, SystemClock};

#[derive(Debug, Parser)]
#[command(
    name = "workbench",
    about = "Per-user analysis workspaces behind an authenticating gateway"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gateway, hub and simulated workspaces.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    /// Platform config (TOML); defaults everywhere when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Append access records here as JSON lines; standard output when absent.
    #[arg(long)]
    access_log: Option<PathBuf>,
    /// Listener the gateway treats as the encrypted front end.
    #[arg(long, default_value = "127.0.0.1:8443")]
    listen: SocketAddr,
    /// Plain listener; everything on it is redirected to the secure one.
    #[arg(long, default_value = "127.0.0.1:8080")]
    insecure_listen: SocketAddr,
    /// Root for home directories, overriding the config.
    #[arg(long)]
    storage: Option<PathBuf>,
    /// Account for the built-in identity provider, as NAME:PASSWORD.
    #[arg(long = "user", value_parser = parse_user)]
    users: Vec<(String, String)>,
    /// Scheduler period in milliseconds.
    #[arg(long, default_value_t = 500)]
    tick_ms: u64,
}

fn parse_user(s: &str) -> Result<(String, String), String> {
    match s.split_once(':') {
        Some((name, pw)) if !name.is_empty() => Ok((name.to_string(), pw.to_string())),
        _ => Err("expected NAME:PASSWORD".into()),
    }
}

/// Drives health checks until the hub can take requests, so the first
/// sign-in does not meet an empty target group.
async fn wait_for_hub(platform: &Platform, tick: Duration) {
    loop {
        platform.run_due();
        if platform.gateway().has_healthy_target(HUB_TARGET_GROUP) {
            return;
        }
        tokio::time::sleep(tick).await;
    }
}

async fn run(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => PlatformConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PlatformConfig::default(),
    };
    if let Some(dir) = args.storage {
        config.hub.storage_root = dir;
    }
    config.gateway.users.extend(args.users);
    if config.gateway.users.is_empty() {
        tracing::warn!("no accounts configured; nobody can sign in");
    }

    let access_log: Arc<dyn AppendSink<AccessLogRecord>> = match &args.access_log {
        Some(path) => Arc::new(JsonLinesFile::open(path).with_context(|| format!("opening {}", path.display()))?),
        None => Arc::new(StdoutLines),
    };
    let platform = Arc::new(Platform::new(
        config,
        Arc::new(SystemClock),
        access_log,
        Arc::new(TracingSink),
    )?);

    let tick = Duration::from_millis(args.tick_ms.max(1));
    wait_for_hub(&platform, tick).await;

    let secure = TcpListener::bind(args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    let insecure = TcpListener::bind(args.insecure_listen)
        .await
        .with_context(|| format!("binding {}", args.insecure_listen))?;
    eprintln!("secure listener on {}", secure.local_addr()?);
    eprintln!("insecure listener on {}", insecure.local_addr()?);

    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(platform, secure, insecure, tick, shutdown).await?;
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve(args) => run(args).await,
    }
}
