//! Front ends for the workbench platform: an HTTP server that runs the
//! gateway, hub and simulated workspaces behind real sockets, and the host
//! hardening tool.

pub mod harden;
pub mod server;
