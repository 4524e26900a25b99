//! Core of the workbench platform: an authenticating edge gateway, a
//! per-user workspace control plane with desired-count reconciliation and
//! inactivity culling, the application-side token and cookie checks, and a
//! generator for host egress controls.
//!
//! Everything runs against an injectable [`clock::Clock`] and a pluggable
//! [`backend::ContainerBackend`]; the in-memory backend hosts simulated
//! workspace applications so the whole system can be exercised in-process.

#![forbid(unsafe_code)]

pub mod adapters;
pub mod audit;
pub mod auth;
pub mod backend;
pub mod clock;
pub mod control_plane;
pub mod gateway;
pub mod hardening;
pub mod lifecycle;
pub mod net;
pub mod platform;
pub mod storage;

pub use auth::{KeyCache, OidcHeaderSet, VerificationFailure, VerifiedIdentity, Verifier};
pub use clock::{Clock, SystemClock, Timestamp, VirtualClock};
pub use gateway::Gateway;
pub use platform::{Platform, PlatformConfig};
