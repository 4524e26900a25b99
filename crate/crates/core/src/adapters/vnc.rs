//! VNC authentication gate.
//!
//! The websocket proxy asks its plugin to authenticate each connection
//! before relaying it to the VNC server. Only the web client port is
//! published; the VNC server port stays inside the task.

use thiserror::Error;

use super::guard::{AdapterDenial, AppAuth};
use crate::auth::OidcHeaderSet;

/// Port the VNC server listens on inside the task; never published.
pub const VNC_INTERNAL_PORT: u16 = 5901;
/// Port of the web client, the only one published.
pub const VNC_WEB_PORT: u16 = 6901;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("authentication failed: {0}")]
pub struct AuthenticationError(pub AdapterDenial);

/// The plugin's `authenticate(headers, target_host, target_port)`.
pub fn vnc_authenticate(
    headers: &OidcHeaderSet,
    target_host: &str,
    target_port: u16,
    auth: &AppAuth,
) -> Result<(), AuthenticationError> {
    match auth.verify(headers) {
        Ok(identity) => {
            tracing::info!(user = %identity.oidc_id, target_host, target_port, "vnc connection admitted");
            Ok(())
        }
        Err(denial) => {
            tracing::warn!(
                reason = denial.code(),
                target_host,
                target_port,
                "vnc connection refused"
            );
            Err(AuthenticationError(denial))
        }
    }
}
