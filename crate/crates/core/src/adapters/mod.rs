//! Application-side authentication: the Jupyter login handler, the RStudio
//! signed cookie behind a path-rewriting proxy, and the VNC websocket gate.
//! Each adapter validates the gateway headers itself and then refuses any
//! user other than the one whose home directory the task has mounted.

mod guard;
pub mod jupyter;
pub mod proxy;
pub mod rstudio;
pub mod sim;
pub mod vnc;

pub use guard::{AdapterDenial, AppAuth, WorkspaceGuard};
pub use jupyter::{jupyter_get_user_token, jupyter_login_get, LoginDecision, LoginOutcome};
pub use proxy::{reverse_prefix, rewrite_prefix, PrefixMismatch};
pub use rstudio::{rstudio_auth_signin, rstudio_mint_cookie, rstudio_verify_cookie, CookieError, SignedCookie};
pub use vnc::{vnc_authenticate, AuthenticationError};
