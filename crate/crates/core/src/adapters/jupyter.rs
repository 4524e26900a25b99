//! Replacement login handler for the notebook server.
//!
//! `get` redirects when the user already has a session or the gateway
//! headers validate; `get_user_token` authenticates every other request from
//! the cached (identity, token) pair, or from the cached key when the kid is
//! unchanged. It never fetches keys; only the login path does.

use rand::RngCore;
use serde::Serialize;

use super::guard::AppAuth;
use crate::auth::{
    decode_unverified_claims, decode_verified, parse_unverified_header, verify_oidc, OidcHeaderSet, VerifyingKey,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "url")]
pub enum LoginOutcome {
    Redirect(String),
    RenderLogin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoginDecision {
    pub outcome: LoginOutcome,
    /// Issued when the headers, not an existing session, authenticated.
    pub session_token: Option<String>,
}

/// A fresh 32-hex-character token. Its value means nothing downstream.
pub fn random_token() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

/// Only same-site absolute paths are followed; anything else goes to
/// `default`.
pub fn redirect_safe(next: Option<&str>, default: &str) -> String {
    match next {
        Some(n)
            if n.starts_with('/') && !n.starts_with("//") && !n.contains('\\') && !n.chars().any(char::is_control) =>
        {
            n.to_string()
        }
        _ => default.to_string(),
    }
}

/// The login page's `get`.
pub fn jupyter_login_get(
    current_user: Option<&str>,
    headers: &OidcHeaderSet,
    base_url: &str,
    next: Option<&str>,
    auth: &AppAuth,
) -> LoginDecision {
    let mut session_token = None;
    let authenticated = if current_user.is_some() {
        true
    } else {
        match auth.verify(headers) {
            Ok(_) => {
                session_token = Some(random_token());
                true
            }
            Err(denial) => {
                tracing::info!(reason = denial.code(), "login refused");
                false
            }
        }
    };
    let outcome = if authenticated {
        LoginOutcome::Redirect(redirect_safe(next, base_url))
    } else {
        LoginOutcome::RenderLogin
    };
    LoginDecision { outcome, session_token }
}

/// Header-based token authentication for every request.
pub fn jupyter_get_user_token(headers: &OidcHeaderSet, auth: &AppAuth) -> Option<String> {
    let now = auth.clock.now();
    let mut cache = auth.cache.lock();

    let user = if verify_oidc(headers, &cache) {
        // The cached token was verified when cached; only time has moved.
        let claims = decode_unverified_claims(headers.data.as_deref()?).ok()?;
        auth.verifier.check_expiry(claims.exp, now).ok()?;
        cache.user_id.clone()?
    } else {
        let oidc_jwt = headers.data.as_deref().filter(|t| !t.is_empty())?;
        let header = parse_unverified_header(oidc_jwt).ok()?;
        if cache.kid.as_deref() != Some(header.kid.as_str()) {
            return None;
        }
        let pk = cache.pk.as_deref()?;
        let algorithm = auth.verifier.config().algorithm;
        let key = VerifyingKey::from_public_key_pem(algorithm, pk).ok()?;
        let token = decode_verified(oidc_jwt, &key, algorithm).ok()?;
        auth.verifier.check_expiry(token.exp, now).ok()?;
        let oidc_id = headers.identity.as_deref()?;
        if token.sub.is_empty() || token.sub != oidc_id {
            return None;
        }
        cache.jwt = Some(oidc_jwt.to_string());
        cache.user_id = Some(oidc_id.to_string());
        oidc_id.to_string()
    };
    drop(cache);

    match auth.guard.admit(&user) {
        Ok(()) => Some(random_token()),
        Err(denial) => {
            tracing::warn!(reason = denial.code(), "token refused");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::adapters::WorkspaceGuard;
    use crate::auth::{mint_token, Algorithm, SigningKey, StaticKeyProvider, TokenClaims, Verifier};
    use crate::clock::{Clock, VirtualClock};
    use crate::storage::HomeDirectory;

    struct Fixture {
        _dir: tempfile::TempDir,
        key: SigningKey,
        provider: Arc<StaticKeyProvider>,
        clock: Arc<VirtualClock>,
        auth: AppAuth,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let home = HomeDirectory::new(dir.path(), "alice");
        std::fs::create_dir_all(home.path()).unwrap();
        std::fs::write(&home.marker, "alice").unwrap();
        let key = SigningKey::generate(Algorithm::Es256);
        let provider = Arc::new(StaticKeyProvider::new());
        provider.insert("k-001", key.public_key_pem());
        let clock = Arc::new(VirtualClock::at_epoch());
        let auth = AppAuth::new(
            Verifier::default(),
            provider.clone(),
            clock.clone(),
            WorkspaceGuard::new("alice", home),
        );
        Fixture {
            _dir: dir,
            key,
            provider,
            clock,
            auth,
        }
    }

    fn headers(f: &Fixture, sub: &str, identity: &str) -> OidcHeaderSet {
        let exp = f.clock.now().timestamp() + 3600;
        OidcHeaderSet {
            access_token: Some("t".into()),
            identity: Some(identity.into()),
            data: Some(mint_token(&f.key, &TokenClaims::new(sub, exp), "k-001").unwrap()),
        }
    }

    #[test]
    fn existing_session_redirects_to_base_url() {
        let f = fixture();
        let d = jupyter_login_get(
            Some("alice"),
            &OidcHeaderSet::default(),
            "/alice/jupyter/",
            None,
            &f.auth,
        );
        assert_eq!(d.outcome, LoginOutcome::Redirect("/alice/jupyter/".into()));
        assert_eq!(d.session_token, None);
    }

    #[test]
    fn valid_headers_redirect_to_next() {
        let f = fixture();
        let h = headers(&f, "alice", "alice");
        let d = jupyter_login_get(None, &h, "/alice/jupyter/", Some("/alice/jupyter/tree"), &f.auth);
        assert_eq!(d.outcome, LoginOutcome::Redirect("/alice/jupyter/tree".into()));
        assert_eq!(d.session_token.unwrap().len(), 32);
    }

    #[test]
    fn no_headers_render_login() {
        let f = fixture();
        let d = jupyter_login_get(None, &OidcHeaderSet::default(), "/alice/jupyter/", None, &f.auth);
        assert_eq!(d.outcome, LoginOutcome::RenderLogin);
    }

    #[test]
    fn offsite_next_is_ignored() {
        assert_eq!(redirect_safe(Some("https://evil.example/"), "/b/"), "/b/");
        assert_eq!(redirect_safe(Some("//evil.example/"), "/b/"), "/b/");
        assert_eq!(redirect_safe(Some("/b/tree"), "/b/"), "/b/tree");
    }

    #[test]
    fn user_token_warm_cache_makes_no_provider_call() {
        let f = fixture();
        let h = headers(&f, "alice", "alice");
        f.auth.verify(&h).unwrap();
        let calls = f.provider.calls();
        f.provider.set_offline(true);
        let token = jupyter_get_user_token(&h, &f.auth).unwrap();
        assert_eq!(token.len(), 32);
        assert!(token.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(f.provider.calls(), calls);
    }

    #[test]
    fn user_token_cold_path_uses_preloaded_key() {
        let f = fixture();
        {
            let mut c = f.auth.cache.lock();
            c.kid = Some("k-001".into());
            c.pk = Some(f.key.public_key_pem());
        }
        let h = headers(&f, "alice", "alice");
        assert!(jupyter_get_user_token(&h, &f.auth).is_some());
        let c = f.auth.cache.lock();
        assert_eq!(c.user_id.as_deref(), Some("alice"));
        assert_eq!(c.jwt, h.data);
        assert_eq!(f.provider.calls(), 0);
    }

    #[test]
    fn user_token_cold_path_without_key_fails() {
        let f = fixture();
        assert!(jupyter_get_user_token(&headers(&f, "alice", "alice"), &f.auth).is_none());
        assert_eq!(f.provider.calls(), 0);
    }

    #[test]
    fn user_token_subject_mismatch() {
        let f = fixture();
        {
            let mut c = f.auth.cache.lock();
            c.kid = Some("k-001".into());
            c.pk = Some(f.key.public_key_pem());
        }
        assert!(jupyter_get_user_token(&headers(&f, "alice", "bob"), &f.auth).is_none());
    }

    #[test]
    fn user_token_expires_on_the_fast_path() {
        let f = fixture();
        let h = headers(&f, "alice", "alice");
        f.auth.verify(&h).unwrap();
        f.clock.advance(std::time::Duration::from_secs(3600 + 60));
        assert!(jupyter_get_user_token(&h, &f.auth).is_none());
    }
}
