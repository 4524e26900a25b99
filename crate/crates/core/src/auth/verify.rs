//! Two-tier header validation: a cache hit on (identity, token) returns at
//! once; anything else goes through key lookup, signature verification and
//! the subject check.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::keys::{fetch_public_key, KeyFetchError, KeyProvider};
use super::token::{
    decode_unverified_claims, decode_verified, parse_unverified_header, Algorithm, TokenError, VerifyingKey,
};
use super::OidcHeaderSet;
use crate::clock::Timestamp;

/// Single-user validation cache. One instance belongs to one workspace
/// container, which only ever serves one user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyCache {
    pub kid: Option<String>,
    pub pk: Option<String>,
    pub user_id: Option<String>,
    pub jwt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifiedIdentity {
    pub oidc_id: String,
    pub token: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum VerificationFailure {
    #[error("no token in header")]
    NoToken,
    #[error("token failed to decode: {0}")]
    MalformedToken(String),
    #[error("no key id in token")]
    MissingKeyId,
    #[error("public key fetch failed: {0}")]
    KeyFetchFailed(KeyFetchError),
    #[error("token failed to validate")]
    SignatureInvalid,
    #[error("user id in token ({token_sub:?}) does not match user id in header ({header:?})")]
    SubjectMismatch { token_sub: String, header: Option<String> },
    #[error("token expired at {exp}")]
    Expired { exp: i64 },
}

impl VerificationFailure {
    /// Stable machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            VerificationFailure::NoToken => "no-token",
            VerificationFailure::MalformedToken(_) => "malformed-token",
            VerificationFailure::MissingKeyId => "missing-key-id",
            VerificationFailure::KeyFetchFailed(_) => "key-fetch-failed",
            VerificationFailure::SignatureInvalid => "signature-invalid",
            VerificationFailure::SubjectMismatch { .. } => "subject-mismatch",
            VerificationFailure::Expired { .. } => "expired",
        }
    }
}

impl From<TokenError> for VerificationFailure {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::Malformed(m) => VerificationFailure::MalformedToken(m),
            TokenError::MissingKeyId => VerificationFailure::MissingKeyId,
            TokenError::EmptySubject => VerificationFailure::MalformedToken("empty subject".into()),
            TokenError::UnsupportedAlgorithm(_) | TokenError::SignatureInvalid => VerificationFailure::SignatureInvalid,
            TokenError::InvalidKey(m) => {
                VerificationFailure::KeyFetchFailed(KeyFetchError::ProviderUnreachable(format!("unusable key: {m}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierConfig {
    /// The only algorithm accepted; any other `alg` is refused.
    pub algorithm: Algorithm,
    #[serde(with = "crate::clock::duration_secs")]
    pub clock_skew: Duration,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Es256,
            clock_skew: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Verifier {
    config: VerifierConfig,
}

impl Verifier {
    pub fn new(config: VerifierConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.config
    }

    /// Expired once `now >= exp + skew`.
    pub fn check_expiry(&self, exp: i64, now: Timestamp) -> Result<(), VerificationFailure> {
        let skew = i64::try_from(self.config.clock_skew.as_secs()).unwrap_or(i64::MAX);
        if now.timestamp() >= exp.saturating_add(skew) {
            Err(VerificationFailure::Expired { exp })
        } else {
            Ok(())
        }
    }

    /// Validates the gateway headers, updating `cache` on success.
    ///
    /// Order: missing token, cache fast path, header decode, kid rotation
    /// eviction, key fetch, signature and expiry, subject match, cache update.
    /// The fast path still enforces expiry by reading the claims of the
    /// cached token, which were verified when it was cached.
    pub fn verify_jwt(
        &self,
        headers: &OidcHeaderSet,
        cache: &mut KeyCache,
        provider: &dyn KeyProvider,
        now: Timestamp,
    ) -> Result<VerifiedIdentity, VerificationFailure> {
        let Some(jwt) = headers.data.as_deref().filter(|t| !t.is_empty()) else {
            tracing::warn!("no token in header");
            return Err(VerificationFailure::NoToken);
        };
        let identity = headers.identity.as_deref();

        if cache.user_id.is_some() && cache.user_id.as_deref() == identity && cache.jwt.as_deref() == Some(jwt) {
            let claims = decode_unverified_claims(jwt)?;
            self.check_expiry(claims.exp, now)?;
            return Ok(VerifiedIdentity {
                oidc_id: claims.sub,
                token: jwt.to_string(),
            });
        }

        let header = parse_unverified_header(jwt).inspect_err(|e| {
            tracing::error!("token failed to decode: {e}");
        })?;

        // A token for another algorithm cannot verify; refuse it before any
        // key is fetched or evicted.
        if header.alg != self.config.algorithm.as_str() {
            tracing::info!("token algorithm {} is not accepted", header.alg);
            return Err(VerificationFailure::SignatureInvalid);
        }

        if cache.kid.as_deref() != Some(header.kid.as_str()) {
            cache.pk = None;
        }

        let pk = match cache.pk.clone() {
            Some(pk) => pk,
            None => {
                let pk = fetch_public_key(&header.kid, provider).map_err(|e| {
                    tracing::error!("key fetch failed: {e}");
                    VerificationFailure::KeyFetchFailed(e)
                })?;
                cache.pk = Some(pk.clone());
                cache.kid = Some(header.kid.clone());
                pk
            }
        };

        let key = match VerifyingKey::from_public_key_pem(self.config.algorithm, &pk) {
            Ok(key) => key,
            Err(e) => {
                // Unusable key text is never kept; the next call refetches.
                cache.pk = None;
                return Err(e.into());
            }
        };
        let claims = decode_verified(jwt, &key, self.config.algorithm).inspect_err(|e| {
            tracing::info!("token failed to validate: {e}");
        })?;
        self.check_expiry(claims.exp, now)?;
        if claims.sub.is_empty() {
            return Err(VerificationFailure::MalformedToken("empty subject".into()));
        }

        if Some(claims.sub.as_str()) != identity {
            tracing::error!("user id in token doesn't match user id in header");
            return Err(VerificationFailure::SubjectMismatch {
                token_sub: claims.sub,
                header: identity.map(str::to_string),
            });
        }

        cache.user_id = Some(claims.sub.clone());
        cache.jwt = Some(jwt.to_string());
        Ok(VerifiedIdentity {
            oidc_id: claims.sub,
            token: jwt.to_string(),
        })
    }
}

/// Pure cache check: true iff identity and token are both present, equal the
/// cached pair, and the token's kid equals the cached kid. Never touches a
/// key provider and never mutates the cache.
pub fn verify_oidc(headers: &OidcHeaderSet, cache: &KeyCache) -> bool {
    let (Some(id), Some(jwt)) = (headers.identity.as_deref(), headers.data.as_deref()) else {
        return false;
    };
    if cache.user_id.as_deref() != Some(id) || cache.jwt.as_deref() != Some(jwt) {
        return false;
    }
    match parse_unverified_header(jwt) {
        Ok(header) => cache.kid.as_deref() == Some(header.kid.as_str()),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{mint_token, SigningKey, StaticKeyProvider, TokenClaims};
    use crate::clock::{Clock, VirtualClock};

    struct Fixture {
        key: SigningKey,
        provider: StaticKeyProvider,
        clock: VirtualClock,
    }

    impl Fixture {
        fn new() -> Self {
            let key = SigningKey::generate(Algorithm::Es256);
            let provider = StaticKeyProvider::new();
            provider.insert("k-001", key.public_key_pem());
            Self {
                key,
                provider,
                clock: VirtualClock::at_epoch(),
            }
        }

        fn token(&self, sub: &str, kid: &str, ttl: i64) -> String {
            let exp = self.clock.now().timestamp() + ttl;
            mint_token(&self.key, &TokenClaims::new(sub, exp), kid).unwrap()
        }

        fn headers(&self, identity: &str, token: &str) -> OidcHeaderSet {
            OidcHeaderSet {
                access_token: Some("opaque".into()),
                identity: Some(identity.into()),
                data: Some(token.into()),
            }
        }
    }

    #[test]
    fn valid_token_for_matching_identity() {
        let f = Fixture::new();
        let mut cache = KeyCache::default();
        let token = f.token("alice", "k-001", 3600);
        let id = Verifier::default()
            .verify_jwt(&f.headers("alice", &token), &mut cache, &f.provider, f.clock.now())
            .unwrap();
        assert_eq!(id.oidc_id, "alice");
        assert_eq!(cache.user_id.as_deref(), Some("alice"));
        assert_eq!(cache.jwt.as_deref(), Some(token.as_str()));
        assert_eq!(cache.kid.as_deref(), Some("k-001"));
        assert!(cache.pk.is_some());
    }

    #[test]
    fn identity_mismatch_is_rejected() {
        let f = Fixture::new();
        let mut cache = KeyCache::default();
        let token = f.token("alice", "k-001", 3600);
        let err = Verifier::default()
            .verify_jwt(&f.headers("bob", &token), &mut cache, &f.provider, f.clock.now())
            .unwrap_err();
        assert!(matches!(err, VerificationFailure::SubjectMismatch { .. }));
        assert!(cache.user_id.is_none() && cache.jwt.is_none());
    }

    #[test]
    fn warm_cache_needs_no_provider() {
        let f = Fixture::new();
        let mut cache = KeyCache::default();
        let headers = f.headers("alice", &f.token("alice", "k-001", 3600));
        let v = Verifier::default();
        v.verify_jwt(&headers, &mut cache, &f.provider, f.clock.now()).unwrap();
        f.provider.set_offline(true);
        let calls = f.provider.calls();
        v.verify_jwt(&headers, &mut cache, &f.provider, f.clock.now()).unwrap();
        assert_eq!(f.provider.calls(), calls);
    }

    #[test]
    fn kid_rotation_evicts_and_fetches_once() {
        let f = Fixture::new();
        let mut cache = KeyCache::default();
        let v = Verifier::default();
        v.verify_jwt(
            &f.headers("alice", &f.token("alice", "k-001", 3600)),
            &mut cache,
            &f.provider,
            f.clock.now(),
        )
        .unwrap();
        let rotated = SigningKey::generate(Algorithm::Es256);
        f.provider.insert("k-002", rotated.public_key_pem());
        let exp = f.clock.now().timestamp() + 3600;
        let token = mint_token(&rotated, &TokenClaims::new("alice", exp), "k-002").unwrap();
        let before = f.provider.calls();
        v.verify_jwt(&f.headers("alice", &token), &mut cache, &f.provider, f.clock.now())
            .unwrap();
        assert_eq!(f.provider.calls(), before + 1);
        assert_eq!(cache.kid.as_deref(), Some("k-002"));
        assert_eq!(cache.pk, Some(rotated.public_key_pem()));
    }

    #[test]
    fn missing_data_header_is_no_token() {
        let f = Fixture::new();
        let headers = OidcHeaderSet {
            access_token: Some("t".into()),
            identity: Some("alice".into()),
            data: None,
        };
        let err = Verifier::default()
            .verify_jwt(&headers, &mut KeyCache::default(), &f.provider, f.clock.now())
            .unwrap_err();
        assert_eq!(err, VerificationFailure::NoToken);
        assert_eq!(f.provider.calls(), 0);
    }

    #[test]
    fn expired_tokens_fail_on_both_paths() {
        let f = Fixture::new();
        let v = Verifier::default();
        let past = f.token("alice", "k-001", -61);
        let err = v
            .verify_jwt(
                &f.headers("alice", &past),
                &mut KeyCache::default(),
                &f.provider,
                f.clock.now(),
            )
            .unwrap_err();
        assert!(matches!(err, VerificationFailure::Expired { .. }));

        // Within the skew allowance the token still passes, then ages out
        // while cached.
        let mut cache = KeyCache::default();
        let short = f.token("alice", "k-001", 30);
        let headers = f.headers("alice", &short);
        v.verify_jwt(&headers, &mut cache, &f.provider, f.clock.now()).unwrap();
        f.clock.advance(Duration::from_secs(89));
        v.verify_jwt(&headers, &mut cache, &f.provider, f.clock.now()).unwrap();
        f.clock.advance(Duration::from_secs(1));
        assert!(matches!(
            v.verify_jwt(&headers, &mut cache, &f.provider, f.clock.now()),
            Err(VerificationFailure::Expired { .. })
        ));
    }

    #[test]
    fn unknown_kid_and_offline_provider_fail_cleanly() {
        let f = Fixture::new();
        let v = Verifier::default();
        let token = f.token("alice", "absent", 3600);
        assert!(matches!(
            v.verify_jwt(
                &f.headers("alice", &token),
                &mut KeyCache::default(),
                &f.provider,
                f.clock.now()
            ),
            Err(VerificationFailure::KeyFetchFailed(KeyFetchError::KeyNotFound(_)))
        ));
        f.provider.set_offline(true);
        let token = f.token("alice", "k-001", 3600);
        assert!(matches!(
            v.verify_jwt(
                &f.headers("alice", &token),
                &mut KeyCache::default(),
                &f.provider,
                f.clock.now()
            ),
            Err(VerificationFailure::KeyFetchFailed(KeyFetchError::ProviderUnreachable(
                _
            )))
        ));
    }

    #[test]
    fn garbage_key_text_is_not_kept() {
        let f = Fixture::new();
        f.provider.insert("k-bad", "not a key");
        let token = f.token("alice", "k-bad", 3600);
        let mut cache = KeyCache::default();
        assert!(matches!(
            Verifier::default().verify_jwt(&f.headers("alice", &token), &mut cache, &f.provider, f.clock.now()),
            Err(VerificationFailure::KeyFetchFailed(_))
        ));
        assert!(cache.pk.is_none());
    }

    #[test]
    fn verify_oidc_is_a_pure_cache_check() {
        let f = Fixture::new();
        let mut cache = KeyCache::default();
        let token = f.token("alice", "k-001", 3600);
        let headers = f.headers("alice", &token);
        assert!(!verify_oidc(&headers, &cache));
        Verifier::default()
            .verify_jwt(&headers, &mut cache, &f.provider, f.clock.now())
            .unwrap();
        let calls = f.provider.calls();
        let snapshot = cache.clone();

        assert!(verify_oidc(&headers, &cache));
        let other = f.token("alice", "k-001", 7200);
        assert!(!verify_oidc(&f.headers("alice", &other), &cache));
        assert!(!verify_oidc(&OidcHeaderSet::default(), &cache));
        assert!(!verify_oidc(&f.headers("bob", &token), &cache));

        let mut rotated = cache.clone();
        rotated.kid = Some("k-999".into());
        assert!(!verify_oidc(&headers, &rotated));

        assert_eq!(cache, snapshot);
        assert_eq!(f.provider.calls(), calls);
    }
}
