//! Identity-token handling shared by the gateway, the hub and every
//! workspace application.
//!
//! The gateway mints a compact signed token for each authenticated request
//! and attaches it, together with the subject and an opaque access token, as
//! three request headers. Applications validate those headers with
//! [`Verifier::verify_jwt`], which keeps a single-user [`KeyCache`] so that
//! repeat requests from the same user skip both the key fetch and the
//! signature check.

mod headers;
mod keys;
mod token;
mod verify;

pub use headers::{
    extract_oidc_headers, strip_oidc_headers, OidcHeaderSet, ACCESS_TOKEN_HEADER, DATA_HEADER, IDENTITY_HEADER,
    OIDC_HEADER_PREFIX,
};
pub use keys::{fetch_public_key, HttpKeyProvider, KeyFetchError, KeyProvider, StaticKeyProvider};
pub use token::{
    mint_token, parse_unverified_header, Algorithm, SigningKey, TokenClaims, TokenError, TokenHeader, VerifyingKey,
};
pub use verify::{verify_oidc, KeyCache, VerificationFailure, VerifiedIdentity, Verifier, VerifierConfig};

pub(crate) use token::{decode_unverified_claims, decode_verified};
