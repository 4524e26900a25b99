//! Compact signed tokens (`header.claims.signature`, each segment base64url
//! without padding) with ECDSA signatures in the fixed-width `r || s` form.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use p256::ecdsa::signature::{Signer, Verifier as _};
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "ES256")]
    Es256,
    #[serde(rename = "ES384")]
    Es384,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Es256 => "ES256",
            Algorithm::Es384 => "ES384",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ES256" => Ok(Algorithm::Es256),
            "ES384" => Ok(Algorithm::Es384),
            other => Err(TokenError::UnsupportedAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("no key id in token header")]
    MissingKeyId,
    #[error("token subject is empty")]
    EmptySubject,
    #[error("unsupported or unexpected signature algorithm {0:?}")]
    UnsupportedAlgorithm(String),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("signature does not verify")]
    SignatureInvalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenHeader {
    pub kid: String,
    pub alg: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    alg: Option<String>,
    #[serde(default)]
    kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    typ: Option<String>,
}

/// Claims carried by a gateway token. Only `sub` and `exp` are interpreted;
/// anything else passes through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub sub: String,
    /// Seconds since the Unix epoch.
    pub exp: i64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TokenClaims {
    pub fn new(sub: impl Into<String>, exp: i64) -> Self {
        Self {
            sub: sub.into(),
            exp,
            extra: Map::new(),
        }
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(name.to_string(), value.into());
        self
    }
}

#[derive(Clone)]
enum SigningInner {
    P256(p256::ecdsa::SigningKey),
    P384(p384::ecdsa::SigningKey),
}

/// Private signing key for one of the supported curves.
#[derive(Clone)]
pub struct SigningKey {
    inner: SigningInner,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("alg", &self.algorithm())
            .finish_non_exhaustive()
    }
}

impl SigningKey {
    pub fn generate(alg: Algorithm) -> Self {
        let inner = match alg {
            Algorithm::Es256 => SigningInner::P256(p256::ecdsa::SigningKey::random(&mut OsRng)),
            Algorithm::Es384 => SigningInner::P384(p384::ecdsa::SigningKey::random(&mut OsRng)),
        };
        Self { inner }
    }

    pub fn from_pkcs8_pem(alg: Algorithm, pem: &str) -> Result<Self, TokenError> {
        let bad = |e: p256::pkcs8::Error| TokenError::InvalidKey(e.to_string());
        let inner = match alg {
            Algorithm::Es256 => SigningInner::P256(p256::ecdsa::SigningKey::from_pkcs8_pem(pem).map_err(bad)?),
            Algorithm::Es384 => SigningInner::P384(p384::ecdsa::SigningKey::from_pkcs8_pem(pem).map_err(bad)?),
        };
        Ok(Self { inner })
    }

    pub fn to_pkcs8_pem(&self) -> String {
        let pem = match &self.inner {
            SigningInner::P256(k) => k.to_pkcs8_pem(LineEnding::LF),
            SigningInner::P384(k) => k.to_pkcs8_pem(LineEnding::LF),
        };
        pem.expect("in-memory key encodes").to_string()
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.inner {
            SigningInner::P256(_) => Algorithm::Es256,
            SigningInner::P384(_) => Algorithm::Es384,
        }
    }

    /// SubjectPublicKeyInfo PEM of the matching public key; this is the text
    /// a key provider serves for the key id.
    pub fn public_key_pem(&self) -> String {
        let pem = match &self.inner {
            SigningInner::P256(k) => k.verifying_key().to_public_key_pem(LineEnding::LF),
            SigningInner::P384(k) => k.verifying_key().to_public_key_pem(LineEnding::LF),
        };
        pem.expect("in-memory key encodes")
    }

    fn sign(&self, message: &[u8]) -> Vec<u8> {
        match &self.inner {
            SigningInner::P256(k) => {
                let sig: p256::ecdsa::Signature = k.sign(message);
                sig.to_bytes().to_vec()
            }
            SigningInner::P384(k) => {
                let sig: p384::ecdsa::Signature = k.sign(message);
                sig.to_bytes().to_vec()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum VerifyingKey {
    P256(p256::ecdsa::VerifyingKey),
    P384(p384::ecdsa::VerifyingKey),
}

impl VerifyingKey {
    /// Parses SubjectPublicKeyInfo PEM for the curve `alg` names.
    pub fn from_public_key_pem(alg: Algorithm, pem: &str) -> Result<Self, TokenError> {
        let bad = |e: p256::pkcs8::spki::Error| TokenError::InvalidKey(e.to_string());
        match alg {
            Algorithm::Es256 => p256::ecdsa::VerifyingKey::from_public_key_pem(pem)
                .map(VerifyingKey::P256)
                .map_err(bad),
            Algorithm::Es384 => p384::ecdsa::VerifyingKey::from_public_key_pem(pem)
                .map(VerifyingKey::P384)
                .map_err(bad),
        }
    }

    fn verify(&self, message: &[u8], signature: &[u8]) -> Result<(), TokenError> {
        let ok = match self {
            VerifyingKey::P256(k) => p256::ecdsa::Signature::from_slice(signature)
                .map(|sig| k.verify(message, &sig).is_ok())
                .unwrap_or(false),
            VerifyingKey::P384(k) => p384::ecdsa::Signature::from_slice(signature)
                .map(|sig| k.verify(message, &sig).is_ok())
                .unwrap_or(false),
        };
        if ok {
            Ok(())
        } else {
            Err(TokenError::SignatureInvalid)
        }
    }
}

struct Segments<'a> {
    signing_input: &'a str,
    header: Vec<u8>,
    claims: Vec<u8>,
    signature: Vec<u8>,
}

fn b64(segment: &str, what: &str) -> Result<Vec<u8>, TokenError> {
    URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| TokenError::Malformed(format!("{what} segment: {e}")))
}

fn split(token: &str) -> Result<Segments<'_>, TokenError> {
    let mut parts = token.split('.');
    let (Some(h), Some(c), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(TokenError::Malformed("expected three dot-separated segments".into()));
    };
    Ok(Segments {
        signing_input: &token[..h.len() + 1 + c.len()],
        header: b64(h, "header")?,
        claims: b64(c, "claims")?,
        signature: b64(s, "signature")?,
    })
}

fn header_of(bytes: &[u8]) -> Result<RawHeader, TokenError> {
    serde_json::from_slice(bytes).map_err(|e| TokenError::Malformed(format!("header: {e}")))
}

/// Decodes the header segment only. No signature check happens here.
pub fn parse_unverified_header(token: &str) -> Result<TokenHeader, TokenError> {
    let segments = split(token)?;
    let raw = header_of(&segments.header)?;
    let alg = raw
        .alg
        .ok_or_else(|| TokenError::Malformed("header has no alg".into()))?;
    match raw.kid {
        Some(kid) if !kid.is_empty() => Ok(TokenHeader { kid, alg }),
        _ => Err(TokenError::MissingKeyId),
    }
}

/// Decodes the claims segment without verifying anything.
pub(crate) fn decode_unverified_claims(token: &str) -> Result<TokenClaims, TokenError> {
    let segments = split(token)?;
    serde_json::from_slice(&segments.claims).map_err(|e| TokenError::Malformed(format!("claims: {e}")))
}

/// Checks the algorithm and signature, then decodes the claims.
/// Expiry is the caller's concern.
pub(crate) fn decode_verified(token: &str, key: &VerifyingKey, expected: Algorithm) -> Result<TokenClaims, TokenError> {
    let segments = split(token)?;
    let raw = header_of(&segments.header)?;
    match raw.alg.as_deref() {
        Some(alg) if alg == expected.as_str() => {}
        other => return Err(TokenError::UnsupportedAlgorithm(other.unwrap_or("").to_string())),
    }
    let key_alg = match key {
        VerifyingKey::P256(_) => Algorithm::Es256,
        VerifyingKey::P384(_) => Algorithm::Es384,
    };
    if key_alg != expected {
        return Err(TokenError::UnsupportedAlgorithm(key_alg.as_str().to_string()));
    }
    key.verify(segments.signing_input.as_bytes(), &segments.signature)?;
    let claims: TokenClaims =
        serde_json::from_slice(&segments.claims).map_err(|e| TokenError::Malformed(format!("claims: {e}")))?;
    Ok(claims)
}

/// Signs `claims` under `kid`. The subject must be non-empty; the key id
/// must be one the verifiers' key provider will serve.
pub fn mint_token(key: &SigningKey, claims: &TokenClaims, kid: &str) -> Result<String, TokenError> {
    if claims.sub.is_empty() {
        return Err(TokenError::EmptySubject);
    }
    let header = RawHeader {
        alg: Some(key.algorithm().as_str().to_string()),
        kid: Some(kid.to_string()),
        typ: Some("JWT".to_string()),
    };
    let header = serde_json::to_vec(&header).map_err(|e| TokenError::Malformed(e.to_string()))?;
    let body = serde_json::to_vec(claims).map_err(|e| TokenError::Malformed(e.to_string()))?;
    let mut token = URL_SAFE_NO_PAD.encode(header);
    token.push('.');
    token.push_str(&URL_SAFE_NO_PAD.encode(body));
    let signature = key.sign(token.as_bytes());
    token.push('.');
    token.push_str(&URL_SAFE_NO_PAD.encode(signature));
    Ok(token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SigningKey {
        SigningKey::generate(Algorithm::Es256)
    }

    #[test]
    fn header_round_trips_kid() {
        let token = mint_token(&key(), &TokenClaims::new("alice", 4_000_000_000), "k-001").unwrap();
        assert_eq!(
            parse_unverified_header(&token).unwrap(),
            TokenHeader {
                kid: "k-001".into(),
                alg: "ES256".into()
            }
        );
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            parse_unverified_header("not-a-token"),
            Err(TokenError::Malformed(_))
        ));
        assert!(matches!(parse_unverified_header("a.b"), Err(TokenError::Malformed(_))));
        assert!(matches!(
            parse_unverified_header("a.b.c.d"),
            Err(TokenError::Malformed(_))
        ));
        assert!(matches!(
            parse_unverified_header("!!.e30.e30"),
            Err(TokenError::Malformed(_))
        ));
    }

    #[test]
    fn empty_kid_is_missing_key_id() {
        let token = mint_token(&key(), &TokenClaims::new("alice", 4_000_000_000), "").unwrap();
        assert_eq!(parse_unverified_header(&token), Err(TokenError::MissingKeyId));
        let no_kid = format!("{}.e30.e30", URL_SAFE_NO_PAD.encode(br#"{"alg":"ES256"}"#));
        assert_eq!(parse_unverified_header(&no_kid), Err(TokenError::MissingKeyId));
    }

    #[test]
    fn empty_subject_is_refused_at_mint() {
        assert_eq!(
            mint_token(&key(), &TokenClaims::new("", 1), "k"),
            Err(TokenError::EmptySubject)
        );
    }

    #[test]
    fn verify_accepts_own_signature_and_rejects_other_key() {
        let k = key();
        let claims = TokenClaims::new("alice", 4_000_000_000).with("iss", "gw");
        let token = mint_token(&k, &claims, "k").unwrap();
        let vk = VerifyingKey::from_public_key_pem(Algorithm::Es256, &k.public_key_pem()).unwrap();
        assert_eq!(decode_verified(&token, &vk, Algorithm::Es256).unwrap(), claims);

        let other = VerifyingKey::from_public_key_pem(Algorithm::Es256, &key().public_key_pem()).unwrap();
        assert_eq!(
            decode_verified(&token, &other, Algorithm::Es256),
            Err(TokenError::SignatureInvalid)
        );
    }

    #[test]
    fn algorithm_confusion_is_rejected() {
        let k384 = SigningKey::generate(Algorithm::Es384);
        let token = mint_token(&k384, &TokenClaims::new("alice", 4_000_000_000), "k").unwrap();
        let vk = VerifyingKey::from_public_key_pem(Algorithm::Es384, &k384.public_key_pem()).unwrap();
        assert!(decode_verified(&token, &vk, Algorithm::Es384).is_ok());
        assert!(matches!(
            decode_verified(&token, &vk, Algorithm::Es256),
            Err(TokenError::UnsupportedAlgorithm(_))
        ));
    }

    #[test]
    fn pkcs8_round_trip() {
        let k = key();
        let again = SigningKey::from_pkcs8_pem(Algorithm::Es256, &k.to_pkcs8_pem()).unwrap();
        assert_eq!(k.public_key_pem(), again.public_key_pem());
    }
}
