//! RStudio session cookie and the sign-in endpoint that issues it.
//!
//! The cookie is `username|expiry|signature`, percent-encoded with `|` left
//! alone, where the signature is base64 HMAC-SHA256 over the username
//! immediately followed by the expiry string.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{NaiveDateTime, TimeDelta};
use hmac::{Hmac, Mac};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use sha2::Sha256;
use thiserror::Error;

use super::guard::AppAuth;
use crate::auth::OidcHeaderSet;
use crate::clock::Timestamp;
use crate::net::{redirect, response, HttpResponse};

pub const COOKIE_NAME: &str = "user-id";
/// Every user signs in to RStudio as the image's default account.
pub const DEFAULT_USERNAME: &str = "rstudio";
pub const SECRET_PATH: &str = "/var/lib/rstudio-server/secure-cookie-key";
pub const EXPIRY_FORMAT: &str = "%a, %d %b %Y %H:%M:%S GMT";
pub const SIGN_IN_PATH: &str = "/auth-sign-in";
pub const PING_PATH: &str = "/ping";

/// Characters `urllib.parse.quote(s, '|')` leaves unencoded.
const QUOTE_SAFE: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'_')
    .remove(b'.')
    .remove(b'-')
    .remove(b'~')
    .remove(b'|');

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CookieError {
    #[error("invalid cookie input: {0}")]
    InvalidInput(&'static str),
    #[error("malformed cookie: {0}")]
    Malformed(String),
    #[error("cookie signature does not match")]
    BadSignature,
    #[error("cookie expired")]
    ExpiredCookie,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedCookie {
    pub username: String,
    pub expiry: String,
    pub signature: String,
}

impl SignedCookie {
    pub fn mint(username: &str, days: i64, secret: &[u8], now: Timestamp) -> Result<Self, CookieError> {
        if days <= 0 {
            return Err(CookieError::InvalidInput("days must be positive"));
        }
        if secret.is_empty() {
            return Err(CookieError::InvalidInput("secret must not be empty"));
        }
        if username.contains('|') {
            return Err(CookieError::InvalidInput("username must not contain '|'"));
        }
        let expiry_at = TimeDelta::try_days(days)
            .and_then(|d| now.checked_add_signed(d))
            .ok_or(CookieError::InvalidInput("expiry out of range"))?;
        let expiry = expiry_at.format(EXPIRY_FORMAT).to_string();
        let signature = STANDARD.encode(mac(secret, username, &expiry).finalize().into_bytes());
        Ok(Self {
            username: username.to_string(),
            expiry,
            signature,
        })
    }

    pub fn to_wire(&self) -> String {
        let raw = format!("{}|{}|{}", self.username, self.expiry, self.signature);
        utf8_percent_encode(&raw, QUOTE_SAFE).to_string()
    }

    pub fn parse(wire: &str) -> Result<Self, CookieError> {
        let raw = percent_decode_str(wire)
            .decode_utf8()
            .map_err(|e| CookieError::Malformed(e.to_string()))?;
        let parts: Vec<&str> = raw.split('|').collect();
        let [username, expiry, signature] = parts[..] else {
            return Err(CookieError::Malformed(format!(
                "expected 3 fields, found {}",
                parts.len()
            )));
        };
        Ok(Self {
            username: username.to_string(),
            expiry: expiry.to_string(),
            signature: signature.to_string(),
        })
    }

    pub fn expires_at(&self) -> Result<Timestamp, CookieError> {
        NaiveDateTime::parse_from_str(&self.expiry, EXPIRY_FORMAT)
            .map(|t| t.and_utc())
            .map_err(|e| CookieError::Malformed(format!("expiry: {e}")))
    }

    /// Constant-time signature check, then expiry.
    pub fn verify(&self, secret: &[u8], now: Timestamp) -> Result<(), CookieError> {
        let expires = self.expires_at()?;
        let given = STANDARD
            .decode(&self.signature)
            .map_err(|_| CookieError::BadSignature)?;
        mac(secret, &self.username, &self.expiry)
            .verify_slice(&given)
            .map_err(|_| CookieError::BadSignature)?;
        if expires <= now {
            return Err(CookieError::ExpiredCookie);
        }
        Ok(())
    }
}

fn mac(secret: &[u8], username: &str, expiry: &str) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts keys of any length");
    mac.update(username.as_bytes());
    mac.update(expiry.as_bytes());
    mac
}

/// The cookie value as it goes on the wire.
pub fn rstudio_mint_cookie(username: &str, days: i64, secret: &[u8], now: Timestamp) -> Result<String, CookieError> {
    SignedCookie::mint(username, days, secret, now).map(|c| c.to_wire())
}

/// Returns the username of a valid, unexpired cookie.
pub fn rstudio_verify_cookie(wire: &str, secret: &[u8], now: Timestamp) -> Result<String, CookieError> {
    let cookie = SignedCookie::parse(wire)?;
    cookie.verify(secret, now)?;
    Ok(cookie.username)
}

/// The sign-in endpoint: validate the gateway headers, set the session
/// cookie scoped to `prefix`, and send the browser to the application root.
pub fn rstudio_auth_signin(
    headers: &OidcHeaderSet,
    auth: &AppAuth,
    secret: &[u8],
    prefix: &str,
    days: i64,
) -> HttpResponse {
    if let Err(denial) = auth.verify(headers) {
        tracing::warn!(reason = denial.code(), "rstudio sign-in refused");
        return response(403, "text/plain; charset=utf-8", format!("{}\n", denial.code()));
    }
    let wire = match rstudio_mint_cookie(DEFAULT_USERNAME, days, secret, auth.clock.now()) {
        Ok(w) => w,
        Err(e) => return response(500, "text/plain; charset=utf-8", format!("{e}\n")),
    };
    let prefix = prefix.strip_suffix('/').unwrap_or(prefix);
    let mut resp = redirect(302, &format!("{prefix}/"));
    let cookie = format!("{COOKIE_NAME}={wire}; Path={prefix}; Secure; HttpOnly");
    if let Ok(v) = http::HeaderValue::from_str(&cookie) {
        resp.headers_mut().append(http::header::SET_COOKIE, v);
    }
    resp
}
