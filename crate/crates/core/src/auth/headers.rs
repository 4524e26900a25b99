use http::{HeaderMap, HeaderName, HeaderValue};

pub const ACCESS_TOKEN_HEADER: &str = "x-amzn-oidc-accesstoken";
pub const IDENTITY_HEADER: &str = "x-amzn-oidc-identity";
pub const DATA_HEADER: &str = "x-amzn-oidc-data";
pub const OIDC_HEADER_PREFIX: &str = "x-amzn-oidc-";

/// The three identity headers the gateway attaches to authenticated
/// requests. Absent headers stay `None`; nothing here is validated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OidcHeaderSet {
    pub access_token: Option<String>,
    pub identity: Option<String>,
    pub data: Option<String>,
}

impl OidcHeaderSet {
    /// Builds a header set from arbitrary `(name, value)` pairs, matching
    /// names case-insensitively. The first occurrence of a name wins.
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut set = Self::default();
        for (name, value) in pairs {
            let slot = match name.as_ref().to_ascii_lowercase().as_str() {
                ACCESS_TOKEN_HEADER => &mut set.access_token,
                IDENTITY_HEADER => &mut set.identity,
                DATA_HEADER => &mut set.data,
                _ => continue,
            };
            if slot.is_none() {
                *slot = Some(value.as_ref().to_string());
            }
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        self.access_token.is_none() && self.identity.is_none() && self.data.is_none()
    }

    /// Writes the present fields into `headers`, replacing existing values.
    pub fn apply_to(&self, headers: &mut HeaderMap) {
        for (name, value) in [
            (ACCESS_TOKEN_HEADER, &self.access_token),
            (IDENTITY_HEADER, &self.identity),
            (DATA_HEADER, &self.data),
        ] {
            if let Some(v) = value.as_deref().and_then(|v| HeaderValue::from_str(v).ok()) {
                headers.insert(HeaderName::from_static(name), v);
            }
        }
    }
}

pub fn extract_oidc_headers(headers: &HeaderMap) -> OidcHeaderSet {
    OidcHeaderSet::from_pairs(
        headers
            .iter()
            .filter_map(|(k, v)| v.to_str().ok().map(|v| (k.as_str(), v))),
    )
}

/// Removes every `x-amzn-oidc-*` header, whatever its suffix.
pub fn strip_oidc_headers(headers: &mut HeaderMap) {
    let doomed: Vec<HeaderName> = headers
        .keys()
        .filter(|k| k.as_str().starts_with(OIDC_HEADER_PREFIX))
        .cloned()
        .collect();
    for name in doomed {
        headers.remove(&name);
    }
}
