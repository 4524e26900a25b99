//! Path rewriting for applications that cannot be given a base URL.
//!
//! Requests under `/<user>/<app>` are passed upstream with the prefix
//! removed, and redirects coming back have it put back.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{path:?} is outside {prefix:?}")]
pub struct PrefixMismatch {
    pub prefix: String,
    pub path: String,
}

fn trim_prefix(prefix: &str) -> &str {
    prefix.strip_suffix('/').unwrap_or(prefix)
}

/// Strips `prefix` from `request_path`; the bare prefix becomes `/`.
/// A query string, if present, is carried over.
pub fn rewrite_prefix(prefix: &str, request_path: &str) -> Result<String, PrefixMismatch> {
    let prefix = trim_prefix(prefix);
    let mismatch = || PrefixMismatch {
        prefix: prefix.to_string(),
        path: request_path.to_string(),
    };
    let rest = request_path.strip_prefix(prefix).ok_or_else(mismatch)?;
    if rest.is_empty() {
        Ok("/".to_string())
    } else if rest.starts_with('/') {
        Ok(rest.to_string())
    } else if rest.starts_with('?') {
        Ok(format!("/{rest}"))
    } else {
        Err(mismatch())
    }
}

/// Puts `prefix` back in front of an upstream path.
pub fn reverse_prefix(prefix: &str, upstream_path: &str) -> String {
    let prefix = trim_prefix(prefix);
    if upstream_path.starts_with('/') {
        format!("{prefix}{upstream_path}")
    } else {
        format!("{prefix}/{upstream_path}")
    }
}

/// Maps an upstream `Location` header back under `prefix`. Absolute URLs
/// naming the upstream server keep only their path; anything else is
/// treated as a path.
pub fn reverse_location(prefix: &str, location: &str) -> String {
    if let Ok(uri) = location.parse::<http::Uri>() {
        if uri.scheme().is_some() {
            let pq = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
            return reverse_prefix(prefix, pq);
        }
    }
    reverse_prefix(prefix, location)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_prefix() {
        assert_eq!(
            rewrite_prefix("/alice/rstudio", "/alice/rstudio/files").unwrap(),
            "/files"
        );
        assert_eq!(rewrite_prefix("/alice/rstudio", "/alice/rstudio").unwrap(), "/");
        assert_eq!(rewrite_prefix("/alice/rstudio/", "/alice/rstudio/").unwrap(), "/");
        assert_eq!(rewrite_prefix("/alice/rstudio", "/alice/rstudio?a=1").unwrap(), "/?a=1");
    }

    #[test]
    fn rejects_outside_paths() {
        assert!(rewrite_prefix("/alice/rstudio", "/bob/rstudio/x").is_err());
        assert!(rewrite_prefix("/alice/rstudio", "/alice/rstudiox").is_err());
    }

    #[test]
    fn reverse_mapping() {
        assert_eq!(
            reverse_prefix("/alice/rstudio", "/auth-sign-in"),
            "/alice/rstudio/auth-sign-in"
        );
        assert_eq!(
            reverse_location("/alice/rstudio", "http://localhost:8787/auth-sign-in?x=1"),
            "/alice/rstudio/auth-sign-in?x=1"
        );
    }
}
