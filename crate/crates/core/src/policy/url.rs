//! URL normalization and endpoint filters for NETWORK rules.
//!
//! Parsing is delegated to the `url` crate (WHATWG rules: dot-segment
//! resolution, IPv4 canonicalization, percent-encoding of unsafe bytes).
//! On top of that we restrict schemes to http/https, refuse userinfo and
//! IPv6 hosts, strip a trailing host dot, and always carry an explicit port.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;
use url::{Host, Url};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UrlError {
    #[error("malformed url {0:?}: {1}")]
    Malformed(String, String),
    #[error("unsupported scheme {0:?}: only http and https are allowed")]
    UnsupportedScheme(String),
    #[error("url {0:?} has an empty host")]
    EmptyHost(String),
    #[error("url {0:?} has a malformed port")]
    MalformedPort(String),
    #[error("url {0:?} carries userinfo; credential-bearing urls are refused")]
    UserInfo(String),
    #[error("url {0:?} uses an unsupported host form (only DNS names and IPv4 literals)")]
    UnsupportedHost(String),
    #[error("url filter {0:?} must not carry a query")]
    FilterQuery(String),
}

/// A URL in canonical form. `Display` always prints the port.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedUrl {
    scheme: String,
    host: String,
    port: u16,
    path: String,
    query: Option<String>,
}

impl NormalizedUrl {
    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn query(&self) -> Option<&str> {
        self.query.as_deref()
    }
}

impl fmt::Display for NormalizedUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}:{}{}", self.scheme, self.host, self.port, self.path)?;
        if let Some(q) = &self.query {
            write!(f, "?{q}")?;
        }
        Ok(())
    }
}

impl FromStr for NormalizedUrl {
    type Err = UrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_url(s)
    }
}

fn raw_scheme(raw: &str) -> Option<&str> {
    let (scheme, _) = raw.split_once(':')?;
    let ok = scheme
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic())
        && scheme
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
    ok.then_some(scheme)
}

pub fn normalize_url(raw: &str) -> Result<NormalizedUrl, UrlError> {
    let trimmed = raw.trim();
    // Check the scheme before handing off so "ftp://" reports the scheme
    // and not whatever the generic parser thinks of the rest.
    if let Some(scheme) = raw_scheme(trimmed) {
        let lower = scheme.to_ascii_lowercase();
        if lower != "http" && lower != "https" {
            return Err(UrlError::UnsupportedScheme(lower));
        }
    }

    let parsed = Url::parse(trimmed).map_err(|e| match e {
        url::ParseError::EmptyHost => UrlError::EmptyHost(raw.to_string()),
        url::ParseError::InvalidPort => UrlError::MalformedPort(raw.to_string()),
        other => UrlError::Malformed(raw.to_string(), other.to_string()),
    })?;

    let scheme = parsed.scheme().to_string();
    if scheme != "http" && scheme != "https" {
        return Err(UrlError::UnsupportedScheme(scheme));
    }
    if !parsed.username().is_empty() || parsed.password().is_some() {
        return Err(UrlError::UserInfo(raw.to_string()));
    }

    let host = match parsed.host() {
        None => return Err(UrlError::EmptyHost(raw.to_string())),
        Some(Host::Ipv6(_)) => return Err(UrlError::UnsupportedHost(raw.to_string())),
        Some(Host::Ipv4(addr)) => addr.to_string(),
        Some(Host::Domain(d)) => {
            let d = d.strip_suffix('.').unwrap_or(d);
            if d.is_empty() || d.contains("..") || d.starts_with('.') {
                return Err(UrlError::EmptyHost(raw.to_string()));
            }
            d.to_ascii_lowercase()
        }
    };

    let port = parsed
        .port_or_known_default()
        .ok_or_else(|| UrlError::MalformedPort(raw.to_string()))?;
    if port == 0 {
        return Err(UrlError::MalformedPort(raw.to_string()));
    }

    let path = match parsed.path() {
        "" => "/".to_string(),
        p => p.to_string(),
    };

    Ok(NormalizedUrl {
        scheme,
        host,
        port,
        path,
        query: parsed.query().map(str::to_string),
    })
}

/// Endpoint a NETWORK rule is restricted to: exact scheme, host, and port,
/// plus a path prefix that must end on a segment boundary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UrlFilter {
    scheme: String,
    host: String,
    port: u16,
    path_prefix: String,
}

impl UrlFilter {
    pub fn parse(raw: &str) -> Result<Self, UrlError> {
        let url = normalize_url(raw)?;
        if url.query.is_some() {
            return Err(UrlError::FilterQuery(raw.to_string()));
        }
        Ok(Self {
            scheme: url.scheme,
            host: url.host,
            port: url.port,
            path_prefix: url.path,
        })
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn path_prefix(&self) -> &str {
        &self.path_prefix
    }
}

impl fmt::Display for UrlFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}://{}:{}{}",
            self.scheme, self.host, self.port, self.path_prefix
        )
    }
}

impl FromStr for UrlFilter {
    type Err = UrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

fn path_has_segment_prefix(path: &str, prefix: &str) -> bool {
    match path.strip_prefix(prefix) {
        None => false,
        Some(rest) => rest.is_empty() || prefix.ends_with('/') || rest.starts_with('/'),
    }
}

pub fn filter_matches(filter: &UrlFilter, url: &NormalizedUrl) -> bool {
    filter.scheme == url.scheme
        && filter.host == url.host
        && filter.port == url.port
        && path_has_segment_prefix(&url.path, &filter.path_prefix)
}
