//! Upstream addressing, hop-by-hop header handling and the outbound client.

use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use http::header::{HeaderMap, HeaderName, HeaderValue};
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper_rustls::{HttpsConnector, HttpsConnectorBuilder};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;

use crate::message::Headers;

pub type HttpClient = Client<HttpsConnector<HttpConnector>, Full<Bytes>>;

/// Client for both plain and TLS upstreams.
pub fn http_client(tls: rustls::ClientConfig) -> HttpClient {
    let mut connector = HttpConnector::new();
    connector.set_nodelay(true);
    connector.enforce_http(false);
    let https = HttpsConnectorBuilder::new()
        .with_tls_config(tls)
        .https_or_http()
        .enable_http1()
        .wrap_connector(connector);
    Client::builder(TokioExecutor::new()).build(https)
}

/// Upstream written `host:port`, `http://host:port` or `https://host[:port]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upstream {
    authority: String,
    tls: bool,
}

impl Upstream {
    pub fn authority(&self) -> &str {
        &self.authority
    }

    pub fn is_tls(&self) -> bool {
        self.tls
    }

    fn scheme(&self) -> &'static str {
        if self.tls {
            "https"
        } else {
            "http"
        }
    }

    pub fn uri_for(&self, path_and_query: &str) -> Result<http::Uri, http::Error> {
        let pq = if path_and_query.starts_with('/') {
            path_and_query
        } else {
            "/"
        };
        Ok(http::Uri::builder()
            .scheme(self.scheme())
            .authority(self.authority.as_str())
            .path_and_query(pq)
            .build()?)
    }
}

impl FromStr for Upstream {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (rest, tls) = if let Some(r) = s.strip_prefix("http://") {
            (r, false)
        } else if let Some(r) = s.strip_prefix("https://") {
            (r, true)
        } else if s.contains("://") {
            return Err(format!("{s}: unsupported scheme"));
        } else {
            (s, false)
        };
        let authority = rest.trim_end_matches('/');
        if authority.is_empty() || authority.contains('/') {
            return Err(format!("{s}: expected host:port"));
        }
        authority
            .parse::<http::uri::Authority>()
            .map_err(|e| format!("{s}: {e}"))?;
        Ok(Upstream {
            authority: authority.to_owned(),
            tls,
        })
    }
}

impl fmt::Display for Upstream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.scheme(), self.authority)
    }
}

const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "keep-alive",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "proxy-authenticate",
    "proxy-authorization",
];

/// Whether a header is connection-scoped: a standard hop-by-hop header or one
/// listed in `Connection`.
pub fn is_hop_by_hop(name: &str, connection_listed: &[String]) -> bool {
    HOP_BY_HOP.iter().any(|h| name.eq_ignore_ascii_case(h))
        || connection_listed.iter().any(|c| name.eq_ignore_ascii_case(c))
}

fn connection_listed(map: &HeaderMap) -> Vec<String> {
    map.get_all(http::header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|t| t.trim().to_ascii_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Copy of `map` without hop-by-hop headers and without `drop`.
pub fn end_to_end(map: &HeaderMap, drop: &[&str]) -> HeaderMap {
    let listed = connection_listed(map);
    let mut out = HeaderMap::with_capacity(map.len());
    for (name, value) in map {
        let n = name.as_str();
        if is_hop_by_hop(n, &listed) || drop.iter().any(|d| n.eq_ignore_ascii_case(d)) {
            continue;
        }
        out.append(name.clone(), value.clone());
    }
    out
}

pub fn to_header_map(headers: &Headers) -> HeaderMap {
    let mut map = HeaderMap::with_capacity(headers.len());
    for (n, v) in headers.iter() {
        if let (Ok(name), Ok(value)) = (HeaderName::from_bytes(n.as_bytes()), HeaderValue::from_str(v)) {
            map.append(name, value);
        }
    }
    map
}

#[derive(Debug)]
pub enum BodyError {
    TooLarge,
    Read(String),
}

/// Buffers a body, failing once it exceeds `limit` bytes.
pub async fn collect_limited(body: Incoming, limit: usize) -> Result<Bytes, BodyError> {
    match Limited::new(body, limit).collect().await {
        Ok(c) => Ok(c.to_bytes()),
        Err(e) if e.is::<http_body_util::LengthLimitError>() => Err(BodyError::TooLarge),
        Err(e) => Err(BodyError::Read(e.to_string())),
    }
}
