//! Buffered HTTP messages as seen by the comparator and the rewriter.

use std::fmt;
use std::io::Read;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

/// Content type split into its lowercase `type/subtype` essence and the raw
/// header value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaType {
    essence: String,
    raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyClass {
    Json,
    Text,
    Binary,
}

impl MediaType {
    pub fn parse(value: &str) -> Self {
        let essence = value
            .split(';')
            .next()
            .unwrap_or_default()
            .trim()
            .to_ascii_lowercase();
        MediaType {
            essence,
            raw: value.to_owned(),
        }
    }

    pub fn essence(&self) -> &str {
        &self.essence
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Value of a parameter such as `boundary` or `charset`.
    pub fn param(&self, name: &str) -> Option<&str> {
        self.raw.split(';').skip(1).find_map(|p| {
            let (k, v) = p.split_once('=')?;
            k.trim()
                .eq_ignore_ascii_case(name)
                .then(|| v.trim().trim_matches('"'))
        })
    }

    pub fn class(&self) -> BodyClass {
        let e = self.essence.as_str();
        if e == "application/json" || e.ends_with("+json") || e == "text/json" {
            BodyClass::Json
        } else if e.starts_with("text/")
            || e == "application/javascript"
            || e == "application/ecmascript"
            || e == "application/xml"
            || e == "application/xhtml+xml"
            || e.ends_with("+xml")
        {
            BodyClass::Text
        } else {
            BodyClass::Binary
        }
    }
}

impl fmt::Display for MediaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Ordered header multimap. Names are stored lowercase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl AsRef<str>, value: impl Into<String>) {
        self.0
            .push((name.as_ref().to_ascii_lowercase(), value.into()));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        self.remove(name);
        self.push(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_http(map: &http::HeaderMap) -> Self {
        let mut out = Headers::new();
        for (name, value) in map {
            out.push(name.as_str(), String::from_utf8_lossy(value.as_bytes()));
        }
        out
    }
}

impl<N: AsRef<str>, V: Into<String>> FromIterator<(N, V)> for Headers {
    fn from_iter<T: IntoIterator<Item = (N, V)>>(iter: T) -> Self {
        let mut h = Headers::new();
        for (n, v) in iter {
            h.push(n, v);
        }
        h
    }
}

/// Fully buffered response with content coding removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Headers,
    pub body: Bytes,
    pub media_type: Option<MediaType>,
}

impl Response {
    pub fn new(status: u16, headers: Headers, body: impl Into<Bytes>) -> Self {
        let media_type = headers.get("content-type").map(MediaType::parse);
        Response {
            status,
            headers,
            body: body.into(),
            media_type,
        }
    }

    /// Shorthand used heavily in tests.
    pub fn with_type(status: u16, content_type: &str, body: impl Into<Bytes>) -> Self {
        let mut headers = Headers::new();
        headers.push("content-type", content_type);
        Self::new(status, headers, body)
    }

    /// Builds a comparable response from wire bytes, undoing gzip/deflate.
    /// Unknown codings are kept as-is and reported through the returned flag.
    pub fn from_wire(status: u16, headers: Headers, raw: Bytes) -> (Self, bool) {
        let coding = headers
            .get("content-encoding")
            .map(|c| c.trim().to_ascii_lowercase());
        let (body, decoded) = match coding.as_deref() {
            None | Some("") | Some("identity") => (raw, true),
            Some(c) => match decode_content(c, &raw) {
                Some(b) => (Bytes::from(b), true),
                None => (raw, false),
            },
        };
        (Response::new(status, headers, body), decoded)
    }

    pub fn text(&self) -> Option<&str> {
        std::str::from_utf8(&self.body).ok()
    }
}

fn decode_content(coding: &str, raw: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    let ok = match coding {
        "gzip" | "x-gzip" => flate2::read::MultiGzDecoder::new(raw)
            .read_to_end(&mut out)
            .is_ok(),
        "deflate" => flate2::read::ZlibDecoder::new(raw)
            .read_to_end(&mut out)
            .is_ok(),
        _ => false,
    };
    ok.then_some(out)
}

/// Fully buffered client request. `uri` is the origin-form target
/// (path and query).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub uri: String,
    pub headers: Headers,
    pub body: Bytes,
}

impl Request {
    pub fn new(method: &str, uri: &str, headers: Headers, body: impl Into<Bytes>) -> Self {
        Request {
            method: method.to_owned(),
            uri: uri.to_owned(),
            headers,
            body: body.into(),
        }
    }

    pub fn media_type(&self) -> Option<MediaType> {
        self.headers.get("content-type").map(MediaType::parse)
    }
}

/// Method, target and session of the client request a pair belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub method: String,
    pub uri: String,
    pub session: String,
}

impl fmt::Display for RequestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} [{}]", self.method, self.uri, self.session)
    }
}
