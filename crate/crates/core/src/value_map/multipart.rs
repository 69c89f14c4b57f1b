//! Minimal `multipart/form-data` codec. Part headers are kept verbatim so a
//! decoded body re-encodes to the same parts under a new boundary.

use bytes::Bytes;
use rand::distr::Alphanumeric;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MultipartError {
    #[error("opening boundary not found")]
    MissingBoundary,
    #[error("part {0} is truncated")]
    Truncated(usize),
    #[error("part {0} has a malformed header line")]
    BadHeader(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    /// Header lines in wire order, names in their original case.
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl Part {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn disposition_param(&self, param: &str) -> Option<&str> {
        let cd = self.header("content-disposition")?;
        cd.split(';').skip(1).find_map(|p| {
            let (k, v) = p.split_once('=')?;
            k.trim()
                .eq_ignore_ascii_case(param)
                .then(|| v.trim().trim_matches('"'))
        })
    }

    pub fn name(&self) -> Option<&str> {
        self.disposition_param("name")
    }

    pub fn filename(&self) -> Option<&str> {
        self.disposition_param("filename")
    }

    /// A plain form field: no filename and a textual (or absent) content type.
    pub fn is_text_field(&self) -> bool {
        self.filename().is_none()
            && self
                .header("content-type")
                .is_none_or(|ct| ct.trim().to_ascii_lowercase().starts_with("text/"))
    }
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || from > hay.len() {
        return None;
    }
    hay[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

/// Splits a multipart body into parts. The preamble and epilogue are dropped.
pub fn parse(body: &[u8], boundary: &str) -> Result<Vec<Part>, MultipartError> {
    let delimiter = format!("--{boundary}");
    let delimiter = delimiter.as_bytes();
    let next_delimiter = format!("\r\n--{boundary}");
    let next_delimiter = next_delimiter.as_bytes();

    let first = find(body, delimiter, 0).ok_or(MultipartError::MissingBoundary)?;
    let mut cursor = first + delimiter.len();
    let mut parts = Vec::new();

    loop {
        let index = parts.len();
        let rest = &body[cursor..];
        if rest.starts_with(b"--") {
            return Ok(parts);
        }
        // Transport padding then CRLF.
        let line_end = find(body, b"\r\n", cursor).ok_or(MultipartError::Truncated(index))?;
        cursor = line_end + 2;

        let header_end = if body[cursor..].starts_with(b"\r\n") {
            cursor
        } else {
            find(body, b"\r\n\r\n", cursor).ok_or(MultipartError::Truncated(index))?
        };
        let mut headers = Vec::new();
        if header_end > cursor {
            let block = std::str::from_utf8(&body[cursor..header_end])
                .map_err(|_| MultipartError::BadHeader(index))?;
            for line in block.split("\r\n") {
                let (n, v) = line.split_once(':').ok_or(MultipartError::BadHeader(index))?;
                headers.push((n.trim().to_owned(), v.trim().to_owned()));
            }
        }
        let body_start = header_end + if header_end == cursor { 2 } else { 4 };
        let body_end =
            find(body, next_delimiter, body_start).ok_or(MultipartError::Truncated(index))?;
        parts.push(Part {
            headers,
            body: Bytes::copy_from_slice(&body[body_start..body_end]),
        });
        cursor = body_end + next_delimiter.len();
    }
}

pub fn encode(parts: &[Part], boundary: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for part in parts {
        out.extend_from_slice(b"--");
        out.extend_from_slice(boundary.as_bytes());
        out.extend_from_slice(b"\r\n");
        for (n, v) in &part.headers {
            out.extend_from_slice(n.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(v.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&part.body);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"--");
    out.extend_from_slice(boundary.as_bytes());
    out.extend_from_slice(b"--\r\n");
    out
}

/// A random boundary that does not occur in any part.
pub fn fresh_boundary(parts: &[Part]) -> String {
    let mut rng = rand::rng();
    loop {
        let tail: String = (&mut rng).sample_iter(Alphanumeric).take(24).map(char::from).collect();
        let boundary = format!("shadowdiff{tail}");
        let clash = parts.iter().any(|p| {
            find(&p.body, boundary.as_bytes(), 0).is_some()
                || p.headers.iter().any(|(n, v)| n.contains(&boundary) || v.contains(&boundary))
        });
        if !clash {
            return boundary;
        }
    }
}
