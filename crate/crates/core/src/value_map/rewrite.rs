//! Rewriting of shadow-bound requests.

use std::collections::HashMap;

use aho_corasick::{AhoCorasick, MatchKind};
use bytes::Bytes;
use serde_json::Value;

use super::multipart::{self, Part};
use super::{parse_cookie_header, CookieJarPair, ValueBinding};
use crate::message::{BodyClass, Request};
use crate::pairing::PAIR_HEADER;

/// Bound values shorter than this are only replaced when they make up a
/// whole field; longer ones are also replaced inside larger strings.
pub const EMBEDDED_MIN_LEN: usize = 8;

/// Main-to-shadow value replacements for one session.
#[derive(Debug, Clone, Default)]
pub struct Substitutions {
    exact: HashMap<String, String>,
    embedded: Option<(AhoCorasick, Vec<String>)>,
}

impl Substitutions {
    /// Later observations win when the same main value is bound twice.
    pub fn from_bindings<'a>(bindings: impl IntoIterator<Item = &'a ValueBinding>) -> Self {
        let mut sorted: Vec<&ValueBinding> = bindings.into_iter().collect();
        sorted.sort_by_key(|b| b.observed_at);
        let mut exact = HashMap::new();
        for b in sorted {
            exact.insert(b.main_value.clone(), b.shadow_value.clone());
        }
        Self::from_map(exact)
    }

    pub fn from_map(exact: HashMap<String, String>) -> Self {
        let mut long: Vec<(&String, &String)> = exact
            .iter()
            .filter(|(k, _)| k.len() >= EMBEDDED_MIN_LEN)
            .collect();
        long.sort();
        let embedded = (!long.is_empty())
            .then(|| {
                AhoCorasick::builder()
                    .match_kind(MatchKind::LeftmostLongest)
                    .build(long.iter().map(|(k, _)| k.as_str()))
                    .ok()
                    .map(|ac| (ac, long.iter().map(|(_, v)| (*v).clone()).collect()))
            })
            .flatten();
        Substitutions { exact, embedded }
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    /// Replacement for a whole field value.
    pub fn exact(&self, value: &str) -> Option<&str> {
        self.exact.get(value).map(String::as_str)
    }

    /// The rewritten value, or `None` when nothing in it is bound. A single
    /// left-to-right pass, so replacements are never rewritten again.
    pub fn apply(&self, value: &str) -> Option<String> {
        if let Some(v) = self.exact(value) {
            return Some(v.to_owned());
        }
        let (ac, replacements) = self.embedded.as_ref()?;
        ac.find(value)?;
        Some(ac.replace_all(value, replacements))
    }
}

#[derive(Debug, Clone)]
pub struct RewriteOutcome {
    pub request: Request,
    /// Number of fields that were changed.
    pub replaced: usize,
    pub warnings: Vec<String>,
}

const UNTOUCHED_HEADERS: [&str; 4] = ["host", "cookie", "content-length", PAIR_HEADER];

/// Prepares a client request for the shadow instance: bound values in the
/// query, headers and body are replaced, the cookie header is rebuilt from the
/// shadow jar, and `Host` names the shadow upstream. A request with nothing to
/// replace keeps its target, headers and body byte for byte.
pub fn rewrite_request(
    req: &Request,
    subs: &Substitutions,
    jar: &CookieJarPair,
    shadow_host: Option<&str>,
) -> RewriteOutcome {
    let mut out = req.clone();
    let mut replaced = 0;
    let mut warnings = Vec::new();

    if let Some((path, query)) = req.uri.split_once('?') {
        if let Some((q, n)) = rewrite_urlencoded(query, subs) {
            out.uri = format!("{path}?{q}");
            replaced += n;
        }
    }

    let cookie = rebuild_cookie(req, jar);
    let mut cookie_placed = false;
    let mut headers = crate::message::Headers::new();
    for (name, value) in req.headers.iter() {
        if name == "cookie" {
            if let (false, Some(c)) = (cookie_placed, &cookie) {
                headers.push("cookie", c.clone());
            }
            cookie_placed = true;
            continue;
        }
        let value = if UNTOUCHED_HEADERS.contains(&name) {
            value.to_owned()
        } else {
            match subs.apply(value) {
                Some(v) => {
                    replaced += 1;
                    v
                }
                None => value.to_owned(),
            }
        };
        headers.push(name, value);
    }
    if let (false, Some(c)) = (cookie_placed, cookie) {
        headers.push("cookie", c);
    }
    if let Some(host) = shadow_host {
        headers.set("host", host);
    }

    if !req.body.is_empty() && !subs.is_empty() {
        if req.headers.get("content-encoding").is_some_and(|c| !c.trim().eq_ignore_ascii_case("identity")) {
            warnings.push("encoded request body forwarded without rewriting".to_owned());
        } else if let Some(mt) = req.media_type() {
            let rewritten = match mt.essence() {
                "application/x-www-form-urlencoded" => std::str::from_utf8(&req.body)
                    .ok()
                    .and_then(|b| rewrite_urlencoded(b, subs))
                    .map(|(b, n)| (Bytes::from(b), n, None)),
                "multipart/form-data" => match mt.param("boundary") {
                    Some(boundary) => match rewrite_multipart(&req.body, boundary, subs) {
                        Ok(r) => r.map(|(b, n, new_boundary)| (b, n, Some(new_boundary))),
                        Err(e) => {
                            warnings.push(format!("multipart body forwarded unchanged: {e}"));
                            None
                        }
                    },
                    None => {
                        warnings.push("multipart body without boundary forwarded unchanged".to_owned());
                        None
                    }
                },
                _ => match mt.class() {
                    BodyClass::Json => rewrite_json(&req.body, subs).map(|(b, n)| (b, n, None)),
                    BodyClass::Text => std::str::from_utf8(&req.body)
                        .ok()
                        .and_then(|t| subs.apply(t))
                        .map(|t| (Bytes::from(t), 1, None)),
                    BodyClass::Binary => None,
                },
            };
            if let Some((body, n, boundary)) = rewritten {
                out.body = body;
                replaced += n;
                if let Some(b) = boundary {
                    headers.set("content-type", replace_boundary(mt.raw(), &b));
                }
            }
        }
    }

    if out.body != req.body {
        headers.set("content-length", out.body.len().to_string());
    }
    out.headers = headers;
    RewriteOutcome {
        request: out,
        replaced,
        warnings,
    }
}

/// Rewrites `a=b&c=d` text. Only changed pairs are re-encoded.
fn rewrite_urlencoded(text: &str, subs: &Substitutions) -> Option<(String, usize)> {
    let mut changed = 0;
    let pairs: Vec<String> = text
        .split('&')
        .map(|raw| {
            let Some((_, value)) = form_urlencoded::parse(raw.as_bytes()).next() else {
                return raw.to_owned();
            };
            match subs.apply(&value) {
                Some(v) if v != value => {
                    changed += 1;
                    let raw_key = raw.split_once('=').map_or(raw, |(k, _)| k);
                    let encoded: String = form_urlencoded::byte_serialize(v.as_bytes()).collect();
                    format!("{raw_key}={encoded}")
                }
                _ => raw.to_owned(),
            }
        })
        .collect();
    (changed > 0).then(|| (pairs.join("&"), changed))
}

fn rewrite_json(body: &[u8], subs: &Substitutions) -> Option<(Bytes, usize)> {
    let mut value: Value = serde_json::from_slice(body).ok()?;
    let n = substitute_json(&mut value, subs);
    (n > 0).then(|| (Bytes::from(serde_json::to_vec(&value).expect("json value serializes")), n))
}

fn substitute_json(value: &mut Value, subs: &Substitutions) -> usize {
    match value {
        Value::String(s) => match subs.apply(s) {
            Some(v) => {
                *s = v;
                1
            }
            None => 0,
        },
        Value::Number(n) => match subs.exact(&n.to_string()) {
            Some(v) => {
                *value = v
                    .parse::<serde_json::Number>()
                    .map(Value::Number)
                    .unwrap_or_else(|_| Value::String(v.to_owned()));
                1
            }
            None => 0,
        },
        Value::Array(items) => items.iter_mut().map(|v| substitute_json(v, subs)).sum(),
        Value::Object(map) => map.values_mut().map(|v| substitute_json(v, subs)).sum(),
        Value::Null | Value::Bool(_) => 0,
    }
}

fn rewrite_multipart(
    body: &[u8],
    boundary: &str,
    subs: &Substitutions,
) -> Result<Option<(Bytes, usize, String)>, multipart::MultipartError> {
    let mut parts: Vec<Part> = multipart::parse(body, boundary)?;
    let mut n = 0;
    for part in parts.iter_mut().filter(|p| p.is_text_field()) {
        let Ok(text) = std::str::from_utf8(&part.body) else {
            continue;
        };
        if let Some(v) = subs.apply(text) {
            part.body = Bytes::from(v);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let fresh = multipart::fresh_boundary(&parts);
    Ok(Some((Bytes::from(multipart::encode(&parts, &fresh)), n, fresh)))
}

fn replace_boundary(content_type: &str, boundary: &str) -> String {
    let mut params: Vec<String> = content_type
        .split(';')
        .map(|p| p.trim().to_owned())
        .filter(|p| {
            !p.split_once('=')
                .is_some_and(|(k, _)| k.trim().eq_ignore_ascii_case("boundary"))
        })
        .collect();
    params.push(format!("boundary={boundary}"));
    params.join("; ")
}

/// Client cookies with shadow-jar values substituted for cookies both jars
/// know, followed by cookies only the shadow jar holds.
fn rebuild_cookie(req: &Request, jar: &CookieJarPair) -> Option<String> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for (name, value) in req.headers.get_all("cookie").flat_map(parse_cookie_header) {
        seen.push(name.to_owned());
        let value = jar.shadow_cookies.get(name).map_or(value, String::as_str);
        out.push(format!("{name}={value}"));
    }
    for (name, value) in &jar.shadow_cookies {
        if !seen.contains(name) {
            out.push(format!("{name}={value}"));
        }
    }
    if out.is_empty() {
        return None;
    }
    let rebuilt = out.join("; ");
    // keep the original bytes when nothing changed
    match req.headers.get("cookie") {
        Some(orig) if req.headers.get_all("cookie").count() == 1 && normalize(orig) == rebuilt => Some(orig.to_owned()),
        _ => Some(rebuilt),
    }
}

fn normalize(cookie: &str) -> String {
    parse_cookie_header(cookie)
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("; ")
}
