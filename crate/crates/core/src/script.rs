//! Request scripts and the small client that replays them.
//!
//! One step per line:
//!
//! ```text
//! GET /items
//! POST /login form csrf_token={{csrf_token}}&user=alice
//! POST /api/cart json {"item": {{Items[2].Id}}, "csrf_token": "{{csrf_token}}"}
//! POST /upload multipart csrf_token={{csrf_token}}&file=@bytes:96
//! ```
//!
//! `{{name}}` is replaced by the value of the last `name="…" value="…"` pair
//! seen in a response for the same virtual user. In multipart specs,
//! `@bytes:N` is a file part of N pseudo-random bytes.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::value_map::multipart::{self, Part};

pub const DEFAULT_SCRIPT: &str = "\
# One shopping session.
GET /
POST /login form csrf_token={{csrf_token}}&user=alice
GET /items
POST /cart form Items[0].Id={{Items[0].Id}}&qty=1
GET /item?id={{Items[1].Id}}
POST /api/cart json {\"item\": {{Items[2].Id}}, \"csrf_token\": \"{{csrf_token}}\"}
GET /api/info
POST /upload multipart csrf_token={{csrf_token}}&note=hello&file=@bytes:96
";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {0}: expected METHOD PATH [form|json|multipart BODY]")]
    Syntax(usize),
    #[error("line {0}: unknown body kind {1:?}")]
    BodyKind(usize, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepBody {
    None,
    Form(String),
    Json(String),
    Multipart(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub method: String,
    pub path: String,
    pub body: StepBody,
}

pub fn parse_script(text: &str) -> Result<Vec<Step>, ScriptError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(4, ' ');
        let (Some(method), Some(path)) = (parts.next(), parts.next()) else {
            return Err(ScriptError::Syntax(i + 1));
        };
        if !path.starts_with('/') {
            return Err(ScriptError::Syntax(i + 1));
        }
        let body = match (parts.next(), parts.next()) {
            (None, _) => StepBody::None,
            (Some("form"), Some(b)) => StepBody::Form(b.to_owned()),
            (Some("json"), Some(b)) => StepBody::Json(b.to_owned()),
            (Some("multipart"), Some(b)) => StepBody::Multipart(
                b.split('&')
                    .filter_map(|kv| kv.split_once('='))
                    .map(|(k, v)| (k.to_owned(), v.to_owned()))
                    .collect(),
            ),
            (Some(kind), Some(_)) => return Err(ScriptError::BodyKind(i + 1, kind.to_owned())),
            (Some(_), None) => return Err(ScriptError::Syntax(i + 1)),
        };
        steps.push(Step {
            method: method.to_ascii_uppercase(),
            path: path.to_owned(),
            body,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct Exchange {
    pub user: usize,
    pub iteration: usize,
    pub step: usize,
    pub method: String,
    pub path: String,
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
    pub latency: Duration,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Concurrent virtual users, each with its own cookies.
    pub users: usize,
    pub iterations: usize,
    pub timeout: Duration,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            users: 1,
            iterations: 1,
            timeout: Duration::from_secs(30),
            seed: 0,
        }
    }
}

type ScriptClient = Client<HttpConnector, Full<Bytes>>;

/// Values scraped from `name="X" value="Y"` pairs.
pub fn scrape_fields(html: &str, vars: &mut HashMap<String, String>) {
    let mut rest = html;
    while let Some(p) = rest.find("name=\"") {
        rest = &rest[p + 6..];
        let Some(end) = rest.find('"') else { break };
        let name = &rest[..end];
        let after = &rest[end + 1..];
        let tag_end = after.find('>').unwrap_or(after.len());
        if let Some(v) = after[..tag_end].find("value=\"") {
            let value = &after[v + 7..];
            if let Some(vend) = value.find('"') {
                vars.insert(name.to_owned(), value[..vend].to_owned());
            }
        }
    }
}

fn fill(template: &str, vars: &HashMap<String, String>, encode: bool) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let Some(end) = rest[start..].find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        let name = &rest[start + 2..start + end];
        let value = vars.get(name).map(String::as_str).unwrap_or("");
        if encode {
            out.extend(form_urlencoded::byte_serialize(value.as_bytes()));
        } else {
            out.push_str(value);
        }
        rest = &rest[start + end + 2..];
    }
    out.push_str(rest);
    out
}

struct User {
    index: usize,
    cookies: BTreeMap<String, String>,
    vars: HashMap<String, String>,
    rng: StdRng,
}

impl User {
    fn request(&mut self, target: SocketAddr, step: &Step) -> hyper::Request<Full<Bytes>> {
        let path = fill(&step.path, &self.vars, true);
        let mut builder = hyper::Request::builder()
            .method(step.method.as_str())
            .uri(format!("http://{target}{path}"));
        if !self.cookies.is_empty() {
            let c: Vec<String> = self.cookies.iter().map(|(k, v)| format!("{k}={v}")).collect();
            builder = builder.header("cookie", c.join("; "));
        }
        let (content_type, body) = match &step.body {
            StepBody::None => (None, Bytes::new()),
            StepBody::Form(t) => (
                Some("application/x-www-form-urlencoded".to_owned()),
                Bytes::from(fill(t, &self.vars, true)),
            ),
            StepBody::Json(t) => (Some("application/json".to_owned()), Bytes::from(fill(t, &self.vars, false))),
            StepBody::Multipart(fields) => {
                let parts: Vec<Part> = fields
                    .iter()
                    .map(|(name, value)| match value.strip_prefix("@bytes:").and_then(|n| n.parse::<usize>().ok()) {
                        Some(n) => {
                            let data: Vec<u8> = (0..n).map(|_| self.rng.random()).collect();
                            Part {
                                headers: vec![
                                    (
                                        "Content-Disposition".into(),
                                        format!("form-data; name=\"{name}\"; filename=\"{name}.bin\""),
                                    ),
                                    ("Content-Type".into(), "application/octet-stream".into()),
                                ],
                                body: Bytes::from(data),
                            }
                        }
                        None => Part {
                            headers: vec![(
                                "Content-Disposition".into(),
                                format!("form-data; name=\"{name}\""),
                            )],
                            body: Bytes::from(fill(value, &self.vars, false)),
                        },
                    })
                    .collect();
                let boundary = format!("script{:016x}", self.rng.random::<u64>());
                (
                    Some(format!("multipart/form-data; boundary={boundary}")),
                    Bytes::from(multipart::encode(&parts, &boundary)),
                )
            }
        };
        if let Some(ct) = content_type {
            builder = builder.header("content-type", ct);
        }
        builder.body(Full::new(body)).expect("script request")
    }

    fn absorb(&mut self, headers: &[(String, String)], body: &[u8]) {
        for (n, v) in headers {
            if n == "set-cookie" {
                if let Some((k, val)) = v.split(';').next().and_then(|kv| kv.split_once('=')) {
                    self.cookies.insert(k.trim().to_owned(), val.trim().to_owned());
                }
            }
        }
        if let Ok(text) = std::str::from_utf8(body) {
            scrape_fields(text, &mut self.vars);
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("user {user}, step {step}: {message}")]
    Request {
        user: usize,
        step: usize,
        message: String,
    },
}

async fn run_user(
    client: ScriptClient,
    target: SocketAddr,
    steps: &[Step],
    mut user: User,
    options: &RunOptions,
) -> Result<Vec<Exchange>, RunError> {
    let mut out = Vec::new();
    for iteration in 0..options.iterations {
        for (i, step) in steps.iter().enumerate() {
            let req = user.request(target, step);
            let started = Instant::now();
            let fail = |message: String| RunError::Request {
                user: user.index,
                step: i,
                message,
            };
            let resp = tokio::time::timeout(options.timeout, async {
                let resp = client.request(req).await.map_err(|e| e.to_string())?;
                let (parts, body) = resp.into_parts();
                let body = body.collect().await.map_err(|e| e.to_string())?.to_bytes();
                Ok::<_, String>((parts, body))
            })
            .await
            .map_err(|_| fail("timed out".into()))?
            .map_err(fail)?;
            let latency = started.elapsed();
            let (parts, body) = resp;
            let headers: Vec<(String, String)> = parts
                .headers
                .iter()
                .map(|(n, v)| (n.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
                .collect();
            user.absorb(&headers, &body);
            out.push(Exchange {
                user: user.index,
                iteration,
                step: i,
                method: step.method.clone(),
                path: step.path.clone(),
                status: parts.status.as_u16(),
                headers,
                body,
                latency,
            });
        }
    }
    Ok(out)
}

/// Replays `steps` against `target` and returns every exchange, grouped by
/// user in order.
pub async fn run_script(target: SocketAddr, steps: &[Step], options: &RunOptions) -> Result<Vec<Exchange>, RunError> {
    let client: ScriptClient = Client::builder(TokioExecutor::new()).build(HttpConnector::new());
    let mut tasks = Vec::new();
    for index in 0..options.users.max(1) {
        let user = User {
            index,
            cookies: BTreeMap::new(),
            vars: HashMap::new(),
            rng: StdRng::seed_from_u64(options.seed.wrapping_add(index as u64)),
        };
        let client = client.clone();
        let steps = steps.to_vec();
        let options = options.clone();
        tasks.push(tokio::spawn(async move {
            run_user(client, target, &steps, user, &options).await
        }));
    }
    let mut out = Vec::new();
    for t in tasks {
        match t.await {
            Ok(r) => out.extend(r?),
            Err(e) => {
                return Err(RunError::Request {
                    user: usize::MAX,
                    step: 0,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_script_parses() {
        let steps = parse_script(DEFAULT_SCRIPT).unwrap();
        assert_eq!(steps.len(), 8);
        assert_eq!(steps[1].body, StepBody::Form("csrf_token={{csrf_token}}&user=alice".into()));
        assert!(matches!(&steps[7].body, StepBody::Multipart(f) if f.len() == 3));
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(parse_script("GET"), Err(ScriptError::Syntax(1)));
        assert_eq!(parse_script("\nGET nopath"), Err(ScriptError::Syntax(2)));
        assert_eq!(
            parse_script("POST /x xml <a/>"),
            Err(ScriptError::BodyKind(1, "xml".into()))
        );
    }

    #[test]
    fn scrapes_and_fills() {
        let mut vars = HashMap::new();
        scrape_fields(
            "<input type=\"hidden\" name=\"csrf_token\" value=\"a/b\"><input name=\"Items[0].Id\" value=\"7\"><input name=\"user\">",
            &mut vars,
        );
        assert_eq!(vars.len(), 2);
        assert_eq!(fill("t={{csrf_token}}&i={{Items[0].Id}}", &vars, true), "t=a%2Fb&i=7");
        assert_eq!(fill("{{missing}}x", &vars, false), "x");
    }
}
