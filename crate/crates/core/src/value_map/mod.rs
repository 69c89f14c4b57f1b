//! Per-instance value tracking: scrape characteristic values from paired
//! responses, remember which shadow value stands for which main value, keep a
//! cookie jar per instance, and rewrite shadow-bound requests.

pub mod multipart;
mod rewrite;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use rewrite::{rewrite_request, RewriteOutcome, Substitutions};

use crate::config::RuleSet;
use crate::message::{Headers, Response};

/// How far past a rule name the scraper looks for its value.
pub const SCRAPE_WINDOW_BYTES: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn from_cookie(value: &str) -> Self {
        SessionId(format!("cookie:{value}"))
    }

    pub fn for_connection(peer: &str, connection: u64) -> Self {
        SessionId(format!("conn:{peer}#{connection}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueBinding {
    pub name: String,
    pub main_value: String,
    pub shadow_value: String,
    pub session: SessionId,
    pub observed_at: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CookieJarPair {
    pub session: SessionId,
    pub main_cookies: BTreeMap<String, String>,
    pub shadow_cookies: BTreeMap<String, String>,
}

impl CookieJarPair {
    pub fn new(session: SessionId) -> Self {
        CookieJarPair {
            session,
            main_cookies: BTreeMap::new(),
            shadow_cookies: BTreeMap::new(),
        }
    }

    pub fn update_main(&mut self, headers: &Headers) {
        apply_set_cookies(&mut self.main_cookies, headers);
    }

    pub fn update_shadow(&mut self, headers: &Headers) {
        apply_set_cookies(&mut self.shadow_cookies, headers);
    }
}

fn apply_set_cookies(jar: &mut BTreeMap<String, String>, headers: &Headers) {
    for raw in headers.get_all("set-cookie") {
        let Some((name, value, expired)) = parse_set_cookie(raw) else {
            continue;
        };
        if expired {
            jar.remove(name);
        } else {
            jar.insert(name.to_owned(), value.to_owned());
        }
    }
}

/// `(name, value, expired)` of a `Set-Cookie` value. A cookie counts as
/// expired when it is emptied or given `Max-Age=0` or a negative age.
pub(crate) fn parse_set_cookie(raw: &str) -> Option<(&str, &str, bool)> {
    let mut attrs = raw.split(';');
    let (name, value) = attrs.next()?.split_once('=')?;
    let (name, value) = (name.trim(), value.trim().trim_matches('"'));
    if name.is_empty() {
        return None;
    }
    let max_age_gone = attrs.any(|a| {
        a.split_once('=').is_some_and(|(k, v)| {
            k.trim().eq_ignore_ascii_case("max-age")
                && v.trim().parse::<i64>().is_ok_and(|age| age <= 0)
        })
    });
    Some((name, value, max_age_gone || value.is_empty()))
}

/// `name=value` pairs of a `Cookie` request header.
pub(crate) fn parse_cookie_header(raw: &str) -> Vec<(&str, &str)> {
    raw.split(';')
        .filter_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            let k = k.trim();
            (!k.is_empty()).then(|| (k, v.trim()))
        })
        .collect()
}

/// Which main-instance cookie identifies a client session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SessionCookie {
    /// Any cookie whose name contains "session", ignoring case.
    #[default]
    Auto,
    Named(String),
}

impl SessionCookie {
    fn matches(&self, name: &str) -> bool {
        match self {
            SessionCookie::Auto => name.to_ascii_lowercase().contains("session"),
            SessionCookie::Named(n) => n == name,
        }
    }

    /// Session named by the client's `Cookie` header.
    pub fn from_request(&self, headers: &Headers) -> Option<SessionId> {
        headers
            .get_all("cookie")
            .flat_map(parse_cookie_header)
            .find(|(n, v)| self.matches(n) && !v.is_empty())
            .map(|(_, v)| SessionId::from_cookie(v))
    }

    /// Session the main instance establishes through `Set-Cookie`.
    pub fn from_response(&self, headers: &Headers) -> Option<SessionId> {
        headers
            .get_all("set-cookie")
            .filter_map(parse_set_cookie)
            .find(|(n, _, expired)| !expired && self.matches(n))
            .map(|(_, v, _)| SessionId::from_cookie(v))
    }
}

/// Values assigned near each occurrence of `name` in `text`.
///
/// After the name, the scraper accepts a separator form (`name: "v"`,
/// `"name": v`, `name=v`), and otherwise looks for a `value=` or `content=`
/// attribute before the end of the tag. Only the first
/// [`SCRAPE_WINDOW_BYTES`] bytes after the name are examined.
pub fn locate_values<'a>(text: &'a str, name: &str) -> Vec<&'a str> {
    if name.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (start, _) in text.match_indices(name) {
        let after = start + name.len();
        let mut end = (after + SCRAPE_WINDOW_BYTES).min(text.len());
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        let window = &text[after..end];
        if let Some(v) = separator_value(window).or_else(|| attribute_value(window)) {
            out.push(v);
        }
    }
    out
}

fn separator_value(window: &str) -> Option<&str> {
    let w = window.strip_prefix(['"', '\'']).unwrap_or(window);
    let w = w.trim_start();
    let w = w.strip_prefix([':', '='])?.trim_start();
    leading_value(w)
}

fn attribute_value(window: &str) -> Option<&str> {
    let tag_end = window.find('>').unwrap_or(window.len());
    let scope = &window[..tag_end];
    ["value=", "content="]
        .iter()
        .filter_map(|attr| scope.find(attr).map(|p| &scope[p + attr.len()..]))
        .next()
        .and_then(leading_value)
}

/// A quoted string or a bare token at the start of `s`.
fn leading_value(s: &str) -> Option<&str> {
    let first = s.chars().next()?;
    let value = if first == '"' || first == '\'' {
        let body = &s[1..];
        &body[..body.find(first)?]
    } else {
        let stop = s
            .find(|c: char| {
                c.is_whitespace() || matches!(c, '&' | ';' | ',' | '"' | '\'' | '<' | '>' | ')' | '}' | ']')
            })
            .unwrap_or(s.len());
        &s[..stop]
    };
    (!value.is_empty()).then_some(value)
}

fn scrape_text(resp: &Response) -> String {
    let mut text = String::from_utf8_lossy(&resp.body).into_owned();
    for (n, v) in resp.headers.iter() {
        if n != "set-cookie" {
            text.push('\n');
            text.push_str(n);
            text.push_str(": ");
            text.push_str(v);
        }
    }
    text
}

/// Pairs the values found for every characteristic name in the two
/// responses, by order of occurrence. Names found on one side only produce no
/// binding.
pub fn scrape_values(main: &Response, shadow: &Response, rules: &RuleSet, session: &SessionId) -> Vec<ValueBinding> {
    let characteristic = rules.characteristic_values();
    if characteristic.is_empty() {
        return Vec::new();
    }
    let (main_text, shadow_text) = (scrape_text(main), scrape_text(shadow));
    let now = Instant::now();
    let mut out: Vec<ValueBinding> = Vec::new();
    for name in characteristic {
        let a = locate_values(&main_text, name);
        let b = locate_values(&shadow_text, name);
        if a.len() != b.len() {
            tracing::warn!(
                name = name.as_str(),
                main = a.len(),
                shadow = b.len(),
                "characteristic value found a different number of times on each side"
            );
        }
        for (m, s) in a.iter().zip(&b) {
            if m == s || out.iter().any(|x| x.name == *name && x.main_value == *m) {
                continue;
            }
            out.push(ValueBinding {
                name: name.clone(),
                main_value: (*m).to_owned(),
                shadow_value: (*s).to_owned(),
                session: session.clone(),
                observed_at: now,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
struct SessionState {
    jar: CookieJarPair,
    bindings: HashMap<(String, String), ValueBinding>,
}

impl SessionState {
    fn new(session: SessionId) -> Self {
        SessionState {
            jar: CookieJarPair::new(session),
            bindings: HashMap::new(),
        }
    }

    fn absorb(&mut self, other: &SessionState) {
        for (k, v) in &other.jar.main_cookies {
            self.jar.main_cookies.entry(k.clone()).or_insert_with(|| v.clone());
        }
        for (k, v) in &other.jar.shadow_cookies {
            self.jar.shadow_cookies.entry(k.clone()).or_insert_with(|| v.clone());
        }
        for (k, b) in &other.bindings {
            self.bindings.entry(k.clone()).or_insert_with(|| ValueBinding {
                session: self.jar.session.clone(),
                ..b.clone()
            });
        }
    }
}

/// Session-keyed binding store and cookie jars. Each session has its own
/// lock; the outer map lock is held only to find or create a session.
#[derive(Default)]
pub struct ValueStore {
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionState>>>>,
    session_cookie: SessionCookie,
}

impl ValueStore {
    pub fn new(session_cookie: SessionCookie) -> Self {
        ValueStore {
            sessions: RwLock::new(HashMap::new()),
            session_cookie,
        }
    }

    pub fn session_cookie(&self) -> &SessionCookie {
        &self.session_cookie
    }

    fn state(&self, session: &SessionId) -> Arc<Mutex<SessionState>> {
        if let Some(s) = self.sessions.read().get(session) {
            return s.clone();
        }
        self.sessions
            .write()
            .entry(session.clone())
            .or_insert_with(|| Arc::new(Mutex::new(SessionState::new(session.clone()))))
            .clone()
    }

    fn existing(&self, session: &SessionId) -> Option<Arc<Mutex<SessionState>>> {
        self.sessions.read().get(session).cloned()
    }

    pub fn insert(&self, binding: ValueBinding) {
        let state = self.state(&binding.session);
        let key = (binding.name.clone(), binding.main_value.clone());
        state.lock().bindings.insert(key, binding);
    }

    pub fn map_identifier(&self, name: &str, main_value: &str, session: &SessionId) -> Option<String> {
        let state = self.existing(session)?;
        let state = state.lock();
        state
            .bindings
            .get(&(name.to_owned(), main_value.to_owned()))
            .map(|b| b.shadow_value.clone())
    }

    /// Bindings and jars for rewriting one request.
    pub fn snapshot(&self, session: &SessionId) -> (Substitutions, CookieJarPair) {
        match self.existing(session) {
            Some(state) => {
                let state = state.lock();
                (
                    Substitutions::from_bindings(state.bindings.values()),
                    state.jar.clone(),
                )
            }
            None => (Substitutions::default(), CookieJarPair::new(session.clone())),
        }
    }

    /// Records a completed pair: updates both cookie jars from `Set-Cookie`
    /// and stores scraped bindings. When the main response establishes a new
    /// session cookie, the request's session state carries over to it.
    /// Returns the session the state now lives under.
    pub fn record_pair(&self, request_session: &SessionId, main: &Response, shadow: &Response, rules: &RuleSet) -> (SessionId, Vec<ValueBinding>) {
        let effective = self
            .session_cookie
            .from_response(&main.headers)
            .unwrap_or_else(|| request_session.clone());

        if effective != *request_session {
            if let Some(old) = self.existing(request_session) {
                let old = old.lock().clone();
                self.state(&effective).lock().absorb(&old);
            }
        }

        let bindings = scrape_values(main, shadow, rules, &effective);
        let state = self.state(&effective);
        let mut state = state.lock();
        state.jar.update_main(&main.headers);
        state.jar.update_shadow(&shadow.headers);
        for b in &bindings {
            state
                .bindings
                .insert((b.name.clone(), b.main_value.clone()), b.clone());
        }
        (effective, bindings)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }
}
