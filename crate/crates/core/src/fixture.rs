//! Demo web shop used as both upstreams in tests and demos. Two instances with
//! different seeds behave identically apart from their random values; a
//! mutation makes one of them behave like a buggy patch.
//!
//! Per-instance randomness: CSRF tokens, session cookies, script nonces, the
//! stylesheet name, timestamps, database ids, JSON member order and upload ids.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Request as AxumRequest, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::message::MediaType;
use crate::value_map::multipart;

pub const SESSION_COOKIE: &str = "session";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// `/api/info` answers 500.
    StatusFlip,
    /// The greeting on `/` reads differently.
    BodyTextChange,
    /// `/api/info` carries an extra member.
    ExtraField,
    /// `/` omits the CSRF token; a login with an unknown token never answers.
    MissingToken,
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => Mutation::None,
            "status_flip" => Mutation::StatusFlip,
            "body_text_change" => Mutation::BodyTextChange,
            "extra_field" => Mutation::ExtraField,
            "missing_token" => Mutation::MissingToken,
            other => return Err(format!("unknown mutation {other:?}")),
        })
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mutation::None => "none",
            Mutation::StatusFlip => "status_flip",
            Mutation::BodyTextChange => "body_text_change",
            Mutation::ExtraField => "extra_field",
            Mutation::MissingToken => "missing_token",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    /// Milliseconds since the epoch, skewed per instance.
    #[default]
    Wall,
    /// A request counter; makes responses reproducible.
    Logical,
}

impl FromStr for Clock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(Clock::Wall),
            "logical" => Ok(Clock::Logical),
            other => Err(format!("unknown clock {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureAppConfig {
    pub host: IpAddr,
    /// 0 picks a free port.
    pub port: u16,
    pub instance_seed: u64,
    pub mutation: Mutation,
    /// Added before every response.
    pub delay: Duration,
    pub clock: Clock,
}

impl FixtureAppConfig {
    pub fn new(instance_seed: u64) -> Self {
        FixtureAppConfig {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 0,
            instance_seed,
            mutation: Mutation::None,
            delay: Duration::ZERO,
            clock: Clock::Wall,
        }
    }
}

#[derive(Debug, Clone)]
struct Item {
    id: u64,
    name: &'static str,
    price: &'static str,
}

#[derive(Debug, Clone, Default)]
struct SessionData {
    csrf: String,
    user: Option<String>,
    cart: Vec<u64>,
}

struct App {
    config: FixtureAppConfig,
    rng: Mutex<StdRng>,
    sessions: Mutex<HashMap<String, SessionData>>,
    ticks: AtomicU64,
    items: Vec<Item>,
    instance_id: u64,
    asset: String,
    db: String,
}

const ITEM_NAMES: [(&str, &str); 3] = [("Widget", "9.99"), ("Gadget", "24.50"), ("Doohickey", "3.75")];

impl App {
    fn new(config: FixtureAppConfig) -> Self {
        let mut setup = StdRng::seed_from_u64(config.instance_seed ^ 0x5eed_5eed_5eed_5eed);
        let mut items: Vec<Item> = Vec::new();
        while items.len() < ITEM_NAMES.len() {
            let id = setup.random_range(1000..100_000u64);
            if items.iter().all(|i| i.id != id) {
                let (name, price) = ITEM_NAMES[items.len()];
                items.push(Item { id, name, price });
            }
        }
        let instance_id = setup.random_range(1..1_000_000u64);
        let asset = format!("{:08x}", setup.random::<u32>());
        let db = format!("db_{:06x}", setup.random::<u32>() & 0xff_ffff);
        App {
            rng: Mutex::new(StdRng::seed_from_u64(config.instance_seed)),
            sessions: Mutex::new(HashMap::new()),
            ticks: AtomicU64::new(0),
            items,
            instance_id,
            asset,
            db,
            config,
        }
    }

    fn hex(&self, bytes: usize) -> String {
        let mut rng = self.rng.lock();
        (0..bytes).map(|_| format!("{:02x}", rng.random::<u8>())).collect()
    }

    fn timestamp(&self) -> u64 {
        let tick = self.ticks.fetch_add(1, Ordering::Relaxed);
        match self.config.clock {
            Clock::Logical => 1_700_000_000_000 + tick,
            Clock::Wall => {
                let ms = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_millis() as u64;
                ms + self.config.instance_seed % 997
            }
        }
    }

    /// The request's session, created when missing or unknown. The flag says
    /// whether a cookie must be set.
    fn session(&self, headers: &HeaderMap) -> (String, bool) {
        if let Some(sid) = cookie(headers, SESSION_COOKIE) {
            if self.sessions.lock().contains_key(&sid) {
                return (sid, false);
            }
        }
        let sid = self.hex(16);
        self.sessions.lock().insert(sid.clone(), SessionData::default());
        (sid, true)
    }

    fn issue_token(&self, sid: &str) -> String {
        let token = self.hex(20);
        if let Some(s) = self.sessions.lock().get_mut(sid) {
            s.csrf = token.clone();
        }
        token
    }

    fn token_valid(&self, headers: &HeaderMap, token: Option<&str>) -> Option<String> {
        let sid = cookie(headers, SESSION_COOKIE)?;
        let sessions = self.sessions.lock();
        let s = sessions.get(&sid)?;
        (!s.csrf.is_empty() && Some(s.csrf.as_str()) == token).then_some(sid)
    }

    fn item(&self, id: u64) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Serializes with object members in random order.
    fn shuffled_json(&self, value: &Value) -> String {
        let mut out = String::new();
        let mut rng = self.rng.lock();
        render_shuffled(value, &mut *rng, &mut out);
        out
    }
}

fn render_shuffled(value: &Value, rng: &mut StdRng, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.shuffle(rng);
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                render_shuffled(&map[k.as_str()], rng, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render_shuffled(v, rng, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

fn cookie(headers: &HeaderMap, name: &str) -> Option<String> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| k.trim() == name)
        .map(|(_, v)| v.trim().to_owned())
}

fn form(body: &[u8]) -> HashMap<String, String> {
    form_urlencoded::parse(body).into_owned().collect()
}

fn html(status: StatusCode, set_session: Option<&str>, body: String) -> Response {
    let mut resp = (status, body).into_response();
    resp.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("text/html; charset=utf-8"),
    );
    if let Some(sid) = set_session {
        if let Ok(v) = HeaderValue::from_str(&format!("{SESSION_COOKIE}={sid}; Path=/; HttpOnly")) {
            resp.headers_mut().append(header::SET_COOKIE, v);
        }
    }
    resp
}

fn json_response(status: StatusCode, body: String) -> Response {
    let mut resp = (status, body).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    resp
}

fn page(app: &App, title: &str, head_extra: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<title>{title}</title>\n<link rel=\"stylesheet\" href=\"/static/styles-{asset}.css\">\n{head_extra}</head>\n<body>\n{body}<span class=\"timestamp\">{ts}</span>\n</body>\n</html>\n",
        asset = app.asset,
        ts = app.timestamp(),
    )
}

async fn index(State(app): State<Arc<App>>, headers: HeaderMap) -> Response {
    let (sid, fresh) = app.session(&headers);
    let token = app.issue_token(&sid);
    let nonce = app.hex(8);
    let show_token = app.config.mutation != Mutation::MissingToken;
    let script_token = if show_token {
        format!("    csrf_token: \"{token}\",\n")
    } else {
        String::new()
    };
    let input_token = if show_token {
        format!("<input type=\"hidden\" name=\"csrf_token\" value=\"{token}\">\n")
    } else {
        String::new()
    };
    let greeting = if app.config.mutation == Mutation::BodyTextChange {
        "Welcome to the patched shop"
    } else {
        "Welcome to the twin shop"
    };
    let head = format!(
        "<script nonce=\"{nonce}\">\n  var shop = {{\n{script_token}    currency: \"EUR\",\n  }};\n</script>\n"
    );
    let body = format!(
        "<p class=\"greeting\">{greeting}</p>\n<form action=\"/login\" method=\"post\">\n{input_token}<input type=\"text\" name=\"user\">\n<button type=\"submit\">Sign in</button>\n</form>\n"
    );
    html(
        StatusCode::OK,
        fresh.then_some(sid.as_str()),
        page(&app, "Twin Shop", &head, &body),
    )
}

async fn login(State(app): State<Arc<App>>, headers: HeaderMap, body: Bytes) -> Response {
    let fields = form(&body);
    let Some(old) = app.token_valid(&headers, fields.get("csrf_token").map(String::as_str)) else {
        if app.config.mutation == Mutation::MissingToken {
            tokio::time::sleep(Duration::from_secs(3600)).await;
        }
        return html(
            StatusCode::FORBIDDEN,
            None,
            page(&app, "Forbidden", "", "<p class=\"error\">Invalid or missing token</p>\n"),
        );
    };
    let user = fields
        .get("user")
        .map(|u| u.chars().filter(|c| c.is_alphanumeric()).take(32).collect::<String>())
        .unwrap_or_default();

    // A successful login moves the session to a new id.
    let sid = app.hex(16);
    {
        let mut sessions = app.sessions.lock();
        let mut data = sessions.remove(&old).unwrap_or_default();
        data.user = Some(user.clone());
        sessions.insert(sid.clone(), data);
    }
    let token = app.issue_token(&sid);
    let body = format!(
        "<p class=\"greeting\">Hello, {user}</p>\n<form action=\"/logout\" method=\"post\">\n<input type=\"hidden\" name=\"csrf_token\" value=\"{token}\">\n</form>\n"
    );
    html(StatusCode::OK, Some(&sid), page(&app, "Signed in", "", &body))
}

async fn items(State(app): State<Arc<App>>, headers: HeaderMap) -> Response {
    let (sid, fresh) = app.session(&headers);
    let mut list = String::from("<ul class=\"items\">\n");
    for (i, item) in app.items.iter().enumerate() {
        list.push_str(&format!(
            "<li><input type=\"hidden\" name=\"Items[{i}].Id\" value=\"{id}\"><span class=\"name\">{name}</span> <span class=\"price\">{price}</span></li>\n",
            id = item.id,
            name = item.name,
            price = item.price,
        ));
    }
    list.push_str("</ul>\n");
    html(StatusCode::OK, fresh.then_some(sid.as_str()), page(&app, "Items", "", &list))
}

fn add_to_cart(app: &App, sid: &str, id: u64) -> Option<(&'static str, usize)> {
    let item = app.item(id)?;
    let mut sessions = app.sessions.lock();
    let s = sessions.entry(sid.to_owned()).or_default();
    s.cart.push(id);
    Some((item.name, s.cart.len()))
}

async fn cart(State(app): State<Arc<App>>, headers: HeaderMap, body: Bytes) -> Response {
    let (sid, fresh) = app.session(&headers);
    let fields = form(&body);
    let id = fields
        .iter()
        .find(|(k, _)| k.starts_with("Items["))
        .and_then(|(_, v)| v.parse::<u64>().ok());
    let qty = fields.get("qty").and_then(|q| q.parse::<u32>().ok()).unwrap_or(1);
    match id.and_then(|id| add_to_cart(&app, &sid, id)) {
        Some((name, count)) => html(
            StatusCode::OK,
            fresh.then_some(sid.as_str()),
            page(
                &app,
                "Cart",
                "",
                &format!("<p class=\"cart\">Added {name} x{qty}</p>\n<p class=\"count\">Cart holds {count} items</p>\n"),
            ),
        ),
        None => html(
            StatusCode::NOT_FOUND,
            fresh.then_some(sid.as_str()),
            page(&app, "Not found", "", "<p class=\"error\">Unknown item</p>\n"),
        ),
    }
}

async fn item_detail(State(app): State<Arc<App>>, axum::extract::RawQuery(query): axum::extract::RawQuery) -> Response {
    let id = query
        .as_deref()
        .map(|q| form(q.as_bytes()))
        .and_then(|f| f.get("id").and_then(|v| v.parse::<u64>().ok()));
    match id.and_then(|id| app.item(id)) {
        Some(item) => html(
            StatusCode::OK,
            None,
            page(
                &app,
                item.name,
                "",
                &format!("<h1 class=\"name\">{}</h1>\n<p class=\"price\">{}</p>\n", item.name, item.price),
            ),
        ),
        None => html(StatusCode::NOT_FOUND, None, page(&app, "Not found", "", "<p class=\"error\">Unknown item</p>\n")),
    }
}

async fn api_info(State(app): State<Arc<App>>) -> Response {
    let items: Vec<Value> = app
        .items
        .iter()
        .map(|i| json!({"id": i.id, "name": i.name, "price": i.price}))
        .collect();
    let uid = app.rng.lock().random_range(1..1_000_000u64);
    let mut doc = json!({
        "id": app.instance_id,
        "result": {
            "status": "ok",
            "session_info": {"uid": uid, "db": app.db},
        },
        "items": items,
        "server": {"timestamp": app.timestamp(), "version": "1.4.2"},
    });
    if app.config.mutation == Mutation::ExtraField {
        doc["debug"] = json!({"patched": true});
    }
    let status = if app.config.mutation == Mutation::StatusFlip {
        StatusCode::INTERNAL_SERVER_ERROR
    } else {
        StatusCode::OK
    };
    json_response(status, app.shuffled_json(&doc))
}

async fn api_cart(State(app): State<Arc<App>>, headers: HeaderMap, body: Bytes) -> Response {
    let Ok(req) = serde_json::from_slice::<Value>(&body) else {
        return json_response(StatusCode::BAD_REQUEST, json!({"ok": false, "error": "bad json"}).to_string());
    };
    let Some(sid) = app.token_valid(&headers, req["csrf_token"].as_str()) else {
        return json_response(StatusCode::FORBIDDEN, json!({"ok": false, "error": "bad token"}).to_string());
    };
    match req["item"].as_u64().and_then(|id| add_to_cart(&app, &sid, id)) {
        Some((name, count)) => json_response(
            StatusCode::OK,
            app.shuffled_json(&json!({"ok": true, "item": name, "count": count})),
        ),
        None => json_response(StatusCode::NOT_FOUND, json!({"ok": false, "error": "unknown item"}).to_string()),
    }
}

async fn upload(State(app): State<Arc<App>>, headers: HeaderMap, body: Bytes) -> Response {
    let boundary = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(MediaType::parse)
        .filter(|m| m.essence() == "multipart/form-data")
        .and_then(|m| m.param("boundary").map(str::to_owned));
    let Some(parts) = boundary.and_then(|b| multipart::parse(&body, &b).ok()) else {
        return json_response(StatusCode::BAD_REQUEST, json!({"error": "malformed multipart body"}).to_string());
    };
    let token = parts
        .iter()
        .find(|p| p.name() == Some("csrf_token"))
        .and_then(|p| std::str::from_utf8(&p.body).ok());
    if app.token_valid(&headers, token).is_none() {
        return json_response(StatusCode::FORBIDDEN, json!({"error": "bad token"}).to_string());
    }
    let meta: Vec<Value> = parts
        .iter()
        .map(|p| {
            json!({
                "name": p.name(),
                "filename": p.filename(),
                "size": p.body.len(),
                "content_type": p.header("content-type"),
            })
        })
        .collect();
    let doc = json!({"upload_id": app.hex(8), "status": "stored", "parts": meta});
    json_response(StatusCode::OK, app.shuffled_json(&doc))
}

async fn delay(State(app): State<Arc<App>>, req: AxumRequest, next: Next) -> Response {
    let resp = next.run(req).await;
    if !app.config.delay.is_zero() {
        tokio::time::sleep(app.config.delay).await;
    }
    resp
}

pub fn router(config: FixtureAppConfig) -> Router {
    let app = Arc::new(App::new(config));
    Router::new()
        .route("/", get(index))
        .route("/login", post(login))
        .route("/items", get(items))
        .route("/item", get(item_detail))
        .route("/cart", post(cart))
        .route("/api/info", get(api_info))
        .route("/api/cart", post(api_cart))
        .route("/upload", post(upload))
        .layer(middleware::from_fn_with_state(app.clone(), delay))
        .with_state(app)
}

pub struct FixtureHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl FixtureHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops serving. Requests still being answered are abandoned.
    pub async fn stop(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        self.task.abort();
        let _ = (&mut self.task).await;
    }
}

pub async fn start(config: FixtureAppConfig) -> io::Result<FixtureHandle> {
    let listener = TcpListener::bind((config.host, config.port)).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(config);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(FixtureHandle {
        addr,
        stop: Some(tx),
        task,
    })
}

/// Serves until ctrl-c.
pub async fn serve(config: FixtureAppConfig) -> io::Result<()> {
    let handle = start(config.clone()).await?;
    tracing::info!(
        addr = %handle.local_addr(),
        seed = config.instance_seed,
        mutation = %config.mutation,
        "fixture serving"
    );
    let _ = tokio::signal::ctrl_c().await;
    handle.stop().await;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparator::compare_json;

    #[test]
    fn seeds_give_distinct_instances() {
        let a = App::new(FixtureAppConfig::new(1));
        let b = App::new(FixtureAppConfig::new(2));
        let a2 = App::new(FixtureAppConfig::new(1));
        assert_ne!(a.items[0].id, b.items[0].id);
        assert_eq!(a.items[0].id, a2.items[0].id);
        assert_eq!(a.hex(4), a2.hex(4));
    }

    #[test]
    fn shuffled_json_reparses_equal() {
        let app = App::new(FixtureAppConfig::new(3));
        let doc = json!({"a": 1, "b": {"c": [1, {"d": 2, "e": 3}], "f": null}, "g": "x"});
        let seen: std::collections::HashSet<String> = (0..20).map(|_| app.shuffled_json(&doc)).collect();
        assert!(seen.len() > 1);
        for s in seen {
            let v: Value = serde_json::from_str(&s).unwrap();
            assert!(compare_json(&doc, &v).is_empty());
        }
    }

    #[test]
    fn mutation_names_round_trip() {
        for m in [
            Mutation::None,
            Mutation::StatusFlip,
            Mutation::BodyTextChange,
            Mutation::ExtraField,
            Mutation::MissingToken,
        ] {
            assert_eq!(m.to_string().parse::<Mutation>().unwrap(), m);
        }
        assert!("other".parse::<Mutation>().is_err());
    }
}
