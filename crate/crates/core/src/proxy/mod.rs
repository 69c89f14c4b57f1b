//! The reverse proxy: forwards each client request to the main upstream,
//! replays a rewritten copy against the shadow upstream, answers the client
//! from main only, and compares the two responses on a fixed schedule.

mod http;
mod lanes;
mod report;
mod tls;

use std::convert::Infallible;
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::Full;
use hyper::body::Incoming;
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use hyper_util::server::graceful::GracefulShutdown;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, watch, Notify};
use tokio::task::JoinHandle;

pub use self::http::{is_hop_by_hop, Upstream};
pub use report::{AlarmEvent, Stats, StatsSnapshot};
pub use tls::{TlsError, TlsFiles};

use self::http::{collect_limited, end_to_end, http_client, to_header_map, BodyError, HttpClient};
use self::lanes::{LaneTicket, Lanes};
use self::report::{Observations, Router};
use crate::comparator::{CompareOptions, Comparator};
use crate::learning::{records_from_log, suggest_rules};
use crate::logs::LogEntry;
use crate::config::{ConfigError, RuleSet};
use crate::logs::LogWriter;
use crate::pairing::ResponsePair;
use crate::message::{Headers, Request, RequestSummary, Response};
use crate::pairing::{PairKey, PairStore, Side, PAIR_HEADER};
use crate::value_map::{rewrite_request, SessionCookie, SessionId, ValueStore};

pub const DEFAULT_COMPARING_RATE: Duration = Duration::from_secs(1);
pub const DEFAULT_PAIR_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_BODY_BYTES: usize = 16 * 1024 * 1024;
pub const VIA: &str = "1.1 shadowdiff";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Twin unpatched instances; differences are logged, never alarmed.
    Learning,
    Comparing,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learning" => Ok(Mode::Learning),
            "comparing" => Ok(Mode::Comparing),
            other => Err(format!("unknown mode {other:?}, expected learning or comparing")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Learning => "learning",
            Mode::Comparing => "comparing",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: SocketAddr,
    pub main_upstream: Upstream,
    pub shadow_upstream: Upstream,
    pub mode: Mode,
    pub comparing_rate: Duration,
    pub pair_timeout: Duration,
    pub max_body_bytes: usize,
    pub rules: RuleSet,
    pub rules_path: Option<PathBuf>,
    pub diff_log: Option<PathBuf>,
    pub alarm_log: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub session_cookie: SessionCookie,
    pub compare: CompareOptions,
    /// Terminate TLS from clients with this certificate.
    pub tls: Option<TlsFiles>,
    /// Extra trusted certificates for TLS upstreams.
    pub upstream_ca: Option<PathBuf>,
}

impl ProxyConfig {
    pub fn new(listen: SocketAddr, main_upstream: Upstream, shadow_upstream: Upstream) -> Self {
        ProxyConfig {
            listen,
            main_upstream,
            shadow_upstream,
            mode: Mode::Comparing,
            comparing_rate: DEFAULT_COMPARING_RATE,
            pair_timeout: DEFAULT_PAIR_TIMEOUT,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            rules: RuleSet::new(),
            rules_path: None,
            diff_log: None,
            alarm_log: None,
            observations: None,
            session_cookie: SessionCookie::Auto,
            compare: CompareOptions::default(),
            tls: None,
            upstream_ca: None,
        }
    }

    /// Loads `rules_path` into `rules` when set.
    pub fn load_rules(&mut self) -> Result<(), ConfigError> {
        if let Some(p) = &self.rules_path {
            self.rules = RuleSet::load(p)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        let invalid = |m: &str| Err(ProxyError::InvalidConfig(m.to_owned()));
        if self.main_upstream == self.shadow_upstream {
            return invalid("main and shadow upstreams must differ");
        }
        if self.comparing_rate.is_zero() {
            return invalid("comparing rate must be positive");
        }
        if self.pair_timeout.is_zero() {
            return invalid("pair timeout must be positive");
        }
        if self.max_body_bytes == 0 {
            return invalid("max body size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rules(#[from] ConfigError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tls(#[from] TlsError),
    #[error("cannot open log {path}: {source}")]
    Log {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Counts in-flight work so shutdown can wait for it.
#[derive(Default)]
struct InFlight {
    count: AtomicUsize,
    idle: Notify,
}

struct InFlightGuard(Arc<InFlight>);

impl InFlight {
    fn enter(self: &Arc<Self>) -> InFlightGuard {
        self.count.fetch_add(1, Ordering::SeqCst);
        InFlightGuard(self.clone())
    }

    async fn wait_idle(&self) {
        loop {
            let notified = self.idle.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.count.load(Ordering::SeqCst) == 0 {
                return;
            }
            notified.await;
        }
    }
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        if self.0.count.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.0.idle.notify_waiters();
        }
    }
}

struct Shared {
    config: ProxyConfig,
    pairs: PairStore,
    values: ValueStore,
    lanes: Lanes,
    client: HttpClient,
    stats: Arc<Stats>,
    inflight: Arc<InFlight>,
    router: Router,
    /// Names whose values are tracked between the instances. Starts as the
    /// configured characteristic values; learning mode adds what it finds.
    tracked: RwLock<RuleSet>,
    connections: AtomicU64,
}

impl Shared {
    /// Learning mode: treats differing form fields and meta values of a
    /// fresh pair as characteristic values from now on, so the shadow
    /// session keeps working while rules are still unknown.
    fn track_new_characteristics(&self, request: &Request, session: &SessionId, main: &Response, shadow: &Response) {
        let now = Instant::now();
        let pair = ResponsePair {
            key: PairKey::from_raw("learning"),
            request_summary: RequestSummary {
                method: request.method.clone(),
                uri: request.uri.clone(),
                session: session.to_string(),
            },
            main_response: Some(main.clone()),
            shadow_response: Some(shadow.clone()),
            created_at: now,
            deadline: now,
            completed_at: Some(now),
        };
        let probe = Comparator::new(RuleSet::new(), self.config.compare.clone());
        let outcome = probe.compare_pair(&pair);
        if outcome.unexpected.is_empty() {
            return;
        }
        let entry = LogEntry::from_outcome(&outcome, &pair.request_summary, std::time::SystemTime::now());
        let found: Vec<String> = suggest_rules(&records_from_log(&[entry]), 1)
            .into_iter()
            .filter(|c| c.characteristic)
            .map(|c| c.name)
            .collect();
        if found.is_empty() {
            return;
        }
        let mut tracked = self.tracked.write();
        for name in found {
            if !tracked.characteristic_values().contains(&name) && tracked.push_characteristic(name.clone()).is_ok() {
                tracing::info!(name, "tracking characteristic value");
            }
        }
    }
}

/// A running proxy.
pub struct ProxyHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> Arc<Stats> {
        self.shared.stats.clone()
    }

    /// Starts a new observation run: the next alarm is timed from now.
    pub fn mark_restart(&self) {
        if let Some(obs) = &self.shared.router.observations {
            let expected = self.shared.stats.expected_differences.load(Ordering::Relaxed);
            obs.lock().restart(expected);
        }
    }

    /// Stops accepting, lets in-flight requests finish, then compares every
    /// remaining pair; pairs still missing a side are reported as such.
    pub async fn shutdown(self) -> StatsSnapshot {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
        self.shared.stats.snapshot()
    }

    /// Resolves when the server stops for any reason.
    pub async fn wait(&mut self) {
        let _ = (&mut self.task).await;
    }
}

fn open_log(path: &Option<PathBuf>) -> Result<Option<LogWriter>, ProxyError> {
    path.as_ref()
        .map(|p| {
            LogWriter::open(p).map_err(|source| ProxyError::Log {
                path: p.clone(),
                source,
            })
        })
        .transpose()
}

/// Binds and starts serving in the background.
pub async fn start(config: ProxyConfig) -> Result<ProxyHandle, ProxyError> {
    config.validate()?;
    let acceptor = config
        .tls
        .as_ref()
        .map(tls::server_config)
        .transpose()?
        .map(tokio_rustls::TlsAcceptor::from);
    let client = http_client(tls::client_config(config.upstream_ca.as_deref())?);
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(|source| ProxyError::Bind {
            addr: config.listen,
            source,
        })?;
    let local_addr = listener.local_addr().map_err(|source| ProxyError::Bind {
        addr: config.listen,
        source,
    })?;

    let router = Router {
        comparator: Comparator::new(config.rules.clone(), config.compare.clone()),
        mode: config.mode,
        diff_log: open_log(&config.diff_log)?,
        alarm_log: open_log(&config.alarm_log)?,
        observations: config
            .observations
            .clone()
            .map(|p| Mutex::new(Observations::new(p))),
    };
    let shared = Arc::new(Shared {
        pairs: PairStore::new(config.pair_timeout),
        values: ValueStore::new(config.session_cookie.clone()),
        lanes: Lanes::default(),
        client,
        stats: Arc::new(Stats::default()),
        inflight: Arc::new(InFlight::default()),
        router,
        tracked: RwLock::new(config.rules.clone()),
        connections: AtomicU64::new(0),
        config,
    });
    tracing::info!(
        listen = %local_addr,
        main = %shared.config.main_upstream,
        shadow = %shared.config.shadow_upstream,
        mode = %shared.config.mode,
        "proxy started"
    );

    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let task = tokio::spawn(serve(shared.clone(), listener, acceptor, shutdown_rx));
    Ok(ProxyHandle {
        local_addr,
        shared,
        shutdown: shutdown_tx,
        task,
    })
}

/// Serves until ctrl-c or SIGTERM. SIGHUP marks an observation restart.
pub async fn run(config: ProxyConfig) -> Result<StatsSnapshot, ProxyError> {
    let handle = start(config).await?;
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        let mut hup = signal(SignalKind::hangup()).expect("signal handler");
        loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => break,
                _ = term.recv() => break,
                _ = hup.recv() => handle.mark_restart(),
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
    tracing::info!("shutting down");
    let stats = handle.shutdown().await;
    tracing::info!(?stats, "stopped");
    Ok(stats)
}

async fn serve(
    shared: Arc<Shared>,
    listener: TcpListener,
    acceptor: Option<tokio_rustls::TlsAcceptor>,
    mut shutdown: watch::Receiver<bool>,
) {
    let graceful = GracefulShutdown::new();
    let (flusher_stop, flusher_stop_rx) = watch::channel(false);
    let flusher = tokio::spawn(flush_loop(shared.clone(), flusher_stop_rx));

    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(x) => x,
                    Err(e) => {
                        tracing::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                let conn_id = shared.connections.fetch_add(1, Ordering::Relaxed);
                let shared = shared.clone();
                let service = service_fn(move |req| {
                    let shared = shared.clone();
                    async move { Ok::<_, Infallible>(handle_request(shared, peer, conn_id, req).await) }
                });
                let watcher = graceful.watcher();
                let acceptor = acceptor.clone();
                tokio::spawn(async move {
                    let builder = hyper::server::conn::http1::Builder::new();
                    let result = match acceptor {
                        None => watcher.watch(builder.serve_connection(TokioIo::new(stream), service)).await,
                        Some(acceptor) => match acceptor.accept(stream).await {
                            Ok(tls) => watcher.watch(builder.serve_connection(TokioIo::new(tls), service)).await,
                            Err(e) => {
                                tracing::debug!(%peer, "tls handshake failed: {e}");
                                return;
                            }
                        },
                    };
                    if let Err(e) = result {
                        tracing::debug!("connection error: {e}");
                    }
                });
            }
            _ = shutdown.changed() => break,
        }
    }
    drop(listener);

    let grace = shared.config.pair_timeout;
    if tokio::time::timeout(grace, graceful.shutdown()).await.is_err() {
        tracing::warn!("client connections still open after {grace:?}");
    }
    if tokio::time::timeout(grace, shared.inflight.wait_idle()).await.is_err() {
        tracing::warn!("shadow requests still in flight after {grace:?}");
    }
    let _ = flusher_stop.send(true);
    let _ = flusher.await;
}

async fn flush_loop(shared: Arc<Shared>, mut stop: watch::Receiver<bool>) {
    let mut ticker = tokio::time::interval(shared.config.comparing_rate);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    loop {
        let last = tokio::select! {
            _ = ticker.tick() => false,
            _ = stop.changed() => true,
        };
        let s = shared.clone();
        let _ = tokio::task::spawn_blocking(move || {
            let pairs = if last {
                s.pairs.drain()
            } else {
                s.pairs.flush(Instant::now())
            };
            for pair in &pairs {
                s.router.route(pair, &s.stats);
            }
        })
        .await;
        if last {
            return;
        }
    }
}

fn simple_response(status: u16, text: &str) -> hyper::Response<Full<Bytes>> {
    hyper::Response::builder()
        .status(status)
        .header("content-type", "text/plain; charset=utf-8")
        .body(Full::new(Bytes::from(format!("{text}\n"))))
        .expect("static response")
}

async fn handle_request(
    shared: Arc<Shared>,
    peer: SocketAddr,
    conn_id: u64,
    req: hyper::Request<Incoming>,
) -> hyper::Response<Full<Bytes>> {
    let _guard = shared.inflight.enter();
    let max = shared.config.max_body_bytes;
    let (parts, body) = req.into_parts();

    let declared = parts
        .headers
        .get(::http::header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > max as u64) {
        return simple_response(413, "request body too large");
    }
    let body = match collect_limited(body, max).await {
        Ok(b) => b,
        Err(BodyError::TooLarge) => return simple_response(413, "request body too large"),
        Err(BodyError::Read(e)) => return simple_response(400, &format!("cannot read request body: {e}")),
    };

    let target = parts
        .uri
        .path_and_query()
        .map_or_else(|| "/".to_owned(), |pq| pq.as_str().to_owned());
    let headers = end_to_end(&parts.headers, &[PAIR_HEADER]);
    let request = Request::new(parts.method.as_str(), &target, Headers::from_http(&headers), body.clone());

    let cookie = shared.values.session_cookie();
    let session = cookie
        .from_request(&request.headers)
        .unwrap_or_else(|| SessionId::for_connection(&peer.to_string(), conn_id));
    let key = shared.pairs.open_pair(RequestSummary {
        method: request.method.clone(),
        uri: request.uri.clone(),
        session: session.to_string(),
    });
    Stats::bump(&shared.stats.opened, 1);

    let ticket = shared.lanes.enter(&session);
    let alias = ticket.alias_handle();
    let (main_tx, main_rx) = oneshot::channel::<Response>();
    {
        let shared = shared.clone();
        let guard = shared.inflight.enter();
        let request = request.clone();
        let session = session.clone();
        let key = key.clone();
        tokio::spawn(async move {
            shadow_leg(&shared, request, session, key, ticket, main_rx).await;
            drop(guard);
        });
    }

    // Main leg: the client's request as sent, minus hop-by-hop headers.
    let mut main_headers = headers;
    main_headers.append(::http::header::VIA, ::http::HeaderValue::from_static(VIA));
    if let Ok(v) = ::http::HeaderValue::from_str(key.as_str()) {
        main_headers.insert(PAIR_HEADER, v);
    }
    let uri = match shared.config.main_upstream.uri_for(&target) {
        Ok(u) => u,
        Err(e) => {
            shared.pairs.close_void(&key);
            Stats::bump(&shared.stats.voided, 1);
            return simple_response(400, &format!("bad request target: {e}"));
        }
    };
    let mut upstream_req = hyper::Request::new(Full::new(body));
    *upstream_req.method_mut() = parts.method.clone();
    *upstream_req.uri_mut() = uri;
    *upstream_req.headers_mut() = main_headers;

    let sent = tokio::time::timeout(shared.config.pair_timeout, async {
        let resp = shared.client.request(upstream_req).await.map_err(|e| e.to_string())?;
        let (rparts, rbody) = resp.into_parts();
        let bytes = collect_limited(rbody, max).await.map_err(|e| match e {
            BodyError::TooLarge => "response body too large".to_owned(),
            BodyError::Read(e) => e,
        })?;
        Ok::<_, String>((rparts, bytes))
    })
    .await;
    let (rparts, rbytes) = match sent {
        Ok(Ok(x)) => x,
        Ok(Err(e)) => {
            tracing::warn!(pair = %key, "main upstream failed: {e}");
            shared.pairs.close_void(&key);
            Stats::bump(&shared.stats.voided, 1);
            return simple_response(502, "main upstream unavailable");
        }
        Err(_) => {
            tracing::warn!(pair = %key, "main upstream timed out");
            shared.pairs.close_void(&key);
            Stats::bump(&shared.stats.voided, 1);
            return simple_response(504, "main upstream timed out");
        }
    };

    let client_headers = end_to_end(&rparts.headers, &[PAIR_HEADER]);
    let (main_resp, decoded) =
        Response::from_wire(rparts.status.as_u16(), Headers::from_http(&client_headers), rbytes.clone());
    if !decoded {
        tracing::warn!(pair = %key, "main response uses an unsupported content coding; compared as-is");
    }
    if let Some(next) = cookie.from_response(&main_resp.headers) {
        if next != session {
            shared.lanes.alias(&alias, &next);
        }
    }
    let _ = shared.pairs.submit_response(&key, Side::Main, main_resp.clone());
    let _ = main_tx.send(main_resp);

    let mut out = hyper::Response::new(Full::new(rbytes));
    *out.status_mut() = rparts.status;
    *out.version_mut() = ::http::Version::HTTP_11;
    *out.headers_mut() = client_headers;
    out
}

async fn shadow_leg(
    shared: &Shared,
    request: Request,
    session: SessionId,
    key: PairKey,
    ticket: LaneTicket,
    main_rx: oneshot::Receiver<Response>,
) {
    let timeout = shared.config.pair_timeout;
    if let Some(prev) = ticket.previous.clone() {
        if tokio::time::timeout(timeout, prev).await.is_err() {
            tracing::warn!(pair = %key, "earlier shadow request of the session still pending; proceeding");
        }
    }

    let (subs, jar) = shared.values.snapshot(&session);
    let upstream = &shared.config.shadow_upstream;
    let rewritten = rewrite_request(&request, &subs, &jar, Some(upstream.authority()));
    for w in &rewritten.warnings {
        tracing::warn!(pair = %key, "{w}");
    }
    let shadow_request = rewritten.request;

    let result = tokio::time::timeout(timeout, async {
        let uri = upstream.uri_for(&shadow_request.uri).map_err(|e| e.to_string())?;
        let mut headers = to_header_map(&shadow_request.headers);
        headers.append(::http::header::VIA, ::http::HeaderValue::from_static(VIA));
        if let Ok(v) = ::http::HeaderValue::from_str(key.as_str()) {
            headers.insert(PAIR_HEADER, v);
        }
        let method = ::http::Method::from_bytes(shadow_request.method.as_bytes()).map_err(|e| e.to_string())?;
        let mut req = hyper::Request::new(Full::new(shadow_request.body.clone()));
        *req.method_mut() = method;
        *req.uri_mut() = uri;
        *req.headers_mut() = headers;
        let resp = shared.client.request(req).await.map_err(|e| e.to_string())?;
        let (parts, body) = resp.into_parts();
        let bytes = collect_limited(body, shared.config.max_body_bytes)
            .await
            .map_err(|e| match e {
                BodyError::TooLarge => "response body too large".to_owned(),
                BodyError::Read(e) => e,
            })?;
        let headers = end_to_end(&parts.headers, &[PAIR_HEADER]);
        Ok::<_, String>(Response::from_wire(parts.status.as_u16(), Headers::from_http(&headers), bytes).0)
    })
    .await;

    let shadow = match result {
        Ok(Ok(resp)) => {
            let _ = shared.pairs.submit_response(&key, Side::Shadow, resp.clone());
            Some(resp)
        }
        Ok(Err(e)) => {
            Stats::bump(&shared.stats.shadow_failures, 1);
            tracing::warn!(pair = %key, "shadow upstream failed: {e}");
            None
        }
        Err(_) => {
            Stats::bump(&shared.stats.shadow_failures, 1);
            tracing::warn!(pair = %key, "shadow upstream timed out");
            None
        }
    };

    if let Some(shadow) = shadow {
        if let Ok(Ok(main)) = tokio::time::timeout(timeout, main_rx).await {
            if shared.config.mode == Mode::Learning {
                shared.track_new_characteristics(&request, &session, &main, &shadow);
            }
            let rules = shared.tracked.read().clone();
            shared.values.record_pair(&session, &main, &shadow, &rules);
        }
    }
    shared.lanes.leave(ticket);
}
