use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use shadowdiff::comparator::CompareOptions;
use shadowdiff::fixture::{self, Clock, FixtureAppConfig, Mutation};
use shadowdiff::learning::{format_special, records_from_log, render_candidates, suggest_rules, DEFAULT_MIN_SUPPORT};
use shadowdiff::logs::read_log;
use shadowdiff::proxy::{self, Mode, ProxyConfig, ProxyError, TlsFiles, Upstream};
use shadowdiff::reliability::{decision_report, ObservationLog, ReliabilityError};
use shadowdiff::script::{self, RunOptions};
use shadowdiff::value_map::SessionCookie;

/// Runs a main and a shadow instance of a web application side by side and
/// reports responses that differ in unexpected ways.
#[derive(Parser)]
#[command(name = "shadowdiff", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Proxy in comparing mode: alarm on unexpected differences.
    Run(ProxyArgs),
    /// Proxy in learning mode: log every difference for rule discovery.
    Learn(ProxyArgs),
    /// Propose rules from a learning-mode difference log.
    Suggest(SuggestArgs),
    /// Decide from recorded first-alarm times whether to stop running in parallel.
    Reliability(ReliabilityArgs),
    /// Serve the demo shop application.
    Fixture(FixtureArgs),
    /// Replay a request script against a server.
    Replay(ReplayArgs),
    /// Tell a running proxy that the shadow instance was restarted.
    #[command(long_flag = "mark-restart")]
    MarkRestart(MarkRestartArgs),
}

#[derive(Args)]
struct ProxyArgs {
    /// Address the proxy listens on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Main (trusted) upstream: host:port, http://host:port or https://host[:port].
    #[arg(long)]
    main: Upstream,
    /// Shadow (patched) upstream.
    #[arg(long)]
    shadow: Upstream,
    /// Overrides the subcommand's mode.
    #[arg(long, value_parser = clap::value_parser!(Mode))]
    mode: Option<Mode>,
    /// Rule file with expected differences and characteristic values.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Interval at which buffered pairs are compared.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "1s")]
    comparing_rate: Duration,
    /// How long a pair may wait for its second response.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "30s")]
    pair_timeout: Duration,
    /// Largest request or response body buffered, in bytes.
    #[arg(long, default_value_t = proxy::DEFAULT_MAX_BODY_BYTES)]
    max_body: usize,
    /// JSON-lines log of every non-equal comparison.
    #[arg(long)]
    diff_log: Option<PathBuf>,
    /// JSON-lines log of alarms.
    #[arg(long)]
    alarm_log: Option<PathBuf>,
    /// JSON-lines file receiving time-to-first-alarm observations.
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Cookie that identifies a client session; default: any cookie whose
    /// name contains "session".
    #[arg(long)]
    session_cookie: Option<String>,
    /// Response header compared besides status and content type. Repeatable.
    #[arg(long = "compare-header", value_name = "NAME")]
    compare_headers: Vec<String>,
    /// PEM certificate chain; clients then connect over TLS.
    #[arg(long, requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    /// PEM private key for --tls-cert.
    #[arg(long, requires = "tls_cert")]
    tls_key: Option<PathBuf>,
    /// PEM certificates trusted for https upstreams besides the web PKI roots.
    #[arg(long)]
    upstream_ca: Option<PathBuf>,
}

#[derive(Args)]
struct SuggestArgs {
    /// Difference log written in learning mode.
    #[arg(long)]
    diff_log: PathBuf,
    /// Distinct pairs a context must appear in.
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    min_support: usize,
    /// Print every unexpected difference in the special output format to
    /// stderr before the rules.
    #[arg(long)]
    special: bool,
}

#[derive(Args)]
struct ReliabilityArgs {
    #[arg(long)]
    observations: PathBuf,
    /// Horizon over which no new difference is required, e.g. 3s or 2h.
    #[arg(long, value_parser = humantime::parse_duration)]
    t_required: Duration,
    /// Stop once P(T > t_required) reaches this probability.
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8081)]
    port: u16,
    /// Per-instance randomness seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// none, status_flip, body_text_change, extra_field or missing_token.
    #[arg(long, default_value = "none")]
    mutation: Mutation,
    /// Delay added before every response.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "0s")]
    delay: Duration,
    /// wall or logical.
    #[arg(long, default_value = "wall")]
    clock: Clock,
}

#[derive(Args)]
struct ReplayArgs {
    /// Server to send the script to.
    #[arg(long)]
    target: SocketAddr,
    /// Script file; the built-in shop script when absent.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    users: usize,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "30s")]
    timeout: Duration,
}

#[derive(Args)]
struct MarkRestartArgs {
    /// Process id of the running proxy.
    #[arg(long)]
    pid: i32,
}

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ReliabilityError> for Failure {
    fn from(e: ReliabilityError) -> Self {
        match e {
            ReliabilityError::InsufficientData { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => run_proxy(args, Mode::Comparing),
        Command::Learn(args) => run_proxy(args, Mode::Learning),
        Command::Suggest(args) => suggest(args),
        Command::Reliability(args) => reliability(args),
        Command::Fixture(args) => {
            let config = FixtureAppConfig {
                host: args.host,
                port: args.port,
                instance_seed: args.seed,
                mutation: args.mutation,
                delay: args.delay,
                clock: args.clock,
            };
            runtime()?
                .block_on(fixture::serve(config))
                .map_err(|e| Failure::Runtime(format!("fixture: {e}")))
        }
        Command::Replay(args) => replay(args),
        Command::MarkRestart(args) => mark_restart(args.pid),
    }
}

fn run_proxy(args: ProxyArgs, default_mode: Mode) -> Result<(), Failure> {
    let mut config = ProxyConfig::new(args.listen, args.main, args.shadow);
    config.mode = args.mode.unwrap_or(default_mode);
    config.rules_path = args.rules;
    config.comparing_rate = args.comparing_rate;
    config.pair_timeout = args.pair_timeout;
    config.max_body_bytes = args.max_body;
    config.diff_log = args.diff_log;
    config.alarm_log = args.alarm_log;
    config.observations = args.observations;
    if let Some(name) = args.session_cookie {
        config.session_cookie = SessionCookie::Named(name);
    }
    if let (Some(cert), Some(key)) = (args.tls_cert, args.tls_key) {
        config.tls = Some(TlsFiles { cert, key });
    }
    config.upstream_ca = args.upstream_ca;
    if !args.compare_headers.is_empty() {
        config.compare = CompareOptions {
            compared_headers: args.compare_headers.iter().map(|h| h.to_ascii_lowercase()).collect(),
        };
    }
    config
        .load_rules()
        .map_err(|e| Failure::Usage(format!("rules: {e}")))?;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if config.mode == Mode::Learning && config.diff_log.is_none() {
        tracing::warn!("learning without --diff-log: differences go to the console only");
    }

    let stats = runtime()?.block_on(proxy::run(config)).map_err(|e| match e {
        ProxyError::InvalidConfig(_) | ProxyError::Rules(_) | ProxyError::Tls(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    eprintln!(
        "compared {} pairs: {} equal, {} expected only, {} alarms",
        stats.compared, stats.equal, stats.expected_only, stats.alarms
    );
    Ok(())
}

fn suggest(args: SuggestArgs) -> Result<(), Failure> {
    if args.min_support == 0 {
        return Err(Failure::Usage("--min-support must be at least 1".into()));
    }
    let entries = read_log(&args.diff_log)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.diff_log.display())))?;
    let records = records_from_log(&entries);
    if args.special {
        for record in &records {
            eprintln!("{}\n{}\n", record.request_summary, format_special(record));
        }
    }
    let candidates = suggest_rules(&records, args.min_support);
    print!("{}", render_candidates(&candidates));
    Ok(())
}

fn reliability(args: ReliabilityArgs) -> Result<(), Failure> {
    let log = ObservationLog::load(&args.observations)?;
    let report = decision_report(&log, args.t_required.as_secs_f64(), args.threshold)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let text = match &args.script {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => script::DEFAULT_SCRIPT.to_owned(),
    };
    let steps = script::parse_script(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    let options = RunOptions {
        users: args.users.max(1),
        iterations: args.iterations.max(1),
        timeout: args.timeout,
        ..RunOptions::default()
    };
    let exchanges = runtime()?
        .block_on(script::run_script(args.target, &steps, &options))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    for e in &exchanges {
        println!(
            "user={} iter={} {} {} -> {} ({} bytes, {:.1?})",
            e.user,
            e.iteration,
            e.method,
            e.path,
            e.status,
            e.body.len(),
            e.latency
        );
    }
    let failed = exchanges.iter().filter(|e| e.status >= 400).count();
    eprintln!("{} requests, {failed} with status >= 400", exchanges.len());
    Ok(())
}

#[cfg(unix)]
fn mark_restart(pid: i32) -> Result<(), Failure> {
    if pid <= 0 {
        return Err(Failure::Usage(format!("invalid pid {pid}")));
    }
    // SAFETY: kill has no memory-safety preconditions.
    let rc = unsafe { libc::kill(pid, libc::SIGHUP) };
    if rc != 0 {
        return Err(Failure::Runtime(format!(
            "cannot signal {pid}: {}",
            std::io::Error::last_os_error()
        )));
    }
    eprintln!("restart marked for proxy {pid}");
    Ok(())
}

#[cfg(not(unix))]
fn mark_restart(_pid: i32) -> Result<(), Failure> {
    Err(Failure::Runtime("mark-restart needs a unix platform".into()))
}
