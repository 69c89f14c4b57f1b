use std::path::PathBuf;
use std::process::{Command, Output};

fn shadowdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowdiff"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = shadowdiff(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(shadowdiff(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let out = shadowdiff(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for sub in ["run", "learn", "suggest", "reliability", "fixture", "replay", "mark-restart"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let run = stdout(&shadowdiff(&["run", "--help"]));
    for flag in [
        "--listen",
        "--main",
        "--shadow",
        "--mode",
        "--rules",
        "--comparing-rate",
        "--pair-timeout",
        "--max-body",
        "--diff-log",
        "--alarm-log",
        "--observations",
    ] {
        assert!(run.contains(flag), "{flag} missing from run help");
    }
}

#[test]
fn reliability_report_for_five_observations() {
    let obs = data("observations.jsonl");
    let out = shadowdiff(&["reliability", "--observations", &obs, "--t-required", "3s", "--threshold", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("P(T > t_required):   0.3679"), "{text}");
    assert!(text.contains("verdict:             continue"), "{text}");
    assert!(text.contains("sensitivity:"), "{text}");
}

#[test]
fn reliability_json_and_stop_at_zero_threshold() {
    let obs = data("observations.jsonl");
    let out = shadowdiff(&["reliability", "--observations", &obs, "--t-required", "3s", "--threshold", "0", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["decision"], "stop");
    assert!((v["probability"].as_f64().unwrap() - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn reliability_rejects_bad_input() {
    let obs = data("observations.jsonl");
    let out = shadowdiff(&["reliability", "--observations", &obs, "--t-required", "3s", "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let missing = shadowdiff(&["reliability", "--observations", "/nonexistent.jsonl", "--t-required", "3s"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn suggest_matches_golden_rules() {
    let log = data("learn.jsonl");
    let out = shadowdiff(&["suggest", "--diff-log", &log, "--min-support", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let golden = std::fs::read_to_string(data("learn.rules")).unwrap();
    assert_eq!(stdout(&out), golden);
    shadowdiff::parse_config(&golden).unwrap();
}

#[test]
fn invalid_rules_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("bad.rules");
    std::fs::write(&rules, ":ok\nmissing marker\n").unwrap();
    let out = shadowdiff(&[
        "run",
        "--listen",
        "127.0.0.1:0",
        "--main",
        "127.0.0.1:1",
        "--shadow",
        "127.0.0.1:2",
        "--rules",
        rules.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn identical_upstreams_exit_2() {
    let out = shadowdiff(&["run", "--listen", "127.0.0.1:0", "--main", "127.0.0.1:1", "--shadow", "http://127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tls_cert_requires_key() {
    let out = shadowdiff(&["run", "--main", "a:1", "--shadow", "b:1", "--tls-cert", "c.pem"]);
    assert_eq!(out.status.code(), Some(2));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str]) -> Child {
    Child(
        Command::new(env!("CARGO_BIN_EXE_shadowdiff"))
            .args(args)
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap(),
    )
}

fn wait_listening(port: u16) {
    for _ in 0..200 {
        if std::net::TcpStream::connect(("127.0.0.1", port)).is_ok() {
            return;
        }
        std::thread::sleep(std::time::Duration::from_millis(25));
    }
    panic!("nothing listening on {port}");
}

#[cfg(unix)]
#[test]
fn binaries_detect_a_patched_shadow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (pm, ps, pp) = (free_port(), free_port(), free_port());
    let _main = spawn(&["fixture", "--port", &pm.to_string(), "--seed", "11"]);
    let _shadow = spawn(&[
        "fixture",
        "--port",
        &ps.to_string(),
        "--seed",
        "29",
        "--mutation",
        "body_text_change",
    ]);
    wait_listening(pm);
    wait_listening(ps);

    let rules = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/twin-shop.rules");
    let alarms = dir.path().join("alarms.jsonl");
    let obs = dir.path().join("obs.jsonl");
    let mut proxy = spawn(&[
        "run",
        "--listen",
        &format!("127.0.0.1:{pp}"),
        "--main",
        &format!("127.0.0.1:{pm}"),
        "--shadow",
        &format!("http://127.0.0.1:{ps}"),
        "--rules",
        rules.to_str().unwrap(),
        "--comparing-rate",
        "200ms",
        "--alarm-log",
        alarms.to_str().unwrap(),
        "--observations",
        obs.to_str().unwrap(),
    ]);
    wait_listening(pp);

    let replay = shadowdiff(&["replay", "--target", &format!("127.0.0.1:{pp}")]);
    assert_eq!(replay.status.code(), Some(0));
    assert!(stdout(&replay).contains("GET / -> 200"));
    std::thread::sleep(std::time::Duration::from_millis(600));

    let pid = proxy.0.id().to_string();
    assert_eq!(shadowdiff(&["--mark-restart", "--pid", &pid]).status.code(), Some(0));
    std::thread::sleep(std::time::Duration::from_millis(300));
    assert_eq!(shadowdiff(&["replay", "--target", &format!("127.0.0.1:{pp}")]).status.code(), Some(0));
    std::thread::sleep(std::time::Duration::from_millis(600));

    // SAFETY: plain signal delivery to our own child.
    unsafe { libc::kill(proxy.0.id() as i32, libc::SIGTERM) };
    let status = proxy.0.wait().unwrap();
    assert!(status.success(), "{status:?}");

    let log = std::fs::read_to_string(&alarms).unwrap();
    assert!(log.lines().count() >= 2, "{log}");
    assert!(log.contains("patched"));
    let recorded = std::fs::read_to_string(&obs).unwrap();
    assert_eq!(recorded.lines().count(), 2, "{recorded}");
    assert!(recorded.contains("\"run_index\":1"));
}
