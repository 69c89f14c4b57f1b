//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line. An optional argument filters
//! criteria by number or name.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::AssertUnwindSafe;
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::FutureExt;
use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde_json::Value;

use common::*;
use shadowdiff::comparator::{compare_json, compare_pair, tags_equal_normalized, Verdict};
use shadowdiff::fixture::{self, Clock, FixtureAppConfig, Mutation};
use shadowdiff::learning::{candidates_to_rules, records_from_log, render_candidates, suggest_rules};
use shadowdiff::logs::read_log;
use shadowdiff::proxy::{is_hop_by_hop, Mode, ProxyHandle, StatsSnapshot};
use shadowdiff::reliability::{
    estimate_lambda, standard_error, survival_probability, ObservationLog, ReliabilityError,
};
use shadowdiff::script::Exchange;
use shadowdiff::value_map::CookieJarPair;
use shadowdiff::{
    parse_config, rewrite_request, serialize_config, Headers, PairKey, Request, RequestSummary,
    Response, ResponsePair, RuleSet, SessionId, Substitutions,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();

    let criteria: Vec<(u32, &str)> = vec![
        (1, "twin_identical_run"),
        (2, "injected_bug_detection"),
        (3, "reliability_formulas"),
        (4, "json_permutation_invariance"),
        (5, "html_normalization"),
        (6, "config_round_trip"),
        (7, "multipart_rewrite_fidelity"),
        (8, "client_transparency"),
        (9, "learning_pipeline_closure"),
    ];

    let mut failed = 0;
    for (n, name) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let fut = async move {
            match n {
                1 => twin_identical_run().await,
                2 => injected_bug_detection().await,
                3 => reliability_formulas(),
                4 => json_permutation_invariance(),
                5 => html_normalization(),
                6 => config_round_trip(),
                7 => multipart_rewrite_fidelity().await,
                8 => client_transparency().await,
                9 => learning_pipeline_closure().await,
                _ => unreachable!(),
            }
        };
        let result = rt
            .block_on(AssertUnwindSafe(fut).catch_unwind())
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let elapsed = started.elapsed();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({elapsed:.2?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({elapsed:.2?}) {detail}");
            }
        }
    }
    rt.shutdown_timeout(Duration::from_secs(1));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// 1

async fn twin_identical_run() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::None, Clock::Wall, Duration::ZERO).await;
    let proxy = start_proxy(&twins, ProxySetup::default(), dir.path()).await;
    let exchanges = run_default_script(proxy.local_addr(), 8, 4).await;
    let stats = proxy.shutdown().await;
    twins.stop().await;
    let elapsed = started.elapsed();

    ensure(exchanges.len() >= 200, || format!("only {} requests", exchanges.len()))?;
    let bad: Vec<_> = exchanges.iter().filter(|e| e.status != 200).map(|e| (&e.path, e.status)).collect();
    ensure(bad.is_empty(), || format!("client saw failures {bad:?}"))?;
    ensure(stats.compared == exchanges.len() as u64, || format!("not every request was compared: {stats:?}"))?;
    ensure(stats.alarms == 0, || format!("alarms raised: {stats:?}"))?;
    ensure(stats.expected_differences > 0, || format!("no expected differences: {stats:?}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "requests={} alarms={} expected_differences={}",
        exchanges.len(),
        stats.alarms,
        stats.expected_differences
    ))
}

// 2

const ALARM_SLACK: Duration = Duration::from_millis(250);

async fn wait_for_alarms(proxy: &ProxyHandle, want: impl Fn(&StatsSnapshot) -> bool, limit: Duration) {
    let until = Instant::now() + limit;
    while Instant::now() < until && !want(&proxy.stats().snapshot()) {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn injected_bug_detection() -> Outcome {
    let rate = shadowdiff::proxy::DEFAULT_COMPARING_RATE;
    let mut details = Vec::new();
    for (mutation, marker) in [
        (Mutation::BodyTextChange, "patched"),
        (Mutation::StatusFlip, ":status"),
        (Mutation::ExtraField, "debug"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let twins = Twins::start(mutation, Clock::Wall, Duration::ZERO).await;
        let proxy = start_proxy(&twins, ProxySetup::default(), dir.path()).await;
        run_default_script(proxy.local_addr(), 1, 1).await;
        wait_for_alarms(&proxy, |s| s.alarms > 0, rate * 3).await;
        let events = proxy.stats().alarm_events();
        proxy.shutdown().await;
        twins.stop().await;

        let first = events.first().ok_or_else(|| format!("{mutation}: no alarm"))?;
        let completed = first.completed_at.ok_or_else(|| format!("{mutation}: first alarm pair incomplete"))?;
        let wait = first.emitted_at - completed;
        ensure(wait <= rate + ALARM_SLACK, || {
            format!("{mutation}: first alarm emitted {wait:?} after its pair completed")
        })?;
        let log = std::fs::read_to_string(dir.path().join("alarms.jsonl")).unwrap();
        ensure(log.contains(marker), || format!("{mutation}: alarm log lacks {marker:?}: {log}"))?;
        details.push(format!("{mutation}={}ms", wait.as_millis()));
    }

    let pair_timeout = Duration::from_secs(2);
    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::MissingToken, Clock::Wall, Duration::ZERO).await;
    let setup = ProxySetup {
        pair_timeout,
        ..ProxySetup::default()
    };
    let proxy = start_proxy(&twins, setup, dir.path()).await;
    run_default_script(proxy.local_addr(), 1, 1).await;
    let has_incomplete = |p: &ProxyHandle| p.stats().alarm_events().iter().any(|e| e.completed_at.is_none());
    let until = Instant::now() + pair_timeout + rate * 3;
    while Instant::now() < until && !has_incomplete(&proxy) {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let events = proxy.stats().alarm_events();
    proxy.shutdown().await;
    twins.stop().await;
    let timed_out = events
        .iter()
        .find(|e| e.completed_at.is_none())
        .ok_or_else(|| format!("missing_token: no incomplete-pair alarm among {} alarms", events.len()))?;
    let wait = timed_out.emitted_at - timed_out.created_at;
    ensure(wait <= pair_timeout + rate + ALARM_SLACK, || {
        format!("missing_token: alarm {wait:?} after the request")
    })?;
    ensure(timed_out.uri.starts_with("/login"), || format!("missing_token: timed out pair was {}", timed_out.uri))?;
    details.push(format!("missing_token={}ms", wait.as_millis()));
    Ok(details.join(" "))
}

// 3

const DIGITS: u32 = 70;

fn scale() -> BigInt {
    BigInt::from(10u32).pow(DIGITS)
}

/// Exact value of `x` times 10^DIGITS, truncated.
fn scaled_f64(x: f64) -> BigInt {
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    let mut v = BigInt::from(mant) * scale();
    if e >= 0 {
        v <<= e as usize;
    } else {
        v >>= (-e) as usize;
    }
    if negative {
        -v
    } else {
        v
    }
}

fn rel_err_within(actual: f64, oracle: &BigInt, tol_exp: u32) -> bool {
    let diff = (scaled_f64(actual) - oracle).abs();
    diff * BigInt::from(10u32).pow(tol_exp) <= oracle.abs()
}

fn oracle_lambda(durations: &[u32]) -> BigInt {
    let sum: u32 = durations.iter().sum();
    BigInt::from(durations.len() - 1) * scale() / BigInt::from(sum)
}

fn oracle_se(lambda: &BigInt, n: usize) -> BigInt {
    let variance = lambda * lambda / BigInt::from(n - 2);
    variance.sqrt()
}

fn oracle_survival(lambda: &BigInt, t: u32) -> BigInt {
    let s = scale();
    let x = lambda * BigInt::from(t);
    let mut term = s.clone();
    let mut sum = s.clone();
    let mut k = 1u32;
    loop {
        term = term * &x / (BigInt::from(k) * &s);
        if term.is_zero() {
            break;
        }
        sum += &term;
        k += 1;
    }
    &s * &s / sum
}

fn reliability_formulas() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    for durations in [vec![1u32, 1], vec![2, 3, 1, 4, 2]] {
        let log = ObservationLog::new(durations.iter().map(|&d| d as f64).collect()).unwrap();
        let lambda = estimate_lambda(&log).map_err(|e| e.to_string())?;
        let oracle = oracle_lambda(&durations);
        ensure(rel_err_within(lambda, &oracle, 12), || format!("lambda for {durations:?}: {lambda}"))?;
        checked += 1;

        let n = durations.len();
        match standard_error(lambda, n) {
            Ok(se) => {
                let o = oracle_se(&oracle, n);
                ensure(rel_err_within(se, &o, 12), || format!("se for {durations:?}: {se}"))?;
                checked += 1;
            }
            Err(ReliabilityError::InsufficientData { .. }) if n < 3 => {}
            Err(e) => return Err(format!("se for {durations:?}: {e}")),
        }

        for t in [0u32, 3] {
            let p = survival_probability(lambda, t as f64).map_err(|e| e.to_string())?;
            let o = oracle_survival(&oracle, t);
            ensure(rel_err_within(p, &o, 12), || format!("P for {durations:?}, t={t}: {p}"))?;
            checked += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_2024);
    let dist = Exp::new(2.0).unwrap();
    let samples: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
    let log = ObservationLog::new(samples).unwrap();
    let lambda = estimate_lambda(&log).unwrap();
    let se = standard_error(lambda, log.len()).unwrap();
    ensure((lambda - 2.0).abs() <= 3.0 * se, || format!("Monte Carlo lambda {lambda} se {se}"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} oracle checks, monte carlo lambda={lambda:.4} se={se:.4}"))
}

// 4

fn random_key(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'c', 'x', 'y', 'z', '_', 'Q', '1', 'é', '"', '\\', ' ', '.', '[', '/'];
    let len = rng.random_range(1..8);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn random_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    let leaf = depth >= 5 || rng.random_bool(0.35);
    if leaf {
        return match rng.random_range(0..6) {
            0 => Value::Null,
            1 => Value::Bool(rng.random()),
            2 => Value::from(rng.random_range(-1_000_000i64..1_000_000)),
            3 => Value::from(rng.random_range(-1e6..1e6f64)),
            4 => Value::from(rng.random::<u64>()),
            _ => Value::from(random_key(rng)),
        };
    }
    if rng.random_bool(0.6) {
        let mut map = serde_json::Map::new();
        for _ in 0..rng.random_range(0..6) {
            map.insert(random_key(rng), random_value(rng, depth + 1));
        }
        Value::Object(map)
    } else {
        Value::Array((0..rng.random_range(0..5)).map(|_| random_value(rng, depth + 1)).collect())
    }
}

/// Renders `v` with every object's members in a random order.
fn shuffled_text(v: &Value, rng: &mut ChaCha8Rng, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut members: Vec<_> = map.iter().collect();
            members.shuffle(rng);
            out.push('{');
            for (i, (k, v)) in members.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                shuffled_text(v, rng, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                shuffled_text(item, rng, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).unwrap()),
    }
}

fn pair_of(main: Response, shadow: Response) -> ResponsePair {
    let now = Instant::now();
    ResponsePair {
        key: PairKey::from_raw("acceptance-1"),
        request_summary: RequestSummary {
            method: "GET".into(),
            uri: "/".into(),
            session: "s".into(),
        },
        main_response: Some(main),
        shadow_response: Some(shadow),
        created_at: now,
        deadline: now + Duration::from_secs(30),
        completed_at: Some(now),
    }
}

fn json_permutation_invariance() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rules = RuleSet::new();
    let mut reordered = 0;
    for i in 0..1000 {
        let doc = random_value(&mut rng, 1);
        let original = serde_json::to_string(&doc).unwrap();
        let mut shuffled = String::new();
        shuffled_text(&doc, &mut rng, &mut shuffled);
        let doc: Value = serde_json::from_str(&original).unwrap();
        let reparsed: Value = serde_json::from_str(&shuffled).unwrap();
        ensure(reparsed == doc, || format!("document {i}: shuffle changed content"))?;
        if shuffled != original {
            reordered += 1;
        }

        let tokens = compare_json(&doc, &reparsed);
        ensure(tokens.is_empty(), || format!("document {i}: {tokens:?}"))?;
        let outcome = compare_pair(
            &pair_of(
                Response::with_type(200, "application/json", original.clone()),
                Response::with_type(200, "application/json", shuffled.clone()),
            ),
            &rules,
        );
        ensure(outcome.verdict == Verdict::Equal, || {
            format!("document {i}: {original} vs {shuffled}: {:?}", outcome.unexpected)
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 documents, {reordered} textually reordered, 0 differences"))
}

// 5

struct CorpusTag {
    element: &'static str,
    attrs: Vec<(String, String)>,
}

impl CorpusTag {
    fn render(&self, order: &[usize]) -> String {
        let mut s = format!("<{}", self.element);
        for &i in order {
            let (n, v) = &self.attrs[i];
            s.push_str(&format!(" {n}=\"{v}\""));
        }
        s.push('>');
        s
    }
}

fn tag_corpus() -> Vec<CorpusTag> {
    const ELEMENTS: [(&str, &[&str]); 10] = [
        ("input", &["type", "name", "value", "id", "class"]),
        ("a", &["href", "class", "title", "rel"]),
        ("img", &["src", "alt", "width", "height"]),
        ("meta", &["name", "content", "property"]),
        ("link", &["rel", "href", "media", "integrity"]),
        ("div", &["class", "id", "data-item", "role"]),
        ("span", &["class", "title", "data-ts"]),
        ("form", &["action", "method", "enctype", "id"]),
        ("button", &["type", "class", "value", "form"]),
        ("script", &["src", "nonce", "type", "defer"]),
    ];
    const VALUE_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789/-_.:";
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..50)
        .map(|i| {
            let (element, names) = ELEMENTS[i % ELEMENTS.len()];
            let count = 2 + i % 3;
            let mut names: Vec<&str> = names.to_vec();
            names.shuffle(&mut rng);
            let attrs = names
                .into_iter()
                .take(count.min(names_len(element)))
                .map(|n| {
                    let len = rng.random_range(1..14);
                    let v: String = (0..len)
                        .map(|_| VALUE_CHARS[rng.random_range(0..VALUE_CHARS.len())] as char)
                        .collect();
                    (n.to_owned(), v)
                })
                .collect();
            CorpusTag { element, attrs }
        })
        .collect()
}

fn names_len(element: &str) -> usize {
    match element {
        "meta" | "span" => 3,
        _ => 4,
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn html_doc(tag: &str) -> Response {
    Response::with_type(200, "text/html; charset=utf-8", format!("<html>\n<body>\n{tag}\n</body>\n</html>\n"))
}

fn html_pair_verdict(main_tag: &str, shadow_tag: &str) -> Verdict {
    compare_pair(&pair_of(html_doc(main_tag), html_doc(shadow_tag)), &RuleSet::new()).verdict
}

fn substitute(c: char) -> Vec<char> {
    let mut alts = Vec::new();
    if c.is_ascii_alphanumeric() {
        let rotated = match c {
            'z' => 'a',
            'Z' => 'A',
            '9' => '0',
            c => (c as u8 + 1) as char,
        };
        alts.push(rotated);
        alts.push(if c == '7' { '8' } else { '7' });
    } else {
        alts.push('x');
    }
    alts
}

fn html_normalization() -> Outcome {
    let corpus = tag_corpus();
    let mut permuted = 0;
    let mut changed = 0;
    for tag in &corpus {
        let identity: Vec<usize> = (0..tag.attrs.len()).collect();
        let original = tag.render(&identity);
        for order in permutations(tag.attrs.len()) {
            if order == identity {
                continue;
            }
            let other = tag.render(&order);
            ensure(tags_equal_normalized(&original, &other), || format!("{original} vs {other}"))?;
            ensure(html_pair_verdict(&original, &other) == Verdict::Equal, || {
                format!("pipeline: {original} vs {other}")
            })?;
            permuted += 1;
        }
        for (a, (name, value)) in tag.attrs.iter().enumerate() {
            for (pos, c) in value.char_indices() {
                for alt in substitute(c) {
                    let mut v = value.clone();
                    v.replace_range(pos..pos + c.len_utf8(), &alt.to_string());
                    let mut changed_tag = CorpusTag {
                        element: tag.element,
                        attrs: tag.attrs.clone(),
                    };
                    changed_tag.attrs[a] = (name.clone(), v);
                    let other = changed_tag.render(&identity);
                    ensure(!tags_equal_normalized(&original, &other), || format!("{original} vs {other}"))?;
                    ensure(html_pair_verdict(&original, &other) == Verdict::Alarm, || {
                        format!("pipeline: {original} vs {other}")
                    })?;
                    changed += 1;
                }
            }
        }
    }
    let a = "<input name=\"q\" value=\"1\">";
    let b = "<input eman=\"q\" value=\"1\">";
    ensure(tags_equal_normalized(a, b), || "name/eman differ".into())?;
    ensure(html_pair_verdict(a, b) == Verdict::Equal, || "pipeline: name/eman differ".into())?;
    Ok(format!(
        "{} tags, {permuted} permutations equal, {changed} single-character changes unequal, name/eman equal",
        corpus.len()
    ))
}

// 6

fn random_name(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &[
        'a', 'B', 'c', 'Z', '0', '9', '_', '-', '.', '[', ']', ':', '+', '#', ' ', 'é', 'ß', '$', '/', '=',
    ];
    loop {
        let len = rng.random_range(1..20);
        let s: String = (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect();
        let s = s.trim().to_owned();
        if !s.is_empty() {
            return s;
        }
    }
}

fn config_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..500 {
        let mut expected: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(0..12) {
            let n = random_name(&mut rng);
            if !expected.contains(&n) {
                expected.push(n);
            }
        }
        let mut characteristic: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(0..5) {
            let n = if !expected.is_empty() && rng.random_bool(0.7) {
                expected[rng.random_range(0..expected.len())].clone()
            } else {
                random_name(&mut rng)
            };
            if !characteristic.contains(&n) {
                characteristic.push(n);
            }
        }
        let rules = RuleSet::from_names(expected, characteristic).map_err(|e| format!("set {i}: {e}"))?;
        let text = serialize_config(&rules);
        let parsed = parse_config(&text).map_err(|e| format!("set {i}: {e}\n{text}"))?;
        ensure(parsed == rules, || format!("set {i} changed:\n{text}"))?;
    }

    let listings = [
        (
            "eshoponweb",
            ":RequestVerificationToken\n:Items[\n+RequestVerificationToken\n+Items[\n",
            vec!["RequestVerificationToken", "Items["],
            vec!["RequestVerificationToken", "Items["],
        ),
        (
            "odoo",
            ": csrf_token\n: session_info\n: write_date\n: create_date\n: id\n: last_update\n: search_view\n: date\n+ csrf_token\n\n",
            vec!["csrf_token", "session_info", "write_date", "create_date", "id", "last_update", "search_view", "date"],
            vec!["csrf_token"],
        ),
        (
            "openproject",
            ":token\n:nonce\n:uuid\n:key\n:styles\n:timestamp\n:createdAt\n:updatedAt\n+token\n+nonce\n",
            vec!["token", "nonce", "uuid", "key", "styles", "timestamp", "createdAt", "updatedAt"],
            vec!["token", "nonce"],
        ),
    ];
    for (name, text, expected, characteristic) in listings {
        let rules = parse_config(text).map_err(|e| format!("{name}: {e}"))?;
        ensure(rules.expected_differences() == expected.as_slice(), || {
            format!("{name}: expected {:?}", rules.expected_differences())
        })?;
        ensure(rules.characteristic_values() == characteristic.as_slice(), || {
            format!("{name}: characteristic {:?}", rules.characteristic_values())
        })?;
    }
    Ok("500 random rule sets round-trip, 3 listings exact".into())
}

// 7

const BINDING_MAIN: &str = "3f9c2d41a7b84e0c9d15f6e2b8a07c4d51e9f2a6";
const BINDING_SHADOW: &str = "c07e55b1d9a34f2e8b6c0a19d4e7f3b25a8c1e90";

struct GeneratedPart {
    name: String,
    filename: Option<String>,
    body: Vec<u8>,
}

fn random_multipart(rng: &mut ChaCha8Rng) -> (String, Vec<GeneratedPart>, Vec<u8>) {
    let boundary = format!("----form{:016x}", rng.random::<u64>());
    let mut parts = Vec::new();
    let texts = rng.random_range(1..4);
    for t in 0..texts {
        let value = if t == 0 {
            BINDING_MAIN.to_owned()
        } else {
            format!("note {}", rng.random::<u32>())
        };
        parts.push(GeneratedPart {
            name: if t == 0 { "csrf_token".into() } else { format!("field{t}") },
            filename: None,
            body: value.into_bytes(),
        });
    }
    for b in 0..rng.random_range(1..4) {
        let len = rng.random_range(0..4096);
        let mut body: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        if rng.random_bool(0.5) {
            let at = rng.random_range(0..=body.len());
            body.splice(at..at, BINDING_MAIN.bytes());
        }
        if rng.random_bool(0.3) {
            let at = rng.random_range(0..=body.len());
            body.splice(at..at, b"\r\n--".iter().copied());
        }
        parts.push(GeneratedPart {
            name: format!("file{b}"),
            filename: Some(format!("blob{b}.bin")),
            body,
        });
    }
    parts.shuffle(rng);

    let mut wire = Vec::new();
    for p in &parts {
        wire.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match &p.filename {
            Some(f) => wire.extend_from_slice(
                format!(
                    "Content-Disposition: form-data; name=\"{}\"; filename=\"{f}\"\r\nContent-Type: application/octet-stream\r\n\r\n",
                    p.name
                )
                .as_bytes(),
            ),
            None => wire.extend_from_slice(format!("Content-Disposition: form-data; name=\"{}\"\r\n\r\n", p.name).as_bytes()),
        }
        wire.extend_from_slice(&p.body);
        wire.extend_from_slice(b"\r\n");
    }
    wire.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (boundary, parts, wire)
}

async fn decode_with_multer(body: Bytes, content_type: &str) -> Result<Vec<(String, Option<String>, Bytes)>, String> {
    let boundary = multer::parse_boundary(content_type).map_err(|e| e.to_string())?;
    let stream = futures::stream::once(async move { Ok::<Bytes, std::io::Error>(body) });
    let mut mp = multer::Multipart::new(stream, boundary);
    let mut out = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(|e| e.to_string())? {
        let name = field.name().unwrap_or_default().to_owned();
        let filename = field.file_name().map(str::to_owned);
        let bytes = field.bytes().await.map_err(|e| e.to_string())?;
        out.push((name, filename, bytes));
    }
    Ok(out)
}

async fn multipart_rewrite_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let subs = Substitutions::from_map(HashMap::from([(BINDING_MAIN.to_owned(), BINDING_SHADOW.to_owned())]));
    let jar = CookieJarPair::new(SessionId::from_cookie("acceptance"));
    for i in 0..100 {
        let (boundary, parts, wire) = loop {
            let candidate = random_multipart(&mut rng);
            let clean = candidate.1.iter().all(|p| {
                !p.body.windows(candidate.0.len()).any(|w| w == candidate.0.as_bytes())
            });
            if clean {
                break candidate;
            }
        };
        let mut headers = Headers::new();
        headers.push("host", "main.local");
        headers.push("content-type", format!("multipart/form-data; boundary={boundary}"));
        headers.push("content-length", wire.len().to_string());
        let req = Request::new("POST", "/upload", headers, wire);

        let out = rewrite_request(&req, &subs, &jar, Some("shadow.local"));
        let rewritten = &out.request;
        let ct = rewritten.headers.get("content-type").ok_or("content-type lost")?.to_owned();
        let len = rewritten.headers.get("content-length").ok_or("content-length lost")?;
        ensure(len == rewritten.body.len().to_string(), || format!("body {i}: content-length {len} vs {}", rewritten.body.len()))?;
        let decoded = decode_with_multer(rewritten.body.clone(), &ct)
            .await
            .map_err(|e| format!("body {i}: multer rejected rewrite: {e}"))?;
        ensure(decoded.len() == parts.len(), || format!("body {i}: {} parts became {}", parts.len(), decoded.len()))?;
        for (orig, (name, filename, bytes)) in parts.iter().zip(&decoded) {
            ensure(&orig.name == name && &orig.filename == filename, || format!("body {i}: part {name} moved"))?;
            let want: &[u8] = if orig.filename.is_none() && orig.body == BINDING_MAIN.as_bytes() {
                BINDING_SHADOW.as_bytes()
            } else {
                &orig.body
            };
            ensure(bytes.as_ref() == want, || format!("body {i}: part {name} bytes differ"))?;
        }
    }
    Ok("100 bodies rewritten, decoded by multer, binary parts intact".into())
}

// 8

fn comparable_headers(headers: &[(String, String)]) -> Vec<(String, String)> {
    headers
        .iter()
        .filter(|(n, _)| !n.eq_ignore_ascii_case("date") && !is_hop_by_hop(n, &[]))
        .map(|(n, v)| (n.to_ascii_lowercase(), v.clone()))
        .collect()
}

async fn client_transparency() -> Outcome {
    let mut direct_cfg = FixtureAppConfig::new(11);
    direct_cfg.clock = Clock::Logical;
    let direct_app = fixture::start(direct_cfg).await.unwrap();
    let direct = run_default_script(direct_app.local_addr(), 1, 2).await;
    direct_app.stop().await;

    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::None, Clock::Logical, Duration::ZERO).await;
    let proxy = start_proxy(&twins, ProxySetup::default(), dir.path()).await;
    let proxied = run_default_script(proxy.local_addr(), 1, 2).await;
    proxy.shutdown().await;
    twins.stop().await;

    ensure(direct.len() == proxied.len(), || format!("{} vs {} exchanges", direct.len(), proxied.len()))?;
    for (d, p) in direct.iter().zip(&proxied) {
        let what = format!("{} {}", d.method, d.path);
        ensure(d.path == p.path, || format!("{what}: proxied path {}", p.path))?;
        ensure(d.status == p.status, || format!("{what}: status {} vs {}", d.status, p.status))?;
        ensure(d.body == p.body, || format!("{what}: body differs"))?;
        let (dh, ph) = (comparable_headers(&d.headers), comparable_headers(&p.headers));
        ensure(dh == ph, || format!("{what}: headers {dh:?} vs {ph:?}"))?;
    }

    let dir = tempfile::tempdir().unwrap();
    let shadow_delay = Duration::from_secs(5);
    let twins = Twins::start(Mutation::None, Clock::Wall, shadow_delay).await;
    let setup = ProxySetup {
        pair_timeout: shadow_delay + Duration::from_secs(1),
        ..ProxySetup::default()
    };
    let proxy = start_proxy(&twins, setup, dir.path()).await;
    let delayed: Vec<Exchange> = run_default_script(proxy.local_addr(), 1, 1).await;
    let slowest = delayed.iter().map(|e| e.latency).max().unwrap_or_default();
    proxy.shutdown().await;
    twins.stop().await;
    ensure(delayed.iter().all(|e| e.status == 200), || "delayed run saw failures".into())?;
    ensure(slowest < Duration::from_secs(1), || format!("client waited {slowest:?} with a 5 s shadow"))?;
    Ok(format!(
        "{} exchanges byte-identical, slowest client latency {:.0?} with 5 s shadow delay",
        direct.len(),
        slowest
    ))
}

// 9

async fn learning_pipeline_closure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::None, Clock::Wall, Duration::ZERO).await;
    let setup = ProxySetup {
        mode: Mode::Learning,
        rules: RuleSet::new(),
        ..ProxySetup::default()
    };
    let proxy = start_proxy(&twins, setup, dir.path()).await;
    run_default_script(proxy.local_addr(), 8, 4).await;
    proxy.shutdown().await;
    twins.stop().await;

    let entries = read_log(dir.path().join("diff.jsonl")).map_err(|e| e.to_string())?;
    let records = records_from_log(&entries);
    let candidates = suggest_rules(&records, 3);
    let rendered = render_candidates(&candidates);
    let rules = parse_config(&rendered).map_err(|e| format!("suggested rules do not parse: {e}\n{rendered}"))?;
    ensure(rules == candidates_to_rules(&candidates), || "rendered rules disagree with candidates".into())?;
    ensure(!rules.characteristic_values().is_empty(), || format!("no characteristic values suggested:\n{rendered}"))?;

    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::None, Clock::Wall, Duration::ZERO).await;
    let setup = ProxySetup {
        rules: rules.clone(),
        ..ProxySetup::default()
    };
    let proxy = start_proxy(&twins, setup, dir.path()).await;
    let exchanges = run_default_script(proxy.local_addr(), 8, 4).await;
    let stats = proxy.shutdown().await;
    twins.stop().await;

    ensure(exchanges.iter().all(|e| e.status == 200), || "rerun saw client failures".into())?;
    ensure(stats.alarms == 0, || {
        let alarms = std::fs::read_to_string(dir.path().join("alarms.jsonl")).unwrap_or_default();
        format!("{} alarms with suggested rules:\n{rendered}\n{}", stats.alarms, alarms.lines().next().unwrap_or(""))
    })?;
    let summary: BTreeMap<&str, Vec<&str>> = BTreeMap::from([
        ("expected", rules.expected_differences().iter().map(String::as_str).collect()),
        ("characteristic", rules.characteristic_values().iter().map(String::as_str).collect()),
    ]);
    Ok(format!(
        "{} learned records, rerun of {} requests: 0 alarms, rules {summary:?}",
        records.len(),
        exchanges.len()
    ))
}
