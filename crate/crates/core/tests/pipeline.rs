mod common;

use std::time::Duration;

use common::*;
use shadowdiff::fixture::{Clock, Mutation};
use shadowdiff::logs::read_log;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn twin_session_compares_clean() {
    let dir = tempfile::tempdir().unwrap();
    let twins = Twins::start(Mutation::None, Clock::Wall, Duration::ZERO).await;
    let proxy = start_proxy(&twins, ProxySetup::default(), dir.path()).await;
    let exchanges = run_default_script(proxy.local_addr(), 8, 4).await;
    assert!(exchanges.iter().all(|e| e.status == 200), "{:?}", exchanges.iter().map(|e| (e.path.clone(), e.status)).collect::<Vec<_>>());
    let stats = proxy.shutdown().await;
    twins.stop().await;
    let alarms = read_log(dir.path().join("alarms.jsonl")).unwrap();
    for a in &alarms {
        eprintln!("{}", serde_json::to_string_pretty(a).unwrap());
    }
    eprintln!("{stats:?}");
    assert_eq!(stats.alarms, 0, "{stats:?}");
    assert!(stats.expected_differences > 0);
    assert_eq!(stats.compared, exchanges.len() as u64);
}
