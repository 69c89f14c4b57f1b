#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use shadowdiff::fixture::{self, Clock, FixtureAppConfig, FixtureHandle, Mutation};
use shadowdiff::proxy::{self, Mode, ProxyConfig, ProxyHandle};
use shadowdiff::script::{self, Exchange, RunOptions};
use shadowdiff::{parse_config, RuleSet};

pub const TWIN_RULES: &str = include_str!("../../assets/twin-shop.rules");

pub fn twin_rules() -> RuleSet {
    parse_config(TWIN_RULES).unwrap()
}

pub struct Twins {
    pub main: FixtureHandle,
    pub shadow: FixtureHandle,
}

impl Twins {
    pub async fn start(shadow_mutation: Mutation, clock: Clock, shadow_delay: Duration) -> Twins {
        let mut main = FixtureAppConfig::new(11);
        main.clock = clock;
        let mut shadow = FixtureAppConfig::new(29);
        shadow.clock = clock;
        shadow.mutation = shadow_mutation;
        shadow.delay = shadow_delay;
        Twins {
            main: fixture::start(main).await.unwrap(),
            shadow: fixture::start(shadow).await.unwrap(),
        }
    }

    pub async fn stop(self) {
        self.main.stop().await;
        self.shadow.stop().await;
    }
}

pub struct ProxySetup {
    pub mode: Mode,
    pub rules: RuleSet,
    pub comparing_rate: Duration,
    pub pair_timeout: Duration,
}

impl Default for ProxySetup {
    fn default() -> Self {
        ProxySetup {
            mode: Mode::Comparing,
            rules: twin_rules(),
            comparing_rate: proxy::DEFAULT_COMPARING_RATE,
            pair_timeout: Duration::from_secs(10),
        }
    }
}

pub async fn start_proxy(twins: &Twins, setup: ProxySetup, dir: &Path) -> ProxyHandle {
    let listen: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let mut cfg = ProxyConfig::new(
        listen,
        twins.main.local_addr().to_string().parse().unwrap(),
        twins.shadow.local_addr().to_string().parse().unwrap(),
    );
    cfg.mode = setup.mode;
    cfg.rules = setup.rules;
    cfg.comparing_rate = setup.comparing_rate;
    cfg.pair_timeout = setup.pair_timeout;
    cfg.diff_log = Some(dir.join("diff.jsonl"));
    cfg.alarm_log = Some(dir.join("alarms.jsonl"));
    proxy::start(cfg).await.unwrap()
}

pub async fn run_default_script(target: SocketAddr, users: usize, iterations: usize) -> Vec<Exchange> {
    let steps = script::parse_script(script::DEFAULT_SCRIPT).unwrap();
    let options = RunOptions {
        users,
        iterations,
        ..RunOptions::default()
    };
    script::run_script(target, &steps, &options).await.unwrap()
}
