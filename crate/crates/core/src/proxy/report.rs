//! Routing of comparison outcomes to logs, counters and the observations file.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Instant, SystemTime};

use parking_lot::Mutex;
use serde::Serialize;

use super::Mode;
use crate::comparator::{Comparator, Verdict};
use crate::learning::{format_special, DifferenceRecord};
use crate::logs::{LogEntry, LogWriter};
use crate::pairing::ResponsePair;
use crate::reliability::{append_observation, recorded_runs, Observation};

/// Most alarm events kept in memory.
const MAX_ALARM_EVENTS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct AlarmEvent {
    pub pair_key: String,
    pub uri: String,
    pub created_at: Instant,
    /// `None` when a side never arrived.
    pub completed_at: Option<Instant>,
    pub emitted_at: Instant,
}

#[derive(Debug, Default)]
pub struct Stats {
    pub opened: AtomicU64,
    pub voided: AtomicU64,
    pub compared: AtomicU64,
    pub equal: AtomicU64,
    pub expected_only: AtomicU64,
    pub alarms: AtomicU64,
    pub expected_differences: AtomicU64,
    pub unexpected_differences: AtomicU64,
    pub shadow_failures: AtomicU64,
    alarm_events: Mutex<Vec<AlarmEvent>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub opened: u64,
    pub voided: u64,
    pub compared: u64,
    pub equal: u64,
    pub expected_only: u64,
    pub alarms: u64,
    pub expected_differences: u64,
    pub unexpected_differences: u64,
    pub shadow_failures: u64,
}

impl Stats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            opened: g(&self.opened),
            voided: g(&self.voided),
            compared: g(&self.compared),
            equal: g(&self.equal),
            expected_only: g(&self.expected_only),
            alarms: g(&self.alarms),
            expected_differences: g(&self.expected_differences),
            unexpected_differences: g(&self.unexpected_differences),
            shadow_failures: g(&self.shadow_failures),
        }
    }

    pub fn alarm_events(&self) -> Vec<AlarmEvent> {
        self.alarm_events.lock().clone()
    }

    pub(crate) fn bump(counter: &AtomicU64, by: u64) {
        counter.fetch_add(by, Ordering::Relaxed);
    }
}

/// Time-to-first-alarm recording for the reliability estimate.
pub(crate) struct Observations {
    path: PathBuf,
    run_index: u64,
    run_started: Instant,
    armed: bool,
    expected_at_start: u64,
}

impl Observations {
    pub fn new(path: PathBuf) -> Self {
        let run_index = recorded_runs(&path);
        Observations {
            path,
            run_index,
            run_started: Instant::now(),
            armed: true,
            expected_at_start: 0,
        }
    }

    pub fn restart(&mut self, expected_so_far: u64) {
        self.run_started = Instant::now();
        self.armed = true;
        self.expected_at_start = expected_so_far;
        tracing::info!(run_index = self.run_index, "observation run restarted");
    }
}

pub(crate) struct Router {
    pub comparator: Comparator,
    pub mode: Mode,
    pub diff_log: Option<LogWriter>,
    pub alarm_log: Option<LogWriter>,
    pub observations: Option<Mutex<Observations>>,
}

impl Router {
    pub fn route(&self, pair: &ResponsePair, stats: &Stats) {
        let outcome = self.comparator.compare_pair(pair);
        Stats::bump(&stats.compared, 1);
        Stats::bump(&stats.expected_differences, outcome.expected.len() as u64);
        Stats::bump(&stats.unexpected_differences, outcome.unexpected.len() as u64);
        for w in &outcome.warnings {
            tracing::debug!(pair = %pair.key, "{w}");
        }
        match outcome.verdict {
            Verdict::Equal => Stats::bump(&stats.equal, 1),
            Verdict::ExpectedOnly => Stats::bump(&stats.expected_only, 1),
            Verdict::Alarm => {}
        }
        if outcome.verdict == Verdict::Equal {
            return;
        }
        let entry = LogEntry::from_outcome(&outcome, &pair.request_summary, SystemTime::now());

        match self.mode {
            Mode::Learning => {
                for token in &entry.unexpected {
                    let record = DifferenceRecord {
                        main_token: token.main_token.clone(),
                        shadow_token: token.shadow_token.clone(),
                        context_kind: token.context_kind,
                        locator: token.locator.clone(),
                        pair_key: entry.pair_key.clone(),
                        timestamp: entry.time.clone(),
                        request_summary: entry.request_summary.clone(),
                    };
                    tracing::info!("{}\n{}", pair.request_summary, format_special(&record));
                }
                self.write(self.diff_log.as_ref(), &entry);
            }
            Mode::Comparing => {
                self.write(self.diff_log.as_ref(), &entry);
                if outcome.verdict != Verdict::Alarm {
                    return;
                }
                Stats::bump(&stats.alarms, 1);
                self.write(self.alarm_log.as_ref(), &entry);
                let emitted_at = Instant::now();
                tracing::warn!(
                    pair = %pair.key,
                    request = %pair.request_summary,
                    differences = outcome.unexpected.len(),
                    "unexpected difference"
                );
                {
                    let mut events = stats.alarm_events.lock();
                    if events.len() < MAX_ALARM_EVENTS {
                        events.push(AlarmEvent {
                            pair_key: pair.key.to_string(),
                            uri: pair.request_summary.uri.clone(),
                            created_at: pair.created_at,
                            completed_at: pair.completed_at,
                            emitted_at,
                        });
                    }
                }
                if let Some(obs) = &self.observations {
                    let expected = stats.expected_differences.load(Ordering::Relaxed);
                    self.observe_alarm(&mut obs.lock(), expected, pair.created_at, emitted_at);
                }
            }
        }
    }

    fn observe_alarm(&self, obs: &mut Observations, expected_total: u64, pair_created: Instant, at: Instant) {
        // Traffic from before a restart says nothing about the new run.
        if !obs.armed || pair_created < obs.run_started {
            return;
        }
        obs.armed = false;
        let record = Observation {
            run_index: obs.run_index,
            duration_seconds: at.duration_since(obs.run_started).as_secs_f64().max(f64::MIN_POSITIVE),
            expected_differences: Some(expected_total.saturating_sub(obs.expected_at_start)),
        };
        match append_observation(&obs.path, &record) {
            Ok(()) => {
                tracing::info!(run_index = obs.run_index, seconds = record.duration_seconds, "first alarm of run recorded");
                obs.run_index += 1;
            }
            Err(e) => tracing::error!(path = %obs.path.display(), "cannot record observation: {e}"),
        }
    }

    fn write(&self, writer: Option<&LogWriter>, entry: &LogEntry) {
        if let Some(w) = writer {
            if let Err(e) = w.append(entry) {
                tracing::error!(path = %w.path().display(), "log write failed: {e}");
            }
        }
    }
}
