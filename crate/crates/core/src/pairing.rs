//! Pair store: binds the main and shadow responses of one client request via
//! a key carried in an internal request header, and releases pairs in
//! batches.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{RequestSummary, Response};

/// Internal header carrying the pair key on both upstream requests. Never
/// shown to the client.
pub const PAIR_HEADER: &str = "x-shadowdiff-key";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairKey(String);

impl PairKey {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        PairKey(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Main,
    Shadow,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Main => "main",
            Side::Shadow => "shadow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub key: PairKey,
    pub request_summary: RequestSummary,
    pub main_response: Option<Response>,
    pub shadow_response: Option<Response>,
    pub created_at: Instant,
    pub deadline: Instant,
    /// When the second response arrived.
    pub completed_at: Option<Instant>,
}

impl ResponsePair {
    pub fn is_complete(&self) -> bool {
        self.main_response.is_some() && self.shadow_response.is_some()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairingError {
    #[error("unknown or already flushed pair key {0}")]
    UnknownKey(PairKey),
    #[error("{side} response for pair {key} was already submitted")]
    DuplicateSide { key: PairKey, side: Side },
}

struct Slot {
    seq: u64,
    pair: ResponsePair,
}

/// Shared pair store. Every operation takes one short lock; flush snapshots
/// and removes eligible pairs atomically.
pub struct PairStore {
    prefix: String,
    next: AtomicU64,
    pair_timeout: Duration,
    slots: Mutex<HashMap<PairKey, Slot>>,
}

impl PairStore {
    pub fn new(pair_timeout: Duration) -> Self {
        PairStore {
            prefix: format!("{:08x}", rand::random::<u32>()),
            next: AtomicU64::new(0),
            pair_timeout,
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub fn pair_timeout(&self) -> Duration {
        self.pair_timeout
    }

    pub fn open_pair(&self, request_summary: RequestSummary) -> PairKey {
        self.open_pair_at(request_summary, Instant::now())
    }

    pub fn open_pair_at(&self, request_summary: RequestSummary, now: Instant) -> PairKey {
        let seq = self.next.fetch_add(1, Ordering::Relaxed);
        let key = PairKey(format!("{}-{:010}", self.prefix, seq));
        let pair = ResponsePair {
            key: key.clone(),
            request_summary,
            main_response: None,
            shadow_response: None,
            created_at: now,
            deadline: now + self.pair_timeout,
            completed_at: None,
        };
        self.slots.lock().insert(key.clone(), Slot { seq, pair });
        key
    }

    /// Stores one side. Returns whether the pair is now complete.
    pub fn submit_response(&self, key: &PairKey, side: Side, resp: Response) -> Result<bool, PairingError> {
        let mut slots = self.slots.lock();
        let slot = slots
            .get_mut(key)
            .ok_or_else(|| PairingError::UnknownKey(key.clone()))?;
        let pair = &mut slot.pair;
        let target = match side {
            Side::Main => &mut pair.main_response,
            Side::Shadow => &mut pair.shadow_response,
        };
        if target.is_some() {
            return Err(PairingError::DuplicateSide {
                key: key.clone(),
                side,
            });
        }
        *target = Some(resp);
        let complete = pair.is_complete();
        if complete {
            pair.completed_at = Some(Instant::now());
        }
        Ok(complete)
    }

    /// Drops a pair whose main request failed; it is never compared.
    pub fn close_void(&self, key: &PairKey) -> bool {
        self.slots.lock().remove(key).is_some()
    }

    /// Removes and returns complete pairs plus incomplete pairs whose deadline
    /// has passed, in the order they were opened.
    pub fn flush(&self, now: Instant) -> Vec<ResponsePair> {
        self.take(|p| p.is_complete() || p.deadline <= now)
    }

    /// Removes and returns everything, complete or not.
    pub fn drain(&self) -> Vec<ResponsePair> {
        self.take(|_| true)
    }

    fn take(&self, eligible: impl Fn(&ResponsePair) -> bool) -> Vec<ResponsePair> {
        let mut slots = self.slots.lock();
        let keys: Vec<PairKey> = slots
            .iter()
            .filter(|(_, s)| eligible(&s.pair))
            .map(|(k, _)| k.clone())
            .collect();
        let mut out: Vec<Slot> = keys.iter().filter_map(|k| slots.remove(k)).collect();
        drop(slots);
        out.sort_by_key(|s| s.seq);
        out.into_iter().map(|s| s.pair).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
