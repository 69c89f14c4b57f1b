//! Per-session ordering of shadow requests.
//!
//! A shadow request may only be rewritten once every earlier request of the
//! same session has had its values recorded, otherwise it would carry stale
//! tokens. Each request holds a lane: a future that resolves when its shadow
//! leg is finished. The next request of the session waits on it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures::future::{BoxFuture, FutureExt, Shared};
use parking_lot::Mutex;
use tokio::sync::oneshot;

use crate::value_map::SessionId;

pub type LaneFuture = Shared<BoxFuture<'static, ()>>;

#[derive(Default)]
pub struct Lanes {
    tails: Mutex<HashMap<SessionId, (u64, LaneFuture)>>,
    next: AtomicU64,
}

/// The calling request's place in its session's lane.
pub struct LaneTicket {
    id: u64,
    /// Earlier request of the session, if any is still in flight.
    pub previous: Option<LaneFuture>,
    done: Option<oneshot::Sender<()>>,
    future: LaneFuture,
    keys: Arc<Mutex<Vec<SessionId>>>,
}

impl Lanes {
    pub fn enter(&self, session: &SessionId) -> LaneTicket {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel::<()>();
        let future: LaneFuture = rx.map(|_| ()).boxed().shared();
        let previous = self
            .tails
            .lock()
            .insert(session.clone(), (id, future.clone()))
            .map(|(_, f)| f);
        LaneTicket {
            id,
            previous,
            done: Some(tx),
            future,
            keys: Arc::new(Mutex::new(vec![session.clone()])),
        }
    }

    /// Makes `session` follow the ticket's lane too, used when a response
    /// moves the client to a new session cookie.
    pub fn alias(&self, ticket: &LaneAlias, session: &SessionId) {
        self.tails
            .lock()
            .insert(session.clone(), (ticket.id, ticket.future.clone()));
        ticket.keys.lock().push(session.clone());
    }

    /// Resolves the ticket's lane and forgets it where it is still the tail.
    pub fn leave(&self, mut ticket: LaneTicket) {
        if let Some(done) = ticket.done.take() {
            let _ = done.send(());
        }
        let keys = ticket.keys.lock().clone();
        let mut tails = self.tails.lock();
        for key in keys {
            if tails.get(&key).is_some_and(|(id, _)| *id == ticket.id) {
                tails.remove(&key);
            }
        }
    }

    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.tails.lock().is_empty()
    }
}

/// Handle the request path keeps to alias a lane after the shadow leg owns
/// the ticket.
#[derive(Clone)]
pub struct LaneAlias {
    id: u64,
    future: LaneFuture,
    keys: Arc<Mutex<Vec<SessionId>>>,
}

impl LaneTicket {
    pub fn alias_handle(&self) -> LaneAlias {
        LaneAlias {
            id: self.id,
            future: self.future.clone(),
            keys: self.keys.clone(),
        }
    }
}

impl Drop for LaneTicket {
    fn drop(&mut self) {
        if let Some(done) = self.done.take() {
            let _ = done.send(());
        }
    }
}
