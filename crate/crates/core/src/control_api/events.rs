use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use futures::Stream;
use mosaic_protocol::canonical;
use serde::Serialize;
use serde_json::Value;
use tokio::sync::watch;

/// One frame on the event channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub seq: u64,
    pub subject: String,
    pub kind: String,
    pub data: Value,
}

impl Event {
    pub fn to_line(&self) -> String {
        canonical::to_line_of(self).expect("events serialize")
    }
}

struct Inner {
    events: Vec<Event>,
    closed: bool,
}

/// Append-only, sequence-numbered event log with change notification.
/// Sequence numbers start at 1 and have no gaps.
pub struct EventLog {
    subject: String,
    inner: Mutex<Inner>,
    tx: watch::Sender<u64>,
}

impl EventLog {
    pub fn new(subject: &str) -> Arc<EventLog> {
        let (tx, _) = watch::channel(0);
        Arc::new(EventLog {
            subject: subject.to_string(),
            inner: Mutex::new(Inner { events: Vec::new(), closed: false }),
            tx,
        })
    }

    pub fn publish(&self, kind: &str, data: Value) -> u64 {
        let mut inner = self.inner.lock().expect("event log lock");
        let seq = inner.events.len() as u64 + 1;
        inner.events.push(Event { seq, subject: self.subject.clone(), kind: kind.to_string(), data });
        drop(inner);
        self.tx.send_replace(seq);
        seq
    }

    /// No more events will follow; open streams end after draining.
    pub fn close(&self) {
        self.inner.lock().expect("event log lock").closed = true;
        self.tx.send_modify(|_| {});
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().expect("event log lock").closed
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().expect("event log lock").events.len() as u64
    }

    /// Events with `seq > after`, plus whether the log is closed.
    pub fn since(&self, after: u64) -> (Vec<Event>, bool) {
        let inner = self.inner.lock().expect("event log lock");
        let from = (after as usize).min(inner.events.len());
        (inner.events[from..].to_vec(), inner.closed)
    }

    /// Replays from `after` and follows new events until the log closes.
    pub fn stream(self: &Arc<Self>, after: u64, follow: bool) -> impl Stream<Item = Event> + Send + 'static {
        let rx = self.tx.subscribe();
        let state = (self.clone(), after, rx, VecDeque::<Event>::new());
        futures::stream::unfold(state, move |(log, mut after, mut rx, mut buf)| async move {
            loop {
                if let Some(e) = buf.pop_front() {
                    after = e.seq;
                    return Some((e, (log, after, rx, buf)));
                }
                rx.borrow_and_update();
                let (events, closed) = log.since(after);
                if !events.is_empty() {
                    buf.extend(events);
                    continue;
                }
                if closed || !follow {
                    return None;
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }
}
