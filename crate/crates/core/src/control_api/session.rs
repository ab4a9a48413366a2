//! Manual sessions behind a command queue. One thread owns each session;
//! handlers talk to it over a channel, so commands apply one at a time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use mosaic_envs::render_rgb;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::events::EventLog;
use super::{ApiError, DaemonConfig, Verb};
use crate::evaluation::{open_manual_session, ManualSession, SessionError, SessionOptions, SessionStatus};
use crate::operator::{OperatorError, RunConfig};
use crate::telemetry::TelemetryRecord;

pub(crate) enum Command {
    Control { verb: Verb, expect_barrier: Option<u64>, reply: oneshot::Sender<Result<Value, ApiError>> },
    Human { replica: usize, slot: String, action: u32, reply: oneshot::Sender<Result<Value, ApiError>> },
    Frames { barrier: Option<u64>, rgb: bool, reply: oneshot::Sender<Result<Value, ApiError>> },
    Status { reply: oneshot::Sender<Result<Value, ApiError>> },
}

pub(crate) struct SessionEntry {
    pub id: String,
    pub events: Arc<EventLog>,
    tx: mpsc::Sender<Command>,
    busy: AtomicBool,
}

impl SessionEntry {
    pub fn spawn(id: &str, task: String, seed: u64, configs: Vec<RunConfig>, cfg: &DaemonConfig) -> Arc<SessionEntry> {
        let events = EventLog::new(id);
        let (tx, rx) = mpsc::channel();
        let actor = Actor {
            id: id.to_string(),
            task,
            seed,
            configs,
            opts: SessionOptions {
                max_replicas: cfg.max_replicas,
                bind: cfg.bind.clone(),
                runs_root: Some(cfg.runs_root.clone()),
                frame_history: cfg.frame_history,
            },
            session: None,
            stopped: false,
            events: events.clone(),
        };
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || actor.run(rx))
            .expect("spawn session thread");
        Arc::new(SessionEntry { id: id.to_string(), events, tx, busy: AtomicBool::new(false) })
    }

    async fn ask(
        &self,
        make: impl FnOnce(oneshot::Sender<Result<Value, ApiError>>) -> Command,
    ) -> Result<Value, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| ApiError::gone(&self.id))?;
        rx.await.map_err(|_| ApiError::gone(&self.id))?
    }

    /// Mutating commands are exclusive: a second one arriving while the
    /// first is in flight is refused rather than queued.
    async fn exclusive(
        &self,
        make: impl FnOnce(oneshot::Sender<Result<Value, ApiError>>) -> Command,
    ) -> Result<Value, ApiError> {
        if self.busy.swap(true, Ordering::AcqRel) {
            return Err(ApiError::conflict("busy", "another command is in progress"));
        }
        let out = self.ask(make).await;
        self.busy.store(false, Ordering::Release);
        out
    }

    pub async fn control(&self, verb: Verb, expect_barrier: Option<u64>) -> Result<Value, ApiError> {
        self.exclusive(|reply| Command::Control { verb, expect_barrier, reply }).await
    }

    pub async fn human(&self, replica: usize, slot: String, action: u32) -> Result<Value, ApiError> {
        self.exclusive(|reply| Command::Human { replica, slot, action, reply }).await
    }

    pub async fn frames(&self, barrier: Option<u64>, rgb: bool) -> Result<Value, ApiError> {
        self.ask(|reply| Command::Frames { barrier, rgb, reply }).await
    }

    pub async fn status(&self) -> Result<Value, ApiError> {
        self.ask(|reply| Command::Status { reply }).await
    }
}

struct Actor {
    id: String,
    task: String,
    seed: u64,
    configs: Vec<RunConfig>,
    opts: SessionOptions,
    session: Option<ManualSession>,
    stopped: bool,
    events: Arc<EventLog>,
}

fn blocked_doc(pairs: &[(usize, String)]) -> Value {
    Value::Array(pairs.iter().map(|(r, s)| json!({"replica": r, "slot": s})).collect())
}

impl Actor {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        while let Ok(cmd) = rx.recv() {
            match cmd {
                Command::Control { verb, expect_barrier, reply } => {
                    let _ = reply.send(self.control(verb, expect_barrier));
                }
                Command::Human { replica, slot, action, reply } => {
                    let _ = reply.send(self.human(replica, &slot, action));
                }
                Command::Frames { barrier, rgb, reply } => {
                    let _ = reply.send(self.frames(barrier, rgb));
                }
                Command::Status { reply } => {
                    let _ = reply.send(Ok(self.status()));
                }
            }
        }
        if let Some(s) = &mut self.session {
            if !self.stopped {
                let _ = s.stop(Duration::from_secs(2));
            }
        }
    }

    fn status_name(&self) -> &'static str {
        match &self.session {
            None if self.stopped => "stopped",
            None => "created",
            Some(s) => match s.status() {
                SessionStatus::Ready if !s.blocked_slots().is_empty() => "blocked",
                other => other.name(),
            },
        }
    }

    fn status(&self) -> Value {
        let mut doc = json!({
            "session_id": self.id,
            "task": self.task,
            "seed": self.seed,
            "status": self.status_name(),
            "replica_count": self.configs.len(),
        });
        if let Some(s) = &self.session {
            doc["barrier"] = json!(s.barrier());
            doc["blocked"] = blocked_doc(&s.blocked_slots());
            doc["replicas"] = serde_json::to_value(s.views()).expect("views serialize");
            if let SessionStatus::Failed { reason } = s.status() {
                doc["reason"] = json!(reason);
            }
        }
        doc
    }

    fn announce(&self) {
        self.events.publish("status_changed", self.status());
    }

    fn control(&mut self, verb: Verb, expect_barrier: Option<u64>) -> Result<Value, ApiError> {
        if self.stopped {
            return Err(ApiError::conflict("conflict", "session is stopped"));
        }
        if verb == Verb::Start {
            if self.session.is_some() {
                return Err(ApiError::conflict("conflict", "session already started"));
            }
            match open_manual_session(&self.id, &self.configs, &self.task, self.seed, &self.opts) {
                Ok(s) => self.session = Some(s),
                Err(e) => {
                    self.stopped = true;
                    self.events.publish(
                        "status_changed",
                        json!({"session_id": self.id, "status": "failed", "reason": e.to_string()}),
                    );
                    self.events.close();
                    return Err(session_error(e));
                }
            }
            self.announce();
            return Ok(self.status());
        }
        let Some(s) = self.session.as_mut() else {
            if verb == Verb::Stop {
                self.stopped = true;
                self.announce();
                self.events.close();
                return Ok(self.status());
            }
            return Err(ApiError::conflict("conflict", "session is not started"));
        };
        if let Some(b) = expect_barrier {
            if b != s.barrier() {
                return Err(ApiError::conflict("conflict", format!("session is at barrier {}, not {b}", s.barrier())));
            }
        }
        match verb {
            Verb::Start => unreachable!(),
            Verb::Step => {
                let out = match s.step_session() {
                    Ok(out) => out,
                    Err(e @ SessionError::Failed { .. }) => {
                        let err = session_error(e);
                        self.announce();
                        return Err(err);
                    }
                    Err(e) => return Err(session_error(e)),
                };
                for r in &out.records {
                    let doc = serde_json::to_value(r).expect("records serialize");
                    if let TelemetryRecord::Episode(_) = r {
                        self.events.publish("episode_finished", doc.clone());
                    }
                    self.events.publish("telemetry_appended", doc);
                }
                let replicas: Vec<Value> = out
                    .replicas
                    .iter()
                    .map(|v| {
                        json!({
                            "replica": v.replica,
                            "operator_id": v.operator_id,
                            "episode_index": v.episode_index,
                            "step_index": v.step_index,
                            "scores": v.scores,
                            "badges": v.badges,
                            "render_ref": format!("/api/v1/sessions/{}/frames?barrier={}&replica={}", self.id, out.barrier, v.replica),
                        })
                    })
                    .collect();
                let blocked = blocked_doc(&s.blocked_slots());
                self.events.publish(
                    "barrier_completed",
                    json!({"barrier": out.barrier, "replicas": replicas, "blocked": blocked}),
                );
            }
            Verb::Pause => {
                s.pause().map_err(session_error)?;
                self.announce();
            }
            Verb::Resume => {
                s.resume().map_err(session_error)?;
                self.announce();
            }
            Verb::Stop => {
                s.stop(Duration::from_secs(2)).map_err(session_error)?;
                self.stopped = true;
                self.announce();
                self.events.close();
            }
        }
        Ok(self.status())
    }

    fn human(&mut self, replica: usize, slot: &str, action: u32) -> Result<Value, ApiError> {
        let Some(s) = self.session.as_mut() else {
            return Err(ApiError::conflict("conflict", "session is not started"));
        };
        if replica >= s.replica_count() {
            return Err(ApiError::bad_request("invalid_replica", format!("no replica {replica}")));
        }
        let replaced = s.submit_human(replica, slot, action).map_err(session_error)?;
        Ok(json!({
            "ack": true,
            "session_id": self.id,
            "replica": replica,
            "slot": slot,
            "action": action,
            "replaced": replaced,
            "barrier": s.barrier(),
        }))
    }

    fn frames(&self, barrier: Option<u64>, rgb: bool) -> Result<Value, ApiError> {
        let Some(s) = &self.session else {
            return Err(ApiError::conflict("conflict", "session is not started"));
        };
        if let Some(b) = barrier {
            if b > s.barrier() {
                return Err(ApiError::not_found(format!("barrier {b} is in the future (current {})", s.barrier())));
            }
        }
        let set = s
            .frames(barrier)
            .ok_or_else(|| ApiError::not_found(format!("barrier {} is no longer retained", barrier.unwrap_or(0))))?;
        let replicas: Vec<Value> = set
            .replicas
            .iter()
            .map(|f| {
                let mut doc = json!({
                    "replica": f.replica,
                    "operator_id": f.operator_id,
                    "episode_index": f.episode_index,
                    "step_index": f.step_index,
                    "badges": f.badges,
                    "ascii": f.ascii(),
                });
                if rgb {
                    doc["rgb"] = serde_json::to_value(render_rgb(&f.state)).expect("image serializes");
                }
                doc
            })
            .collect();
        Ok(json!({"session_id": self.id, "barrier": set.barrier, "replicas": replicas}))
    }
}

fn session_error(e: SessionError) -> ApiError {
    match e {
        SessionError::Blocked { slots } => ApiError::conflict("blocked", e_text(&slots))
            .with("blocked", blocked_doc(&slots))
            .with("status", json!("blocked")),
        SessionError::Conflict { status } => {
            ApiError::conflict("conflict", format!("session is {status}")).with("status", json!(status))
        }
        SessionError::Human { source: OperatorError::NotHuman(slot), .. } => {
            ApiError::bad_request("not_human", format!("slot `{slot}` is not bound to a human"))
        }
        SessionError::Human { source: OperatorError::ActionOutOfRange { slot, action }, .. } => ApiError::bad_request(
            "action_out_of_range",
            format!("action {action} is outside the action space of `{slot}`"),
        ),
        SessionError::Human { source: OperatorError::UnknownSlot(slot), .. } => {
            ApiError::bad_request("unknown_slot", format!("unknown slot `{slot}`"))
        }
        SessionError::Config { replica, source } => ApiError::validation(
            source.errors.iter().map(|f| (format!("operators[{replica}].{}", f.path), f.message.clone())).collect(),
        ),
        SessionError::Precondition(m) => ApiError::bad_request("precondition", m),
        SessionError::Failed { .. } => ApiError::conflict("failed", e.to_string()).with("status", json!("failed")),
        other => ApiError::internal(other.to_string()),
    }
}

fn e_text(slots: &[(usize, String)]) -> String {
    format!(
        "waiting for human actions: {}",
        slots.iter().map(|(r, s)| format!("replica {r} slot {s}")).collect::<Vec<_>>().join(", ")
    )
}
