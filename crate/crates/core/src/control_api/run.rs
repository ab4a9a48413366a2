//! Script-mode runs owned by the daemon.

use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use super::events::EventLog;
use super::{ApiError, DaemonConfig, Verb};
use crate::evaluation::{run_script, PauseGate, RunEvent, RunOptions, RunResult, RunStatus};
use crate::operator::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RunState {
    Created,
    Running,
    Paused,
    Stopping,
    Completed,
    Stopped,
    Failed,
}

impl RunState {
    pub fn name(self) -> &'static str {
        match self {
            RunState::Created => "created",
            RunState::Running => "running",
            RunState::Paused => "paused",
            RunState::Stopping => "stopping",
            RunState::Completed => "completed",
            RunState::Stopped => "stopped",
            RunState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Completed | RunState::Stopped | RunState::Failed)
    }
}

struct Status {
    state: RunState,
    result: Option<RunResult>,
    error: Option<String>,
    episodes_done: u64,
}

pub(crate) struct RunEntry {
    pub run_id: String,
    pub config: RunConfig,
    pub opts: RunOptions,
    pub events: Arc<EventLog>,
    gate: Arc<PauseGate>,
    status: Mutex<Status>,
}

impl RunEntry {
    pub fn new(run_id: &str, config: RunConfig, cfg: &DaemonConfig) -> Arc<RunEntry> {
        let mut opts = RunOptions::from_config(&cfg.runs_root, &config);
        opts.bind = cfg.bind.clone();
        let gate = PauseGate::new();
        opts.gate = Some(gate.clone());
        let entry = Arc::new(RunEntry {
            run_id: run_id.to_string(),
            config,
            opts,
            events: EventLog::new(run_id),
            gate,
            status: Mutex::new(Status { state: RunState::Created, result: None, error: None, episodes_done: 0 }),
        });
        entry.announce();
        entry
    }

    pub fn state(&self) -> RunState {
        self.status.lock().expect("run lock").state
    }

    pub fn status_doc(&self) -> Value {
        let s = self.status.lock().expect("run lock");
        let mut doc = json!({
            "run_id": self.run_id,
            "operator_id": self.config.operator_id,
            "task": self.config.task,
            "seed": self.opts.seed,
            "episodes": self.opts.episodes,
            "episodes_done": s.episodes_done,
            "status": s.state.name(),
        });
        if let Some(r) = &s.result {
            doc["result"] = serde_json::to_value(r).expect("result serializes");
        }
        if let Some(e) = &s.error {
            doc["error"] = json!(e);
        }
        doc
    }

    fn announce(&self) {
        self.events.publish("status_changed", self.status_doc());
    }

    fn set(&self, state: RunState) {
        self.status.lock().expect("run lock").state = state;
        self.announce();
    }

    /// Applies `verb` if legal in the current state. Transitions are made
    /// under the status lock, so of two racing verbs only one can win.
    pub fn control(self: &Arc<Self>, verb: Verb) -> Result<Value, ApiError> {
        let mut s = self.status.lock().expect("run lock");
        let next = match (verb, s.state) {
            (Verb::Step, _) => {
                return Err(ApiError::conflict(
                    "conflict",
                    "step applies to manual sessions; script runs advance on their own",
                ))
            }
            (Verb::Start, RunState::Created) => RunState::Running,
            (Verb::Pause, RunState::Running) => RunState::Paused,
            (Verb::Resume, RunState::Paused) => RunState::Running,
            (Verb::Stop, RunState::Created) => RunState::Stopped,
            (Verb::Stop, RunState::Running | RunState::Paused) => RunState::Stopping,
            (_, state) => {
                return Err(ApiError::conflict("conflict", format!("cannot {} a {} run", verb.as_str(), state.name()))
                    .with("status", json!(state.name())))
            }
        };
        s.state = next;
        drop(s);
        match verb {
            Verb::Start => self.clone().launch(),
            Verb::Pause => self.gate.pause(),
            Verb::Resume => self.gate.resume(),
            Verb::Stop => self.gate.stop(),
            Verb::Step => unreachable!(),
        }
        self.announce();
        if next == RunState::Stopped {
            self.events.close();
        }
        Ok(self.status_doc())
    }

    fn launch(self: Arc<Self>) {
        std::thread::Builder::new()
            .name(format!("run-{}", self.run_id))
            .spawn(move || {
                let events = self.events.clone();
                let mut done = 0u64;
                let mut observer = |e: &RunEvent| {
                    if let RunEvent::Episode(ep) = e {
                        done += 1;
                        self.status.lock().expect("run lock").episodes_done = done;
                        let doc = serde_json::to_value(ep).expect("records serialize");
                        events.publish("episode_finished", doc.clone());
                        events.publish(
                            "telemetry_appended",
                            json!({"record": "episode", "episode_index": ep.episode_index}),
                        );
                    }
                };
                let outcome = run_script(&self.config, &self.opts, &mut observer);
                {
                    let mut s = self.status.lock().expect("run lock");
                    match outcome {
                        Ok(r) => {
                            s.state = match r.status {
                                RunStatus::Completed => RunState::Completed,
                                RunStatus::Stopped => RunState::Stopped,
                                RunStatus::Failed => RunState::Failed,
                            };
                            s.error = r.error.clone();
                            s.result = Some(r);
                        }
                        Err(e) => {
                            s.state = RunState::Failed;
                            s.error = Some(e.to_string());
                        }
                    }
                }
                self.announce();
                self.events.close();
            })
            .expect("spawn run thread");
    }

    /// Marks a run that never started as superseded.
    pub fn retire(&self) {
        if self.state() == RunState::Created {
            self.set(RunState::Stopped);
            self.events.close();
        }
    }
}
