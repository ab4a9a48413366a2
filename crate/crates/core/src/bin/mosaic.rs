//! `mosaic`: validate configs, run evaluations locally or through the
//! daemon, generate matrices, replay runs, check workers, serve the API.
//!
//! stdout carries exactly one canonical JSON document per invocation
//! (`replay` prints frames instead). Diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use mosaic_core::conformance::{run_conformance, ConformanceOptions};
use mosaic_core::control_api::{self, default_runs_root, Daemon, DaemonConfig};
use mosaic_core::evaluation::{replay_ascii, run_script, ReplayError, RunOptions, RunStatus, StepMode};
use mosaic_core::operator::matrix::{build_matrix, Family, MatrixSpec};
use mosaic_core::operator::{default_worker_bin, ConfigError, OperatorError, RunConfig};
use mosaic_protocol::canonical;
use serde_json::{json, Value};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_UNREACHABLE: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "mosaic", version, about = "Mixed-paradigm multi-agent evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Parallel,
    Aec,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Adversarial,
    Cooperative,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReplayMode {
    Ascii,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a run config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a scripted evaluation, in-process or through a daemon.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        episodes: u64,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeArg,
        /// Run in this process (the default unless --daemon is given).
        #[arg(long, conflicts_with = "daemon")]
        local: bool,
        /// Base URL of a running daemon, e.g. http://127.0.0.1:7461
        #[arg(long)]
        daemon: Option<String>,
        /// Runs root for local runs. Defaults to MOSAIC_HOME or ./runs.
        #[arg(long)]
        runs_root: Option<PathBuf>,
    },
    /// Write the team-composition matrix as one config file per row.
    Matrix {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-simulate a finished run from its logs.
    Replay {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "ascii")]
        mode: ReplayMode,
    },
    /// Run the protocol conformance suite against a worker executable.
    Conformance {
        #[arg(long)]
        worker: PathBuf,
        /// Arguments passed to the worker.
        #[arg(last = true)]
        args: Vec<String>,
    },
    /// Serve the control API.
    Serve {
        #[arg(long, default_value_t = control_api::default_addr())]
        bind: std::net::SocketAddr,
        #[arg(long)]
        runs_root: Option<PathBuf>,
    },
}

/// Result document plus exit code.
struct Outcome {
    code: u8,
    doc: Value,
}

impl Outcome {
    fn ok(doc: Value) -> Self {
        Outcome { code: 0, doc }
    }

    fn err(code: u8, error: &str, message: impl Into<String>) -> Self {
        Outcome { code, doc: json!({"ok": false, "error": error, "message": message.into()}) }
    }
}

fn config_errors(e: &ConfigError) -> Outcome {
    let errors: Vec<Value> = e.errors.iter().map(|f| json!({"path": f.path, "message": f.message})).collect();
    Outcome {
        code: EXIT_VALIDATION,
        doc: json!({"ok": false, "error": "validation", "message": e.to_string(), "errors": errors}),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Outcome> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Outcome::err(EXIT_IO, "io", format!("cannot read `{}`: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| config_errors(&e))
}

fn validate(path: &Path) -> Outcome {
    match load_config(path) {
        Ok(c) => Outcome::ok(json!({
            "ok": true,
            "operator_id": c.operator_id,
            "task": c.task,
            "digest": c.digest(),
            "slots": c.player_workers.keys().collect::<Vec<_>>(),
        })),
        Err(o) => o,
    }
}

struct RunArgs {
    config: PathBuf,
    seed: u64,
    episodes: u64,
    max_steps: Option<u64>,
    mode: ModeArg,
    daemon: Option<String>,
    runs_root: Option<PathBuf>,
}

fn status_code(status: &str) -> u8 {
    if status == "completed" {
        0
    } else {
        EXIT_FAILURE
    }
}

fn run_local(config: RunConfig, a: &RunArgs) -> Outcome {
    let root = a.runs_root.clone().unwrap_or_else(default_runs_root);
    let mut opts = RunOptions::new(root, a.seed, a.episodes);
    opts.max_steps = a.max_steps;
    opts.mode = match a.mode {
        ModeArg::Parallel => StepMode::Parallel,
        ModeArg::Aec => StepMode::Aec,
    };
    opts.bind.worker_bin = default_worker_bin();
    match run_script(&config, &opts, &mut |_| {}) {
        Ok(r) => {
            let code = if r.status == RunStatus::Completed { 0 } else { EXIT_FAILURE };
            eprintln!("run {} {:?} after {} episodes", r.run_id, r.status, r.episodes);
            Outcome { code, doc: serde_json::to_value(&r).expect("result serializes") }
        }
        Err(OperatorError::Config(e)) => config_errors(&e),
        Err(e) => Outcome::err(EXIT_FAILURE, "run_failed", e.to_string()),
    }
}

fn run_remote(config: RunConfig, a: &RunArgs, base: &str) -> Outcome {
    if matches!(a.mode, ModeArg::Aec) {
        return Outcome::err(EXIT_USAGE, "usage", "--mode aec is only available with --local");
    }
    let base = base.trim_end_matches('/');
    let client = match reqwest::blocking::Client::builder().timeout(Duration::from_secs(30)).build() {
        Ok(c) => c,
        Err(e) => return Outcome::err(EXIT_FAILURE, "client", e.to_string()),
    };
    let unreachable = |e: reqwest::Error| Outcome::err(EXIT_UNREACHABLE, "unreachable", format!("{base}: {e}"));
    let body = canonical::to_string(&config.to_value());
    let resp =
        match client.post(format!("{base}/api/v1/runs")).header("content-type", "application/json").body(body).send() {
            Ok(r) => r,
            Err(e) => return unreachable(e),
        };
    let status = resp.status();
    let doc: Value = resp.json().unwrap_or(Value::Null);
    if !status.is_success() {
        let code = if status.as_u16() == 400 { EXIT_VALIDATION } else { EXIT_FAILURE };
        return Outcome { code, doc };
    }
    let Some(run_id) = doc["run_id"].as_str().map(str::to_string) else {
        return Outcome::err(EXIT_FAILURE, "protocol", "daemon response has no run_id");
    };
    match client.post(format!("{base}/api/v1/runs/{run_id}/start")).send() {
        Ok(r) if r.status().is_success() => {}
        Ok(r) => return Outcome { code: EXIT_FAILURE, doc: r.json().unwrap_or(Value::Null) },
        Err(e) => return unreachable(e),
    }
    loop {
        let doc: Value = match client.get(format!("{base}/api/v1/runs/{run_id}")).send().and_then(|r| r.json()) {
            Ok(d) => d,
            Err(e) => return unreachable(e),
        };
        let state = doc["status"].as_str().unwrap_or_default().to_string();
        if matches!(state.as_str(), "completed" | "stopped" | "failed") {
            return Outcome { code: status_code(&state), doc };
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn run(a: RunArgs) -> Outcome {
    let mut config = match load_config(&a.config) {
        Ok(c) => c,
        Err(o) => return o,
    };
    config.seed = Some(a.seed);
    config.episodes = Some(a.episodes);
    config.max_steps = a.max_steps.or(config.max_steps);
    match a.daemon.clone() {
        Some(base) => run_remote(config, &a, &base),
        None => run_local(config, &a),
    }
}

fn matrix(family: FamilyArg, out: &Path) -> Outcome {
    let families: &[Family] = match family {
        FamilyArg::Adversarial => &[Family::Adversarial],
        FamilyArg::Cooperative => &[Family::Cooperative],
        FamilyArg::Both => &[Family::Adversarial, Family::Cooperative],
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return Outcome::err(EXIT_IO, "io", format!("cannot create `{}`: {e}", out.display()));
    }
    let mut files = Vec::new();
    for f in families {
        let configs = match build_matrix(&MatrixSpec::standard(*f)) {
            Ok(c) => c,
            Err(e) => return Outcome::err(EXIT_VALIDATION, "matrix", e.to_string()),
        };
        for c in configs {
            let path = out.join(format!("{}.config", c.operator_id));
            if let Err(e) = std::fs::write(&path, c.canonical_bytes()) {
                return Outcome::err(EXIT_IO, "io", format!("cannot write `{}`: {e}", path.display()));
            }
            files.push(path.display().to_string());
        }
    }
    Outcome::ok(json!({"ok": true, "files": files}))
}

fn serve(bind: std::net::SocketAddr, runs_root: Option<PathBuf>) -> Outcome {
    let mut cfg = DaemonConfig::default();
    if let Some(root) = runs_root {
        cfg.runs_root = root;
    }
    cfg.bind.worker_bin = default_worker_bin();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return Outcome::err(EXIT_FAILURE, "runtime", e.to_string()),
    };
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        control_api::serve(listener, Daemon::new(cfg)).await
    });
    match result {
        Ok(()) => Outcome::ok(json!({"ok": true})),
        Err(e) => Outcome::err(EXIT_IO, "io", e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, seed, episodes, max_steps, mode, local: _, daemon, runs_root } => {
            run(RunArgs { config, seed, episodes, max_steps, mode, daemon, runs_root })
        }
        Command::Matrix { family, out } => matrix(family, &out),
        Command::Replay { run, mode: ReplayMode::Ascii } => match replay_ascii(&run) {
            Ok(r) => {
                print!("{}", r.text);
                eprintln!("replayed {} episodes, {} frames", r.episodes, r.frames);
                return ExitCode::SUCCESS;
            }
            Err(e @ (ReplayError::NotARun(_) | ReplayError::Io(_))) => {
                Outcome::err(EXIT_IO, "not_found", e.to_string())
            }
            Err(e) => Outcome::err(EXIT_FAILURE, "diverged", e.to_string()),
        },
        Command::Conformance { worker, args } => {
            let mut opts = ConformanceOptions::new(worker);
            opts.args = args;
            let report = run_conformance(&opts);
            for c in &report.checks {
                eprintln!(
                    "{} {}{}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    if c.mandatory { "" } else { " (advisory)" }
                );
            }
            let code = if report.passed { 0 } else { EXIT_FAILURE };
            Outcome { code, doc: serde_json::to_value(&report).expect("report serializes") }
        }
        Command::Serve { bind, runs_root } => serve(bind, runs_root),
    };
    if outcome.code != 0 {
        if let Some(m) = outcome.doc["message"].as_str() {
            eprintln!("error: {m}");
        }
    }
    println!("{}", canonical::to_string(&outcome.doc));
    ExitCode::from(outcome.code)
}
