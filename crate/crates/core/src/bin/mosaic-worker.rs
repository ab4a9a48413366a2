//! Built-in worker executable.

use std::io::{BufReader, Write};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::Parser;
use mosaic_core::policy::PolicyKind;
use mosaic_core::worker::{run, WorkerOptions, DEFAULT_HEARTBEAT_SECS};
use mosaic_protocol::WorkerKind;

#[derive(Parser, Debug)]
#[command(name = "mosaic-worker", about = "Built-in protocol worker")]
struct Args {
    /// random | noop | cycle | greedy | scripted_text | scripted_vision
    #[arg(long, default_value = "random")]
    policy: String,
    /// Override the advertised worker kind.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    max_image_history: Option<u32>,
    /// Do not advertise or accept `restore`.
    #[arg(long)]
    no_restore: bool,
    /// Test hook: ignore `stop` and SIGTERM.
    #[arg(long)]
    ignore_stop: bool,
    /// Test hook: never send `episode_end`.
    #[arg(long)]
    omit_episode_end: bool,
    /// Test hook: start a long-lived child in the same process group.
    #[arg(long)]
    spawn_sleeper: bool,
    /// Test hook: print a non-protocol first line.
    #[arg(long)]
    garbage_handshake: bool,
}

fn main() {
    let args = Args::parse();
    let Some(policy) = PolicyKind::parse(&args.policy) else {
        eprintln!("unknown policy `{}`", args.policy);
        std::process::exit(2);
    };
    let mut opts = WorkerOptions::new(policy);
    if let Some(kind) = args.kind.as_deref() {
        let Ok(kind) = serde_json::from_value::<WorkerKind>(serde_json::Value::String(kind.to_string())) else {
            eprintln!("unknown worker kind `{kind}`");
            std::process::exit(2);
        };
        opts.worker_kind = Some(kind);
    }
    if let Some(n) = args.max_image_history {
        opts.max_image_history = n;
    }
    opts.worker_id = std::env::var("MOSAIC_WORKER_ID").unwrap_or_else(|_| "worker".into());
    let secs = std::env::var("MOSAIC_HEARTBEAT_SECS")
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .unwrap_or(DEFAULT_HEARTBEAT_SECS);
    opts.heartbeat = Some(Duration::from_secs_f64(secs));
    opts.support_restore = !args.no_restore;
    opts.ignore_stop = args.ignore_stop;
    opts.omit_episode_end = args.omit_episode_end;
    opts.garbage_handshake = args.garbage_handshake;
    if args.ignore_stop {
        unsafe {
            libc::signal(libc::SIGTERM, libc::SIG_IGN);
        }
    }
    let _sleeper = args.spawn_sleeper.then(|| std::process::Command::new("sleep").arg("1000").spawn().ok()).flatten();
    let out: Box<dyn Write + Send> = Box::new(std::io::stdout());
    let code = run(opts, BufReader::new(std::io::stdin()), Arc::new(Mutex::new(out)));
    std::process::exit(code);
}
