//! Process-group plumbing (Unix only).

use std::fs;

pub fn signal_group(pgid: i32, signal: i32) -> bool {
    if pgid <= 1 {
        return false;
    }
    unsafe { libc::killpg(pgid, signal) == 0 }
}

pub fn signal_pid(pid: i32, signal: i32) -> bool {
    if pid <= 1 {
        return false;
    }
    unsafe { libc::kill(pid, signal) == 0 }
}

/// Live (non-zombie) members of a process group, from `/proc/*/stat`.
pub fn group_members(pgid: i32) -> Vec<i32> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else { return out };
    for entry in entries.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<i32>().ok()) else {
            continue;
        };
        let Ok(stat) = fs::read_to_string(entry.path().join("stat")) else { continue };
        // comm may contain spaces and parens; fields resume after the last ')'
        let Some(close) = stat.rfind(')') else { continue };
        let fields: Vec<&str> = stat[close + 1..].split_whitespace().collect();
        if fields.len() < 3 || fields[0] == "Z" || fields[0] == "X" {
            continue;
        }
        if fields[2].parse::<i32>().ok() == Some(pgid) {
            out.push(pid);
        }
    }
    out.sort_unstable();
    out
}
