//! Append-only run logs.
//!
//! `steps.jsonl` and `episodes.jsonl` hold one canonical record per line.
//! Each log has a sidecar index of 24-byte little-endian entries
//! `(episode, step, offset)`, one per distinct key in append order, so a
//! lookup is a binary search over fixed-width entries.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use mosaic_protocol::{canonical, Reward};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::records::{ingest_line, EpisodeRecord, StepRecord, TelemetryError, TelemetryRecord};

pub const STEPS_FILE: &str = "steps.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const STEPS_INDEX: &str = "steps.idx";
pub const EPISODES_INDEX: &str = "episodes.idx";
pub const DEAD_LETTER_FILE: &str = "telemetry.deadletter";
pub const MANIFEST_FILE: &str = "manifest";
pub const RESULT_FILE: &str = "result";
pub const CONFIG_FILE: &str = "config";
pub const INDEX_ENTRY: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Steps,
    Episodes,
}

impl Stream {
    pub fn parse(s: &str) -> Option<Stream> {
        match s {
            "steps" => Some(Stream::Steps),
            "episodes" => Some(Stream::Episodes),
            _ => None,
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            Stream::Steps => STEPS_FILE,
            Stream::Episodes => EPISODES_FILE,
        }
    }

    fn index(self) -> &'static str {
        match self {
            Stream::Steps => STEPS_INDEX,
            Stream::Episodes => EPISODES_INDEX,
        }
    }
}

/// What [`heal`] had to repair when a log was opened.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HealReport {
    pub truncated_bytes: u64,
    pub index_rebuilt: bool,
}

fn entry(episode: u64, step: u64, offset: u64) -> [u8; INDEX_ENTRY] {
    let mut e = [0u8; INDEX_ENTRY];
    e[..8].copy_from_slice(&episode.to_le_bytes());
    e[8..16].copy_from_slice(&step.to_le_bytes());
    e[16..].copy_from_slice(&offset.to_le_bytes());
    e
}

fn parse_entry(e: &[u8]) -> (u64, u64, u64) {
    let word = |i: usize| u64::from_le_bytes(e[i..i + 8].try_into().expect("8-byte slice"));
    (word(0), word(8), word(16))
}

/// `(episode, step)` of a record line, without full validation.
fn line_key(line: &[u8]) -> Option<(u64, u64)> {
    let v: Value = serde_json::from_slice(line).ok()?;
    let episode = v.get("episode_index")?.as_u64()?;
    let step = v.get("step_index").and_then(Value::as_u64).unwrap_or(0);
    Some((episode, step))
}

/// Drops a partial tail line, then makes the index agree with the log:
/// entries past the end are cut, missing entries for the tail are appended,
/// and an index that fails its checks is rebuilt from scratch.
pub fn heal(log: &Path, index: &Path) -> std::io::Result<HealReport> {
    let mut report = HealReport::default();
    let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(log)?;
    let len = file.metadata()?.len();
    let keep = {
        let mut back = len;
        let mut buf = [0u8; 4096];
        loop {
            if back == 0 {
                break 0;
            }
            let chunk = back.min(buf.len() as u64);
            file.seek(SeekFrom::Start(back - chunk))?;
            file.read_exact(&mut buf[..chunk as usize])?;
            if let Some(pos) = buf[..chunk as usize].iter().rposition(|b| *b == b'\n') {
                break back - chunk + pos as u64 + 1;
            }
            back -= chunk;
        }
    };
    if keep < len {
        file.set_len(keep)?;
        file.sync_all()?;
        report.truncated_bytes = len - keep;
    }

    let raw = fs::read(index).unwrap_or_default();
    let mut entries: Vec<(u64, u64, u64)> = raw.chunks_exact(INDEX_ENTRY).map(parse_entry).collect();
    let mut sound = raw.len().is_multiple_of(INDEX_ENTRY);
    entries.retain(|e| e.2 < keep);
    sound &= entries.windows(2).all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1) && w[0].2 < w[1].2);
    if sound {
        // A crash only ever damages the tail, so the newest entry is the one
        // worth reading back.
        if let Some(&(episode, step, offset)) = entries.last() {
            let at_line_start = offset == 0 || {
                let mut prev = [0u8; 1];
                file.seek(SeekFrom::Start(offset - 1))?;
                file.read_exact(&mut prev)?;
                prev[0] == b'\n'
            };
            file.seek(SeekFrom::Start(offset))?;
            let mut line = Vec::new();
            BufReader::new(&mut file).read_until(b'\n', &mut line)?;
            sound = at_line_start && line_key(&line) == Some((episode, step));
        }
    }
    if !sound {
        entries.clear();
        report.index_rebuilt = true;
    }
    let scan_from = entries.last().map_or(0, |e| e.2);
    file.seek(SeekFrom::Start(scan_from))?;
    let mut reader = BufReader::new(&mut file);
    let mut offset = scan_from;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if let Some(key) = line_key(&line) {
            if entries.last().is_none_or(|l| (l.0, l.1) < key) {
                entries.push((key.0, key.1, offset));
            }
        }
        offset += n as u64;
    }
    let bytes: Vec<u8> = entries.iter().flat_map(|e| entry(e.0, e.1, e.2)).collect();
    if bytes != raw {
        fs::write(index, &bytes)?;
    }
    Ok(report)
}

struct Log {
    out: BufWriter<File>,
    index: BufWriter<File>,
    len: u64,
    last_key: Option<(u64, u64)>,
}

impl Log {
    fn open(dir: &Path, stream: Stream) -> Result<(Log, HealReport), TelemetryError> {
        let path = dir.join(stream.file());
        let index_path = dir.join(stream.index());
        let report = heal(&path, &index_path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        let len = file.metadata()?.len();
        let raw = fs::read(&index_path).unwrap_or_default();
        let last_key = raw.chunks_exact(INDEX_ENTRY).last().map(|e| {
            let (ep, st, _) = parse_entry(e);
            (ep, st)
        });
        let index = OpenOptions::new().append(true).create(true).open(&index_path)?;
        Ok((Log { out: BufWriter::new(file), index: BufWriter::new(index), len, last_key }, report))
    }

    fn append(&mut self, key: (u64, u64), line: &str) -> Result<u64, TelemetryError> {
        let at = self.len;
        self.out.write_all(line.as_bytes())?;
        self.len += line.len() as u64;
        if self.last_key.is_none_or(|k| k < key) {
            self.index.write_all(&entry(key.0, key.1, at))?;
            self.last_key = Some(key);
        }
        Ok(at)
    }

    fn flush(&mut self) -> Result<(), TelemetryError> {
        self.out.flush()?;
        self.index.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct StreamId {
    session_id: String,
    replica: Option<u32>,
}

#[derive(Debug, Default)]
struct Tally {
    totals: BTreeMap<String, Reward>,
    max_step: Option<u64>,
}

/// Position of an appended record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub stream: Stream,
    pub offset: u64,
}

/// Writer for one run directory. Records must arrive in
/// `(episode, step, slot)` order per session and replica.
pub struct RunStore {
    dir: PathBuf,
    run_id: String,
    steps: Log,
    episodes: Log,
    dead: Option<BufWriter<File>>,
    last: HashMap<StreamId, (u64, u64, String)>,
    tallies: HashMap<(Option<u32>, u64), Tally>,
    pub heal: (HealReport, HealReport),
}

impl RunStore {
    /// Opens (healing) or creates the logs under `dir`.
    pub fn open(dir: impl Into<PathBuf>, run_id: &str) -> Result<RunStore, TelemetryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let (steps, h1) = Log::open(&dir, Stream::Steps)?;
        let (episodes, h2) = Log::open(&dir, Stream::Episodes)?;
        Ok(RunStore {
            dir,
            run_id: run_id.to_string(),
            steps,
            episodes,
            dead: None,
            last: HashMap::new(),
            tallies: HashMap::new(),
            heal: (h1, h2),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn append_step(&mut self, r: &StepRecord) -> Result<Position, TelemetryError> {
        if r.run_id != self.run_id {
            return Err(TelemetryError::RunMismatch { expected: self.run_id.clone(), found: r.run_id.clone() });
        }
        let id = StreamId { session_id: r.session_id.clone(), replica: r.replica };
        let key = (r.episode_index, r.step_index, r.slot.clone());
        if let Some(prev) = self.last.get(&id) {
            let label = format!("{:?}", r.key());
            if *prev == key {
                return Err(TelemetryError::Duplicate(label));
            }
            if *prev > key {
                return Err(TelemetryError::OutOfOrder(label));
            }
        }
        let line = TelemetryRecord::Step(r.clone()).to_line();
        let offset = self.steps.append((r.episode_index, r.step_index), &line)?;
        let tally = self.tallies.entry((r.replica, r.episode_index)).or_default();
        *tally.totals.entry(r.slot.clone()).or_insert(Reward::ZERO) += r.reward;
        tally.max_step = Some(tally.max_step.map_or(r.step_index, |m| m.max(r.step_index)));
        self.last.insert(id, key);
        Ok(Position { stream: Stream::Steps, offset })
    }

    /// Appends an episode record after reconciling it with the step records
    /// this store saw for that episode.
    pub fn append_episode(&mut self, r: &EpisodeRecord) -> Result<Position, TelemetryError> {
        if r.run_id != self.run_id {
            return Err(TelemetryError::RunMismatch { expected: self.run_id.clone(), found: r.run_id.clone() });
        }
        if let Some(t) = self.tallies.remove(&(r.replica, r.episode_index)) {
            let expected_len = t.max_step.map_or(0, |m| m + 1);
            if expected_len != r.episode_length {
                return Err(TelemetryError::Reconcile {
                    episode: r.episode_index,
                    detail: format!("length {} but steps reach {}", r.episode_length, expected_len),
                });
            }
            for (slot, total) in &r.totals {
                let summed = t.totals.get(slot).copied().unwrap_or(Reward::ZERO);
                if summed != *total {
                    return Err(TelemetryError::Reconcile {
                        episode: r.episode_index,
                        detail: format!("{slot}: record says {total}, steps sum to {summed}"),
                    });
                }
            }
        }
        let line = TelemetryRecord::Episode(r.clone()).to_line();
        let offset = self.episodes.append((r.episode_index, 0), &line)?;
        Ok(Position { stream: Stream::Episodes, offset })
    }

    pub fn append(&mut self, record: &TelemetryRecord) -> Result<Position, TelemetryError> {
        match record {
            TelemetryRecord::Step(s) => self.append_step(s),
            TelemetryRecord::Episode(e) => self.append_episode(e),
        }
    }

    /// The proxy path: validate a raw line and persist it, or quarantine it
    /// with the reason. Nothing is dropped silently.
    pub fn ingest(&mut self, raw: &str) -> Result<Position, TelemetryError> {
        let result = ingest_line(raw, &self.run_id).and_then(|r| self.append(&r));
        if let Err(e) = &result {
            self.quarantine(raw, e)?;
        }
        result
    }

    fn quarantine(&mut self, raw: &str, err: &TelemetryError) -> Result<(), TelemetryError> {
        if self.dead.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(self.dir.join(DEAD_LETTER_FILE))?;
            self.dead = Some(BufWriter::new(f));
        }
        let doc = serde_json::json!({"class": err.class(), "reason": err.to_string(), "line": raw});
        let w = self.dead.as_mut().expect("opened above");
        w.write_all(canonical::to_line(&doc).as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TelemetryError> {
        self.steps.flush()?;
        self.episodes.flush()?;
        if let Some(d) = &mut self.dead {
            d.flush()?;
        }
        Ok(())
    }

    /// Flushes and syncs both logs to disk.
    pub fn finalize(&mut self) -> Result<(), TelemetryError> {
        self.flush()?;
        self.steps.out.get_ref().sync_all()?;
        self.episodes.out.get_ref().sync_all()?;
        Ok(())
    }
}

impl Drop for RunStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads every complete record of one log, in order.
pub fn read_records(dir: &Path, stream: Stream) -> Result<Vec<TelemetryRecord>, TelemetryError> {
    let mut out = Vec::new();
    for_each_record(dir, stream, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Streams complete records of one log through `f` without loading the
/// file. A partial tail line is ignored.
pub fn for_each_record(
    dir: &Path,
    stream: Stream,
    mut f: impl FnMut(TelemetryRecord) -> Result<(), TelemetryError>,
) -> Result<(), TelemetryError> {
    let path = dir.join(stream.file());
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            return Ok(());
        }
        let record: TelemetryRecord =
            serde_json::from_str(&line).map_err(|e| TelemetryError::Malformed(e.to_string()))?;
        f(record)?;
    }
}

/// Canonical bytes of one log: every complete line, in order.
pub fn export_jsonl(dir: &Path, stream: Stream) -> Result<Vec<u8>, TelemetryError> {
    if !dir.is_dir() {
        return Err(TelemetryError::UnknownRun(dir.display().to_string()));
    }
    let mut bytes = match fs::read(dir.join(stream.file())) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    bytes.truncate(keep);
    Ok(bytes)
}

/// Result of an indexed lookup, with the number of seeks it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookup {
    pub records: Vec<StepRecord>,
    pub seeks: u32,
}

/// Finds every step record with `(episode, step)` by binary search over the
/// index, then one seek into the log.
pub fn lookup_step(dir: &Path, episode: u64, step: u64) -> Result<Lookup, TelemetryError> {
    let mut index = File::open(dir.join(STEPS_INDEX))?;
    let n = index.metadata()?.len() / INDEX_ENTRY as u64;
    let mut seeks = 0;
    let (mut lo, mut hi) = (0u64, n);
    let mut found = None;
    let mut buf = [0u8; INDEX_ENTRY];
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        index.seek(SeekFrom::Start(mid * INDEX_ENTRY as u64))?;
        index.read_exact(&mut buf)?;
        seeks += 1;
        let (ep, st, off) = parse_entry(&buf);
        match (ep, st).cmp(&(episode, step)) {
            std::cmp::Ordering::Less => lo = mid + 1,
            std::cmp::Ordering::Greater => hi = mid,
            std::cmp::Ordering::Equal => {
                found = Some(off);
                break;
            }
        }
    }
    let mut records = Vec::new();
    if let Some(off) = found {
        let mut log = File::open(dir.join(STEPS_FILE))?;
        log.seek(SeekFrom::Start(off))?;
        seeks += 1;
        let mut reader = BufReader::new(log);
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<TelemetryRecord>(&line) {
                Ok(TelemetryRecord::Step(r)) if (r.episode_index, r.step_index) == (episode, step) => records.push(r),
                _ => break,
            }
        }
    }
    Ok(Lookup { records, seeks })
}

/// Run-level bookkeeping written next to the logs. Timestamps live only
/// here so the logs stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub seed: u64,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    pub software_version: String,
    pub workers: BTreeMap<String, Value>,
    pub status: String,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn write_document<T: Serialize>(path: &Path, doc: &T) -> Result<(), TelemetryError> {
    let line = canonical::to_line_of(doc).map_err(|e| TelemetryError::Io(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, line)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TelemetryError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TelemetryError::Malformed(e.to_string()))
}
