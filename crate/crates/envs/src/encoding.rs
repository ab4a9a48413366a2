//! Canonical binary state layout. See `docs/state_encoding.md`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::state::{Dir, EnvState, Task};
use crate::EnvError;

pub const STATE_MAGIC: &[u8; 4] = b"MSST";
pub const STATE_VERSION: u8 = 1;

pub fn encode_state(s: &EnvState) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(STATE_MAGIC);
    out.push(STATE_VERSION);
    let id = s.task.id().as_bytes();
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.push(s.width);
    out.push(s.height);
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.extend_from_slice(&s.episode_index.to_le_bytes());
    out.extend_from_slice(&s.step_index.to_le_bytes());
    out.push(s.turn);
    out.push(s.terminated as u8 | (s.truncated as u8) << 1);
    out.push(s.positions.len() as u8);
    for i in 0..s.positions.len() {
        out.push(s.positions[i].0);
        out.push(s.positions[i].1);
        out.push(s.orientations[i].code());
        out.push(s.immune[i] as u8);
    }
    out.push(s.scores.len() as u8);
    for score in &s.scores {
        out.extend_from_slice(&score.to_le_bytes());
    }
    out.extend_from_slice(&s.rng.get_seed());
    out.extend_from_slice(&s.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| EnvError::Decode(format!("truncated at byte {}", self.at)))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, EnvError> {
        Ok(self.take(1)?[0])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], EnvError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn bad(what: impl Into<String>) -> EnvError {
    EnvError::Decode(what.into())
}

pub fn decode_state(bytes: &[u8]) -> Result<EnvState, EnvError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != STATE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u8()?;
    if version != STATE_VERSION {
        return Err(bad(format!("unsupported state version {version}")));
    }
    let len = r.u8()? as usize;
    let id = std::str::from_utf8(r.take(len)?).map_err(|_| bad("task id is not UTF-8"))?;
    let task = Task::from_id(id).ok_or_else(|| EnvError::UnknownTask(id.to_string()))?;
    let mut s = EnvState::blank(task, 0);
    let (width, height) = (r.u8()?, r.u8()?);
    if (width, height) != task.dims() {
        return Err(bad("dimensions do not match task"));
    }
    s.seed = u64::from_le_bytes(r.array()?);
    s.episode_index = u32::from_le_bytes(r.array()?);
    s.step_index = u32::from_le_bytes(r.array()?);
    s.turn = r.u8()?;
    let flags = r.u8()?;
    if flags > 3 {
        return Err(bad("unknown flag bits"));
    }
    s.terminated = flags & 1 != 0;
    s.truncated = flags & 2 != 0;
    let n = r.u8()? as usize;
    if n != task.slots().len() || s.turn as usize >= n {
        return Err(bad("slot count or turn does not match task"));
    }
    for i in 0..n {
        let (x, y) = (r.u8()?, r.u8()?);
        if x >= width || y >= height {
            return Err(bad(format!("slot {i} out of bounds")));
        }
        s.positions[i] = (x, y);
        s.orientations[i] = Dir::from_code(r.u8()?).ok_or_else(|| bad("bad orientation"))?;
        s.immune[i] = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(bad("bad immune flag")),
        };
    }
    let mut cells = s.positions.clone();
    cells.sort();
    cells.dedup();
    if cells.len() != n {
        return Err(bad("two slots share a cell"));
    }
    let teams = r.u8()? as usize;
    if teams != task.teams().len() {
        return Err(bad("team count does not match task"));
    }
    for t in 0..teams {
        s.scores[t] = i32::from_le_bytes(r.array()?);
    }
    let seed: [u8; 32] = r.array()?;
    let stream = u64::from_le_bytes(r.array()?);
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    s.rng = rng;
    if r.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(s)
}
