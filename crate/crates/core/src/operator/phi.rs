//! φ: text to action index. Reference grammars are written out in
//! `docs/phi_grammar.md`.

use std::sync::OnceLock;

use mosaic_protocol::ActionSpace;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    StrictInteger,
    #[default]
    LabeledKeyword,
    JsonField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    Error,
    #[default]
    Noop,
    RandomLogged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ParsePolicy {
    #[serde(default)]
    pub grammar: Grammar,
    #[serde(default)]
    pub fallback: Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Parsed,
    FellBackNoop,
    FellBackRandom,
    Error,
}

impl ParseOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseOutcome::Parsed => "parsed",
            ParseOutcome::FellBackNoop => "fell_back_noop",
            ParseOutcome::FellBackRandom => "fell_back_random",
            ParseOutcome::Error => "error",
        }
    }

    pub fn is_fallback(self) -> bool {
        !matches!(self, ParseOutcome::Parsed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no action in text {text:?}")]
pub struct ParseError {
    pub text: String,
}

fn strict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*$").unwrap())
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)ACTION\s*:\s*([A-Za-z0-9_-]+)").unwrap())
}

fn token(space: &ActionSpace, tok: &str) -> Option<u32> {
    if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
        return tok.parse::<u32>().ok().filter(|a| space.contains(*a));
    }
    space.index_of(tok)
}

fn apply(text: &str, space: &ActionSpace, grammar: Grammar) -> Option<u32> {
    match grammar {
        Grammar::StrictInteger => {
            let cap = strict_re().captures(text)?;
            cap[1].parse::<u32>().ok().filter(|a| space.contains(*a))
        }
        Grammar::LabeledKeyword => {
            let last = keyword_re().captures_iter(text).last()?;
            token(space, &last[1])
        }
        Grammar::JsonField => {
            let start = text.find('{')?;
            let end = text.rfind('}')?;
            if end < start {
                return None;
            }
            let doc: Value = serde_json::from_str(&text[start..=end]).ok()?;
            match doc.get("action")? {
                Value::Number(n) => n.as_u64().and_then(|a| u32::try_from(a).ok()).filter(|a| space.contains(*a)),
                Value::String(s) => token(space, s.trim()),
                _ => None,
            }
        }
    }
}

/// Pure in `(text, space, policy, rng state)`. The rng is only drawn from
/// under `random_logged` when the text does not parse.
pub fn parse_action(
    text: &str,
    space: &ActionSpace,
    policy: &ParsePolicy,
    fallback_rng: &mut ChaCha8Rng,
) -> Result<(u32, ParseOutcome), ParseError> {
    if let Some(a) = apply(text, space, policy.grammar) {
        return Ok((a, ParseOutcome::Parsed));
    }
    match policy.fallback {
        Fallback::Error => Err(ParseError { text: text.to_string() }),
        Fallback::Noop => Ok((space.null_action, ParseOutcome::FellBackNoop)),
        Fallback::RandomLogged => Ok((fallback_rng.random_range(0..space.n), ParseOutcome::FellBackRandom)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn strict_integer() {
        let space = ActionSpace::new(7, 0).unwrap();
        let p = ParsePolicy { grammar: Grammar::StrictInteger, fallback: Fallback::Noop };
        assert_eq!(parse_action("3", &space, &p, &mut rng()).unwrap(), (3, ParseOutcome::Parsed));
        assert_eq!(parse_action("banana", &space, &p, &mut rng()).unwrap(), (0, ParseOutcome::FellBackNoop));
    }

    #[test]
    fn last_keyword_wins() {
        let space = ActionSpace::labeled(["left", "right", "forward"], 0).unwrap();
        let p = ParsePolicy::default();
        assert_eq!(parse_action("ACTION: left", &space, &p, &mut rng()).unwrap().0, 0);
        let text = "I think we should go north... ACTION: right then ACTION: forward";
        assert_eq!(parse_action(text, &space, &p, &mut rng()).unwrap(), (2, ParseOutcome::Parsed));
    }

    #[test]
    fn error_fallback_carries_text() {
        let space = ActionSpace::new(3, 0).unwrap();
        let p = ParsePolicy { grammar: Grammar::JsonField, fallback: Fallback::Error };
        assert_eq!(parse_action("nope", &space, &p, &mut rng()).unwrap_err().text, "nope");
    }
}
