use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]"];

/// Ids at or above this value are ordinary (non-special) tokens.
pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

/// Whitespace vocabulary with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens; out-of-vocabulary words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    /// `[CLS]` followed by the encoded text.
    pub fn encode_sample(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len() / 2 + 1);
        ids.push(CLS);
        ids.extend(self.encode(text));
        ids
    }

    /// Space-joined tokens; `[CLS]` and `[PAD]` are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS && i != PAD)
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(json)?;
        let mut id_to_token = vec![None; map.len()];
        for (token, id) in map {
            let slot = id_to_token
                .get_mut(id)
                .ok_or_else(|| Error::Data(format!("vocabulary id {id} is not dense")))?;
            if slot.replace(token).is_some() {
                return Err(Error::Data(format!("vocabulary id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Data("vocabulary ids are not dense".into())))
            .collect::<Result<_>>()?;
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Data(format!("special token {special} must have id {i}")));
            }
        }
        Ok(Self::from_tokens(id_to_token[NUM_SPECIALS..].to_vec()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Keeps the `max_vocab - 4` most frequent lowercased whitespace tokens,
/// ties broken lexicographically. Ids follow that ranking.
pub fn build_vocab<I, S>(lines: I, max_vocab: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_vocab < NUM_SPECIALS + 1 {
        return Err(Error::Config(format!(
            "max_vocab must be at least {}, got {max_vocab}",
            NUM_SPECIALS + 1
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - NUM_SPECIALS);
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().map(|(t, _)| t).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = build_vocab(["a b a"], 6).unwrap();
        assert_eq!(v.size(), 6);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(4));

        let line: String = (0..100).map(|i| format!("t{i:03} ")).collect();
        let v = build_vocab([line.as_str()], 10).unwrap();
        let kept: Vec<&str> = (4..10).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(kept, ["t000", "t001", "t002", "t003", "t004", "t005"]);
        assert_eq!(v.encode("t099"), vec![UNK]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(
            build_vocab(Vec::<&str>::new(), 10),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(build_vocab(["  "], 10), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab(["a"], 4), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let lines = ["the cat sat", "The dog sat down", "a cat"];
        let a = build_vocab(lines, 50).unwrap();
        let b = build_vocab(lines, 50).unwrap();
        assert_eq!(a, b);
        let back = Vocabulary::from_json(&a.to_json()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn raw_text_never_encodes_to_mask() {
        let v = build_vocab(["[mask] [MASK] [cls] x"], 20).unwrap();
        let ids = v.encode("[MASK] [mask] [CLS] [PAD] x");
        assert!(ids.iter().all(|&i| i != MASK && i != PAD && i != CLS));
    }
}
