use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{LarlError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SELECTION: usize = 4;

pub const SELECTION_TOKEN: &str = "<selection>";
pub const YOU_TOKEN: &str = "<you>";
pub const THEM_TOKEN: &str = "<them>";
pub const GOAL_TOKEN: &str = "<goal>";
pub const BELIEF_TOKEN: &str = "<belief>";
pub const USER_TOKEN: &str = "<user>";
pub const SYSTEM_TOKEN: &str = "<system>";

/// Tokens that occupy ids `0..RESERVED.len()` in every vocabulary.
pub const RESERVED: &[&str] = &[
    "<pad>",
    "<unk>",
    "<bos>",
    "<eos>",
    SELECTION_TOKEN,
    YOU_TOKEN,
    THEM_TOKEN,
    GOAL_TOKEN,
    BELIEF_TOKEN,
    USER_TOKEN,
    SYSTEM_TOKEN,
    "[value_place]",
    "[value_time]",
    "[train_id]",
    "[value_count]",
    "[value_day]",
    "[value_name]",
    "[value_area]",
    "[value_food]",
    "[value_pricerange]",
    "[value_phone]",
    "[value_address]",
];

/// Token/id bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every corpus token, most frequent first,
    /// ties broken lexicographically.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut extra: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        extra.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("reserved and corpus tokens are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(LarlError::Input(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(LarlError::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Encodes and appends EOS.
    pub fn encode_target<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = self.encode(tokens);
        ids.push(EOS);
        ids
    }

    /// Decodes ids, dropping a trailing EOS and anything after it.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_contains_reserved_and_corpus_tokens() {
        let seq = tokenize("a b a");
        let v = Vocabulary::build([seq.as_slice()]);
        assert_eq!(v.len(), RESERVED.len() + 2);
        // "a" is more frequent, so it comes first
        assert_eq!(v.id("a"), RESERVED.len());
        assert_eq!(v.id("b"), RESERVED.len() + 1);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(SELECTION), SELECTION_TOKEN);
        assert_eq!(Vocabulary::build([seq.as_slice()]), v);
    }

    #[test]
    fn ties_break_lexicographically() {
        let seq = tokenize("c b a");
        let v = Vocabulary::build([seq.as_slice()]);
        let n = RESERVED.len();
        assert_eq!(&v.tokens()[n..], &["a", "b", "c"]);
    }

    #[test]
    fn file_round_trip() {
        let seq = tokenize("x y [value_phone]");
        let v = Vocabulary::build([seq.as_slice()]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
        assert!(Vocabulary::read("a\nb\n".as_bytes()).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let seq = tokenize("x y");
        let v = Vocabulary::build([seq.as_slice()]);
        let ids = v.encode_target(&seq);
        assert_eq!(v.decode(&ids), seq);
    }
}
