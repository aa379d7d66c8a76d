use std::collections::{BTreeSet, HashMap};

use super::DataError;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercases, drops every character other than `a-z`, `0-9`, `'` and
/// whitespace, then splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_whitespace() || c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '\'')
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token/index maps with the four reserved markers at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Reserved markers only.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(DataError::Vocab(
                "reserved markers missing or out of place".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every distinct token of `captions`, sorted, after the reserved block.
    pub fn build<'a, I>(captions: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let words: BTreeSet<&String> = captions.into_iter().flatten().collect();
        let mut v = Self::new();
        for w in words {
            v.insert(w);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or the unknown marker.
    pub fn id(&self, token: &str) -> usize {
        self.index_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// `[start] + ids + [end] + pads`, exactly `max_len` long.
    pub fn encode_caption<S: AsRef<str>>(
        &self,
        tokens: &[S],
        max_len: usize,
    ) -> Result<Vec<usize>, DataError> {
        if tokens.len() + 2 > max_len {
            return Err(DataError::CaptionTooLong {
                len: tokens.len(),
                max: max_len.saturating_sub(2),
            });
        }
        let mut out = Vec::with_capacity(max_len);
        out.push(START);
        out.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        out.push(END);
        out.resize(max_len, PAD);
        Ok(out)
    }

    /// Words of an index sequence with markers and pads removed.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | START | END))
            .map(|&i| self.token_of(i).unwrap_or(RESERVED_TOKENS[UNK]).to_string())
            .collect()
    }
}
