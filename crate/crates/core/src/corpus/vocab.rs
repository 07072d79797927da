use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased whitespace tokenization.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

/// Which side of the transfer problem a sentence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A padded, integer-encoded sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    /// Fixed-length ids; everything from `true_len` on is [`PAD`].
    pub ids: Vec<usize>,
    /// Real tokens including the closing [`EOS`].
    pub true_len: usize,
    pub domain: Domain,
}

impl TokenSeq {
    /// Builds a sequence from real token ids (without EOS), truncating so the
    /// result fits `max_len` with its EOS.
    pub fn from_tokens(tokens: &[usize], max_len: usize, domain: Domain) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::spec(format!("max_len {max_len} must be at least 2")));
        }
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence"));
        }
        let keep = tokens.len().min(max_len - 1);
        let mut ids = Vec::with_capacity(max_len);
        ids.extend_from_slice(&tokens[..keep]);
        ids.push(EOS);
        let true_len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSeq {
            ids,
            true_len,
            domain,
        })
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Real tokens without the closing EOS.
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.true_len - 1]
    }
}

/// Token ↔ id mapping with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for tok in tokenize(line) {
                any = true;
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyInput("corpus"));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary whose non-reserved ids follow the given order, starting at 4.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { index, tokens: all }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode(&self, sentence: &str, max_len: usize, domain: Domain) -> Result<TokenSeq> {
        let ids: Vec<usize> = tokenize(sentence).iter().map(|t| self.id(t)).collect();
        TokenSeq::from_tokens(&ids, max_len, domain)
    }

    /// Text of the real tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS && id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line `k` (0-based) holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for line in text.lines() {
            let w = line.trim();
            if w.is_empty() || RESERVED.contains(&w) || !seen.insert(w.to_string()) {
                return Err(Error::format(format!(
                    "{}: invalid or duplicate vocabulary entry {w:?}",
                    path.display()
                )));
            }
            words.push(w.to_string());
        }
        Ok(Self::from_tokens(words))
    }
}
