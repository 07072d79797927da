//! Cross-entropy-difference data selection with add-k smoothed n-gram models.

use std::collections::{HashMap, HashSet};

use super::vocab::tokenize;
use crate::error::{Error, Result};

const BOUNDARY_START: &str = "<s>";
const BOUNDARY_END: &str = "</s>";

/// Add-k smoothed n-gram language model over whitespace tokens.
#[derive(Clone, Debug)]
pub struct NgramModel {
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    ngrams: HashMap<Vec<String>, usize>,
    contexts: HashMap<Vec<String>, usize>,
}

fn padded(sentence: &str, order: usize) -> Vec<String> {
    let mut toks = vec![BOUNDARY_START.to_string(); order.saturating_sub(1)];
    toks.extend(tokenize(sentence));
    toks.push(BOUNDARY_END.to_string());
    toks
}

impl NgramModel {
    /// `vocab_size` is the number of predictable symbols (words plus the
    /// sentence end marker) and must be shared by models that are compared.
    pub fn train<S: AsRef<str>>(
        sentences: &[S],
        order: usize,
        smoothing: f64,
        vocab_size: usize,
    ) -> Self {
        let mut ngrams = HashMap::new();
        let mut contexts = HashMap::new();
        for s in sentences {
            let toks = padded(s.as_ref(), order);
            for end in (order - 1)..toks.len() {
                let gram = toks[end + 1 - order..=end].to_vec();
                *contexts.entry(gram[..order - 1].to_vec()).or_insert(0) += 1;
                *ngrams.entry(gram).or_insert(0) += 1;
            }
        }
        NgramModel {
            order,
            smoothing,
            vocab_size,
            ngrams,
            contexts,
        }
    }

    pub fn prob(&self, context: &[String], word: &str) -> f64 {
        let mut key = context.to_vec();
        key.push(word.to_string());
        let c = self.ngrams.get(&key).copied().unwrap_or(0) as f64;
        let n = self.contexts.get(context).copied().unwrap_or(0) as f64;
        (c + self.smoothing) / (n + self.smoothing * self.vocab_size as f64)
    }

    /// Mean negative natural-log probability per predicted token (the end
    /// marker counts as a token).
    pub fn cross_entropy(&self, sentence: &str) -> f64 {
        let toks = padded(sentence, self.order);
        let mut total = 0.0;
        let mut n = 0usize;
        for end in (self.order - 1)..toks.len() {
            let ctx = &toks[end + 1 - self.order..end];
            total -= self.prob(ctx, &toks[end]).ln();
            n += 1;
        }
        total / n as f64
    }
}

/// Moore-Lewis selection settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MooreLewis {
    pub order: usize,
    pub smoothing: f64,
}

impl Default for MooreLewis {
    fn default() -> Self {
        MooreLewis {
            order: 3,
            smoothing: 0.1,
        }
    }
}

impl MooreLewis {
    /// `H_in(s) − H_out(s)` for every pool sentence; lower is more in-domain.
    pub fn scores<S: AsRef<str>>(&self, pool: &[S], in_domain: &[S], out_domain: &[S]) -> Result<Vec<f64>> {
        if pool.is_empty() || in_domain.is_empty() || out_domain.is_empty() {
            return Err(Error::EmptyInput("moore-lewis corpora"));
        }
        if self.order == 0 || !(self.smoothing > 0.0) {
            return Err(Error::spec(format!("invalid n-gram settings {self:?}")));
        }
        let mut words: HashSet<String> = HashSet::new();
        for s in pool.iter().chain(in_domain).chain(out_domain) {
            words.extend(tokenize(s.as_ref()));
        }
        let vocab_size = words.len() + 1;
        let lm_in = NgramModel::train(in_domain, self.order, self.smoothing, vocab_size);
        let lm_out = NgramModel::train(out_domain, self.order, self.smoothing, vocab_size);
        Ok(pool
            .iter()
            .map(|s| lm_in.cross_entropy(s.as_ref()) - lm_out.cross_entropy(s.as_ref()))
            .collect())
    }

    /// Indices of the `keep_fraction` lowest-scoring pool sentences, returned
    /// in pool order. Ties keep the earlier sentence.
    pub fn select_indices<S: AsRef<str>>(
        &self,
        pool: &[S],
        in_domain: &[S],
        out_domain: &[S],
        keep_fraction: f64,
    ) -> Result<Vec<usize>> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::spec(format!("keep_fraction {keep_fraction} outside (0, 1]")));
        }
        let scores = self.scores(pool, in_domain, out_domain)?;
        let mut ranked: Vec<usize> = (0..pool.len()).collect();
        ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let keep = ((keep_fraction * pool.len() as f64) + 1e-9).floor().max(1.0) as usize;
        let mut kept: Vec<usize> = ranked.into_iter().take(keep).collect();
        kept.sort_unstable();
        Ok(kept)
    }
}

/// Keeps the most in-domain `keep_fraction` of `pool` with trigram models
/// and add-0.1 smoothing.
pub fn moore_lewis_select<S: AsRef<str> + Clone>(
    pool: &[S],
    in_domain: &[S],
    out_domain: &[S],
    keep_fraction: f64,
) -> Result<Vec<S>> {
    let kept = MooreLewis::default().select_indices(pool, in_domain, out_domain, keep_fraction)?;
    Ok(kept.into_iter().map(|i| pool[i].clone()).collect())
}
