use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::tokenize;
use crate::error::{Error, Result};

/// Fraction of the corpus given to one part, and how that part divides into
/// train / test / validation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartSpec {
    pub fraction: f64,
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl PartSpec {
    pub fn new(fraction: f64) -> Self {
        PartSpec {
            fraction,
            train: 0.8,
            test: 0.1,
            validation: 0.1,
        }
    }
}

/// Three-way split of a corpus: transfer model, style-discrepancy
/// discriminator, evaluation classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub transfer: PartSpec,
    pub discriminator: PartSpec,
    pub evaluation: PartSpec,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(0.5, 0.25, 0.25)
    }
}

impl SplitSpec {
    pub fn new(transfer: f64, discriminator: f64, evaluation: f64) -> Self {
        SplitSpec {
            transfer: PartSpec::new(transfer),
            discriminator: PartSpec::new(discriminator),
            evaluation: PartSpec::new(evaluation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.transfer, self.discriminator, self.evaluation];
        let frac = |x: f64| x >= 0.0 && x.is_finite();
        for p in &parts {
            if ![p.fraction, p.train, p.test, p.validation].into_iter().all(frac) {
                return Err(Error::spec(format!("negative or non-finite fraction in {p:?}")));
            }
            if p.train + p.test + p.validation > 1.0 + 1e-9 {
                return Err(Error::spec(format!("sub-fractions of {p:?} exceed 1")));
            }
        }
        let total: f64 = parts.iter().map(|p| p.fraction).sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::spec(format!("split fractions sum to {total} > 1")));
        }
        Ok(())
    }
}

/// Indices of one part, by role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Part {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Part {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train
            .iter()
            .chain(&self.test)
            .chain(&self.validation)
            .copied()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ThreeWaySplit {
    pub transfer: Part,
    pub discriminator: Part,
    pub evaluation: Part,
}

/// Normalized sentence text used for overlap checks.
pub fn sentence_key(s: &str) -> String {
    tokenize(s).join(" ")
}

fn cut(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(fractions.len() + 1);
    bounds.push(0);
    let mut cum = 0.0;
    for f in fractions {
        cum += f;
        bounds.push(((cum * n as f64) + 1e-9).floor().min(n as f64) as usize);
    }
    bounds
}

/// Assigns each index to one of `fractions.len()` groups. Identical sentences
/// always land in the same group, so groups never share a sentence.
fn partition(items: &[(usize, String)], order: &[String], fractions: &[f64]) -> Vec<Vec<usize>> {
    let bounds = cut(order.len(), fractions);
    let mut group_of: HashMap<&str, usize> = HashMap::with_capacity(order.len());
    for g in 0..fractions.len() {
        for key in &order[bounds[g]..bounds[g + 1]] {
            group_of.insert(key, g);
        }
    }
    let mut groups = vec![Vec::new(); fractions.len()];
    for (idx, key) in items {
        if let Some(&g) = group_of.get(key.as_str()) {
            groups[g].push(*idx);
        }
    }
    groups
}

fn split_part(items: &[(usize, String)], order: &[String], spec: &PartSpec) -> Part {
    let mut groups = partition(items, order, &[spec.train, spec.test, spec.validation]);
    let validation = groups.pop().unwrap_or_default();
    let test = groups.pop().unwrap_or_default();
    let train = groups.pop().unwrap_or_default();
    Part {
        train,
        test,
        validation,
    }
}

/// Deterministic shuffled three-way partition of `corpus` (indices into it).
///
/// The partition is over distinct sentences, so duplicated lines follow their
/// first occurrence and no sentence can appear in two parts.
pub fn three_way_split<S: AsRef<str>>(
    corpus: &[S],
    spec: &SplitSpec,
    seed: u64,
) -> Result<ThreeWaySplit> {
    spec.validate()?;
    let items: Vec<(usize, String)> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| (i, sentence_key(s.as_ref())))
        .collect();
    let mut seen = HashSet::new();
    let mut order: Vec<String> = items
        .iter()
        .filter(|(_, k)| seen.insert(k.clone()))
        .map(|(_, k)| k.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let fractions = [
        spec.transfer.fraction,
        spec.discriminator.fraction,
        spec.evaluation.fraction,
    ];
    let bounds = cut(order.len(), &fractions);
    let groups = partition(&items, &order, &fractions);
    let part = |g: usize, ps: &PartSpec| {
        let sub_items: Vec<(usize, String)> =
            groups[g].iter().map(|&i| items[i].clone()).collect();
        split_part(&sub_items, &order[bounds[g]..bounds[g + 1]], ps)
    };
    Ok(ThreeWaySplit {
        transfer: part(0, &spec.transfer),
        discriminator: part(1, &spec.discriminator),
        evaluation: part(2, &spec.evaluation),
    })
}

/// Fails if any sentence occurs in more than one of the given groups.
pub fn check_disjoint(groups: &[(&str, Vec<&str>)]) -> Result<()> {
    let mut owner: HashMap<String, &str> = HashMap::new();
    for (name, sentences) in groups {
        let mut local = HashSet::new();
        for s in sentences {
            let key = sentence_key(s);
            if !local.insert(key.clone()) {
                continue;
            }
            if let Some(prev) = owner.insert(key.clone(), name) {
                return Err(Error::Contamination(format!(
                    "sentence {key:?} appears in both {prev} and {name}"
                )));
            }
        }
    }
    Ok(())
}
