//! Template-grammar corpora with a controllable source style mixture.
//!
//! Style lives in three slots (adjective, intensifier, attitude verb) filled
//! from disjoint per-style lexicons, so it is spread over several tokens of
//! the sentence rather than carried by one marker. The target corpus uses
//! only the target style.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    /// The target style (lexicon A).
    Target,
    /// The opposite style (lexicon B).
    Anti,
    /// Neither (lexicon N).
    Neutral,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Target, Style::Anti, Style::Neutral];

    pub fn tag(self) -> &'static str {
        match self {
            Style::Target => "A",
            Style::Anti => "B",
            Style::Neutral => "N",
        }
    }

    fn lexicon(self) -> &'static Lexicon {
        match self {
            Style::Target => &TARGET,
            Style::Anti => &ANTI,
            Style::Neutral => &NEUTRAL,
        }
    }

    /// Every token that only this style uses.
    pub fn words(self) -> impl Iterator<Item = &'static str> {
        let l = self.lexicon();
        l.adjectives
            .iter()
            .chain(l.intensifiers)
            .chain(l.verbs)
            .copied()
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" => Ok(Style::Target),
            "B" => Ok(Style::Anti),
            "N" => Ok(Style::Neutral),
            other => Err(Error::format(format!("unknown style tag {other:?}"))),
        }
    }
}

struct Lexicon {
    adjectives: &'static [&'static str],
    intensifiers: &'static [&'static str],
    verbs: &'static [&'static str],
}

static TARGET: Lexicon = Lexicon {
    adjectives: &[
        "great", "delicious", "friendly", "lovely", "fresh", "amazing", "perfect", "excellent",
    ],
    intensifiers: &["really", "truly", "so"],
    verbs: &["loved", "enjoyed"],
};

static ANTI: Lexicon = Lexicon {
    adjectives: &[
        "awful", "bland", "rude", "horrible", "stale", "terrible", "dirty", "disgusting",
    ],
    intensifiers: &["too", "overly", "badly"],
    verbs: &["hated", "regretted"],
};

static NEUTRAL: Lexicon = Lexicon {
    adjectives: &[
        "okay", "average", "decent", "ordinary", "plain", "standard", "typical", "moderate",
    ],
    intensifiers: &["quite", "fairly", "rather"],
    verbs: &["visited", "tried"],
};

const NOUNS: &[&str] = &[
    "food", "service", "staff", "pizza", "pasta", "coffee", "menu", "waiter", "room", "music",
    "dessert", "salad", "bread", "price",
];
const PLACES: &[&str] = &["place", "restaurant", "cafe", "bar"];

/// Templates over slots: `N`/`M` nouns, `P` place, `J` adjective,
/// `I` intensifier, `V` attitude verb. Other tokens are literal.
const TEMPLATES: &[&str] = &[
    "the N was J",
    "the N was I J",
    "the N and the M were J",
    "we V the N at this P",
    "the N was J and the M was I J",
    "i V this P , the N is I J",
    "this P has J N and J M",
    "my N was I J , i V it",
    "our N was J but the M was J",
    "the N was I J and the M was I J here",
    "we V this P because the N is J",
    "a J N and a I J M",
];

/// Source styles with their mixture weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleMix {
    pub target: f64,
    pub anti: f64,
    pub neutral: f64,
}

impl StyleMix {
    pub fn new(target: f64, anti: f64, neutral: f64) -> Result<Self> {
        let mix = StyleMix {
            target,
            anti,
            neutral,
        };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.target, self.anti, self.neutral];
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::spec(format!("style mixture {w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Style {
        let u: f64 = rng.gen();
        if u < self.target {
            Style::Target
        } else if u < self.target + self.anti {
            Style::Anti
        } else {
            Style::Neutral
        }
    }
}

impl FromStr for StyleMix {
    type Err = Error;

    /// Parses `a,b,n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::spec(format!("bad mixture {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, n] => StyleMix::new(*a, *b, *n),
            _ => Err(Error::spec(format!("mixture {s:?} needs three weights"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// True style of each source sentence.
    pub source_labels: Vec<Style>,
}

impl SyntheticCorpus {
    pub fn target_labels(&self) -> Vec<Style> {
        vec![Style::Target; self.target.len()]
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

/// One sentence in the given style.
pub fn sentence<R: Rng>(rng: &mut R, style: Style) -> String {
    let lex = style.lexicon();
    let template = pick(rng, TEMPLATES);
    let noun = pick(rng, NOUNS);
    let mut other = pick(rng, NOUNS);
    while other == noun {
        other = pick(rng, NOUNS);
    }
    template
        .split(' ')
        .map(|slot| match slot {
            "N" => noun,
            "M" => other,
            "P" => pick(rng, PLACES),
            "J" => pick(rng, lex.adjectives),
            "I" => pick(rng, lex.intensifiers),
            "V" => pick(rng, lex.verbs),
            lit => lit,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Seed offset separating the target stream from the source stream, so the
/// two corpora can be resized independently.
const TARGET_STREAM: u64 = 0x7a61_7267_6574;

/// Generates `n_source` mixed-style source sentences and `n_target` sentences
/// in the target style.
pub fn gen_synthetic(seed: u64, n_source: usize, n_target: usize, mix: &StyleMix) -> Result<SyntheticCorpus> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source = Vec::with_capacity(n_source);
    let mut source_labels = Vec::with_capacity(n_source);
    for _ in 0..n_source {
        let style = mix.sample(&mut rng);
        source.push(sentence(&mut rng, style));
        source_labels.push(style);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TARGET_STREAM);
    let target = (0..n_target)
        .map(|_| sentence(&mut rng, Style::Target))
        .collect();
    Ok(SyntheticCorpus {
        source,
        target,
        source_labels,
    })
}
