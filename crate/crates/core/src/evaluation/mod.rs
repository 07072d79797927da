//! Evaluation protocol: split the corpus three ways, train the style
//! classifiers on their own parts, train transfer models and score their
//! outputs with the independent evaluation classifier.

mod report;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub use report::{mean_std, EvalReport, RunResult, QUALITY_GATE};

use crate::corpus::{
    check_disjoint, three_way_split, Domain, Part, SplitSpec, Style, SyntheticCorpus, ThreeWaySplit, TokenSeq,
    Vocab,
};
use crate::error::{Error, Result};
use crate::model::{accuracy, padded_rows, train_classifier, ClassifierConfig, ClassifierDims, StyleClassifier, TransferModel};
use crate::training::{train, TrainConfig, TrainCorpora, TrainOutcome};

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: hex SHA-256 of `blob <len>\0` followed by the
/// content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses an explicit split: one line per joint-corpus sentence (source
/// lines first, then target lines), each `part:role` with part one of
/// `transfer`, `discriminator`, `evaluation` and role one of `train`,
/// `validation`, `test`, or `-` to leave the sentence out.
pub fn parse_split_assignment(text: &str, n_sentences: usize) -> Result<ThreeWaySplit> {
    let mut split = ThreeWaySplit::default();
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        count += 1;
        let entry = line.trim();
        if entry == "-" {
            continue;
        }
        let bad = || Error::format(format!("split line {}: expected part:role or -, got {entry:?}", i + 1));
        let (part, role) = entry.split_once(':').ok_or_else(bad)?;
        let part = match part {
            "transfer" => &mut split.transfer,
            "discriminator" => &mut split.discriminator,
            "evaluation" => &mut split.evaluation,
            _ => return Err(bad()),
        };
        match role {
            "train" => part.train.push(i),
            "validation" => part.validation.push(i),
            "test" => part.test.push(i),
            _ => return Err(bad()),
        }
    }
    if count != n_sentences {
        return Err(Error::format(format!(
            "split assigns {count} lines but the corpus has {n_sentences} sentences"
        )));
    }
    Ok(split)
}

/// Raw two-domain corpus. `source_styles`, when known, gives the true style
/// of every source sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub source_styles: Option<Vec<Style>>,
}

impl From<SyntheticCorpus> for Corpus {
    fn from(c: SyntheticCorpus) -> Self {
        Corpus {
            source: c.source,
            target: c.target,
            source_styles: Some(c.source_labels),
        }
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source sentences followed by target sentences; split indices refer
    /// to this order.
    pub fn joint(&self) -> Vec<&str> {
        self.source.iter().chain(&self.target).map(String::as_str).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::spec("both source and target sentences are required"));
        }
        if let Some(styles) = &self.source_styles {
            if styles.len() != self.source.len() {
                return Err(Error::spec(format!(
                    "{} style labels for {} source sentences",
                    styles.len(),
                    self.source.len()
                )));
            }
        }
        Ok(())
    }

    /// Classifier label: target-domain sentences and source sentences of
    /// the target style are positive. Without style labels a source sentence
    /// is negative.
    fn label(&self, joint_index: usize) -> bool {
        match joint_index.checked_sub(self.source.len()) {
            Some(_) => true,
            None => self
                .source_styles
                .as_ref()
                .is_some_and(|s| s[joint_index] == Style::Target),
        }
    }

    fn style(&self, joint_index: usize) -> Option<Style> {
        if joint_index >= self.source.len() {
            return Some(Style::Target);
        }
        self.source_styles.as_ref().map(|s| s[joint_index])
    }
}

/// Encoded sentences of one classifier part with binary labels.
#[derive(Clone, Debug, Default)]
pub struct ClassifierData {
    pub train: (Vec<TokenSeq>, Vec<bool>),
    pub validation: (Vec<TokenSeq>, Vec<bool>),
    pub test: (Vec<TokenSeq>, Vec<bool>),
    /// Raw text of every sentence of the part, for overlap checks.
    texts: Vec<String>,
}

/// Corpus split and encoded for one experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub max_len: usize,
    pub transfer: TrainCorpora,
    /// Held-out source sentences to transfer, with their true styles.
    pub test_source: Vec<TokenSeq>,
    pub test_source_text: Vec<String>,
    pub test_styles: Vec<Option<Style>>,
    pub discriminator: ClassifierData,
    pub evaluation: ClassifierData,
    transfer_texts: Vec<String>,
}

fn domain_of(corpus: &Corpus, i: usize) -> Domain {
    if i < corpus.source.len() {
        Domain::Source
    } else {
        Domain::Target
    }
}

fn encode_role(
    corpus: &Corpus,
    joint: &[&str],
    vocab: &Vocab,
    idx: &[usize],
    max_len: usize,
) -> Result<(Vec<TokenSeq>, Vec<bool>)> {
    let mut seqs = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        seqs.push(vocab.encode(joint[i], max_len, domain_of(corpus, i))?);
        labels.push(corpus.label(i));
    }
    Ok((seqs, labels))
}

fn texts_of(joint: &[&str], part: &Part) -> Vec<String> {
    part.all().map(|i| joint[i].to_string()).collect()
}

impl Prepared {
    /// Default three-way split of the joint corpus.
    pub fn new(corpus: &Corpus, spec: &SplitSpec, split_seed: u64, max_len: usize) -> Result<Self> {
        corpus.validate()?;
        let split = three_way_split(&corpus.joint(), spec, split_seed)?;
        Self::from_split(corpus, &split, max_len)
    }

    /// Uses an explicit split; overlapping parts are rejected.
    pub fn from_split(corpus: &Corpus, split: &ThreeWaySplit, max_len: usize) -> Result<Self> {
        corpus.validate()?;
        let joint = corpus.joint();
        if let Some(&bad) = [&split.transfer, &split.discriminator, &split.evaluation]
            .iter()
            .flat_map(|p| p.all())
            .collect::<Vec<_>>()
            .iter()
            .find(|&&i| i >= joint.len())
        {
            return Err(Error::spec(format!("split index {bad} outside the corpus")));
        }
        let transfer_texts = texts_of(&joint, &split.transfer);
        let ds_texts = texts_of(&joint, &split.discriminator);
        let eval_texts = texts_of(&joint, &split.evaluation);
        check_disjoint(&[
            ("transfer", transfer_texts.iter().map(String::as_str).collect()),
            ("discriminator", ds_texts.iter().map(String::as_str).collect()),
            ("evaluation", eval_texts.iter().map(String::as_str).collect()),
        ])?;
        for (name, part) in [
            ("transfer", &split.transfer),
            ("discriminator", &split.discriminator),
            ("evaluation", &split.evaluation),
        ] {
            let roles = [
                ("train", part.train.iter().map(|&i| joint[i]).collect::<Vec<_>>()),
                ("test", part.test.iter().map(|&i| joint[i]).collect()),
                ("validation", part.validation.iter().map(|&i| joint[i]).collect()),
            ];
            check_disjoint(&roles).map_err(|e| Error::Contamination(format!("{name} part: {e}")))?;
        }

        let train_text = [&split.transfer, &split.discriminator, &split.evaluation]
            .iter()
            .flat_map(|p| p.train.iter().map(|&i| joint[i]))
            .collect::<Vec<_>>();
        let vocab = Vocab::build(train_text, 1)?;

        let by_domain = |idx: &[usize], d: Domain| -> Vec<usize> {
            idx.iter().copied().filter(|&i| domain_of(corpus, i) == d).collect()
        };
        let encode = |idx: &[usize]| -> Result<Vec<TokenSeq>> {
            idx.iter()
                .map(|&i| vocab.encode(joint[i], max_len, domain_of(corpus, i)))
                .collect()
        };
        let t = &split.transfer;
        let transfer = TrainCorpora {
            source: encode(&by_domain(&t.train, Domain::Source))?,
            target: encode(&by_domain(&t.train, Domain::Target))?,
            val_source: encode(&by_domain(&t.validation, Domain::Source))?,
            val_target: encode(&by_domain(&t.validation, Domain::Target))?,
        };
        let test_idx = by_domain(&t.test, Domain::Source);
        let classifier_data = |part: &Part, texts: Vec<String>| -> Result<ClassifierData> {
            Ok(ClassifierData {
                train: encode_role(corpus, &joint, &vocab, &part.train, max_len)?,
                validation: encode_role(corpus, &joint, &vocab, &part.validation, max_len)?,
                test: encode_role(corpus, &joint, &vocab, &part.test, max_len)?,
                texts,
            })
        };
        Ok(Prepared {
            test_source: encode(&test_idx)?,
            test_source_text: test_idx.iter().map(|&i| joint[i].to_string()).collect(),
            test_styles: test_idx.iter().map(|&i| corpus.style(i)).collect(),
            discriminator: classifier_data(&split.discriminator, ds_texts)?,
            evaluation: classifier_data(&split.evaluation, eval_texts)?,
            vocab,
            max_len,
            transfer,
            transfer_texts,
        })
    }

    /// Drops target training sentences beyond the first `n`.
    pub fn limit_target(&mut self, n: usize) {
        self.transfer.target.truncate(n);
    }
}

/// A trained, frozen classifier with its held-out test accuracy.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: StyleClassifier,
    pub test_accuracy: f64,
    pub validation_accuracy: f64,
}

fn fit(data: &ClassifierData, dims: ClassifierDims, cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    if data.train.0.is_empty() || data.validation.0.is_empty() || data.test.0.is_empty() {
        return Err(Error::spec("classifier part needs train, validation and test sentences"));
    }
    let (classifier, report) = train_classifier(
        (&data.train.0, &data.train.1),
        (&data.validation.0, &data.validation.1),
        dims,
        cfg,
    )?;
    let test_accuracy = accuracy(&classifier.probs_seqs(&data.test.0)?, &data.test.1);
    Ok(TrainedClassifier {
        classifier,
        test_accuracy,
        validation_accuracy: report.best_val_accuracy(),
    })
}

/// Pre-trains the style-discrepancy discriminator on its dedicated part.
pub fn pretrain_ds(prep: &Prepared, dims: ClassifierDims, cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    fit(&prep.discriminator, dims, cfg)
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Trains the evaluation classifier on the evaluation part after checking
/// that it shares no sentence with the other parts.
pub fn train_eval_classifier(prep: &Prepared, dims: ClassifierDims, cfg: &ClassifierConfig) -> Result<TrainedClassifier> {
    check_disjoint(&[
        ("transfer", as_refs(&prep.transfer_texts)),
        ("discriminator", as_refs(&prep.discriminator.texts)),
        ("evaluation", as_refs(&prep.evaluation.texts)),
    ])?;
    fit(&prep.evaluation, dims, cfg)
}

/// Transfer accuracy overall and per true source style.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferScore {
    pub accuracy: f64,
    /// Count and accuracy of each known style among the scored sentences.
    pub per_style: BTreeMap<Style, (usize, f64)>,
    pub outputs: Vec<Vec<usize>>,
}

/// Greedily transfers every sentence with the target style and returns the
/// fraction the classifier labels target-style.
pub fn transfer_accuracy(
    model: &TransferModel,
    clf: &StyleClassifier,
    sentences: &[TokenSeq],
    styles: &[Option<Style>],
) -> Result<TransferScore> {
    if sentences.is_empty() {
        return Err(Error::spec("no test sentences to transfer"));
    }
    let max_len = sentences[0].max_len();
    let outputs = model.transfer(sentences)?;
    let hits: Vec<bool> = clf
        .probs(&padded_rows(&outputs, max_len))?
        .into_iter()
        .map(|p| p >= 0.5)
        .collect();
    let mut per_style: BTreeMap<Style, (usize, usize)> = BTreeMap::new();
    for (hit, style) in hits.iter().zip(styles) {
        if let Some(s) = style {
            let e = per_style.entry(*s).or_default();
            e.0 += 1;
            e.1 += usize::from(*hit);
        }
    }
    Ok(TransferScore {
        accuracy: hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64,
        per_style: per_style
            .into_iter()
            .map(|(s, (n, k))| (s, (n, k as f64 / n as f64)))
            .collect(),
        outputs,
    })
}

/// One transfer-model training run and its evaluation.
#[derive(Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub score: TransferScore,
}

pub fn run_once(
    cfg: &TrainConfig,
    prep: &Prepared,
    ds: &StyleClassifier,
    eval_clf: &StyleClassifier,
) -> Result<RunOutput> {
    let outcome = train(cfg, &prep.transfer, prep.vocab.len(), ds, Some(eval_clf), None)?;
    let score = transfer_accuracy(&outcome.model, eval_clf, &prep.test_source, &prep.test_styles)?;
    Ok(RunOutput {
        seed: cfg.seed,
        outcome,
        score,
    })
}

/// `n_runs` training runs with seeds `cfg.seed, cfg.seed + 1, …`, sharing
/// the corpus split and both classifiers. Diverged runs are recorded as
/// failed and left out of the mean.
/// `eval_accuracy` is the evaluation classifier's held-out accuracy, used
/// for the quality gate.
pub fn run_experiment(
    cfg: &TrainConfig,
    prep: &Prepared,
    ds: &StyleClassifier,
    eval_clf: &StyleClassifier,
    eval_accuracy: Option<f64>,
    n_runs: usize,
) -> Result<(EvalReport, Vec<RunOutput>)> {
    if n_runs == 0 {
        return Err(Error::spec("at least one run is required"));
    }
    let mut results = Vec::with_capacity(n_runs);
    let mut outputs = Vec::new();
    for run in 0..n_runs {
        let run_cfg = TrainConfig {
            seed: cfg.seed + run as u64,
            ..cfg.clone()
        };
        match run_once(&run_cfg, prep, ds, eval_clf) {
            Ok(out) => {
                results.push(RunResult {
                    run,
                    seed: run_cfg.seed,
                    accuracy: Some(out.score.accuracy),
                });
                outputs.push(out);
            }
            Err(Error::Divergence(_)) => results.push(RunResult {
                run,
                seed: run_cfg.seed,
                accuracy: None,
            }),
            Err(e) => return Err(e),
        }
    }
    let report = EvalReport::new(
        results,
        fingerprint(cfg.to_text().as_bytes()),
        eval_accuracy,
    );
    Ok((report, outputs))
}

/// Tab-separated `source<TAB>transferred` lines.
pub fn sample_dump(sources: &[String], outputs: &[Vec<usize>], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (s, o) in sources.iter().zip(outputs) {
        out.push_str(s);
        out.push('\t');
        out.push_str(&vocab.decode(o));
        out.push('\n');
    }
    out
}
