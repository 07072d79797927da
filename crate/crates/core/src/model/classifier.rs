use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::TextCnn;
use super::transfer::conv_bank_dims;
use super::{checkpoint, RunCtx};
use crate::corpus::{TokenSeq, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::{adam_step, AdamState};

const PREFIX: &str = "clf";
const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierDims {
    pub vocab: usize,
    pub d_emb: usize,
    pub widths: Vec<usize>,
    pub maps: usize,
}

/// The style-discrepancy discriminator and the evaluation classifier share
/// one architecture.
impl ClassifierDims {
    /// Full size: widths 2–5 with 250 maps each.
    pub fn paper(vocab: usize) -> Self {
        ClassifierDims {
            vocab,
            d_emb: 200,
            widths: vec![2, 3, 4, 5],
            maps: 250,
        }
    }

    pub fn desk(vocab: usize) -> Self {
        ClassifierDims {
            vocab,
            d_emb: 32,
            widths: vec![2, 3, 4, 5],
            maps: 24,
        }
    }
}

/// Binary text-CNN over padded id rows, scoring "target style".
#[derive(Clone, Debug)]
pub struct StyleClassifier {
    pub store: ParamStore,
    pub net: TextCnn,
    pub dims: ClassifierDims,
}

/// Pads content ids to `max_len` with a closing EOS, truncating if needed.
pub fn padded_rows(contents: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    contents
        .iter()
        .map(|c| {
            let keep = c.len().min(max_len - 1);
            let mut row = c[..keep].to_vec();
            row.push(EOS);
            row.resize(max_len, PAD);
            row
        })
        .collect()
}

/// Fraction of probabilities on the correct side of 0.5.
pub fn accuracy(probs: &[f64], labels: &[bool]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(&p, &l)| (p >= 0.5) == l).count();
    hits as f64 / probs.len() as f64
}

impl StyleClassifier {
    pub fn new(dims: ClassifierDims, seed: u64) -> Result<Self> {
        if dims.vocab == 0 || dims.d_emb == 0 || dims.maps == 0 || dims.widths.is_empty() || dims.widths.contains(&0) {
            return Err(Error::spec(format!("degenerate classifier dimensions {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = TextCnn::new(&mut store, PREFIX, dims.vocab, dims.d_emb, &dims.widths, dims.maps, &mut rng);
        Ok(StyleClassifier { store, net, dims })
    }

    /// Probability of the target style for each padded row (evaluation mode).
    pub fn probs(&self, rows: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        let mut ctx = RunCtx::eval();
        for chunk in rows.chunks(256) {
            let tape = Tape::new();
            let x = self.net.embed_hard(&tape, &self.store, chunk)?;
            out.extend_from_slice(self.net.probs(&tape, &self.store, x, &mut ctx)?.value().data());
        }
        Ok(out)
    }

    pub fn probs_seqs(&self, seqs: &[TokenSeq]) -> Result<Vec<f64>> {
        let rows: Vec<Vec<usize>> = seqs.iter().map(|s| s.ids.clone()).collect();
        self.probs(&rows)
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.store, path)
    }

    /// Loads a classifier checkpoint; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let records = checkpoint::read_checkpoint(path)?;
        let emb = records
            .get(&format!("{PREFIX}.emb"))
            .ok_or_else(|| Error::format(format!("{}: not a classifier checkpoint", path.display())))?;
        if emb.rank() != 2 {
            return Err(Error::format("classifier embedding is not a matrix"));
        }
        let (widths, maps) = conv_bank_dims(&records, PREFIX)?;
        let dims = ClassifierDims {
            vocab: emb.shape()[0],
            d_emb: emb.shape()[1],
            widths,
            maps,
        };
        let mut clf = StyleClassifier::new(dims, 0)?;
        checkpoint::restore(&mut clf.store, records)?;
        clf.freeze();
        Ok(clf)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 6,
            batch_size: 64,
            lr: 1e-3,
            dropout: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    /// Mean training cross-entropy per epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy per epoch.
    pub val_accuracy: Vec<f64>,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: usize,
}

impl ClassifierReport {
    pub fn best_val_accuracy(&self) -> f64 {
        self.val_accuracy[self.best_epoch]
    }
}

/// Trains a binary style classifier with binary cross-entropy and Adam,
/// keeping the weights of the epoch with the best validation accuracy.
/// The returned classifier is frozen.
pub fn train_classifier(
    train: (&[TokenSeq], &[bool]),
    validation: (&[TokenSeq], &[bool]),
    dims: ClassifierDims,
    cfg: &ClassifierConfig,
) -> Result<(StyleClassifier, ClassifierReport)> {
    let (xs, ys) = train;
    if xs.is_empty() || validation.0.is_empty() {
        return Err(Error::spec("empty classifier split"));
    }
    if xs.len() != ys.len() || validation.0.len() != validation.1.len() {
        return Err(Error::spec("sentences and labels differ in count"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::spec("classifier needs at least one epoch and a positive batch"));
    }
    let mut clf = StyleClassifier::new(dims, cfg.seed)?;
    let ids: Vec<_> = clf.store.ids().collect();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut ctx = RunCtx::train(cfg.dropout, cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut report = ClassifierReport {
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<ParamStore> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<usize>> = batch.iter().map(|&i| xs[i].ids.clone()).collect();
            let labels: Vec<f64> = batch.iter().map(|&i| if ys[i] { 1.0 } else { 0.0 }).collect();
            let tape = Tape::new();
            let x = clf.net.embed_hard(&tape, &clf.store, &rows)?;
            let p = clf
                .net
                .probs(&tape, &clf.store, x, &mut ctx)?
                .clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = tape.constant(Tensor::vector(labels.clone()));
            let not_y = tape.constant(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
            let loss = y
                .mul(p.log()?)?
                .add(not_y.mul(p.one_minus().log()?)?)?
                .mean()
                .neg();
            total += loss.item()? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            clf.store.zero_grad();
            clf.store.accumulate(&grads);
            adam_step(&mut clf.store, &ids, &mut adam, cfg.lr);
        }
        report.train_loss.push(total / xs.len() as f64);
        let acc = accuracy(&clf.probs_seqs(validation.0)?, validation.1);
        report.val_accuracy.push(acc);
        if best.is_none() || acc > report.val_accuracy[report.best_epoch] {
            report.best_epoch = epoch;
            best = Some(clf.store.clone());
        }
    }
    if let Some(store) = best {
        for (id, p) in store.iter() {
            clf.store.set_value(id, p.value.clone())?;
        }
    }
    clf.store.zero_grad();
    clf.freeze();
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    fn data(n: usize, seed: u64) -> (Vec<TokenSeq>, Vec<bool>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let label = rng.gen_bool(0.5);
            let marker = if label { 4 } else { 5 };
            let mut toks: Vec<usize> = (0..6).map(|_| rng.gen_range(6..12)).collect();
            toks[rng.gen_range(0..6)] = marker;
            xs.push(TokenSeq::from_tokens(&toks, 10, Domain::Source).unwrap());
            ys.push(label);
        }
        (xs, ys)
    }

    #[test]
    fn learns_a_marker_token_and_round_trips() {
        let (xs, ys) = data(400, 1);
        let (vx, vy) = data(100, 2);
        let dims = ClassifierDims {
            vocab: 12,
            d_emb: 8,
            widths: vec![1, 2],
            maps: 6,
        };
        let cfg = ClassifierConfig {
            epochs: 8,
            lr: 1e-2,
            dropout: 0.1,
            ..ClassifierConfig::default()
        };
        let (clf, report) = train_classifier((&xs, &ys), (&vx, &vy), dims, &cfg).unwrap();
        assert!(report.best_val_accuracy() > 0.95, "{report:?}");
        assert!(clf.store.is_frozen());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        clf.save(&path).unwrap();
        let back = StyleClassifier::load(&path).unwrap();
        assert_eq!(back.dims, clf.dims);
        assert_eq!(back.probs_seqs(&vx).unwrap(), clf.probs_seqs(&vx).unwrap());
        let probs = clf.probs_seqs(&vx).unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((accuracy(&probs, &vy) - report.best_val_accuracy()).abs() < 1e-12);
    }

    #[test]
    fn padding_helper() {
        assert_eq!(padded_rows(&[vec![7, 8]], 5), vec![vec![7, 8, EOS, PAD, PAD]]);
        assert_eq!(padded_rows(&[vec![]], 3), vec![vec![EOS, PAD, PAD]]);
        assert_eq!(padded_rows(&[vec![4; 9]], 3), vec![vec![4, 4, EOS]]);
        assert_eq!(accuracy(&[0.9, 0.2, 0.5], &[true, true, false]), 1.0 / 3.0);
    }
}
