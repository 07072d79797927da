use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, clip_grad_norm, AdamState};
use super::TrainConfig;
use crate::corpus::{Domain, TokenSeq};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_from_probs, adversarial_terms, cycle_terms, discrepancy_terms, draw_style_picks,
    reconstruction_terms, Encodings, LossBreakdown, LossWeights, SoftTransfers,
};
use crate::model::{accuracy, padded_rows, RunCtx, StyleClassifier, TransferModel};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Encoded training and validation sentences of both domains.
#[derive(Clone, Debug)]
pub struct TrainCorpora {
    pub source: Vec<TokenSeq>,
    pub target: Vec<TokenSeq>,
    pub val_source: Vec<TokenSeq>,
    pub val_target: Vec<TokenSeq>,
}

/// Detached soft generations, the discriminator's training inputs.
#[derive(Clone, Debug)]
pub struct SoftBatch {
    pub source: Vec<Tensor>,
    pub target: Vec<Tensor>,
    pub lengths_s: Vec<usize>,
    pub lengths_t: Vec<usize>,
}

impl SoftBatch {
    fn from_live(soft: &SoftTransfers<'_>) -> Self {
        SoftBatch {
            source: soft.source.iter().map(Var::value).collect(),
            target: soft.target.iter().map(Var::value).collect(),
            lengths_s: soft.lengths_s.clone(),
            lengths_t: soft.lengths_t.clone(),
        }
    }

    /// Soft transfers of the source batch and soft reconstructions of the
    /// target batch under the current generator.
    pub fn generate(
        model: &TransferModel,
        batch_s: &[TokenSeq],
        batch_t: &[TokenSeq],
        temperature: f64,
        ctx: &mut RunCtx,
    ) -> Result<Self> {
        let tape = Tape::new();
        let enc = Encodings::new(&tape, model, batch_s, batch_t, ctx)?;
        let soft = SoftTransfers::new(&tape, model, &enc, batch_s, batch_t, temperature, ctx)?;
        Ok(Self::from_live(&soft))
    }
}

/// One optimizer per arm of the minimax game.
#[derive(Clone, Debug, Default)]
pub struct Optimizers {
    pub discriminator: AdamState,
    pub generator: AdamState,
}

fn update_discriminator(model: &mut TransferModel, soft: &SoftBatch, opt: &mut AdamState, lr: f64, ctx: &mut RunCtx) -> Result<f64> {
    let tape = Tape::new();
    let consts = |xs: &[Tensor]| xs.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>();
    let (src, tgt) = (consts(&soft.source), consts(&soft.target));
    let d_s = model.discriminate_soft(&tape, &src, &soft.lengths_s, ctx)?;
    let d_t = model.discriminate_soft(&tape, &tgt, &soft.lengths_t, ctx)?;
    let adv = adversarial_from_probs(d_s, d_t)?;
    let value = adv.item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(adv)?;
    let ids = model.discriminator_params();
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam_step(&mut model.store, &ids, opt, lr);
    model.store.zero_grad();
    Ok(value)
}

/// One discriminator update on detached generations: only discriminator
/// parameters move, in the direction that lowers the adversarial term.
/// Returns the adversarial value before the update.
pub fn train_step_discriminator(
    model: &mut TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    opt: &mut AdamState,
    cfg: &TrainConfig,
    ctx: &mut RunCtx,
) -> Result<f64> {
    let soft = SoftBatch::generate(model, batch_s, batch_t, cfg.temperature, ctx)?;
    update_discriminator(model, &soft, opt, cfg.lr, ctx)
}

/// Result of a generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub losses: LossBreakdown,
    /// The objective was not finite and no parameter moved.
    pub skipped: bool,
    pub grad_norm: f64,
}

/// The four terms of the transfer objective on one pair of batches.
pub struct Objective<'t> {
    pub rec: Var<'t>,
    pub adv: Var<'t>,
    pub dis: Var<'t>,
    pub cyc: Var<'t>,
}

impl<'t> Objective<'t> {
    pub fn breakdown(&self, w: &LossWeights) -> Result<LossBreakdown> {
        Ok(LossBreakdown::new(self.rec.item()?, self.adv.item()?, self.dis.item()?, self.cyc.item()?, w))
    }

    /// The weighted sum, leaving out terms whose weight is zero.
    pub fn total(&self, w: &LossWeights, use_adv: bool) -> Result<Var<'t>> {
        let mut total = self.rec;
        if use_adv && w.adv != 0.0 {
            total = total.sub(self.adv.scale(w.adv))?;
        }
        if w.cyc != 0.0 {
            total = total.add(self.cyc.scale(w.cyc))?;
        }
        if w.dis != 0.0 {
            total = total.add(self.dis.scale(w.dis))?;
        }
        Ok(total)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn objective<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    enc: &Encodings<'t>,
    soft: &SoftTransfers<'t>,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    p_target: &[f64],
    picks: &[usize],
    ctx: &mut RunCtx,
) -> Result<Objective<'t>> {
    Ok(Objective {
        rec: reconstruction_terms(tape, model, enc, batch_s, batch_t, ctx)?,
        adv: adversarial_terms(tape, model, soft, ctx)?,
        dis: discrepancy_terms(enc.y_s, enc.y_star, p_target)?,
        cyc: cycle_terms(tape, model, enc, soft, batch_s, batch_t, picks, ctx)?,
    })
}

fn check_batches(batch_s: &[TokenSeq], batch_t: &[TokenSeq], p_target: &[f64]) -> Result<()> {
    if batch_s.iter().any(|s| s.domain != Domain::Source) || batch_t.iter().any(|s| s.domain != Domain::Target) {
        return Err(Error::spec("batch sentences carry the wrong domain tag"));
    }
    if p_target.len() != batch_s.len() {
        return Err(Error::spec("one discrepancy weight per source sentence is required"));
    }
    Ok(())
}

fn apply_generator_update(
    model: &mut TransferModel,
    tape: &Tape,
    total: Var<'_>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let grads = tape.backward(total)?;
    let ids: Vec<ParamId> = model.transfer_params();
    model.store.zero_grad();
    model.store.accumulate(&grads);
    let norm = clip_grad_norm(&mut model.store, &ids, cfg.clip_norm);
    if norm.is_finite() {
        adam_step(&mut model.store, &ids, opt, cfg.lr);
    }
    model.store.zero_grad();
    Ok(norm)
}

/// One update of the encoders, target style and generator on the full
/// objective with the discriminator held fixed. `p_target` holds the frozen
/// discrepancy classifier's probability for each source sentence.
#[allow(clippy::too_many_arguments)]
pub fn train_step_generator(
    model: &mut TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    p_target: &[f64],
    opt: &mut AdamState,
    cfg: &TrainConfig,
    use_adv: bool,
    ctx: &mut RunCtx,
) -> Result<GeneratorStep> {
    check_batches(batch_s, batch_t, p_target)?;
    let tape = Tape::new();
    let enc = Encodings::new(&tape, model, batch_s, batch_t, ctx)?;
    let soft = SoftTransfers::new(&tape, model, &enc, batch_s, batch_t, cfg.temperature, ctx)?;
    let picks = draw_style_picks(ctx.rng(), batch_s.len(), batch_t.len())?;
    let obj = objective(&tape, model, &enc, &soft, batch_s, batch_t, p_target, &picks, ctx)?;
    finish_generator_step(model, &tape, &obj, opt, cfg, use_adv)
}

fn finish_generator_step(
    model: &mut TransferModel,
    tape: &Tape,
    obj: &Objective<'_>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    use_adv: bool,
) -> Result<GeneratorStep> {
    let losses = obj.breakdown(&cfg.weights)?;
    let total = obj.total(&cfg.weights, use_adv)?;
    if !losses.is_finite() || !total.item()?.is_finite() {
        return Ok(GeneratorStep {
            losses,
            skipped: true,
            grad_norm: f64::NAN,
        });
    }
    let grad_norm = apply_generator_update(model, tape, total, opt, cfg)?;
    Ok(GeneratorStep {
        losses,
        skipped: !grad_norm.is_finite(),
        grad_norm,
    })
}

/// `d_steps` discriminator updates followed by one generator update, all on
/// the same batch. The soft generations are computed once, before any
/// update, and shared by both arms.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    p_target: &[f64],
    opts: &mut Optimizers,
    cfg: &TrainConfig,
    use_adv: bool,
    ctx: &mut RunCtx,
) -> Result<GeneratorStep> {
    check_batches(batch_s, batch_t, p_target)?;
    let tape = Tape::new();
    let enc = Encodings::new(&tape, model, batch_s, batch_t, ctx)?;
    let soft = SoftTransfers::new(&tape, model, &enc, batch_s, batch_t, cfg.temperature, ctx)?;
    let detached = SoftBatch::from_live(&soft);
    for _ in 0..cfg.d_steps {
        update_discriminator(model, &detached, &mut opts.discriminator, cfg.lr, ctx)?;
    }
    // Discriminator weights enter this tape only now, after their update.
    let picks = draw_style_picks(ctx.rng(), batch_s.len(), batch_t.len())?;
    let obj = objective(&tape, model, &enc, &soft, batch_s, batch_t, p_target, &picks, ctx)?;
    finish_generator_step(model, &tape, &obj, &mut opts.generator, cfg, use_adv)
}

/// Objective value on held-out batches in evaluation mode.
pub fn evaluate_objective(
    model: &TransferModel,
    source: &[TokenSeq],
    target: &[TokenSeq],
    p_target: &[f64],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut ctx = RunCtx::eval();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6c69);
    let bs = cfg.batch_size;
    if source.is_empty() || target.is_empty() || p_target.len() != source.len() {
        return Err(Error::spec("validation needs both domains and one weight per source sentence"));
    }
    let n = source.len().div_ceil(bs).min(target.len().div_ceil(bs));
    let mut sum = [0.0; 4];
    let mut count = 0.0;
    for b in 0..n {
        let lo = b * bs;
        let bs_s = &source[lo..(lo + bs).min(source.len())];
        let bs_t = &target[lo..(lo + bs).min(target.len())];
        let p = &p_target[lo..lo + bs_s.len()];
        let tape = Tape::new();
        let enc = Encodings::new(&tape, model, bs_s, bs_t, &mut ctx)?;
        let soft = SoftTransfers::new(&tape, model, &enc, bs_s, bs_t, cfg.temperature, &mut ctx)?;
        let picks = draw_style_picks(&mut rng, bs_s.len(), bs_t.len())?;
        let obj = objective(&tape, model, &enc, &soft, bs_s, bs_t, p, &picks, &mut ctx)?;
        let l = obj.breakdown(&cfg.weights)?;
        for (acc, v) in sum.iter_mut().zip([l.rec, l.adv, l.dis, l.cyc]) {
            *acc += v;
        }
        count += 1.0;
    }
    Ok(LossBreakdown::new(sum[0] / count, sum[1] / count, sum[2] / count, sum[3] / count, &cfg.weights))
}

/// Fraction of transferred sentences the classifier assigns to the target
/// style.
pub fn transfer_accuracy_with(model: &TransferModel, clf: &StyleClassifier, source: &[TokenSeq], max_len: usize) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::EmptyInput("sentences to transfer"));
    }
    let outputs = model.transfer(source)?;
    let probs = clf.probs(&padded_rows(&outputs, max_len))?;
    Ok(accuracy(&probs, &vec![true; probs.len()]))
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean over the epoch's generator steps.
    pub train: LossBreakdown,
    pub val_total: f64,
    pub val_acc: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation objective.
    pub model: TransferModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Full training run.
///
/// Every epoch visits shuffled source and target batches in lock step (the
/// shorter side sets the batch count). The model with the lowest validation
/// objective is kept and, when `checkpoint` is given, written there.
/// `eval_clf` adds a validation transfer accuracy column.
pub fn train(
    cfg: &TrainConfig,
    corpora: &TrainCorpora,
    vocab_size: usize,
    ds: &StyleClassifier,
    eval_clf: Option<&StyleClassifier>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !ds.store.is_frozen() {
        return Err(Error::spec("style-discrepancy classifier must be frozen before training"));
    }
    let n_batches = corpora.source.len().min(corpora.target.len()) / cfg.batch_size;
    if n_batches == 0 {
        return Err(Error::spec(format!(
            "corpus ({} source, {} target) is smaller than the batch size {}",
            corpora.source.len(),
            corpora.target.len(),
            cfg.batch_size
        )));
    }
    if corpora.val_source.is_empty() || corpora.val_target.is_empty() {
        return Err(Error::spec("validation sentences are required"));
    }
    for seqs in [&corpora.source, &corpora.target, &corpora.val_source, &corpora.val_target] {
        if seqs.iter().any(|s| s.max_len() != cfg.max_len) {
            return Err(Error::spec(format!("sentences must be padded to max_len {}", cfg.max_len)));
        }
    }
    let p_train = ds.probs_seqs(&corpora.source)?;
    let p_val = ds.probs_seqs(&corpora.val_source)?;

    let mut model = TransferModel::new(cfg.model_dims(vocab_size), cfg.seed)?;
    let mut opts = Optimizers::default();
    let mut ctx = RunCtx::train(cfg.dropout, cfg.seed.wrapping_add(1));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut src_order: Vec<usize> = (0..corpora.source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..corpora.target.len()).collect();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        src_order.shuffle(&mut order_rng);
        tgt_order.shuffle(&mut order_rng);
        let use_adv = epoch > cfg.adv_delay;
        let mut sum = [0.0; 4];
        let mut done = 0usize;
        let mut skipped = 0usize;
        for b in 0..n_batches {
            let idx_s = &src_order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let idx_t = &tgt_order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch_s: Vec<TokenSeq> = idx_s.iter().map(|&i| corpora.source[i].clone()).collect();
            let batch_t: Vec<TokenSeq> = idx_t.iter().map(|&i| corpora.target[i].clone()).collect();
            let p: Vec<f64> = idx_s.iter().map(|&i| p_train[i]).collect();
            let step = train_step(&mut model, &batch_s, &batch_t, &p, &mut opts, cfg, use_adv, &mut ctx)?;
            if step.skipped {
                skipped += 1;
                continue;
            }
            let l = step.losses;
            for (acc, v) in sum.iter_mut().zip([l.rec, l.adv, l.dis, l.cyc]) {
                *acc += v;
            }
            done += 1;
        }
        if done == 0 {
            return Err(Error::Divergence(format!("every step of epoch {epoch} had a non-finite objective")));
        }
        let k = done as f64;
        let train_losses = LossBreakdown::new(sum[0] / k, sum[1] / k, sum[2] / k, sum[3] / k, &cfg.weights);
        let val = evaluate_objective(&model, &corpora.val_source, &corpora.val_target, &p_val, cfg)?;
        if !val.total.is_finite() {
            return Err(Error::Divergence(format!("validation objective is {} after epoch {epoch}", val.total)));
        }
        let val_acc = eval_clf
            .map(|clf| transfer_accuracy_with(&model, clf, &corpora.val_source, cfg.max_len))
            .transpose()?;
        metrics.push(EpochMetrics {
            epoch,
            train: train_losses,
            val_total: val.total,
            val_acc,
            skipped_steps: skipped,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val.total < *v) {
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
            best = Some((val.total, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    for (id, p) in store.iter() {
        model.store.set_value(id, p.value.clone())?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch,
    })
}

pub const METRICS_HEADER: &str = "epoch,rec,adv,dis,cyc,total,val_total";

/// CSV text of the metrics log; the accuracy column appears when every row
/// has one.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let with_acc = !rows.is_empty() && rows.iter().all(|r| r.val_acc.is_some());
    let mut out = String::from(METRICS_HEADER);
    if with_acc {
        out.push_str(",val_acc");
    }
    out.push('\n');
    for r in rows {
        let t = &r.train;
        let _ = write!(out, "{},{},{},{},{},{},{}", r.epoch, t.rec, t.adv, t.dis, t.cyc, t.total, r.val_total);
        if let (true, Some(a)) = (with_acc, r.val_acc) {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}
