//! Training objective: reconstruction, adversarial, style-discrepancy and
//! cycle-consistency terms and their weighted combination.
//!
//! Every term is a batch mean. The `*_loss` functions build a term from raw
//! batches; the lower-level pieces let a training step share encodings and
//! soft generations between terms.

use rand::Rng;

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{RunCtx, SeqInput, StyleClassifier, TransferModel, SOFT_TEMPERATURE};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities entering a logarithm are clamped to `[EPS, 1 − EPS]`.
pub const EPS: f64 = 1e-7;

/// Balancing weights of the adversarial, cycle and discrepancy terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub cyc: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            cyc: 1.0,
            dis: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.adv, self.cyc, self.dis].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::spec(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub dis: f64,
    pub cyc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rec: f64, adv: f64, dis: f64, cyc: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            rec,
            adv,
            dis,
            cyc,
            total: total_loss(rec, adv, cyc, dis, w),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.adv, self.dis, self.cyc, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// `rec − λ_adv·adv + λ_cyc·cyc + λ_dis·dis`.
pub fn total_loss(rec: f64, adv: f64, cyc: f64, dis: f64, w: &LossWeights) -> f64 {
    rec - w.adv * adv + w.cyc * cyc + w.dis * dis
}

/// `‖y_s − y*‖₂`.
pub fn style_discrepancy(y_s: &[f64], y_star: &[f64]) -> Result<f64> {
    if y_s.len() != y_star.len() {
        return Err(Error::Dimension {
            op: "style_discrepancy",
            lhs: vec![y_s.len()],
            rhs: vec![y_star.len()],
        });
    }
    Ok(y_s
        .iter()
        .zip(y_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Standard normal density of the discrepancy, `exp(−d²/2)/√(2π)`.
pub fn discrepancy_density(d: f64) -> f64 {
    (-0.5 * d * d).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Content and style encodings of a source and a target batch.
pub struct Encodings<'t> {
    pub z_s: Var<'t>,
    pub z_t: Var<'t>,
    /// Style-encoder output for the source batch `[n_s, d_y]`.
    pub y_s: Var<'t>,
    /// Target-style vector `[d_y]`.
    pub y_star: Var<'t>,
}

impl<'t> Encodings<'t> {
    pub fn new(
        tape: &'t Tape,
        model: &TransferModel,
        batch_s: &[TokenSeq],
        batch_t: &[TokenSeq],
        ctx: &mut RunCtx,
    ) -> Result<Self> {
        if batch_s.is_empty() || batch_t.is_empty() {
            return Err(Error::EmptyInput("source or target batch"));
        }
        Ok(Encodings {
            z_s: model.encode_content(tape, &SeqInput::Hard(batch_s), ctx)?,
            z_t: model.encode_content(tape, &SeqInput::Hard(batch_t), ctx)?,
            y_s: model.style_features(tape, batch_s)?,
            y_star: model.target_style(tape),
        })
    }

    fn y_star_rows(&self, n: usize) -> Result<Var<'t>> {
        self.y_star.repeat_rows(n)
    }
}

/// Soft generations with the target style: transfers of the source batch
/// and reconstructions of the target batch, each as long as its batch's
/// longest sentence.
pub struct SoftTransfers<'t> {
    pub temperature: f64,
    pub source: Vec<Var<'t>>,
    pub target: Vec<Var<'t>>,
    pub lengths_s: Vec<usize>,
    pub lengths_t: Vec<usize>,
}

fn lengths(batch: &[TokenSeq]) -> Vec<usize> {
    batch.iter().map(|s| s.true_len).collect()
}

impl<'t> SoftTransfers<'t> {
    pub fn new(
        tape: &'t Tape,
        model: &TransferModel,
        enc: &Encodings<'t>,
        batch_s: &[TokenSeq],
        batch_t: &[TokenSeq],
        temperature: f64,
        ctx: &mut RunCtx,
    ) -> Result<Self> {
        let lengths_s = lengths(batch_s);
        let lengths_t = lengths(batch_t);
        let steps_s = *lengths_s.iter().max().unwrap();
        let steps_t = *lengths_t.iter().max().unwrap();
        let source = model.generate_soft(
            tape,
            enc.z_s,
            enc.y_star_rows(batch_s.len())?,
            steps_s,
            temperature,
            ctx,
        )?;
        let target = model.generate_soft(
            tape,
            enc.z_t,
            enc.y_star_rows(batch_t.len())?,
            steps_t,
            temperature,
            ctx,
        )?;
        Ok(SoftTransfers {
            temperature,
            source,
            target,
            lengths_s,
            lengths_t,
        })
    }

    /// Copies of the generations on another tape, cut from the graph.
    pub fn detached_onto<'u>(&self, tape: &'u Tape) -> SoftTransfers<'u> {
        let copy = |steps: &[Var<'t>]| steps.iter().map(|p| tape.constant(p.value())).collect();
        SoftTransfers {
            temperature: self.temperature,
            source: copy(&self.source),
            target: copy(&self.target),
            lengths_s: self.lengths_s.clone(),
            lengths_t: self.lengths_t.clone(),
        }
    }
}

/// Mean per-sentence NLL of the source batch given `(z_s, y_s)` plus that
/// of the target batch given `(z_t, y*)`.
pub fn reconstruction_terms<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    enc: &Encodings<'t>,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let src = model.sequence_nll(tape, enc.z_s, enc.y_s, batch_s, ctx)?.mean();
    let tgt = model
        .sequence_nll(tape, enc.z_t, enc.y_star_rows(batch_t.len())?, batch_t, ctx)?
        .mean();
    src.add(tgt)
}

/// `mean −log(1 − D(transfer)) + mean −log D(target reconstruction)` from
/// discriminator probabilities.
pub fn adversarial_from_probs<'t>(d_transfer: Var<'t>, d_target: Var<'t>) -> Result<Var<'t>> {
    let fake = d_transfer.clamp(EPS, 1.0 - EPS).one_minus().log()?.mean().neg();
    let real = d_target.clamp(EPS, 1.0 - EPS).log()?.mean().neg();
    fake.add(real)
}

/// Adversarial term of soft generations under the model's discriminator.
pub fn adversarial_terms<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    soft: &SoftTransfers<'t>,
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let d_s = model.discriminate_soft(tape, &soft.source, &soft.lengths_s, ctx)?;
    let d_t = model.discriminate_soft(tape, &soft.target, &soft.lengths_t, ctx)?;
    adversarial_from_probs(d_s, d_t)
}

/// `mean p·‖y_s − y*‖²` with fixed weights `p` (one per source row).
pub fn discrepancy_terms<'t>(y_s: Var<'t>, y_star: Var<'t>, p_target: &[f64]) -> Result<Var<'t>> {
    let rows = y_s.shape()[0];
    if p_target.len() != rows {
        return Err(Error::Dimension {
            op: "style_discrepancy_loss",
            lhs: y_s.shape(),
            rhs: vec![p_target.len()],
        });
    }
    let d = y_s.sub(y_star)?.row_norms()?;
    let p = y_s.tape().constant(Tensor::vector(p_target.to_vec()));
    Ok(d.mul(d)?.mul(p)?.mean())
}

/// Cycle term. Source side: re-encode the soft transfer and score the
/// original given `(z̃_s, y_s)`. Target side: transfer each target sentence
/// with the style of source row `picks[j]`, re-encode and score the original
/// given `(z̃_t, y*)`.
#[allow(clippy::too_many_arguments)]
pub fn cycle_terms<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    enc: &Encodings<'t>,
    soft: &SoftTransfers<'t>,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    picks: &[usize],
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let z_back_s = model.encode_content(
        tape,
        &SeqInput::Soft {
            steps: &soft.source,
            lengths: &soft.lengths_s,
        },
        ctx,
    )?;
    let src = model.sequence_nll(tape, z_back_s, enc.y_s, batch_s, ctx)?.mean();

    let y_pick = enc.y_s.select_rows(picks)?;
    let steps_t = soft.target.len();
    let away = model.generate_soft(tape, enc.z_t, y_pick, steps_t, soft.temperature, ctx)?;
    let z_back_t = model.encode_content(
        tape,
        &SeqInput::Soft {
            steps: &away,
            lengths: &soft.lengths_t,
        },
        ctx,
    )?;
    let tgt = model
        .sequence_nll(tape, z_back_t, enc.y_star_rows(batch_t.len())?, batch_t, ctx)?
        .mean();
    src.add(tgt)
}

/// Uniform per-sample choice of a source row for every target sentence.
pub fn draw_style_picks<R: Rng>(rng: &mut R, n_source: usize, n_target: usize) -> Result<Vec<usize>> {
    if n_source == 0 {
        return Err(Error::spec("no source styles to choose from"));
    }
    Ok((0..n_target).map(|_| rng.gen_range(0..n_source)).collect())
}

pub fn reconstruction_loss<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let enc = Encodings::new(tape, model, batch_s, batch_t, ctx)?;
    reconstruction_terms(tape, model, &enc, batch_s, batch_t, ctx)
}

pub fn adversarial_loss<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let enc = Encodings::new(tape, model, batch_s, batch_t, ctx)?;
    let soft = SoftTransfers::new(tape, model, &enc, batch_s, batch_t, SOFT_TEMPERATURE, ctx)?;
    adversarial_terms(tape, model, &soft, ctx)
}

/// Discrepancy term with `p` from the frozen classifier on the real source
/// sentences.
pub fn style_discrepancy_loss<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    batch_s: &[TokenSeq],
    ds: &StyleClassifier,
) -> Result<Var<'t>> {
    if !ds.store.is_frozen() {
        return Err(Error::spec("style-discrepancy classifier must be frozen"));
    }
    if batch_s.is_empty() {
        return Err(Error::EmptyInput("source batch"));
    }
    let p = ds.probs_seqs(batch_s)?;
    let y_s = model.style_features(tape, batch_s)?;
    discrepancy_terms(y_s, model.target_style(tape), &p)
}

pub fn cycle_consistency_loss<'t>(
    tape: &'t Tape,
    model: &TransferModel,
    batch_s: &[TokenSeq],
    batch_t: &[TokenSeq],
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    if batch_s.is_empty() {
        return Err(Error::spec("no source styles to choose from"));
    }
    let enc = Encodings::new(tape, model, batch_s, batch_t, ctx)?;
    let soft = SoftTransfers::new(tape, model, &enc, batch_s, batch_t, SOFT_TEMPERATURE, ctx)?;
    let picks = draw_style_picks(ctx.rng(), batch_s.len(), batch_t.len())?;
    cycle_terms(tape, model, &enc, &soft, batch_s, batch_t, &picks, ctx)
}
