use rand::Rng;

use super::{RunCtx, SeqInput};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Uniform initialization range for weight matrices.
pub const INIT_SCALE: f64 = 0.08;

/// Gated recurrent unit with separate input and recurrent matrices per gate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub d_in: usize,
    pub d_h: usize,
    // Gate order: reset, update, candidate.
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let gates = ["r", "u", "n"];
        let w = gates.map(|g| store.add_uniform(format!("{prefix}.w_{g}"), &[d_in, d_h], INIT_SCALE, rng));
        let u = gates.map(|g| store.add_uniform(format!("{prefix}.u_{g}"), &[d_h, d_h], INIT_SCALE, rng));
        let b = gates.map(|g| store.add_zeros(format!("{prefix}.b_{g}"), &[d_h]));
        GruCell { d_in, d_h, w, u, b }
    }

    /// One step: `x: [batch, d_in]`, `h: [batch, d_h]` → `[batch, d_h]`.
    pub fn step<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let p = |id| tape.param(store, id);
        let r = x
            .matmul(p(self.w[0]))?
            .add(h.matmul(p(self.u[0]))?)?
            .add(p(self.b[0]))?
            .sigmoid();
        let u = x
            .matmul(p(self.w[1]))?
            .add(h.matmul(p(self.u[1]))?)?
            .add(p(self.b[1]))?
            .sigmoid();
        let n = x
            .matmul(p(self.w[2]))?
            .add(r.mul(h)?.matmul(p(self.u[2]))?)?
            .add(p(self.b[2]))?
            .tanh();
        // h' = u ⊙ h + (1 − u) ⊙ n
        n.add(u.mul(h.sub(n)?)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.w.iter().chain(&self.u).chain(&self.b).copied().collect()
    }
}

/// Per-step embedded inputs of a (hard or soft) batch and the row lengths.
pub fn embed_steps<'t>(
    tape: &'t Tape,
    table: Var<'t>,
    input: &SeqInput<'_, 't>,
) -> Result<(Vec<Var<'t>>, Vec<usize>)> {
    match input {
        SeqInput::Hard(seqs) => {
            if seqs.is_empty() {
                return Err(Error::EmptyInput("sequence batch"));
            }
            let lengths: Vec<usize> = seqs.iter().map(|s| s.true_len).collect();
            let steps = *lengths.iter().max().unwrap();
            let mut out = Vec::with_capacity(steps);
            for t in 0..steps {
                let ids: Vec<usize> = seqs.iter().map(|s| s.ids.get(t).copied().unwrap_or(PAD)).collect();
                out.push(table.gather(&ids)?);
            }
            let _ = tape;
            Ok((out, lengths))
        }
        SeqInput::Soft { steps, lengths } => {
            if steps.is_empty() {
                return Err(Error::EmptyInput("soft sequence"));
            }
            let out = steps
                .iter()
                .map(|p| p.matmul(table))
                .collect::<Result<Vec<_>>>()?;
            Ok((out, lengths.to_vec()))
        }
    }
}

/// Runs `cell` over the steps, freezing each row's state after its length.
pub fn run_gru<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cell: &GruCell,
    steps: &[Var<'t>],
    lengths: &[usize],
    h0: Var<'t>,
    ctx: &mut RunCtx,
) -> Result<Var<'t>> {
    let mut h = h0;
    for (t, x) in steps.iter().enumerate() {
        let x = ctx.dropout(*x)?;
        let next = cell.step(tape, store, x, h)?;
        let mask: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
        h = if mask.iter().all(|&m| m == 1.0) {
            next
        } else {
            next.blend_rows(h, &mask)?
        };
    }
    Ok(h)
}

/// Bank of 1-D convolutions with max-over-time pooling, one per width.
#[derive(Clone, Debug)]
pub struct ConvBank {
    pub widths: Vec<usize>,
    pub maps: usize,
    filters: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl ConvBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_emb: usize,
        widths: &[usize],
        maps: usize,
        rng: &mut R,
    ) -> Self {
        let mut filters = Vec::new();
        let mut biases = Vec::new();
        for &w in widths {
            filters.push(store.add_uniform(format!("{prefix}.conv{w}.filters"), &[w, d_emb, maps], INIT_SCALE, rng));
            biases.push(store.add_zeros(format!("{prefix}.conv{w}.bias"), &[maps]));
        }
        ConvBank {
            widths: widths.to_vec(),
            maps,
            filters,
            biases,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.widths.len() * self.maps
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    /// `[batch, len, d_emb]` → `[batch, widths·maps]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let pooled = self
            .filters
            .iter()
            .zip(&self.biases)
            .map(|(&f, &b)| tape.conv1d_maxpool(x, tape.param(store, f), tape.param(store, b)))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.filters.iter().chain(&self.biases).copied().collect()
    }
}

/// Looks up a padded id matrix as `[batch, len, d]`.
pub fn embed_padded<'t>(table: Var<'t>, rows: &[Vec<usize>]) -> Result<Var<'t>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("sequence batch"));
    }
    let len = rows[0].len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::spec("padded rows differ in length"));
    }
    let flat: Vec<usize> = rows.iter().flatten().copied().collect();
    let d = table.shape()[1];
    table.gather(&flat)?.reshape(&[rows.len(), len, d])
}

/// Text-CNN binary classifier: embeddings, convolution bank, ReLU, dropout
/// and a sigmoid output unit.
#[derive(Clone, Debug)]
pub struct TextCnn {
    pub emb: ParamId,
    pub convs: ConvBank,
    out_w: ParamId,
    out_b: ParamId,
}

impl TextCnn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        d_emb: usize,
        widths: &[usize],
        maps: usize,
        rng: &mut R,
    ) -> Self {
        let emb = store.add_uniform(format!("{prefix}.emb"), &[vocab, d_emb], INIT_SCALE, rng);
        let convs = ConvBank::new(store, prefix, d_emb, widths, maps, rng);
        let out_w = store.add_uniform(format!("{prefix}.out.w"), &[convs.out_dim(), 1], INIT_SCALE, rng);
        let out_b = store.add_zeros(format!("{prefix}.out.b"), &[1]);
        TextCnn {
            emb,
            convs,
            out_w,
            out_b,
        }
    }

    /// Logit of "target style" for embedded input `[batch, len, d]`: `[batch]`.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, ctx: &mut RunCtx) -> Result<Var<'t>> {
        let len = x.shape()[1];
        if len < self.convs.max_width() {
            return Err(Error::SequenceTooShort {
                len,
                width: self.convs.max_width(),
            });
        }
        let feats = self.convs.forward(tape, store, x)?.relu();
        let feats = ctx.dropout(feats)?;
        let batch = feats.shape()[0];
        feats
            .matmul(tape.param(store, self.out_w))?
            .add(tape.param(store, self.out_b))?
            .reshape(&[batch])
    }

    pub fn probs<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, ctx: &mut RunCtx) -> Result<Var<'t>> {
        Ok(self.logits(tape, store, x, ctx)?.sigmoid())
    }

    /// Embeds padded hard ids with this classifier's own table.
    pub fn embed_hard<'t>(&self, tape: &'t Tape, store: &ParamStore, rows: &[Vec<usize>]) -> Result<Var<'t>> {
        embed_padded(tape.param(store, self.emb), rows)
    }

    /// Expected embeddings of soft steps `[batch, vocab]`, stacked to
    /// `[batch, steps, d]`; `mask` zeroes positions past each row's length.
    pub fn embed_soft<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        steps: &[Var<'t>],
        mask: Option<&[f64]>,
    ) -> Result<Var<'t>> {
        let table = tape.param(store, self.emb);
        let emb = steps.iter().map(|p| p.matmul(table)).collect::<Result<Vec<_>>>()?;
        tape.stack_steps(&emb, mask)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb];
        ids.extend(self.convs.params());
        ids.push(self.out_w);
        ids.push(self.out_b);
        ids
    }
}

/// One-hot rows for a batch of padded id sequences, one `[batch, vocab]`
/// tensor per position.
pub fn one_hot_steps(rows: &[Vec<usize>], vocab: usize) -> Vec<Tensor> {
    let len = rows.first().map_or(0, Vec::len);
    (0..len)
        .map(|t| {
            let mut data = vec![0.0; rows.len() * vocab];
            for (b, r) in rows.iter().enumerate() {
                data[b * vocab + r[t]] = 1.0;
            }
            Tensor::from_parts(vec![rows.len(), vocab], data)
        })
        .collect()
}
