use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{embed_padded, embed_steps, run_gru, ConvBank, GruCell, TextCnn, INIT_SCALE};
use super::{checkpoint, RunCtx, SeqInput};
use crate::corpus::{Domain, TokenSeq, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Softmax temperature of the continuous generator outputs.
pub const SOFT_TEMPERATURE: f64 = 0.5;

/// Layer sizes of a [`TransferModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_emb: usize,
    /// Content vector size.
    pub d_z: usize,
    /// Filter widths of the style encoder; the style vector has
    /// `style_widths.len() · style_maps` entries.
    pub style_widths: Vec<usize>,
    pub style_maps: usize,
    pub disc_widths: Vec<usize>,
    pub disc_maps: usize,
}

impl ModelDims {
    /// Full-size configuration: 200-d embeddings, 1000-d content, 500-d style.
    pub fn paper(vocab: usize) -> Self {
        ModelDims {
            vocab,
            d_emb: 200,
            d_z: 1000,
            style_widths: vec![1, 2, 3, 4, 5],
            style_maps: 100,
            disc_widths: vec![1, 2, 3, 4, 5],
            disc_maps: 100,
        }
    }

    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk(vocab: usize) -> Self {
        ModelDims {
            vocab,
            d_emb: 32,
            d_z: 64,
            style_widths: vec![1, 2, 3, 4, 5],
            style_maps: 4,
            disc_widths: vec![1, 2, 3, 4, 5],
            disc_maps: 16,
        }
    }

    pub fn d_y(&self) -> usize {
        self.style_widths.len() * self.style_maps
    }

    /// Generator state size: content plus style.
    pub fn d_hidden(&self) -> usize {
        self.d_z + self.d_y()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab, self.d_emb, self.d_z, self.style_maps, self.disc_maps];
        if positive.contains(&0)
            || self.style_widths.is_empty()
            || self.disc_widths.is_empty()
            || self.style_widths.contains(&0)
            || self.disc_widths.contains(&0)
        {
            return Err(Error::spec(format!("degenerate model dimensions {self:?}")));
        }
        if self.vocab <= crate::corpus::RESERVED.len() {
            return Err(Error::spec("vocabulary has no real tokens"));
        }
        Ok(())
    }
}

/// Content encoder, style encoder with the learned target style, generator
/// and adversarial discriminator, all in one parameter store.
///
/// Parameter names partition the store by role: `emb` (shared by the content
/// encoder and the generator), `ez.*`, `ey.*` with `ystar`, `g.*` and `d.*`.
#[derive(Debug)]
pub struct TransferModel {
    pub store: ParamStore,
    pub dims: ModelDims,
    emb: ParamId,
    content: GruCell,
    style_emb: ParamId,
    style_convs: ConvBank,
    target_style: ParamId,
    decoder: GruCell,
    out_w: ParamId,
    out_b: ParamId,
    pub disc: TextCnn,
}

impl TransferModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.add_uniform("emb", &[dims.vocab, dims.d_emb], INIT_SCALE, &mut rng);
        let content = GruCell::new(&mut store, "ez", dims.d_emb, dims.d_z, &mut rng);
        let style_emb = store.add_uniform("ey.emb", &[dims.vocab, dims.d_emb], INIT_SCALE, &mut rng);
        let style_convs = ConvBank::new(&mut store, "ey", dims.d_emb, &dims.style_widths, dims.style_maps, &mut rng);
        let target_style = store.add_uniform("ystar", &[dims.d_y()], INIT_SCALE, &mut rng);
        let decoder = GruCell::new(&mut store, "g", dims.d_emb, dims.d_hidden(), &mut rng);
        let out_w = store.add_uniform("g.out.w", &[dims.d_hidden(), dims.vocab], INIT_SCALE, &mut rng);
        let out_b = store.add_zeros("g.out.b", &[dims.vocab]);
        let disc = TextCnn::new(
            &mut store,
            "d",
            dims.vocab,
            dims.d_emb,
            &dims.disc_widths,
            dims.disc_maps,
            &mut rng,
        );
        Ok(TransferModel {
            store,
            dims,
            emb,
            content,
            style_emb,
            style_convs,
            target_style,
            decoder,
            out_w,
            out_b,
            disc,
        })
    }

    /// Content vectors `[batch, d_z]`: final state of the encoder GRU, with
    /// each row frozen after its true length.
    pub fn encode_content<'t>(&self, tape: &'t Tape, input: &SeqInput<'_, 't>, ctx: &mut RunCtx) -> Result<Var<'t>> {
        let (steps, lengths) = embed_steps(tape, tape.param(&self.store, self.emb), input)?;
        let batch = lengths.len();
        let h0 = tape.constant(Tensor::zeros(&[batch, self.dims.d_z]));
        run_gru(tape, &self.store, &self.content, &steps, &lengths, h0, ctx)
    }

    /// The learned target-style vector `[d_y]`.
    pub fn target_style<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(&self.store, self.target_style)
    }

    /// Style-encoder features `[batch, d_y]` of real sentences.
    pub fn style_features<'t>(&self, tape: &'t Tape, seqs: &[TokenSeq]) -> Result<Var<'t>> {
        let rows: Vec<Vec<usize>> = seqs.iter().map(|s| s.ids.clone()).collect();
        let len = rows.first().map_or(0, Vec::len);
        if len < self.style_convs.max_width() {
            return Err(Error::SequenceTooShort {
                len,
                width: self.style_convs.max_width(),
            });
        }
        let x = embed_padded(tape.param(&self.store, self.style_emb), &rows)?;
        self.style_convs.forward(tape, &self.store, x)
    }

    /// Style vectors `[batch, d_y]`: encoder features for source sentences,
    /// the target-style vector itself for target sentences.
    pub fn encode_style<'t>(&self, tape: &'t Tape, seqs: &[TokenSeq]) -> Result<Var<'t>> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("style batch"));
        }
        let target = self.target_style(tape).repeat_rows(seqs.len())?;
        let mask: Vec<f64> = seqs
            .iter()
            .map(|s| if s.domain == Domain::Source { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().all(|&m| m == 0.0) {
            return Ok(target);
        }
        let feats = self.style_features(tape, seqs)?;
        if mask.iter().all(|&m| m == 1.0) {
            return Ok(feats);
        }
        feats.blend_rows(target, &mask)
    }

    fn initial_state<'t>(&self, tape: &'t Tape, z: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let h = tape.concat(&[z, y])?;
        if h.shape().len() != 2 || h.shape()[1] != self.dims.d_hidden() {
            return Err(Error::Dimension {
                op: "generator state",
                lhs: z.shape(),
                rhs: y.shape(),
            });
        }
        Ok(h)
    }

    fn logits<'t>(&self, tape: &'t Tape, h: Var<'t>, ctx: &mut RunCtx) -> Result<Var<'t>> {
        ctx.dropout(h)?
            .matmul(tape.param(&self.store, self.out_w))?
            .add(tape.param(&self.store, self.out_b))
    }

    fn bos<'t>(&self, tape: &'t Tape, batch: usize) -> Result<Var<'t>> {
        tape.param(&self.store, self.emb).gather(&vec![BOS; batch])
    }

    /// Teacher-forced negative log-likelihood of `targets` given `(z, y)`,
    /// one summed value per sentence: `[batch]`. Positions past a row's
    /// true length contribute nothing.
    pub fn sequence_nll<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        y: Var<'t>,
        targets: &[TokenSeq],
        ctx: &mut RunCtx,
    ) -> Result<Var<'t>> {
        if targets.is_empty() {
            return Err(Error::EmptyInput("target batch"));
        }
        let batch = targets.len();
        let steps = targets.iter().map(|s| s.true_len).max().unwrap();
        let table = tape.param(&self.store, self.emb);
        let mut h = self.initial_state(tape, z, y)?;
        let mut x = self.bos(tape, batch)?;
        let mut total: Option<Var<'t>> = None;
        for t in 0..steps {
            h = self.decoder.step(tape, &self.store, ctx.dropout(x)?, h)?;
            let gold: Vec<usize> = targets.iter().map(|s| s.ids[t]).collect();
            let weights: Vec<f64> = targets
                .iter()
                .map(|s| if t < s.true_len { 1.0 } else { 0.0 })
                .collect();
            let ce = self.logits(tape, h, ctx)?.cross_entropy(&gold, &weights)?;
            total = Some(match total {
                Some(acc) => acc.add(ce)?,
                None => ce,
            });
            if t + 1 < steps {
                x = table.gather(&gold)?;
            }
        }
        Ok(total.unwrap())
    }

    /// Continuous generation: `steps` distributions `[batch, vocab]`, each the
    /// temperature softmax of the logits, fed back as expected embeddings.
    pub fn generate_soft<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        y: Var<'t>,
        steps: usize,
        temperature: f64,
        ctx: &mut RunCtx,
    ) -> Result<Vec<Var<'t>>> {
        if steps == 0 {
            return Err(Error::spec("generation needs at least one step"));
        }
        let batch = z.shape()[0];
        let table = tape.param(&self.store, self.emb);
        let mut h = self.initial_state(tape, z, y)?;
        let mut x = self.bos(tape, batch)?;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            h = self.decoder.step(tape, &self.store, ctx.dropout(x)?, h)?;
            let p = self.logits(tape, h, ctx)?.softmax(temperature)?;
            if t + 1 < steps {
                x = p.matmul(table)?;
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Greedy decoding: at most `max_tokens` ids per row, stopping at the
    /// first EOS (not included). Ties go to the lowest id.
    pub fn generate_greedy(&self, z: &Tensor, y: &Tensor, max_tokens: usize) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let mut ctx = RunCtx::eval();
        let z = tape.constant(z.clone());
        let y = tape.constant(y.clone());
        let batch = z.shape()[0];
        let table = tape.param(&self.store, self.emb);
        let mut h = self.initial_state(&tape, z, y)?;
        let mut x = self.bos(&tape, batch)?;
        let mut out = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for _ in 0..max_tokens {
            h = self.decoder.step(&tape, &self.store, x, h)?;
            let logits = self.logits(&tape, h, &mut ctx)?.value();
            let picks: Vec<usize> = (0..batch).map(|b| argmax(logits.row(b))).collect();
            for (b, &id) in picks.iter().enumerate() {
                if done[b] {
                    continue;
                }
                if id == EOS {
                    done[b] = true;
                } else {
                    out[b].push(id);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            // Detach so the tape stays shallow across steps.
            h = h.detach();
            x = table.gather(&picks)?.detach();
        }
        Ok(out)
    }

    /// Greedy transfer of real sentences into the target style: content of
    /// each sentence, target-style vector, generator.
    pub fn transfer(&self, seqs: &[TokenSeq]) -> Result<Vec<Vec<usize>>> {
        let mut outputs = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let tape = Tape::new();
            let z = self.encode_content(&tape, &SeqInput::Hard(chunk), &mut RunCtx::eval())?;
            let y = self.target_style(&tape).repeat_rows(chunk.len())?;
            let max_tokens = chunk[0].max_len() - 1;
            outputs.extend(self.generate_greedy(&z.value(), &y.value(), max_tokens)?);
        }
        Ok(outputs)
    }

    /// Discriminator probability of "target domain" for soft sequences.
    pub fn discriminate_soft<'t>(
        &self,
        tape: &'t Tape,
        steps: &[Var<'t>],
        lengths: &[usize],
        ctx: &mut RunCtx,
    ) -> Result<Var<'t>> {
        let t_len = steps.len();
        let mask: Vec<f64> = lengths
            .iter()
            .flat_map(|&l| (0..t_len).map(move |t| if t < l { 1.0 } else { 0.0 }))
            .collect();
        let x = self.disc.embed_soft(tape, &self.store, steps, Some(&mask))?;
        self.disc.probs(tape, &self.store, x, ctx)
    }

    fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| {
                prefixes
                    .iter()
                    .any(|pre| p.name == *pre || p.name.starts_with(&format!("{pre}.")))
            })
            .map(|(id, _)| id)
            .collect()
    }

    pub fn content_encoder_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["emb", "ez"])
    }

    /// Style encoder weights together with the target-style vector.
    pub fn style_encoder_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["ey", "ystar"])
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["emb", "g"])
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.disc.params()
    }

    /// Everything except the discriminator.
    pub fn transfer_params(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["emb", "ez", "ey", "ystar", "g"])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.store, path)
    }

    /// Rebuilds a model from a checkpoint, inferring every size from the
    /// stored shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let records = checkpoint::read_checkpoint(path)?;
        let dims = infer_dims(&records)?;
        let mut model = TransferModel::new(dims, 0)?;
        checkpoint::restore(&mut model.store, records)?;
        Ok(model)
    }
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn shape_of<'a>(records: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a [usize]> {
    records
        .get(name)
        .map(|t| t.shape())
        .ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))
}

/// Widths and map count of the convolution bank stored under `prefix`.
pub(crate) fn conv_bank_dims(records: &BTreeMap<String, Tensor>, prefix: &str) -> Result<(Vec<usize>, usize)> {
    let mut widths = Vec::new();
    let mut maps = None;
    for (name, t) in records {
        let Some(rest) = name.strip_prefix(&format!("{prefix}.conv")) else {
            continue;
        };
        let Some(w) = rest.strip_suffix(".filters") else {
            continue;
        };
        let w: usize = w
            .parse()
            .map_err(|_| Error::format(format!("bad filter name {name}")))?;
        if t.shape().len() != 3 || t.shape()[0] != w {
            return Err(Error::format(format!("{name} has shape {:?}", t.shape())));
        }
        if maps.replace(t.shape()[2]).is_some_and(|m| m != t.shape()[2]) {
            return Err(Error::format(format!("{prefix} filters disagree on map count")));
        }
        widths.push(w);
    }
    widths.sort_unstable();
    let maps = maps.ok_or_else(|| Error::format(format!("checkpoint lacks {prefix} filters")))?;
    Ok((widths, maps))
}

fn infer_dims(records: &BTreeMap<String, Tensor>) -> Result<ModelDims> {
    let emb = shape_of(records, "emb")?;
    let enc = shape_of(records, "ez.u_r")?;
    if emb.len() != 2 || enc.len() != 2 {
        return Err(Error::format("embedding or encoder is not a matrix"));
    }
    let (style_widths, style_maps) = conv_bank_dims(records, "ey")?;
    let (disc_widths, disc_maps) = conv_bank_dims(records, "d")?;
    Ok(ModelDims {
        vocab: emb[0],
        d_emb: emb[1],
        d_z: enc[0],
        style_widths,
        style_maps,
        disc_widths,
        disc_maps,
    })
}
