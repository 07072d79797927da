//! Networks of the transfer model and the standalone style classifiers.

mod checkpoint;
mod classifier;
mod layers;
mod transfer;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_records, read_checkpoint, restore, save_checkpoint};
pub use classifier::{
    accuracy, padded_rows, train_classifier, ClassifierConfig, ClassifierDims, ClassifierReport,
    StyleClassifier,
};
pub use layers::{embed_padded, embed_steps, one_hot_steps, ConvBank, GruCell, TextCnn, INIT_SCALE};
pub use transfer::{ModelDims, TransferModel, SOFT_TEMPERATURE};

use crate::corpus::TokenSeq;
use crate::error::Result;
use crate::tensor::Var;

/// Input to a sequence encoder: integer ids, or one distribution over the
/// vocabulary per step with explicit row lengths.
pub enum SeqInput<'a, 't> {
    Hard(&'a [TokenSeq]),
    Soft {
        steps: &'a [Var<'t>],
        lengths: &'a [usize],
    },
}

/// Forward-pass mode: dropout rate and the generator for its masks.
/// A rate of zero is evaluation mode.
#[derive(Clone, Debug)]
pub struct RunCtx {
    dropout: f64,
    rng: ChaCha8Rng,
}

impl RunCtx {
    pub fn train(dropout: f64, seed: u64) -> Self {
        RunCtx {
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self::train(0.0, 0)
    }

    pub fn is_training(&self) -> bool {
        self.dropout > 0.0
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = x.with_value(|v| v.len());
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.dropout_mask(mask)
    }
}
