//! Corpus preparation: vocabulary, encoding, splitting, data selection and
//! synthetic style corpora.

pub mod io;
mod moore_lewis;
mod split;
mod synthetic;
mod vocab;

pub use moore_lewis::{moore_lewis_select, MooreLewis, NgramModel};
pub use split::{check_disjoint, sentence_key, three_way_split, Part, PartSpec, SplitSpec, ThreeWaySplit};
pub use synthetic::{gen_synthetic, sentence, Style, StyleMix, SyntheticCorpus};
pub use vocab::{tokenize, Domain, TokenSeq, Vocab, BOS, EOS, PAD, RESERVED, UNK};
