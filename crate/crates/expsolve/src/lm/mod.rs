//! Text → sample streams: tokenization, densification, and windowing.
//!
//! The pipeline runs corpus text through byte-pair encoding, derives the
//! observation-noise model from token counts, densifies the one-hot
//! embeddings, and featurizes sliding windows into training data. Padding
//! resets at blank-line document boundaries.

pub mod bpe;
pub mod engine;
pub mod noise;
pub mod window;

pub use bpe::{bpe_encode, bpe_train, BpeEncoder, TokenizerModel};
pub use engine::ContextEngine;
pub use noise::{build_noise_model, densify, DenseEmbeddingTable, NoiseModel};
pub use window::{document_split, featurize, sample_documents, WindowMode, WindowSpec};

use rayon::prelude::*;

use crate::error::Result;

/// A tokenized corpus with its noise model, ready to featurize at any
/// radius/mode combination.
pub struct LmData {
    pub tokenizer: TokenizerModel,
    pub table: DenseEmbeddingTable,
    pub train_docs: Vec<Vec<u32>>,
    pub dev_docs: Option<Vec<Vec<u32>>>,
    pub train_tokens: usize,
}

impl LmData {
    /// Tokenizes and densifies a corpus. A cached tokenizer skips training;
    /// `dev_fraction` thins the development documents with the given seed.
    pub fn prepare(
        train_text: &str,
        dev_text: Option<&str>,
        vocab_size: usize,
        dev_fraction: f64,
        dev_seed: u64,
        cached: Option<TokenizerModel>,
    ) -> Result<LmData> {
        let train_raw = document_split(train_text);
        let tokenizer = match cached {
            Some(t) => t,
            None => bpe_train(
                train_raw
                    .iter()
                    .flat_map(|doc| doc.split_whitespace()),
                vocab_size,
            )?,
        };
        let encode_all = |docs: &[String]| -> Vec<Vec<u32>> {
            docs.par_iter()
                .map_init(
                    || BpeEncoder::new(&tokenizer),
                    |enc, doc| enc.encode_text(doc),
                )
                .collect()
        };
        let train_docs = encode_all(&train_raw);
        let dev_docs = dev_text.map(|text| {
            let docs = document_split(text);
            let kept = sample_documents(&docs, dev_fraction, dev_seed);
            encode_all(&kept)
        });
        let train_tokens = train_docs.iter().map(Vec::len).sum();
        let noise = build_noise_model(
            train_docs.iter().flatten().copied().collect::<Vec<_>>(),
            tokenizer.vocab_size(),
        )?;
        let table = densify(&noise);
        Ok(LmData {
            tokenizer,
            table,
            train_docs,
            dev_docs,
            train_tokens,
        })
    }

    pub fn window_spec(&self, radius: usize, mode: WindowMode) -> Result<WindowSpec> {
        WindowSpec::new(radius, mode, self.tokenizer.pad_id())
    }

    /// Context engine over the training documents.
    pub fn train_engine(&self, radius: usize, mode: WindowMode) -> Result<ContextEngine> {
        ContextEngine::build(&self.train_docs, &self.table, self.window_spec(radius, mode)?)
    }

    /// Context engine over the (thinned) development documents, featurized
    /// with the training noise model.
    pub fn dev_engine(&self, radius: usize, mode: WindowMode) -> Result<Option<ContextEngine>> {
        match &self.dev_docs {
            Some(docs) => Ok(Some(ContextEngine::build(
                docs,
                &self.table,
                self.window_spec(radius, mode)?,
            )?)),
            None => Ok(None),
        }
    }
}
