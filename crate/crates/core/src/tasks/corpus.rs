//! Byte-level text corpus for small language-model runs.

use std::path::Path;

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    bytes: Vec<u8>,
    /// Bytes before this offset are training data, the rest validation.
    split: usize,
    /// Observed byte values in ascending order; a byte's id is its index.
    vocab: Vec<u8>,
    ids: Vec<usize>,
}

impl CharCorpus {
    /// Holds out the final `valid_fraction` of `bytes` for validation.
    pub fn from_bytes(bytes: Vec<u8>, valid_fraction: f64) -> Result<Self> {
        ensure!(bytes.len() >= 4, Contract, "corpus of {} bytes is too short to split", bytes.len());
        ensure!(
            valid_fraction > 0.0 && valid_fraction < 1.0,
            Contract,
            "validation fraction {} outside (0, 1)",
            valid_fraction
        );
        let split = ((bytes.len() as f64 * (1.0 - valid_fraction)).round() as usize).clamp(2, bytes.len() - 2);
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [0usize; 256];
        for (i, &b) in vocab.iter().enumerate() {
            index[b as usize] = i;
        }
        let ids = bytes.iter().map(|&b| index[b as usize]).collect();
        Ok(Self { bytes, split, vocab, ids })
    }

    pub fn from_file(path: &Path, valid_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Contract(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::from_bytes(bytes, valid_fraction)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[u8] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[self.split..]
    }

    /// Ids of `text`; bytes never seen in the corpus are an error.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        text.iter()
            .map(|b| self.vocab.binary_search(b).map_err(|_| Error::Contract(format!("byte {b:#04x} is not in the vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }
}
