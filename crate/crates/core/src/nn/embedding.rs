use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::math::Matrix;
use super::NnError;
use crate::text::fnv1a64;

/// Reserved padding token. Normalization can never produce it.
pub const PAD_TOKEN: &str = "<pad>";

/// Half-width of the uniform range used for out-of-vocabulary vectors.
pub const OOV_RANGE: f64 = 0.1;

/// Word → row lookup table. Row 0 is the all-zero pad row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    words: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    oov_seed: u64,
}

impl EmbeddingTable {
    /// Table over `words` (pad prepended, duplicates dropped) with rows drawn
    /// uniformly from `[-range, range]`.
    pub fn random<S: Into<String>>(words: impl IntoIterator<Item = S>, dim: usize, range: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Self::empty(dim, seed);
        for w in words {
            let w = w.into();
            if table.index.contains_key(&w) {
                continue;
            }
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-range..=range)).collect();
            table.push(w, &row);
        }
        table
    }

    fn empty(dim: usize, oov_seed: u64) -> Self {
        let mut t = Self { index: HashMap::new(), words: Vec::new(), dim, data: Vec::new(), oov_seed };
        t.push(PAD_TOKEN.to_string(), &vec![0.0; dim]);
        t
    }

    fn push(&mut self, word: String, row: &[f64]) {
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(row);
    }

    /// Rebuilds a table from serialized rows. `words[0]` must be the pad token.
    pub fn from_rows(words: Vec<String>, dim: usize, data: Vec<f64>, oov_seed: u64) -> Result<Self, NnError> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(NnError::InvalidSpec("embedding row 0 must be the pad token".into()));
        }
        if data.len() != words.len() * dim || dim == 0 {
            return Err(NnError::DimensionMismatch { expected: words.len() * dim, found: data.len() });
        }
        if data[..dim].iter().any(|&x| x != 0.0) {
            return Err(NnError::InvalidSpec("pad row must be zero".into()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect::<HashMap<_, _>>();
        if index.len() != words.len() {
            return Err(NnError::InvalidSpec("duplicate vocabulary entry".into()));
        }
        Ok(Self { index, words, dim, data, oov_seed })
    }

    /// Parses the word2vec text format: a `count dim` line, then
    /// `word v1 … vdim` per line. The first occurrence of a word wins.
    pub fn from_word2vec(src: &str, oov_seed: u64) -> Result<Self, NnError> {
        let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, reason: &str| NnError::Format { line: line + 1, reason: reason.to_string() };
        let (i, head) = lines.next().ok_or_else(|| bad(0, "missing header"))?;
        let dims: Vec<usize> =
            head.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(i, "bad header"))?;
        let [count, dim] = dims[..] else { return Err(bad(i, "header must be `count dim`")) };
        if dim == 0 {
            return Err(bad(i, "zero dimension"));
        }
        let mut table = Self::empty(dim, oov_seed);
        let mut seen = 0;
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let word = parts.next().ok_or_else(|| bad(i, "missing word"))?;
            let row: Vec<f64> = parts.map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(i, "bad value"))?;
            if row.len() != dim || row.iter().any(|x| !x.is_finite()) {
                return Err(bad(i, "row does not have `dim` finite values"));
            }
            seen += 1;
            if word == PAD_TOKEN || table.index.contains_key(word) {
                continue;
            }
            table.push(word.to_string(), &row);
        }
        if seen != count {
            return Err(bad(i, &format!("header announces {count} rows, found {seen}")));
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows, pad included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn row_index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stable pseudo-random vector for a word outside the vocabulary.
    pub fn oov_vector(&self, token: &str) -> Vec<f64> {
        let seed = fnv1a64(token.as_bytes()) ^ self.oov_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| rng.gen_range(-OOV_RANGE..=OOV_RANGE)).collect()
    }

    fn write_vector(&self, token: &str, out: &mut [f64]) {
        match self.row_index(token) {
            Some(i) => out.copy_from_slice(self.row(i)),
            None => out.copy_from_slice(&self.oov_vector(token)),
        }
    }

    /// One row per token.
    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Matrix {
        let mut m = Matrix::zeros(tokens.len(), self.dim);
        for (t, tok) in tokens.iter().enumerate() {
            self.write_vector(tok.as_ref(), m.row_mut(t));
        }
        m
    }
}
