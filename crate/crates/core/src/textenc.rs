//! Hash-vocabulary prompt encoder and longest-common-subsequence token alignment.

use serde::{Deserialize, Serialize};

/// Embedding width.
pub const EMBED_DIM: usize = 32;

/// Token id of the empty prompt.
pub const NULL_TOKEN: u16 = 0;

/// Seed of the embedding table. Part of every model fingerprint, so changing
/// it invalidates trained models.
pub const VOCAB_HASH: u64 = 0x6172_6564_6974_7631;

/// A tokenized prompt with one embedding row per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub token_ids: Vec<u16>,
    /// Row-major `L x EMBED_DIM`.
    pub vectors: Vec<f32>,
    pub vocab_hash: u64,
}

impl PromptEmbedding {
    pub fn from_token_ids(token_ids: Vec<u16>) -> Self {
        let token_ids = if token_ids.is_empty() { vec![NULL_TOKEN] } else { token_ids };
        let vectors = token_ids.iter().flat_map(|&t| token_vector(t)).collect();
        PromptEmbedding {
            token_ids,
            vectors,
            vocab_hash: VOCAB_HASH,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    /// Mean of the token rows, accumulated in `f64`.
    pub fn mean_vector(&self) -> Vec<f32> {
        let mut acc = [0.0f64; EMBED_DIM];
        for i in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(self.vector(i)) {
                *a += v as f64;
            }
        }
        acc.iter().map(|&a| (a / self.len() as f64) as f32).collect()
    }
}

/// FNV-1a over the word's bytes, xor-folded to 16 bits; 0 is reserved.
pub fn word_token(word: &str) -> u16 {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    match ((h >> 16) ^ (h & 0xffff)) as u16 {
        NULL_TOKEN => 1,
        t => t,
    }
}

pub fn tokenize(text: &str) -> Vec<u16> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(word_token)
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Embedding row for one token: entries uniform in `[-1, 1)`; NULL is all zeros.
pub fn token_vector(token: u16) -> Vec<f32> {
    if token == NULL_TOKEN {
        return vec![0.0; EMBED_DIM];
    }
    let base = splitmix(VOCAB_HASH ^ token as u64);
    (0..EMBED_DIM as u64)
        .map(|c| {
            let bits = splitmix(base.wrapping_add(c)) >> 40;
            (bits as f64 / (1u64 << 24) as f64 * 2.0 - 1.0) as f32
        })
        .collect()
}

pub fn encode_prompt(text: &str) -> PromptEmbedding {
    PromptEmbedding::from_token_ids(tokenize(text))
}

/// For every target token, the index of its partner source token under a
/// longest common subsequence of token ids, or `None`.
///
/// Among equally long subsequences the one using the earliest source tokens wins.
pub fn align_tokens(src: &PromptEmbedding, tgt: &PromptEmbedding) -> Vec<Option<usize>> {
    let (a, b) = (&src.token_ids, &tgt.token_ids);
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..].
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut out = vec![None; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && suffix[i][j] == suffix[i + 1][j + 1] + 1 {
            out[j] = Some(i);
            i += 1;
            j += 1;
        } else if suffix[i][j + 1] >= suffix[i + 1][j] {
            // Skipping the target token keeps source token i available.
            j += 1;
        } else {
            i += 1;
        }
    }
    out
}
