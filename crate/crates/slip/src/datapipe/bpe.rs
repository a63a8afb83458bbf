//! Byte-level byte-pair encoding.
//!
//! The base alphabet is all 256 byte values, so encoding is total and
//! `decode(encode_bytes(text)) == text` exactly. Merges are learned
//! greedily by pair frequency with a deterministic tie-break
//! (lexicographically smallest pair of token byte strings) and never
//! cross whitespace-chunk boundaries; whitespace attaches to the word
//! it precedes so decoding is pure concatenation.
//!
//! Id layout: PAD=0, BOS=1, EOS=2, bytes 3..=258, merged tokens 259+.

use super::DataError;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const BYTE_BASE: u32 = 3;
/// Specials + byte alphabet; merge ids start here.
pub const FIRST_MERGE_ID: u32 = BYTE_BASE + 256;

/// A tokenized caption padded to a fixed context length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eos_position: usize,
}

impl TokenSequence {
    pub fn context_length(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    /// Rank-ordered merges as token-id pairs.
    merges: Vec<(u32, u32)>,
    /// Token id -> byte string, for every non-special id.
    token_bytes: Vec<Vec<u8>>,
    /// (left, right) -> merged id.
    pair_to_id: HashMap<(u32, u32), u32>,
}

impl BpeVocab {
    /// Byte-alphabet-only vocabulary (no merges).
    pub fn bytes_only() -> Self {
        BpeVocab {
            merges: Vec::new(),
            token_bytes: base_token_bytes(),
            pair_to_id: HashMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_BASE as usize + self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn bytes_of(&self, id: u32) -> Option<&[u8]> {
        if id < BYTE_BASE {
            return None;
        }
        self.token_bytes.get((id - BYTE_BASE) as usize).map(Vec::as_slice)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.bytes_of(left).expect("merge of special").to_vec();
        bytes.extend_from_slice(self.bytes_of(right).expect("merge of special"));
        let id = BYTE_BASE + self.token_bytes.len() as u32;
        self.token_bytes.push(bytes);
        self.merges.push((left, right));
        self.pair_to_id.insert((left, right), id);
        id
    }

    /// Byte-level encode without special tokens or case folding;
    /// exact inverse of [`BpeVocab::decode`].
    pub fn encode_bytes(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        for chunk in chunk_text(text.as_bytes()) {
            let mut ids: Vec<u32> = chunk.iter().map(|&b| BYTE_BASE + u32::from(b)).collect();
            loop {
                // lowest-rank (smallest id) applicable merge
                let mut best: Option<(u32, usize)> = None;
                for w in 0..ids.len().saturating_sub(1) {
                    if let Some(&id) = self.pair_to_id.get(&(ids[w], ids[w + 1])) {
                        if best.map_or(true, |(b, _)| id < b) {
                            best = Some((id, w));
                        }
                    }
                }
                let Some((id, _)) = best else { break };
                let (l, r) = self.merges[(id - FIRST_MERGE_ID) as usize];
                let mut merged = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                        merged.push(id);
                        i += 2;
                    } else {
                        merged.push(ids[i]);
                        i += 1;
                    }
                }
                ids = merged;
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenates token byte strings, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(b) = self.bytes_of(id) {
                bytes.extend_from_slice(b);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Writes the ordered merge list: a small header, then one merge per
    /// line as two hex-encoded byte strings.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        writeln!(out, "#bpe-vocab v1").unwrap();
        writeln!(out, "#specials pad={PAD_ID} bos={BOS_ID} eos={EOS_ID} byte_base={BYTE_BASE}").unwrap();
        for &(l, r) in &self.merges {
            writeln!(out, "{} {}", hex(self.bytes_of(l).unwrap()), hex(self.bytes_of(r).unwrap())).unwrap();
        }
        fs::write(path, out).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("#bpe-vocab v1") => {}
            _ => {
                return Err(DataError::Config(format!(
                    "{}: not a vocab file (missing header)",
                    path.display()
                )))
            }
        }
        let mut vocab = BpeVocab::bytes_only();
        let mut bytes_to_id: HashMap<Vec<u8>, u32> = (0u32..256)
            .map(|b| (vec![b as u8], BYTE_BASE + b))
            .collect();
        for line in lines {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (l, r) = (parts.next(), parts.next());
            let (Some(l), Some(r)) = (l, r) else {
                return Err(DataError::Config(format!("{}: malformed merge line", path.display())));
            };
            let (lb, rb) = (unhex(l, path)?, unhex(r, path)?);
            let (Some(&lid), Some(&rid)) = (bytes_to_id.get(&lb), bytes_to_id.get(&rb)) else {
                return Err(DataError::Config(format!(
                    "{}: merge references unknown token",
                    path.display()
                )));
            };
            let id = vocab.push_merge(lid, rid);
            let mut merged = lb;
            merged.extend_from_slice(&rb);
            bytes_to_id.insert(merged, id);
        }
        Ok(vocab)
    }
}

fn base_token_bytes() -> Vec<Vec<u8>> {
    (0u16..256).map(|b| vec![b as u8]).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str, path: &Path) -> Result<Vec<u8>, DataError> {
    if s.len() % 2 != 0 {
        return Err(DataError::Config(format!("{}: odd hex token", path.display())));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| DataError::Config(format!("{}: bad hex token", path.display())))
        })
        .collect()
}

/// Splits bytes into merge-isolated chunks. A run of whitespace attaches
/// to the non-whitespace run that follows it, so concatenating chunks
/// reproduces the input exactly.
fn chunk_text(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut prev_was_ws = true;
    for (i, &b) in bytes.iter().enumerate() {
        let is_ws = b.is_ascii_whitespace();
        if is_ws && !prev_was_ws && i > start {
            chunks.push(&bytes[start..i]);
            start = i;
        }
        prev_was_ws = is_ws;
    }
    if start < bytes.len() {
        chunks.push(&bytes[start..]);
    }
    chunks
}

/// Learns merges by greedy pair frequency until `target_vocab_size`
/// ids exist (or no adjacent pairs remain). Ties break to the
/// lexicographically smallest `(left bytes, right bytes)` pair.
pub fn bpe_train(corpus: &[String], target_vocab_size: usize) -> Result<BpeVocab, DataError> {
    let min = FIRST_MERGE_ID as usize;
    if target_vocab_size < min {
        return Err(DataError::Config(format!(
            "target vocab {target_vocab_size} below base alphabet + specials ({min})"
        )));
    }
    if corpus.is_empty() {
        return Err(DataError::Config("empty tokenizer training corpus".into()));
    }
    // chunk frequency table
    let mut chunk_counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for text in corpus {
        for chunk in chunk_text(text.as_bytes()) {
            *chunk_counts.entry(chunk.to_vec()).or_insert(0) += 1;
        }
    }
    let counts: Vec<u64> = chunk_counts.values().copied().collect();
    let mut words: Vec<Vec<u32>> = chunk_counts
        .keys()
        .map(|c| c.iter().map(|&b| BYTE_BASE + u32::from(b)).collect())
        .collect();

    let mut vocab = BpeVocab::bytes_only();
    let n_merges = target_vocab_size - min;
    for _ in 0..n_merges {
        let mut pair_freq: HashMap<(u32, u32), u64> = HashMap::new();
        for (word, &count) in words.iter().zip(&counts) {
            for w in word.windows(2) {
                *pair_freq.entry((w[0], w[1])).or_insert(0) += count;
            }
        }
        let Some(best) = pair_freq
            .iter()
            .map(|(&pair, &freq)| (pair, freq))
            .max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    // tie: smallest (left bytes, right bytes) wins, so compare reversed
                    let ka = (vocab.bytes_of(a.0 .0).unwrap(), vocab.bytes_of(a.0 .1).unwrap());
                    let kb = (vocab.bytes_of(b.0 .0).unwrap(), vocab.bytes_of(b.0 .1).unwrap());
                    kb.cmp(&ka)
                })
            })
        else {
            break; // every chunk is a single token
        };
        let ((l, r), _) = best;
        let id = vocab.push_merge(l, r);
        for word in words.iter_mut() {
            if word.len() < 2 {
                continue;
            }
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == l && word[i + 1] == r {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(word[i]);
                    i += 1;
                }
            }
            *word = merged;
        }
    }
    Ok(vocab)
}

/// Lowercases, encodes, truncates to fit, and frames with BOS/EOS/PAD.
pub fn bpe_encode(text: &str, vocab: &BpeVocab, context_length: usize) -> TokenSequence {
    assert!(context_length >= 3, "context_length must be >= 3");
    let mut body = vocab.encode_bytes(&text.to_lowercase());
    body.truncate(context_length - 2);
    let mut ids = Vec::with_capacity(context_length);
    ids.push(BOS_ID);
    ids.extend_from_slice(&body);
    let eos_position = ids.len();
    ids.push(EOS_ID);
    ids.resize(context_length, PAD_ID);
    TokenSequence { ids, eos_position }
}
