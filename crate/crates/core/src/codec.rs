//! Static frequent-sequence dictionary codec.
//!
//! A dictionary maps fixed-length byte sequences to 16-bit codewords
//! `1..=65534`, ranked by how often each sequence occurs as an overlapping
//! window across all code streams of a model. Compression walks a stream in
//! aligned, non-overlapping blocks of `L` bytes:
//!
//! * block in the dictionary: emit its codeword;
//! * block not in the dictionary: emit `0xFFFF` then the `L` bytes, each
//!   widened to a 16-bit word;
//! * a final tail of `t < L` bytes: emit `0xFFFF` then the `t` bytes.
//!
//! Word `0` is never assigned. Because a tail escape carries fewer than `L`
//! raw words, the decoder bounds every raw read by the stream's original
//! length.

use std::cmp::Ordering;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::quantizer::{QuantParams, QuantizedTensor};

/// Marks raw bytes in a word stream.
pub const ESCAPE: u16 = 0xFFFF;
/// Largest dictionary: every word except `0` and [`ESCAPE`].
pub const MAX_CODEWORDS: usize = 65534;
pub const DEFAULT_SEQUENCE_LENGTH: usize = 4;

/// Overlapping-window occurrence counts of `L`-byte sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceCounts {
    seq_len: usize,
    counts: FxHashMap<Box<[u8]>, u64>,
}

impl SequenceCounts {
    pub fn new(seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::arg("sequence length must be at least 1"));
        }
        Ok(Self { seq_len, counts: FxHashMap::default() })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Counts all `n - L + 1` windows of `stream`; shorter streams add nothing.
    pub fn add_stream(&mut self, stream: &[u8]) {
        for w in stream.windows(self.seq_len) {
            match self.counts.get_mut(w) {
                Some(c) => *c += 1,
                None => {
                    self.counts.insert(w.into(), 1);
                }
            }
        }
    }

    /// Pointwise addition.
    pub fn merge(&mut self, other: SequenceCounts) {
        assert_eq!(self.seq_len, other.seq_len, "merging counts of different sequence lengths");
        if self.counts.len() < other.counts.len() {
            let mine = std::mem::replace(&mut self.counts, other.counts);
            for (k, v) in mine {
                *self.counts.entry(k).or_default() += v;
            }
        } else {
            for (k, v) in other.counts {
                *self.counts.entry(k).or_default() += v;
            }
        }
    }

    pub fn get(&self, seq: &[u8]) -> u64 {
        self.counts.get(seq).copied().unwrap_or(0)
    }

    /// Number of distinct sequences seen.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], u64)> {
        self.counts.iter().map(|(k, &v)| (&**k, v))
    }

    /// Inserts a count directly.
    pub fn insert(&mut self, seq: &[u8], count: u64) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::arg(format!("sequence of length {} in counts of length {}", seq.len(), self.seq_len)));
        }
        self.counts.insert(seq.into(), count);
        Ok(())
    }
}

/// Counts overlapping windows over every stream. Streams are counted in
/// parallel and merged.
pub fn count_sequences<S: AsRef<[u8]> + Sync>(streams: &[S], seq_len: usize) -> Result<SequenceCounts> {
    let empty = SequenceCounts::new(seq_len)?;
    Ok(streams
        .par_iter()
        .map(|s| {
            let mut c = empty.clone();
            c.add_stream(s.as_ref());
            c
        })
        .reduce(
            || empty.clone(),
            |mut a, b| {
                a.merge(b);
                a
            },
        ))
}

/// Immutable bijection between `L`-byte sequences and codewords `1..=N`.
#[derive(Debug, Clone)]
pub struct Dictionary {
    seq_len: usize,
    /// Sequence of codeword `c` lives at `(c - 1) * L .. c * L`.
    sequences: Vec<u8>,
    lookup: FxHashMap<Box<[u8]>, u16>,
}

impl PartialEq for Dictionary {
    fn eq(&self, other: &Self) -> bool {
        self.seq_len == other.seq_len && self.sequences == other.sequences
    }
}

impl Dictionary {
    /// Builds a dictionary whose `i`-th sequence gets codeword `i + 1`.
    pub fn from_sequences<S: AsRef<[u8]>>(seq_len: usize, sequences: &[S]) -> Result<Self> {
        if seq_len == 0 || seq_len > usize::from(u16::MAX) {
            return Err(Error::arg(format!("sequence length {seq_len} outside 1..=65535")));
        }
        if sequences.len() > MAX_CODEWORDS {
            return Err(Error::arg(format!(
                "{} sequences exceed the {MAX_CODEWORDS} available codewords",
                sequences.len()
            )));
        }
        let mut flat = Vec::with_capacity(sequences.len() * seq_len);
        let mut lookup = FxHashMap::default();
        lookup.reserve(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            let s = s.as_ref();
            if s.len() != seq_len {
                return Err(Error::arg(format!("dictionary entry {i} has length {}, expected {seq_len}", s.len())));
            }
            if lookup.insert(Box::from(s), (i + 1) as u16).is_some() {
                return Err(Error::arg(format!("dictionary entry {i} duplicates an earlier sequence {s:?}")));
            }
            flat.extend_from_slice(s);
        }
        Ok(Self { seq_len, sequences: flat, lookup })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    #[inline]
    pub fn codeword(&self, seq: &[u8]) -> Option<u16> {
        self.lookup.get(seq).copied()
    }

    #[inline]
    pub fn sequence(&self, codeword: u16) -> Option<&[u8]> {
        let c = usize::from(codeword);
        if c == 0 || c > self.len() {
            return None;
        }
        Some(&self.sequences[(c - 1) * self.seq_len..c * self.seq_len])
    }

    /// All sequences concatenated in codeword order.
    pub fn as_bytes(&self) -> &[u8] {
        &self.sequences
    }

    /// Serialized size of the sequence table.
    pub fn byte_len(&self) -> usize {
        self.sequences.len()
    }

    pub fn from_bytes(seq_len: usize, bytes: &[u8]) -> Result<Self> {
        if seq_len == 0 || !bytes.len().is_multiple_of(seq_len) {
            return Err(Error::arg(format!(
                "{} dictionary bytes do not divide into sequences of {seq_len}",
                bytes.len()
            )));
        }
        let seqs: Vec<&[u8]> = bytes.chunks_exact(seq_len).collect();
        Self::from_sequences(seq_len, &seqs)
    }
}

/// Keeps the `top_k` most frequent sequences. Equal counts are ordered by
/// ascending byte sequence, so the result does not depend on hash order.
pub fn build_dictionary(counts: &SequenceCounts, top_k: usize) -> Result<Dictionary> {
    if top_k == 0 || top_k > MAX_CODEWORDS {
        return Err(Error::arg(format!("top_k must be in 1..={MAX_CODEWORDS}, got {top_k}")));
    }
    let rank = |a: &(&[u8], u64), b: &(&[u8], u64)| -> Ordering { b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)) };
    let mut entries: Vec<(&[u8], u64)> = counts.iter().collect();
    if entries.len() > top_k {
        entries.select_nth_unstable_by(top_k - 1, rank);
        entries.truncate(top_k);
    }
    entries.sort_unstable_by(rank);
    let seqs: Vec<&[u8]> = entries.into_iter().map(|(s, _)| s).collect();
    Dictionary::from_sequences(counts.seq_len(), &seqs)
}

/// A compressed byte stream.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompressedWords {
    pub words: Vec<u16>,
    pub original_len: u64,
}

pub fn compress_stream(stream: &[u8], dict: &Dictionary) -> CompressedWords {
    let l = dict.seq_len();
    let mut words = Vec::with_capacity(stream.len() / l + 8);
    let mut blocks = stream.chunks_exact(l);
    for block in &mut blocks {
        match dict.codeword(block) {
            Some(c) => words.push(c),
            None => {
                words.push(ESCAPE);
                words.extend(block.iter().map(|&b| u16::from(b)));
            }
        }
    }
    let tail = blocks.remainder();
    if !tail.is_empty() {
        words.push(ESCAPE);
        words.extend(tail.iter().map(|&b| u16::from(b)));
    }
    CompressedWords { words, original_len: stream.len() as u64 }
}

pub fn decompress_stream(words: &[u16], dict: &Dictionary, original_len: u64) -> Result<Vec<u8>> {
    let target = usize::try_from(original_len).map_err(|_| Error::corrupt("original length exceeds address space"))?;
    let l = dict.seq_len();
    let mut out = Vec::with_capacity(target);
    let mut i = 0;
    while out.len() < target {
        let Some(&w) = words.get(i) else {
            return Err(Error::corrupt(format!("word stream ended after {} of {target} bytes", out.len())));
        };
        i += 1;
        if w == ESCAPE {
            let take = l.min(target - out.len());
            let raw = words
                .get(i..i + take)
                .ok_or_else(|| Error::corrupt(format!("escape at word {} lacks {take} raw values", i - 1)))?;
            for &r in raw {
                let b = u8::try_from(r).map_err(|_| Error::corrupt(format!("raw value {r:#06x} exceeds a byte")))?;
                out.push(b);
            }
            i += take;
        } else {
            let seq =
                dict.sequence(w).ok_or_else(|| Error::corrupt(format!("unknown codeword {w} at word {}", i - 1)))?;
            if out.len() + seq.len() > target {
                return Err(Error::corrupt(format!("codeword {w} overruns original length {target}")));
            }
            out.extend_from_slice(seq);
        }
    }
    if i != words.len() {
        return Err(Error::corrupt(format!("{} words left after reaching original length", words.len() - i)));
    }
    Ok(out)
}

/// Breakdown of a word stream into dictionary hits and escaped blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WordCounts {
    pub hits: u64,
    pub escapes: u64,
    pub raw: u64,
}

impl WordCounts {
    /// Fraction of emitted blocks (including a tail) replaced by a codeword.
    pub fn hit_rate(&self) -> f64 {
        let blocks = self.hits + self.escapes;
        if blocks == 0 {
            0.0
        } else {
            self.hits as f64 / blocks as f64
        }
    }
}

/// Classifies the words of a well-formed stream without expanding it.
pub fn count_words(words: &[u16], seq_len: usize, original_len: u64) -> WordCounts {
    let mut c = WordCounts::default();
    let mut produced = 0u64;
    let mut i = 0;
    while i < words.len() {
        if words[i] == ESCAPE {
            let take = (seq_len as u64).min(original_len.saturating_sub(produced));
            c.escapes += 1;
            c.raw += take;
            produced += take;
            i += 1 + take as usize;
        } else {
            c.hits += 1;
            produced += seq_len as u64;
            i += 1;
        }
    }
    c
}

/// A quantized tensor whose codes have been dictionary-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub original_len: u64,
    pub words: Vec<u16>,
    pub params: QuantParams,
}

impl CompressedTensor {
    pub fn word_bytes(&self) -> u64 {
        self.words.len() as u64 * 2
    }
}

pub fn compress_tensor(q: &QuantizedTensor, dict: &Dictionary) -> CompressedTensor {
    let CompressedWords { words, original_len } = compress_stream(&q.codes, dict);
    CompressedTensor { name: q.name.clone(), dims: q.dims.clone(), original_len, words, params: q.params }
}

pub fn decompress_tensor(c: &CompressedTensor, dict: &Dictionary) -> Result<QuantizedTensor> {
    let codes = decompress_stream(&c.words, dict, c.original_len)?;
    QuantizedTensor::new(c.name.clone(), c.dims.clone(), codes, c.params)
        .map_err(|e| Error::corrupt(format!("tensor {:?}: {e}", c.name)))
}
