//! Byte-level BPE tokenizer trained on the working corpus.
//!
//! Three conventions matter to the rest of the pipeline:
//!
//! * `[EOS]` (and the other specials) are atomic: `encode` splits around the
//!   literal marker and never routes it through BPE, so merges cannot create
//!   or destroy it.
//! * Every text is encoded as if preceded by one space (the leading-space
//!   marker). A word therefore gets the same token ids whether it appears at
//!   the start of a string or in the middle of a rendered context, which is
//!   what the copy head and allowed-set construction rely on. `decode`
//!   removes the artificial space again, so encode/decode round-trips.
//! * Every token carries a `(start, end)` byte range into the source text.
//!   The ranges tile the text exactly, whitespace included (the virtual
//!   leading space maps to an empty range at offset 0).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::{Error, Result};

pub const EOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const SPECIAL_MARKERS: [&str; 3] = ["[EOS]", "[PAD]", "[UNK]"];
const NUM_SPECIALS: u32 = 3;
const BYTE_ALPHABET: u32 = 256;
/// First id available for learned merges.
const BASE_VOCAB: u32 = NUM_SPECIALS + BYTE_ALPHABET;

const fn byte_id(b: u8) -> u32 {
    NUM_SPECIALS + b as u32
}

/// Subword vocabulary: byte alphabet + learned merges + specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Bytes of every token, indexed by id. Specials hold their marker text.
    token_bytes: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

/// A tokenized text: ids plus per-token byte ranges into the source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub char_spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of tokens whose span overlaps `range` (used to locate the
    /// utterance inside a rendered context).
    pub fn positions_overlapping(&self, range: (usize, usize)) -> Vec<usize> {
        self.char_spans
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s < range.1 && e > range.0)
            .map(|(i, _)| i)
            .collect()
    }
}

enum Piece {
    /// Byte range of ordinary text (offsets into the working string).
    Text(usize, usize),
    /// A special marker occurring literally in the text.
    Special(u32, usize, usize),
}

fn split_specials(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut cursor = 0;
    while cursor < text.len() {
        let rest = &text[cursor..];
        let hit = SPECIAL_MARKERS
            .iter()
            .enumerate()
            .filter_map(|(i, m)| rest.find(m).map(|pos| (cursor + pos, i as u32, m.len())))
            .min();
        match hit {
            Some((at, id, len)) => {
                if at > cursor {
                    pieces.push(Piece::Text(cursor, at));
                }
                pieces.push(Piece::Special(id, at, at + len));
                cursor = at + len;
            }
            None => {
                pieces.push(Piece::Text(cursor, text.len()));
                cursor = text.len();
            }
        }
    }
    pieces
}

/// Split a byte range into word chunks (single leading space + non-space
/// run) and whitespace chunks. Offsets are kept relative to the working
/// string the bytes came from.
fn chunk_bytes(bytes: &[u8], offset: usize, out: &mut Vec<(Vec<u8>, usize)>) {
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            let mut k = i;
            while k < bytes.len() && bytes[k].is_ascii_whitespace() {
                k += 1;
            }
            if k < bytes.len() {
                // Last whitespace byte attaches to the following word.
                if k - 1 > i {
                    out.push((bytes[i..k - 1].to_vec(), offset + i));
                }
                let mut w = k;
                while w < bytes.len() && !bytes[w].is_ascii_whitespace() {
                    w += 1;
                }
                out.push((bytes[k - 1..w].to_vec(), offset + k - 1));
                i = w;
            } else {
                out.push((bytes[i..k].to_vec(), offset + i));
                i = k;
            }
        } else {
            let mut w = i;
            while w < bytes.len() && !bytes[w].is_ascii_whitespace() {
                w += 1;
            }
            out.push((bytes[i..w].to_vec(), offset + i));
            i = w;
        }
    }
}

/// Working form of a text: the virtual leading space prepended. All BPE
/// chunking happens in this space; spans map back with `p.max(1) - 1`.
fn working(text: &str) -> String {
    let mut w = String::with_capacity(text.len() + 1);
    w.push(' ');
    w.push_str(text);
    w
}

fn working_chunks(text: &str) -> Vec<(Vec<u8>, usize)> {
    let w = working(text);
    let mut chunks = Vec::new();
    for piece in split_specials(&w) {
        if let Piece::Text(s, e) = piece {
            chunk_bytes(&w.as_bytes()[s..e], s, &mut chunks);
        }
    }
    chunks
}

/// Train a BPE vocabulary. `vocab_size` is the total size including the
/// 256-byte alphabet and the three specials, so `vocab_size - 259` merges
/// are learned (fewer if the corpus runs out of co-occurring pairs).
pub fn train_bpe<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
) -> Result<Vocab> {
    if (vocab_size as u32) < BASE_VOCAB {
        return Err(Error::Tokenizer(format!(
            "vocab_size must be at least {BASE_VOCAB} (byte alphabet + specials)"
        )));
    }
    // Distinct chunks with frequencies; BTreeMap keeps the pair scan
    // independent of hash order.
    let mut chunk_freq: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut saw_text = false;
    for line in corpus {
        if line.is_empty() {
            continue;
        }
        for (bytes, _) in working_chunks(line) {
            saw_text = true;
            *chunk_freq.entry(bytes).or_insert(0) += 1;
        }
    }
    if !saw_text {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }

    let mut vocab = Vocab::base();
    let mut words: Vec<(Vec<u32>, u64)> = chunk_freq
        .into_iter()
        .map(|(bytes, freq)| (bytes.iter().map(|&b| byte_id(b)).collect(), freq))
        .collect();

    let target_merges = vocab_size as u32 - BASE_VOCAB;
    for _ in 0..target_merges {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, freq) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += freq;
            }
        }
        // Highest count wins; ties break toward the numerically smallest
        // pair so training is independent of hash order. Pairs seen only
        // once are not worth a merge (they would mint singleton tokens),
        // so training can stop short of the requested size.
        let best = pair_counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = vocab.add_merge(pair);
        for (syms, _) in &mut words {
            merge_in_place(syms, pair, new_id);
        }
    }
    Ok(vocab)
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < syms.len() {
        if read + 1 < syms.len() && syms[read] == pair.0 && syms[read + 1] == pair.1 {
            syms[write] = new_id;
            read += 2;
        } else {
            syms[write] = syms[read];
            read += 1;
        }
        write += 1;
    }
    syms.truncate(write);
}

impl Vocab {
    fn base() -> Self {
        let mut token_bytes: Vec<Vec<u8>> = SPECIAL_MARKERS
            .iter()
            .map(|m| m.as_bytes().to_vec())
            .collect();
        for b in 0..=255u8 {
            token_bytes.push(vec![b]);
        }
        Vocab {
            token_bytes,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn add_merge(&mut self, pair: (u32, u32)) -> u32 {
        let new_id = self.token_bytes.len() as u32;
        let mut bytes = self.token_bytes[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.token_bytes[pair.1 as usize]);
        self.token_bytes.push(bytes);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        new_id
    }

    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn token_text(&self, id: u32) -> Option<String> {
        self.token_bytes
            .get(id as usize)
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }

    /// Tokenize `text`. Total over all unicode input (byte fallback) and
    /// deterministic.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut seq = TokenSeq::default();
        if text.is_empty() {
            return seq;
        }
        let w = working(text);
        // Working-string offset -> source offset.
        let to_src = |p: usize| p.max(1) - 1;
        for piece in split_specials(&w) {
            match piece {
                Piece::Special(id, s, e) => {
                    seq.ids.push(id);
                    seq.char_spans.push((to_src(s), to_src(e)));
                }
                Piece::Text(s, e) => {
                    let mut chunks = Vec::new();
                    chunk_bytes(&w.as_bytes()[s..e], s, &mut chunks);
                    for (bytes, start) in chunks {
                        self.encode_chunk(&bytes, start, &mut seq, to_src);
                    }
                }
            }
        }
        seq
    }

    fn encode_chunk(
        &self,
        bytes: &[u8],
        start: usize,
        seq: &mut TokenSeq,
        to_src: impl Fn(usize) -> usize,
    ) {
        // (id, byte range in the working string)
        let mut syms: Vec<(u32, usize, usize)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (byte_id(b), start + i, start + i + 1))
            .collect();
        loop {
            let mut best: Option<(u32, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(&rank) = self.ranks.get(&(syms[i].0, syms[i + 1].0)) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank as usize];
            let new_id = BASE_VOCAB + rank;
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i].0 == pair.0 && syms[i + 1].0 == pair.1 {
                    syms[i] = (new_id, syms[i].1, syms[i + 1].2);
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        for (id, s, e) in syms {
            seq.ids.push(id);
            seq.char_spans.push((to_src(s), to_src(e)));
        }
    }

    /// Inverse of `encode` on its image; specials render as their markers.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_bytes
                .get(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} out of range")))?;
            bytes.extend_from_slice(tok);
        }
        let mut text = String::from_utf8_lossy(&bytes).into_owned();
        // Remove the artificial leading space added by encode.
        if text.starts_with(' ') {
            text.remove(0);
        }
        Ok(text)
    }

    /// Serialize to the text format: a header, the specials line, then one
    /// merge (`left_id right_id`) per line in training order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("gensf-bpe v1\n");
        out.push_str(&format!("specials {}\n", SPECIAL_MARKERS.join(" ")));
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for (l, r) in &self.merges {
            out.push_str(&format!("{l} {r}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Tokenizer(format!("vocab file: {msg}"));
        if lines.next() != Some("gensf-bpe v1") {
            return Err(bad("missing 'gensf-bpe v1' header"));
        }
        let specials = lines.next().ok_or_else(|| bad("missing specials line"))?;
        if specials != format!("specials {}", SPECIAL_MARKERS.join(" ")) {
            return Err(bad("unexpected specials line"));
        }
        let merges_line = lines.next().ok_or_else(|| bad("missing merges line"))?;
        let count: usize = merges_line
            .strip_prefix("merges ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("malformed merges line"))?;
        let mut vocab = Vocab::base();
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| bad(&format!("expected {count} merges, found {i}")))?;
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<u32> {
                s.and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(&format!("malformed merge line {i}")))
            };
            let (l, r) = (parse(parts.next())?, parse(parts.next())?);
            let next = vocab.token_bytes.len() as u32;
            if l >= next || r >= next {
                return Err(bad(&format!("merge {i} references a later id")));
            }
            vocab.add_merge((l, r));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}

/// Lines to train the vocabulary on: every utterance plus the template
/// scaffolding (questions, response stems, the "not provided" phrase and
/// the trivial `key =` form) so rendered contexts tokenize compactly.
pub fn training_corpus_lines(
    dataset: &crate::corpus::Dataset,
    names: &crate::templating::NameMap,
) -> Vec<String> {
    let mut lines: Vec<String> = dataset
        .examples
        .iter()
        .map(|ex| ex.utterance.clone())
        .collect();
    for key in &dataset.slot_keys {
        if let Ok(phrase) = names.phrase(key) {
            lines.push(format!("What is the {phrase}, {phrase}?"));
            lines.push(format!("Ok, the {phrase} is"));
        }
        lines.push(format!("{key} ="));
    }
    lines.push(crate::templating::NOT_PROVIDED.to_string());
    lines
}

/// Check the span tiling invariant: ranges are adjacent, in order, and
/// cover the text exactly.
pub fn spans_tile_text(seq: &TokenSeq, text: &str) -> bool {
    let mut cursor = 0;
    for &(s, e) in &seq.char_spans {
        if s != cursor || e < s {
            return false;
        }
        cursor = e;
    }
    cursor == text.len()
}
