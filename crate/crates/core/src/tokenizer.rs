//! Byte-pair subword vocabulary with lossless byte fallback.
//!
//! Ids `0..10` are reserved control symbols, ids `10..266` are the 256 single
//! bytes, and every later id is created by one merge rule. Text is first cut
//! into chunks (alphanumeric runs, whitespace runs, single other characters)
//! and merges never cross chunk boundaries.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::digest;

pub const PAD: u32 = 0;
pub const DELAY: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const EOL: u32 = 4;
pub const SEP: u32 = 5;
pub const PLACEHOLDER_BASE: u32 = 6;
pub const PLACEHOLDERS: u32 = 4;
pub const RESERVED: u32 = 10;
pub const BYTE_BASE: u32 = RESERVED;
pub const BYTE_VOCAB: u32 = RESERVED + 256;
pub const DEFAULT_SIZE: usize = 2048;

const RESERVED_NAMES: [&str; RESERVED as usize] =
    ["<pad>", "<delay>", "<bos>", "<eos>", "<eol>", "<sep>", "$0", "$1", "$2", "$3"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("vocabulary size {0} leaves no room beyond the reserved and byte pieces")]
    SizeTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("control id {0} has no text form")]
    ControlId(u32),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("vocab file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("size", &self.len()).field("merges", &self.merges.len()).finish()
    }
}

impl Vocab {
    /// Vocabulary with only the reserved and byte pieces.
    pub fn bytes_only() -> Vocab {
        let mut pieces: Vec<Vec<u8>> = RESERVED_NAMES.iter().map(|n| n.as_bytes().to_vec()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        Vocab { pieces, merges: Vec::new(), ranks: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Raw bytes of a non-reserved piece.
    pub fn piece_bytes(&self, id: u32) -> Option<&[u8]> {
        if id < RESERVED {
            return None;
        }
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Human readable form of any id, reserved ones included.
    pub fn piece_label(&self, id: u32) -> String {
        match id {
            i if i < RESERVED => RESERVED_NAMES[i as usize].to_string(),
            i => match self.pieces.get(i as usize) {
                Some(b) => String::from_utf8_lossy(b).into_owned(),
                None => format!("<unk:{i}>"),
            },
        }
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let id = self.pieces.len() as u32;
        let mut bytes = self.pieces[a as usize].clone();
        bytes.extend_from_slice(&self.pieces[b as usize]);
        self.pieces.push(bytes);
        self.ranks.insert((a, b), self.merges.len() as u32);
        self.merges.push((a, b));
        id
    }

    /// Content ids for `text`; never emits reserved ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        for chunk in chunks(text) {
            self.encode_chunk(chunk.as_bytes(), &mut out);
        }
        out
    }

    /// Like [`Vocab::encode`], but `$0`..`$3` become the reserved placeholder ids.
    pub fn encode_with_placeholders(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(pos) = find_placeholder(rest) {
            out.extend(self.encode(&rest[..pos]));
            let k = rest.as_bytes()[pos + 1] - b'0';
            out.push(PLACEHOLDER_BASE + k as u32);
            rest = &rest[pos + 2..];
        }
        out.extend(self.encode(rest));
        out
    }

    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| BYTE_BASE + b as u32).collect();
        if !self.merges.is_empty() {
            loop {
                let best = ids
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                    .min();
                let Some((rank, _)) = best else { break };
                let (a, b) = self.merges[rank as usize];
                let merged = RESERVED + 256 + rank;
                let mut next = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                        next.push(merged);
                        i += 2;
                    } else {
                        next.push(ids[i]);
                        i += 1;
                    }
                }
                ids = next;
            }
        }
        out.extend_from_slice(&ids);
    }

    /// Text for `ids`. Placeholder ids decode to `$k`; other control ids are errors.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if (PLACEHOLDER_BASE..PLACEHOLDER_BASE + PLACEHOLDERS).contains(&id) {
                bytes.extend_from_slice(RESERVED_NAMES[id as usize].as_bytes());
            } else if id < RESERVED {
                return Err(TokenizerError::ControlId(id));
            } else {
                let piece = self.pieces.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
                bytes.extend_from_slice(piece);
            }
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// Serialized vocabulary: reserved block, `piece \t id` lines, then merges.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# d2tforge vocab v1\n");
        for (id, name) in RESERVED_NAMES.iter().enumerate() {
            out.push_str(&format!("{name}\t{id}\n"));
        }
        for id in RESERVED as usize..self.pieces.len() {
            out.push_str(&format!("{}\t{id}\n", escape_piece(&self.pieces[id])));
        }
        out.push_str("merges\n");
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, TokenizerError> {
        let err = |line: usize, message: &str| TokenizerError::Format { line, message: message.to_string() };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some("# d2tforge vocab v1") {
            return Err(err(1, "missing vocab header"));
        }
        let mut vocab = Vocab::bytes_only();
        let mut expected = 0u32;
        let mut listed: Vec<Vec<u8>> = Vec::new();
        for (n, line) in lines.by_ref() {
            if line == "merges" {
                break;
            }
            let (piece, id) = line.rsplit_once('\t').ok_or_else(|| err(n + 1, "expected `piece\\tid`"))?;
            let id: u32 = id.parse().map_err(|_| err(n + 1, "bad id"))?;
            if id != expected {
                return Err(err(n + 1, "ids must be contiguous"));
            }
            if id < RESERVED {
                if piece != RESERVED_NAMES[id as usize] {
                    return Err(err(n + 1, "reserved block mismatch"));
                }
            } else {
                listed.push(unescape_piece(piece).ok_or_else(|| err(n + 1, "bad piece escape"))?);
            }
            expected += 1;
        }
        for (n, line) in lines {
            let (a, b) = line.split_once(' ').ok_or_else(|| err(n + 1, "expected merge `a b`"))?;
            let a: u32 = a.parse().map_err(|_| err(n + 1, "bad merge id"))?;
            let b: u32 = b.parse().map_err(|_| err(n + 1, "bad merge id"))?;
            if a as usize >= vocab.len() || b as usize >= vocab.len() {
                return Err(err(n + 1, "merge references a later piece"));
            }
            vocab.push_merge(a, b);
        }
        let rebuilt: Vec<&[u8]> = vocab.pieces[RESERVED as usize..].iter().map(Vec::as_slice).collect();
        let listed: Vec<&[u8]> = listed.iter().map(Vec::as_slice).collect();
        if rebuilt != listed {
            return Err(err(0, "piece table disagrees with merge rules"));
        }
        Ok(vocab)
    }

    pub fn digest(&self) -> String {
        digest::sha256_hex(self.to_text().as_bytes())
    }
}

/// Learns merge rules until the vocabulary holds `size` pieces (or no pair repeats).
///
/// Each round merges the most frequent adjacent pair; ties go to the pair whose
/// byte strings sort first.
pub fn train_vocab<'a, I>(corpus: I, size: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    if size < BYTE_VOCAB as usize {
        return Err(TokenizerError::SizeTooSmall(size));
    }
    let mut chunk_counts: HashMap<&[u8], u64> = HashMap::new();
    let mut any = false;
    for line in corpus {
        any = true;
        for chunk in chunks(line) {
            *chunk_counts.entry(chunk.as_bytes()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<u32>, u64)> = chunk_counts
        .into_iter()
        .map(|(c, n)| (c.iter().map(|&b| BYTE_BASE + b as u32).collect(), n))
        .collect();
    words.sort();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (ids, n)) in words.iter().enumerate() {
        for w in ids.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += n;
            where_.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    let mut vocab = Vocab::bytes_only();
    while vocab.len() < size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab.pieces[pa.0 as usize], &vocab.pieces[pa.1 as usize]);
                    let kb = (&vocab.pieces[pb.0 as usize], &vocab.pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((a, b)) = best else { break };
        let merged = vocab.push_merge(a, b);
        let mut affected: Vec<usize> = where_.remove(&(a, b)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (ids, n) = &mut words[wi];
            for w in ids.windows(2) {
                let c = pair_counts.get_mut(&(w[0], w[1])).expect("pair counted");
                *c -= *n;
            }
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            *ids = next;
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += *n;
                where_.entry((w[0], w[1])).or_default().insert(wi);
            }
        }
        pair_counts.remove(&(a, b));
    }
    Ok(vocab)
}

/// Splits text into merge units: alphanumeric runs, whitespace runs and
/// single other characters. Units never depend on their neighbours, so a
/// value is segmented the same inside a sentence and on its own.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    fn class(c: char) -> u8 {
        if c.is_alphanumeric() {
            0
        } else if c.is_whitespace() {
            1
        } else {
            2
        }
    }
    let mut cuts = Vec::new();
    let mut start = 0;
    let mut prev: Option<u8> = None;
    for (i, c) in text.char_indices() {
        let k = class(c);
        if let Some(p) = prev {
            if p != k || k == 2 {
                cuts.push((start, i));
                start = i;
            }
        }
        prev = Some(k);
    }
    if start < text.len() {
        cuts.push((start, text.len()));
    }
    cuts.into_iter().map(move |(s, e)| &text[s..e])
}

fn find_placeholder(s: &str) -> Option<usize> {
    let b = s.as_bytes();
    (0..b.len().saturating_sub(1)).find(|&i| b[i] == b'$' && (b'0'..b'0' + PLACEHOLDERS as u8).contains(&b[i + 1]))
}

fn escape_piece(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if (0x21..0x7f).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            s.push_str(&format!("\\x{b:02x}"));
        }
    }
    s
}

fn unescape_piece(s: &str) -> Option<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' {
            let hex = s.get(i + 2..i + 4)?;
            if b.get(i + 1) != Some(&b'x') {
                return None;
            }
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    Some(out)
}
