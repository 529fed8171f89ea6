//! Subword tokenizers reporting character offsets into their input.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_categories::UnicodeCategories;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Span;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// One subword piece. `span` is in code points of the tokenized text;
/// `None` only when normalization left the piece without its own source
/// character.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: u32,
    pub span: Option<Span>,
    /// The piece's surface differs from the source slice (case or accents).
    pub normalized: bool,
}

/// Text to (pieces, offsets). Implementations must be stateless so a handle
/// can be shared across worker threads.
pub trait SubwordTokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Piece>;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn unk_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn vocab_size(&self) -> usize;
}

fn is_bert_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r') || c.is_separator_space()
}

fn is_bert_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    c.is_other_control() || c.is_other_format()
}

fn is_bert_punctuation(c: char) -> bool {
    let cp = c as u32;
    (33..=47).contains(&cp)
        || (58..=64).contains(&cp)
        || (91..=96).contains(&cp)
        || (123..=126).contains(&cp)
        || c.is_punctuation()
}

fn is_cjk(c: char) -> bool {
    let cp = c as u32;
    (0x4E00..=0x9FFF).contains(&cp)
        || (0x3400..=0x4DBF).contains(&cp)
        || (0x20000..=0x2A6DF).contains(&cp)
        || (0x2A700..=0x2B73F).contains(&cp)
        || (0x2B740..=0x2B81F).contains(&cp)
        || (0x2B820..=0x2CEAF).contains(&cp)
        || (0xF900..=0xFAFF).contains(&cp)
        || (0x2F800..=0x2FA1F).contains(&cp)
}

/// A pre-token: normalized characters, each tagged with its source index.
#[derive(Debug, Default)]
struct Word {
    chars: Vec<(char, usize)>,
    normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicOptions {
    pub lowercase: bool,
    pub strip_accents: bool,
}

impl Default for BasicOptions {
    fn default() -> Self {
        BasicOptions {
            lowercase: true,
            strip_accents: true,
        }
    }
}

/// BERT-style pre-tokenization: drop control characters, split on
/// whitespace, isolate punctuation and CJK ideographs, then lowercase and
/// strip accents while tracking source offsets.
fn basic_words(text: &str, opts: &BasicOptions) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Vec<(char, usize)> = Vec::new();
    let flush = |current: &mut Vec<(char, usize)>, words: &mut Vec<Word>| {
        if !current.is_empty() {
            words.push(normalize_word(std::mem::take(current), opts));
        }
    };
    for (idx, c) in text.chars().enumerate() {
        if c == '\0' || c == '\u{FFFD}' || is_bert_control(c) {
            continue;
        }
        if is_bert_whitespace(c) {
            flush(&mut current, &mut words);
        } else if is_bert_punctuation(c) || is_cjk(c) {
            flush(&mut current, &mut words);
            words.push(normalize_word(vec![(c, idx)], opts));
        } else {
            current.push((c, idx));
        }
    }
    flush(&mut current, &mut words);
    words.retain(|w| !w.chars.is_empty());
    words
}

fn normalize_word(chars: Vec<(char, usize)>, opts: &BasicOptions) -> Word {
    let mut out = Vec::with_capacity(chars.len());
    let mut normalized = false;
    for (c, idx) in chars {
        let before = out.len();
        let lowered: Vec<char> = if opts.lowercase {
            c.to_lowercase().collect()
        } else {
            vec![c]
        };
        for l in lowered {
            if opts.strip_accents {
                for d in std::iter::once(l).nfd() {
                    if !d.is_mark_nonspacing() {
                        out.push((d, idx));
                    }
                }
            } else {
                out.push((l, idx));
            }
        }
        let surface: String = out[before..].iter().map(|(ch, _)| *ch).collect();
        if surface != c.to_string() {
            normalized = true;
        }
    }
    Word {
        chars: out,
        normalized,
    }
}

/// Greedy longest-match-first WordPiece over a BERT vocabulary file.
#[derive(Clone, Debug)]
pub struct WordPiece {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    options: BasicOptions,
    max_word_chars: usize,
    unk: u32,
    cls: u32,
    sep: u32,
    pad: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("reading vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary lacks required token {0}")]
    MissingSpecial(&'static str),
}

impl WordPiece {
    pub fn from_tokens(tokens: Vec<String>, options: BasicOptions) -> Result<WordPiece, VocabError> {
        let token_to_id: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let get = |t: &'static str| token_to_id.get(t).copied().ok_or(VocabError::MissingSpecial(t));
        Ok(WordPiece {
            unk: get(UNK)?,
            cls: get(CLS)?,
            sep: get(SEP)?,
            pad: get(PAD)?,
            token_to_id,
            id_to_token: tokens,
            options,
            max_word_chars: 100,
        })
    }

    /// One token per line, line number = id.
    pub fn from_vocab_file(path: &Path, options: BasicOptions) -> Result<WordPiece, VocabError> {
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        WordPiece::from_tokens(tokens, options)
    }

    /// Build a vocabulary covering every word of `texts`: the special
    /// tokens, each distinct pre-token, and every character both as a word
    /// start and as a `##` continuation.
    pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, options: &BasicOptions) -> Vec<String> {
        let mut words = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for w in basic_words(text, options) {
                let s: String = w.chars.iter().map(|(c, _)| *c).collect();
                chars.extend(w.chars.iter().map(|(c, _)| *c));
                words.insert(s);
            }
        }
        let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = vocab.iter().cloned().collect();
        let mut push = |t: String, vocab: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                vocab.push(t);
            }
        };
        for c in &chars {
            push(c.to_string(), &mut vocab);
            push(format!("##{c}"), &mut vocab);
        }
        for w in words {
            push(w, &mut vocab);
        }
        vocab
    }

    pub fn options(&self) -> &BasicOptions {
        &self.options
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn write_vocab(&self, path: &Path) -> std::io::Result<()> {
        let mut body = self.id_to_token.join("\n");
        body.push('\n');
        fs::write(path, body)
    }

    fn word_pieces(&self, word: &Word, out: &mut Vec<Piece>) {
        let chars = &word.chars;
        let span_of = |lo: usize, hi: usize| Span::try_new(chars[lo].1, chars[hi - 1].1 + 1);
        if chars.len() > self.max_word_chars {
            out.push(Piece {
                id: self.unk,
                span: span_of(0, chars.len()),
                normalized: word.normalized,
            });
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().map(|(c, _)| *c).collect();
                if start > 0 {
                    candidate.insert_str(0, "##");
                }
                if let Some(&id) = self.token_to_id.get(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push((id, start, end));
                    start = end;
                }
                None => {
                    out.push(Piece {
                        id: self.unk,
                        span: span_of(0, chars.len()),
                        normalized: word.normalized,
                    });
                    return;
                }
            }
        }
        let mut prev_end = 0;
        for (id, lo, hi) in pieces {
            // A source character expanded by normalization may straddle two
            // pieces; it stays with the first.
            let span = span_of(lo, hi).and_then(|s| Span::try_new(s.start.max(prev_end), s.end));
            if let Some(s) = span {
                prev_end = s.end;
            }
            out.push(Piece {
                id,
                span,
                normalized: word.normalized,
            });
        }
    }
}

impl SubwordTokenizer for WordPiece {
    fn tokenize(&self, text: &str) -> Vec<Piece> {
        let mut out = Vec::new();
        for word in basic_words(text, &self.options) {
            self.word_pieces(&word, &mut out);
        }
        out
    }

    fn cls_id(&self) -> u32 {
        self.cls
    }

    fn sep_id(&self) -> u32 {
        self.sep
    }

    fn unk_id(&self) -> u32 {
        self.unk
    }

    fn pad_id(&self) -> u32 {
        self.pad
    }

    fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }
}

/// Whitespace tokenizer with hashed ids. Test stub: no vocabulary needed.
#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    pub buckets: u32,
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        WhitespaceTokenizer { buckets: 30_000 }
    }
}

const RESERVED: u32 = 5;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SubwordTokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Piece> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let mut word = String::new();
        let mut emit = |start: usize, end: usize, word: &str| {
            let id = RESERVED + (fnv1a(word) % u64::from(self.buckets)) as u32;
            out.push(Piece {
                id,
                span: Some(Span::new(start, end)),
                normalized: false,
            });
        };
        let mut n = 0;
        for (i, c) in text.chars().enumerate() {
            n = i + 1;
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    emit(s, i, &word);
                    word.clear();
                }
            } else {
                start.get_or_insert(i);
                word.push(c);
            }
        }
        if let Some(s) = start {
            emit(s, n, &word);
        }
        out
    }

    fn cls_id(&self) -> u32 {
        2
    }

    fn sep_id(&self) -> u32 {
        3
    }

    fn unk_id(&self) -> u32 {
        1
    }

    fn pad_id(&self) -> u32 {
        0
    }

    fn vocab_size(&self) -> usize {
        (RESERVED + self.buckets) as usize
    }
}
