use std::fmt;

use serde::{Deserialize, Serialize};

use super::markers::MarkedSentence;
use super::tokenizer::SubwordTokenizer;
use super::TextError;
use crate::corpus::Span;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedToken {
    pub id: u32,
    /// Sentence-relative characters this token consumed; `None` for special
    /// tokens.
    pub span: Option<Span>,
    pub special: bool,
    pub normalized: bool,
    /// Set on inserted marker tokens.
    pub marker: Option<char>,
}

impl AlignedToken {
    fn special(id: u32) -> AlignedToken {
        AlignedToken {
            id,
            span: None,
            special: true,
            normalized: false,
            marker: None,
        }
    }
}

/// Tokens of one sentence bound to sentence-relative character offsets:
/// a sentinel at position 0, the text pieces, and a terminator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    pub tokens: Vec<AlignedToken>,
    pub max_len: usize,
    pub truncated: bool,
}

impl TokenAlignment {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Inclusive range of token indices strictly between the two markers
    /// carrying `symbol`. `None` unless exactly one such pair exists with at
    /// least one token inside.
    pub fn marked_range(&self, symbol: char) -> Option<(usize, usize)> {
        let positions: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.marker == Some(symbol))
            .map(|(i, _)| i)
            .collect();
        match positions.as_slice() {
            [open, close] if close > &(open + 1) => Some((open + 1, close - 1)),
            _ => None,
        }
    }

    /// Character extent covered by the kept tokens.
    pub fn covered_end(&self) -> usize {
        self.tokens
            .iter()
            .filter_map(|t| t.span)
            .map(|s| s.end)
            .max()
            .unwrap_or(0)
    }
}

fn assemble(
    pieces: Vec<AlignedToken>,
    tokenizer: &dyn SubwordTokenizer,
    max_len: usize,
) -> Result<TokenAlignment, TextError> {
    if max_len < 3 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let keep = max_len - 2;
    let truncated = pieces.len() > keep;
    let mut tokens = Vec::with_capacity(pieces.len().min(keep) + 2);
    tokens.push(AlignedToken::special(tokenizer.cls_id()));
    tokens.extend(pieces.into_iter().take(keep));
    tokens.push(AlignedToken::special(tokenizer.sep_id()));
    Ok(TokenAlignment {
        tokens,
        max_len,
        truncated,
    })
}

/// Tokenize a plain sentence. Pieces beyond `max_len - 2` are dropped and
/// the alignment is flagged truncated.
pub fn align_tokens(
    sentence_text: &str,
    tokenizer: &dyn SubwordTokenizer,
    max_len: usize,
) -> Result<TokenAlignment, TextError> {
    let pieces = tokenizer
        .tokenize(sentence_text)
        .into_iter()
        .map(|p| AlignedToken {
            id: p.id,
            span: p.span,
            special: false,
            normalized: p.normalized,
            marker: None,
        })
        .collect();
    assemble(pieces, tokenizer, max_len)
}

/// Tokenize a marked copy. Marker tokens become special; every other span is
/// mapped back to original sentence offsets.
pub fn align_marked(
    marked: &MarkedSentence,
    tokenizer: &dyn SubwordTokenizer,
    max_len: usize,
) -> Result<TokenAlignment, TextError> {
    let mut pieces = Vec::new();
    for p in tokenizer.tokenize(&marked.text) {
        let Some(span) = p.span else {
            pieces.push(AlignedToken {
                id: p.id,
                span: None,
                special: false,
                normalized: p.normalized,
                marker: None,
            });
            continue;
        };
        let originals: Vec<usize> = (span.start..span.end).filter_map(|i| marked.offset_map(i)).collect();
        if originals.is_empty() {
            let marker = (span.start..span.end).find_map(|i| marked.marker_at(i)).map(|m| m.symbol);
            pieces.push(AlignedToken {
                id: p.id,
                span: None,
                special: true,
                normalized: false,
                marker,
            });
        } else {
            let lo = originals[0];
            let hi = originals[originals.len() - 1] + 1;
            pieces.push(AlignedToken {
                id: p.id,
                span: Some(Span::new(lo, hi)),
                special: false,
                normalized: p.normalized,
                marker: None,
            });
        }
    }
    assemble(pieces, tokenizer, max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::O => "O",
            Tag::B => "B",
            Tag::I => "I",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioSequence {
    pub tags: Vec<Tag>,
}

impl BioSequence {
    pub fn all_o(n: usize) -> BioSequence {
        BioSequence { tags: vec![Tag::O; n] }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }

    pub fn from_indices(idx: &[usize]) -> BioSequence {
        BioSequence {
            tags: idx.iter().map(|&i| Tag::from_index(i)).collect(),
        }
    }

    /// No I at position 0 or right after O.
    pub fn is_well_formed(&self) -> bool {
        let mut prev = Tag::O;
        for &t in &self.tags {
            if t == Tag::I && prev == Tag::O {
                return false;
            }
            prev = t;
        }
        true
    }
}

impl fmt::Display for BioSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tags.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

fn check_disjoint(spans: &[Span]) -> Result<Vec<Span>, TextError> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(TextError::OverlappingSpans(w[0], w[1]));
        }
    }
    Ok(sorted)
}

/// Tag every token overlapping a span: B on the first, I on the rest.
/// Special tokens are always O. A token already claimed by an earlier span
/// stays with it.
pub fn encode_bio(alignment: &TokenAlignment, spans: &[Span]) -> Result<BioSequence, TextError> {
    let spans = check_disjoint(spans)?;
    let mut tags = vec![Tag::O; alignment.len()];
    for span in &spans {
        let mut first = true;
        for (i, tok) in alignment.tokens.iter().enumerate() {
            if tok.special || tags[i] != Tag::O {
                continue;
            }
            if tok.span.is_some_and(|s| s.overlaps(span)) {
                tags[i] = if first { Tag::B } else { Tag::I };
                first = false;
            }
        }
    }
    Ok(BioSequence { tags })
}

/// Spans that no kept token overlaps, e.g. because they fall in a
/// truncated tail.
pub fn unreachable_spans(alignment: &TokenAlignment, spans: &[Span]) -> Vec<Span> {
    spans
        .iter()
        .filter(|s| {
            !alignment
                .tokens
                .iter()
                .any(|t| !t.special && t.span.is_some_and(|ts| ts.overlaps(s)))
        })
        .copied()
        .collect()
}

/// Merge each maximal B I* run into one character span. A leading I is
/// read as B. Special tokens inside a run contribute no characters.
pub fn decode_bio(bio: &BioSequence, alignment: &TokenAlignment) -> Result<Vec<Span>, TextError> {
    if bio.tags.len() != alignment.len() {
        return Err(TextError::LengthMismatch {
            tags: bio.tags.len(),
            tokens: alignment.len(),
        });
    }
    let mut out = Vec::new();
    let mut current: Option<(Option<usize>, Option<usize>)> = None;
    let close = |cur: Option<(Option<usize>, Option<usize>)>, out: &mut Vec<Span>| {
        if let Some((Some(lo), Some(hi))) = cur {
            out.push(Span::new(lo, hi));
        }
    };
    for (tag, tok) in bio.tags.iter().zip(&alignment.tokens) {
        match tag {
            Tag::O => close(current.take(), &mut out),
            Tag::B => {
                close(current.take(), &mut out);
                current = Some((None, None));
            }
            Tag::I => {
                current.get_or_insert((None, None));
            }
        }
        if let (Some(cur), Some(span)) = (current.as_mut(), tok.span.filter(|_| !tok.special)) {
            cur.0.get_or_insert(span.start);
            cur.1 = Some(span.end);
        }
    }
    close(current, &mut out);
    Ok(out)
}
