//! Sentence splitting, token alignment, BIO coding and marker insertion.

mod align;
mod markers;
mod tokenizer;

pub use align::{
    align_marked, align_tokens, decode_bio, encode_bio, unreachable_spans, AlignedToken, BioSequence, Tag,
    TokenAlignment,
};
pub use markers::{insert_markers, MarkedSentence, MarkerPos, ENTITY_MARKER, QUANTITY_MARKER};
pub use tokenizer::{
    BasicOptions, Piece, SubwordTokenizer, VocabError, WhitespaceTokenizer, WordPiece, CLS, MASK, PAD, SEP, UNK,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{char_len, char_slice, Document, Span};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("sentence splitter failed on {doc_id}: {reason}")]
    Splitter { doc_id: String, reason: String },
    #[error("span {span} out of bounds for text of length {len}")]
    SpanOutOfBounds { span: Span, len: usize },
    #[error("overlapping spans {0} and {1}")]
    OverlappingSpans(Span, Span),
    #[error("{tags} tags for {tokens} tokens")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("max_len {0} leaves no room for a token between the sentinels")]
    MaxLenTooSmall(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub index: usize,
    /// Document-relative.
    pub span: Span,
    pub text: String,
}

impl Sentence {
    pub fn char_len(&self) -> usize {
        self.span.len()
    }
}

/// Text to sentence spans (code points). Spans must be ordered and
/// disjoint; surrounding whitespace is trimmed by the caller.
pub trait SentenceSplitter: Send + Sync {
    fn split(&self, text: &str) -> Result<Vec<Span>, String>;
}

const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "ca", "cf", "dr", "e.g", "eq", "eqs", "etc", "fig", "figs", "i.e", "inc", "ltd", "mr", "mrs",
    "ms", "no", "nos", "prof", "ref", "refs", "resp", "sp", "spp", "st", "vol", "vs", "viz", "wt", "tab",
];

/// Punctuation-driven splitter for scientific prose: a sentence ends at
/// `.`, `!` or `?` (plus closing quotes or brackets) followed by whitespace
/// and an upper-case letter, or at a line break. Common abbreviations,
/// initials and decimal points do not end a sentence.
#[derive(Clone, Debug, Default)]
pub struct RuleSplitter;

impl RuleSplitter {
    fn is_abbreviation(chars: &[char], dot: usize) -> bool {
        let mut start = dot;
        while start > 0 && (chars[start - 1].is_alphanumeric() || chars[start - 1] == '.') {
            start -= 1;
        }
        let word: String = chars[start..dot].iter().collect::<String>().to_lowercase();
        if word.is_empty() {
            return false;
        }
        if ABBREVIATIONS.contains(&word.as_str()) {
            return true;
        }
        // Single initial such as "J." in "J. Smith".
        word.chars().count() == 1 && chars[start].is_uppercase()
    }
}

impl SentenceSplitter for RuleSplitter {
    fn split(&self, text: &str) -> Result<Vec<Span>, String> {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let mut cuts = Vec::new();
        let mut i = 0;
        while i < n {
            let c = chars[i];
            if c == '\n' {
                cuts.push(i + 1);
            } else if matches!(c, '.' | '!' | '?') {
                let mut end = i + 1;
                while end < n && matches!(chars[end], '"' | '\'' | ')' | ']' | '”' | '’') {
                    end += 1;
                }
                let mut next = end;
                while next < n && chars[next].is_whitespace() && chars[next] != '\n' {
                    next += 1;
                }
                let followed_by_space = next > end;
                let starts_upper = next < n
                    && (chars[next].is_uppercase()
                        || (matches!(chars[next], '(' | '[' | '"' | '“')
                            && chars.get(next + 1).is_some_and(|c| c.is_uppercase())));
                let abbreviation = c == '.' && RuleSplitter::is_abbreviation(&chars, i);
                if followed_by_space && starts_upper && !abbreviation {
                    cuts.push(end);
                    i = end;
                    continue;
                }
            }
            i += 1;
        }
        cuts.push(n);
        let mut spans = Vec::new();
        let mut start = 0;
        for cut in cuts {
            if cut > start {
                spans.push(Span::new(start, cut));
                start = cut;
            }
        }
        Ok(spans)
    }
}

/// Splits further any sentence whose token count would exceed the encoder
/// capacity, preferring cuts at whitespace.
pub struct CappedSplitter<'a> {
    pub inner: &'a dyn SentenceSplitter,
    pub tokenizer: &'a dyn SubwordTokenizer,
    /// Capacity including the sentinel and terminator tokens.
    pub max_tokens: usize,
}

impl SentenceSplitter for CappedSplitter<'_> {
    fn split(&self, text: &str) -> Result<Vec<Span>, String> {
        if self.max_tokens < 3 {
            return Err(format!("token cap {} too small", self.max_tokens));
        }
        let budget = self.max_tokens - 2;
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        for span in self.inner.split(text)? {
            let piece_text = char_slice(text, span.start, span.end).ok_or("splitter span out of range")?;
            let pieces: Vec<Span> = self
                .tokenizer
                .tokenize(piece_text)
                .into_iter()
                .filter_map(|p| p.span)
                .collect();
            if pieces.len() <= budget {
                out.push(span);
                continue;
            }
            let mut chunk_start = span.start;
            let mut first_piece = 0;
            while pieces.len() - first_piece > budget {
                let limit = first_piece + budget;
                // Latest piece boundary inside the budget that begins a word.
                let cut_piece = (first_piece + 1..=limit)
                    .rev()
                    .find(|&k| {
                        let at = span.start + pieces[k].start;
                        at > 0 && chars[at - 1].is_whitespace()
                    })
                    .unwrap_or(limit);
                let cut = span.start + pieces[cut_piece].start;
                out.push(Span::new(chunk_start, cut));
                chunk_start = cut;
                first_piece = cut_piece;
            }
            out.push(Span::new(chunk_start, span.end));
        }
        Ok(out)
    }
}

fn trim_span(chars: &[char], span: Span) -> Option<Span> {
    let mut lo = span.start;
    let mut hi = span.end;
    while lo < hi && chars[lo].is_whitespace() {
        lo += 1;
    }
    while hi > lo && chars[hi - 1].is_whitespace() {
        hi -= 1;
    }
    Span::try_new(lo, hi)
}

/// Sentences of a document: the splitter's spans, whitespace-trimmed, with
/// whitespace-only pieces dropped.
pub fn split_sentences(document: &Document, splitter: &dyn SentenceSplitter) -> Result<Vec<Sentence>, TextError> {
    let fail = |reason: String| TextError::Splitter {
        doc_id: document.doc_id.clone(),
        reason,
    };
    let chars: Vec<char> = document.text.chars().collect();
    let spans = splitter.split(&document.text).map_err(fail)?;
    let mut prev_end = 0;
    for s in &spans {
        if s.start < prev_end || s.end > chars.len() || s.start >= s.end {
            return Err(fail(format!("span {s} is out of order or out of range")));
        }
        prev_end = s.end;
    }
    let covered: usize = spans
        .iter()
        .map(|s| chars[s.start..s.end].iter().filter(|c| !c.is_whitespace()).count())
        .sum();
    let total = chars.iter().filter(|c| !c.is_whitespace()).count();
    if covered != total {
        return Err(fail(format!("spans cover {covered} of {total} non-space characters")));
    }
    Ok(spans
        .into_iter()
        .filter_map(|s| trim_span(&chars, s))
        .enumerate()
        .map(|(index, span)| Sentence {
            doc_id: document.doc_id.clone(),
            index,
            span,
            text: chars[span.start..span.end].iter().collect(),
        })
        .collect())
}

/// Shift a sentence-relative span into document coordinates.
pub fn to_paragraph_span(sentence: &Sentence, span: Span) -> Result<Span, TextError> {
    let len = sentence.char_len();
    if span.end > len || span.is_empty() {
        return Err(TextError::SpanOutOfBounds { span, len });
    }
    Ok(span.shift(sentence.span.start))
}

/// Where a document span lands among sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Located {
    pub sentence: usize,
    /// Sentence-relative, cut at the sentence end.
    pub span: Span,
    /// The document span ran past the end of its sentence.
    pub truncated: bool,
}

/// Assign a document span to the sentence containing its first
/// non-whitespace character, truncating at that sentence's end.
pub fn locate_span(sentences: &[Sentence], span: Span) -> Option<Located> {
    let idx = sentences.iter().position(|s| s.span.end > span.start)?;
    let s = &sentences[idx];
    let start = span.start.max(s.span.start);
    let end = span.end.min(s.span.end);
    let local = Span::try_new(start - s.span.start, end.checked_sub(s.span.start)?)?;
    Some(Located {
        sentence: idx,
        span: local,
        truncated: span.end > s.span.end,
    })
}

/// Sentence-relative span back to text, by code points.
pub fn sentence_slice(sentence: &Sentence, span: Span) -> Option<&str> {
    char_slice(&sentence.text, span.start, span.end)
}

pub fn text_len(text: &str) -> usize {
    char_len(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text)
    }

    #[test]
    fn splits_two_short_sentences() {
        let s = split_sentences(&doc("A is 5 m. B is 6 m."), &RuleSplitter).unwrap();
        let spans: Vec<_> = s.iter().map(|s| s.span).collect();
        assert_eq!(spans, vec![Span::new(0, 9), Span::new(10, 19)]);
        assert_eq!(s[1].text, "B is 6 m.");
    }

    #[test]
    fn no_terminal_punctuation_is_one_sentence() {
        let s = split_sentences(&doc("a mass of 25 kg"), &RuleSplitter).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].span, Span::new(0, 15));
    }

    #[test]
    fn abbreviations_and_decimals_do_not_split() {
        let text = "See Fig. 3 for 2.5 mg, e.g. Water. J. Smith et al. Found it.";
        let s = split_sentences(&doc(text), &RuleSplitter).unwrap();
        let texts: Vec<_> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["See Fig. 3 for 2.5 mg, e.g. Water.", "J. Smith et al. Found it."]);
    }

    #[test]
    fn capped_splitter_respects_budget() {
        let words: Vec<String> = (0..1200).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let tok = WhitespaceTokenizer::default();
        let capped = CappedSplitter {
            inner: &RuleSplitter,
            tokenizer: &tok,
            max_tokens: 512,
        };
        let sentences = split_sentences(&doc(&text), &capped).unwrap();
        assert!(sentences.len() >= 3);
        for s in &sentences {
            assert!(tok.tokenize(&s.text).len() + 2 <= 512);
        }
        let rebuilt: Vec<String> = sentences.iter().map(|s| s.text.clone()).collect();
        assert_eq!(rebuilt.join(" "), text);
    }

    #[test]
    fn bad_splitter_output_is_an_error() {
        struct Broken;
        impl SentenceSplitter for Broken {
            fn split(&self, _: &str) -> Result<Vec<Span>, String> {
                Ok(vec![Span::new(0, 2)])
            }
        }
        let err = split_sentences(&doc("abc def"), &Broken).unwrap_err();
        assert!(matches!(err, TextError::Splitter { ref doc_id, .. } if doc_id == "d"));
    }

    #[test]
    fn paragraph_spans() {
        let s = Sentence {
            doc_id: "d".into(),
            index: 0,
            span: Span::new(100, 160),
            text: "x".repeat(60),
        };
        assert_eq!(to_paragraph_span(&s, Span::new(5, 10)).unwrap(), Span::new(105, 110));
        assert_eq!(to_paragraph_span(&s, Span::new(0, 60)).unwrap(), s.span);
        assert!(to_paragraph_span(&s, Span::new(50, 61)).is_err());
    }

    #[test]
    fn decode_then_shift_into_document() {
        let text = format!("{}The mass is 25 kg", " ".repeat(40));
        let d = doc(&text);
        let sentences = split_sentences(&d, &RuleSplitter).unwrap();
        assert_eq!(sentences[0].span.start, 40);
        let a = align_tokens(&sentences[0].text, &WhitespaceTokenizer::default(), 64).unwrap();
        let bio = encode_bio(&a, &[Span::new(12, 17)]).unwrap();
        let local = decode_bio(&bio, &a).unwrap()[0];
        let para = to_paragraph_span(&sentences[0], local).unwrap();
        assert_eq!(para, Span::new(52, 57));
        assert_eq!(d.slice(para), Some("25 kg"));
    }

    #[test]
    fn locate_truncates_cross_sentence_spans() {
        let d = doc("A is 5 m. B is 6 m.");
        let s = split_sentences(&d, &RuleSplitter).unwrap();
        let loc = locate_span(&s, Span::new(5, 12)).unwrap();
        assert_eq!(loc, Located { sentence: 0, span: Span::new(5, 9), truncated: true });
        let loc = locate_span(&s, Span::new(15, 18)).unwrap();
        assert_eq!(loc, Located { sentence: 1, span: Span::new(5, 8), truncated: false });
        assert!(locate_span(&s, Span::new(30, 31)).is_none());
    }
}
