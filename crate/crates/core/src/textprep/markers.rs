use serde::{Deserialize, Serialize};

use super::{Sentence, TextError};
use crate::corpus::{char_len, Span};

pub const QUANTITY_MARKER: char = '$';
pub const ENTITY_MARKER: char = '#';

/// An inserted marker symbol at a position of the marked text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerPos {
    pub symbol: char,
    pub position: usize,
    pub opening: bool,
}

/// A sentence copy with marker symbols around one or two spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSentence {
    pub text: String,
    /// For each character of `text`: its offset in the original sentence, or
    /// `None` for inserted characters (markers and their padding spaces).
    origin: Vec<Option<usize>>,
    pub markers: Vec<MarkerPos>,
    pub primary: Span,
    pub secondary: Option<Span>,
}

impl MarkedSentence {
    /// Original sentence offset of marked-text position `p`.
    pub fn offset_map(&self, p: usize) -> Option<usize> {
        self.origin.get(p).copied().flatten()
    }

    pub fn is_inserted(&self, p: usize) -> bool {
        matches!(self.origin.get(p), Some(None))
    }

    pub fn marker_at(&self, p: usize) -> Option<&MarkerPos> {
        self.markers.iter().find(|m| m.position == p)
    }

    pub fn char_len(&self) -> usize {
        self.origin.len()
    }

    /// The original sentence, recovered by dropping inserted characters.
    pub fn original_text(&self) -> String {
        self.text
            .chars()
            .zip(&self.origin)
            .filter(|(_, o)| o.is_some())
            .map(|(c, _)| c)
            .collect()
    }
}

/// Enclose `primary` in `primary_symbol` and, optionally, `secondary` in
/// `secondary_symbol`. Each marker is a standalone space-separated symbol:
/// "mass is 25 kg" with (8,13) and '$' gives "mass is $ 25 kg $".
pub fn insert_markers(
    sentence: &Sentence,
    primary: Span,
    primary_symbol: char,
    secondary: Option<(Span, char)>,
) -> Result<MarkedSentence, TextError> {
    let len = char_len(&sentence.text);
    let mut spans = vec![(primary, primary_symbol)];
    spans.extend(secondary);
    for (span, _) in &spans {
        if span.end > len || span.start >= span.end {
            return Err(TextError::SpanOutOfBounds { span: *span, len });
        }
    }
    if let [(a, _), (b, _)] = spans.as_slice() {
        if a.overlaps(b) {
            return Err(TextError::OverlappingSpans(*a, *b));
        }
    }

    // (position, closes-before-opens, symbol, opening)
    let mut events: Vec<(usize, u8, char, bool)> = Vec::new();
    for (span, symbol) in &spans {
        events.push((span.start, 1, *symbol, true));
        events.push((span.end, 0, *symbol, false));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut text = String::new();
    let mut origin = Vec::new();
    let mut markers = Vec::new();
    let push = |c: char, o: Option<usize>, text: &mut String, origin: &mut Vec<Option<usize>>| {
        text.push(c);
        origin.push(o);
    };
    let mut events = events.into_iter().peekable();
    let mut last_was_close_at: Option<usize> = None;
    for (i, c) in sentence.text.chars().chain(std::iter::once('\0')).enumerate() {
        while let Some(&(pos, _, symbol, opening)) = events.peek() {
            if pos != i {
                break;
            }
            events.next();
            if opening {
                if last_was_close_at == Some(i) {
                    push(' ', None, &mut text, &mut origin);
                }
                markers.push(MarkerPos { symbol, position: origin.len(), opening });
                push(symbol, None, &mut text, &mut origin);
                push(' ', None, &mut text, &mut origin);
            } else {
                push(' ', None, &mut text, &mut origin);
                markers.push(MarkerPos { symbol, position: origin.len(), opening });
                push(symbol, None, &mut text, &mut origin);
                last_was_close_at = Some(i);
            }
        }
        if i < len {
            push(c, Some(i), &mut text, &mut origin);
        }
    }
    Ok(MarkedSentence {
        text,
        origin,
        markers,
        primary,
        secondary: secondary.map(|(s, _)| s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(text: &str) -> Sentence {
        Sentence {
            doc_id: "d".into(),
            index: 0,
            span: Span::new(0, char_len(text)),
            text: text.into(),
        }
    }

    #[test]
    fn quantity_marker_example() {
        let m = insert_markers(&sentence("mass is 25 kg"), Span::new(8, 13), '$', None).unwrap();
        assert_eq!(m.text, "mass is $ 25 kg $");
        assert_eq!(m.offset_map(10), Some(8));
        assert_eq!(m.offset_map(8), None);
        assert_eq!(m.markers.len(), 2);
        assert_eq!(m.original_text(), "mass is 25 kg");
    }

    #[test]
    fn quantity_and_entity_markers() {
        let m = insert_markers(
            &sentence("mass is 25 kg"),
            Span::new(8, 13),
            '$',
            Some((Span::new(0, 4), '#')),
        )
        .unwrap();
        assert_eq!(m.text, "# mass # is $ 25 kg $");
    }

    #[test]
    fn adjacent_spans_keep_markers_separate() {
        let m = insert_markers(&sentence("25kg"), Span::new(0, 2), '$', Some((Span::new(2, 4), '#'))).unwrap();
        assert_eq!(m.text, "$ 25 $ # kg #");
        assert_eq!(m.original_text(), "25kg");
    }

    #[test]
    fn rejects_bad_spans() {
        let s = sentence("mass is 25 kg");
        assert!(matches!(
            insert_markers(&s, Span::new(8, 14), '$', None),
            Err(TextError::SpanOutOfBounds { .. })
        ));
        assert!(matches!(
            insert_markers(&s, Span::new(8, 13), '$', Some((Span::new(5, 9), '#'))),
            Err(TextError::OverlappingSpans(..))
        ));
    }
}
