//! Training examples for every model, built from an annotated corpus.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotType, Annotation, AnnotationSet, Corpus, RelationType, Span};
use crate::modcls::ModifierLabel;
use crate::tagheads::TaggerVariant;
use crate::textprep::{
    align_marked, align_tokens, encode_bio, insert_markers, locate_span, split_sentences, unreachable_spans,
    BioSequence, Sentence, SentenceSplitter, SubwordTokenizer, TextError, TokenAlignment, ENTITY_MARKER,
    QUANTITY_MARKER,
};
use crate::unitdet::unit_mask;

/// Tokenizer, splitter and sequence cap shared by all builders.
#[derive(Clone, Copy)]
pub struct Preparer<'a> {
    pub tokenizer: &'a dyn SubwordTokenizer,
    pub splitter: &'a dyn SentenceSplitter,
    pub max_len: usize,
}

pub type TaggerExample = (TokenAlignment, BioSequence);
pub type UnitExample = (String, Vec<bool>);
pub type ModifierExample = (TokenAlignment, BTreeSet<ModifierLabel>);

/// What a builder kept and what it had to leave out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub examples: usize,
    pub spans: usize,
    /// Gold spans running past their sentence (cut at the boundary).
    pub cross_sentence: usize,
    /// Targets in a different sentence than their anchor, dropped.
    pub other_sentence: usize,
    /// Targets overlapping an earlier target or a marked span, dropped.
    pub overlapping: usize,
    /// Targets with no token left after truncation.
    pub unreachable: usize,
    pub truncated_sentences: usize,
    /// Quantities whose unit is not a substring of the phrase.
    pub unit_mismatch: usize,
}

impl DatasetStats {
    pub fn absorb(&mut self, o: &DatasetStats) {
        self.sentences += o.sentences;
        self.examples += o.examples;
        self.spans += o.spans;
        self.cross_sentence += o.cross_sentence;
        self.other_sentence += o.other_sentence;
        self.overlapping += o.overlapping;
        self.unreachable += o.unreachable;
        self.truncated_sentences += o.truncated_sentences;
        self.unit_mismatch += o.unit_mismatch;
    }
}

/// Annotation counts of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub paragraphs: usize,
    pub annotation_sets: usize,
    pub quantities: usize,
    pub measured_entities: usize,
    pub measured_properties: usize,
    pub qualifiers: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    CorpusStats {
        paragraphs: corpus.documents.len(),
        annotation_sets: corpus.annotation_sets.values().map(Vec::len).sum(),
        quantities: corpus.count(AnnotType::Quantity),
        measured_entities: corpus.count(AnnotType::MeasuredEntity),
        measured_properties: corpus.count(AnnotType::MeasuredProperty),
        qualifiers: corpus.count(AnnotType::Qualifier),
    }
}

struct Placed {
    sentence: usize,
    span: Span,
}

fn place(sentences: &[Sentence], a: &Annotation, stats: &mut DatasetStats) -> Option<Placed> {
    let located = locate_span(sentences, a.span)?;
    if located.truncated {
        stats.cross_sentence += 1;
    }
    Some(Placed {
        sentence: located.sentence,
        span: located.span,
    })
}

/// Keep spans in order, dropping any that overlap a kept one or `avoid`.
fn disjoint(mut spans: Vec<Span>, avoid: &[Span], stats: &mut DatasetStats) -> Vec<Span> {
    spans.sort();
    spans.dedup();
    let mut kept: Vec<Span> = Vec::new();
    for s in spans {
        if kept.iter().chain(avoid).any(|k| k.overlaps(&s)) {
            stats.overlapping += 1;
        } else {
            kept.push(s);
        }
    }
    kept
}

fn labelled(alignment: TokenAlignment, spans: &[Span], stats: &mut DatasetStats) -> Result<TaggerExample, TextError> {
    stats.unreachable += unreachable_spans(&alignment, spans).len();
    stats.spans += spans.len();
    stats.examples += 1;
    let bio = encode_bio(&alignment, spans)?;
    Ok((alignment, bio))
}

/// Targets of `kind` in `set` with a relation of `relation` to `anchor_id`
/// (any relation when `relation` is `None`), placed in sentence `at`.
fn targets(
    sentences: &[Sentence],
    set: &AnnotationSet,
    kind: AnnotType,
    relation: Option<(RelationType, &str)>,
    at: usize,
    stats: &mut DatasetStats,
) -> Vec<Span> {
    set.of_type(kind)
        .filter(|a| relation.is_none_or(|(r, id)| a.relation(r) == Some(id)))
        .filter_map(|a| {
            let p = place(sentences, a, stats)?;
            if p.sentence == at {
                Some(p.span)
            } else {
                stats.other_sentence += 1;
                None
            }
        })
        .collect()
}

/// BIO examples for one tagging variant. Quantity examples are plain
/// sentences; the others are marked copies, one per anchor:
/// entity on "$ quantity $", property on "$ quantity $" plus "# entity #",
/// qualifier_q on "$ quantity $", qualifier_p on "$ property $".
pub fn tagger_examples(
    corpus: &Corpus,
    variant: TaggerVariant,
    prep: &Preparer,
) -> Result<(Vec<TaggerExample>, DatasetStats), TextError> {
    let mut out = Vec::new();
    let mut stats = DatasetStats::default();
    for (doc_id, doc) in &corpus.documents {
        let sentences = split_sentences(doc, prep.splitter)?;
        stats.sentences += sentences.len();
        let sets = corpus.sets(doc_id);
        if variant == TaggerVariant::Quantity {
            let mut per_sentence: Vec<Vec<Span>> = vec![Vec::new(); sentences.len()];
            for a in sets.iter().flat_map(|s| s.of_type(AnnotType::Quantity)) {
                if let Some(p) = place(&sentences, a, &mut stats) {
                    per_sentence[p.sentence].push(p.span);
                }
            }
            for (sentence, spans) in sentences.iter().zip(per_sentence) {
                let alignment = align_tokens(&sentence.text, prep.tokenizer, prep.max_len)?;
                stats.truncated_sentences += usize::from(alignment.truncated);
                let spans = disjoint(spans, &[], &mut stats);
                out.push(labelled(alignment, &spans, &mut stats)?);
            }
            continue;
        }
        for set in sets {
            let Some(q) = set.quantity() else { continue };
            let Some(qp) = place(&sentences, q, &mut stats) else { continue };
            let sentence = &sentences[qp.sentence];
            let (primary, secondary, spans) = match variant {
                TaggerVariant::Quantity => unreachable!(),
                TaggerVariant::MeasuredEntity => {
                    let t = targets(&sentences, set, AnnotType::MeasuredEntity, None, qp.sentence, &mut stats);
                    (qp.span, None, disjoint(t, &[qp.span], &mut stats))
                }
                TaggerVariant::MeasuredProperty => {
                    let Some(e) = set.first_of(AnnotType::MeasuredEntity) else { continue };
                    let Some(ep) = place(&sentences, e, &mut stats) else { continue };
                    if ep.sentence != qp.sentence {
                        stats.other_sentence += 1;
                        continue;
                    }
                    if ep.span.overlaps(&qp.span) {
                        stats.overlapping += 1;
                        continue;
                    }
                    let t = targets(&sentences, set, AnnotType::MeasuredProperty, None, qp.sentence, &mut stats);
                    (
                        qp.span,
                        Some((ep.span, ENTITY_MARKER)),
                        disjoint(t, &[qp.span, ep.span], &mut stats),
                    )
                }
                TaggerVariant::QualifierQ => {
                    let rel = Some((RelationType::Qualifies, q.annot_id.as_str()));
                    let t = targets(&sentences, set, AnnotType::Qualifier, rel, qp.sentence, &mut stats);
                    (qp.span, None, disjoint(t, &[qp.span], &mut stats))
                }
                TaggerVariant::QualifierP => {
                    let Some(p) = set.first_of(AnnotType::MeasuredProperty) else { continue };
                    let Some(pp) = place(&sentences, p, &mut stats) else { continue };
                    let rel = Some((RelationType::Qualifies, p.annot_id.as_str()));
                    let t = targets(&sentences, set, AnnotType::Qualifier, rel, pp.sentence, &mut stats);
                    let sentence = &sentences[pp.sentence];
                    let marked = insert_markers(sentence, pp.span, QUANTITY_MARKER, None)?;
                    let alignment = align_marked(&marked, prep.tokenizer, prep.max_len)?;
                    stats.truncated_sentences += usize::from(alignment.truncated);
                    let spans = disjoint(t, &[pp.span], &mut stats);
                    out.push(labelled(alignment, &spans, &mut stats)?);
                    continue;
                }
            };
            let marked = insert_markers(sentence, primary, QUANTITY_MARKER, secondary)?;
            let alignment = align_marked(&marked, prep.tokenizer, prep.max_len)?;
            stats.truncated_sentences += usize::from(alignment.truncated);
            out.push(labelled(alignment, &spans, &mut stats)?);
        }
    }
    Ok((out, stats))
}

/// (phrase, unit mask) pairs from every Quantity carrying a unit. Units
/// that do not occur in the phrase are counted and left out.
pub fn unit_examples(corpus: &Corpus) -> (Vec<UnitExample>, DatasetStats) {
    let mut out = Vec::new();
    let mut stats = DatasetStats::default();
    for (_, _, a) in corpus.annotations() {
        if a.annot_type != AnnotType::Quantity || a.text.is_empty() {
            continue;
        }
        let Some(unit) = a.unit.as_deref().filter(|u| !u.trim().is_empty()) else {
            continue;
        };
        match unit_mask(&a.text, unit) {
            Some(mask) => {
                stats.examples += 1;
                out.push((a.text.clone(), mask));
            }
            None => stats.unit_mismatch += 1,
        }
    }
    (out, stats)
}

/// One "$"-marked copy per Quantity with its label set; quantities without
/// modifiers carry {None}.
pub fn modifier_examples(corpus: &Corpus, prep: &Preparer) -> Result<(Vec<ModifierExample>, DatasetStats), TextError> {
    let mut out = Vec::new();
    let mut stats = DatasetStats::default();
    for (doc_id, doc) in &corpus.documents {
        let sentences = split_sentences(doc, prep.splitter)?;
        stats.sentences += sentences.len();
        for q in corpus.sets(doc_id).iter().flat_map(|s| s.of_type(AnnotType::Quantity)) {
            let Some(qp) = place(&sentences, q, &mut stats) else { continue };
            let marked = insert_markers(&sentences[qp.sentence], qp.span, QUANTITY_MARKER, None)?;
            let alignment = align_marked(&marked, prep.tokenizer, prep.max_len)?;
            if alignment.marked_range(QUANTITY_MARKER).is_none() {
                stats.unreachable += 1;
                continue;
            }
            stats.truncated_sentences += usize::from(alignment.truncated);
            let labels = if q.modifiers.is_empty() {
                BTreeSet::from([ModifierLabel::None])
            } else {
                q.modifiers.clone()
            };
            stats.examples += 1;
            out.push((alignment, labels));
        }
    }
    Ok((out, stats))
}
