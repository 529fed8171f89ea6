//! The inference graph: quantity → {unit, modifiers, entity} → property →
//! qualifiers, per sentence, assembled into annotation sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotType, Annotation, AnnotationSet, Document, RelationType, Span};
use crate::modcls::{load_modifier_model, predict_modifiers, save_modifier_model, ModifierError, ModifierLabel, ModifierModel};
use crate::tagheads::{load_tagger, predict_spans, read_json, save_tagger, write_json, TaggerError, TaggerModel, TaggerVariant};
use crate::textprep::{
    align_marked, align_tokens, insert_markers, sentence_slice, split_sentences, to_paragraph_span, BasicOptions,
    MarkedSentence, Piece, Sentence, SentenceSplitter, SubwordTokenizer, TokenAlignment, WhitespaceTokenizer,
    WordPiece, ENTITY_MARKER, QUANTITY_MARKER,
};
use crate::unitdet::{load_unit_detector, predict_unit, save_unit_detector, UnitDetectorModel, UnitError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no candidate spans")]
    NoCandidates,
    #[error("bundle at {dir} lacks {missing:?}")]
    IncompleteBundle { dir: PathBuf, missing: Vec<String> },
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Modifier(#[from] ModifierError),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
}

/// What a stage sees for one sentence: the plain sentence, the marked copy
/// it must condition on (if any), and the tokenization of that copy.
pub struct TagInput<'a> {
    pub sentence: &'a Sentence,
    pub marked: Option<&'a MarkedSentence>,
    pub alignment: &'a TokenAlignment,
}

/// Proposes sentence-relative spans.
pub trait SpanTagger: Send + Sync {
    fn tag(&self, input: &TagInput) -> Result<Vec<Span>, String>;
}

pub trait UnitPredictor: Send + Sync {
    /// Unit text and its phrase-relative span.
    fn unit(&self, phrase: &str) -> Option<(String, Span)>;
}

pub trait ModifierPredictor: Send + Sync {
    fn modifiers(&self, input: &TagInput) -> Result<BTreeSet<ModifierLabel>, String>;
}

impl SpanTagger for TaggerModel {
    fn tag(&self, input: &TagInput) -> Result<Vec<Span>, String> {
        predict_spans(self, input.alignment).map_err(|e| e.to_string())
    }
}

impl UnitPredictor for UnitDetectorModel {
    fn unit(&self, phrase: &str) -> Option<(String, Span)> {
        predict_unit(self, phrase)
    }
}

impl ModifierPredictor for ModifierModel {
    fn modifiers(&self, input: &TagInput) -> Result<BTreeSet<ModifierLabel>, String> {
        predict_modifiers(self, input.alignment).map_err(|e| e.to_string())
    }
}

/// Borrowed stage implementations plus the text machinery they share.
/// Optional stages are skipped when absent.
pub struct Stages<'a> {
    pub quantity: &'a dyn SpanTagger,
    pub entity: Option<&'a dyn SpanTagger>,
    pub property: Option<&'a dyn SpanTagger>,
    pub qualifier_q: Option<&'a dyn SpanTagger>,
    pub qualifier_p: Option<&'a dyn SpanTagger>,
    pub unit: Option<&'a dyn UnitPredictor>,
    pub modifiers: Option<&'a dyn ModifierPredictor>,
    pub tokenizer: &'a dyn SubwordTokenizer,
    pub splitter: &'a dyn SentenceSplitter,
    pub max_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub documents: usize,
    pub sentences: usize,
    /// Sentences whose token sequence was cut at max_len.
    pub truncated_sentences: usize,
    /// Quantities touching a truncation point, dropped.
    pub dropped_truncated_quantities: usize,
    /// Stages that had to pick one of several candidates.
    pub multi_candidate_selections: usize,
    pub qualifier_merge_conflicts: usize,
    pub property_without_entity: usize,
    /// Stage name → runs that produced nothing.
    pub empty_predictions: BTreeMap<String, usize>,
    /// Stage name → caught failures.
    pub stage_errors: BTreeMap<String, usize>,
    pub messages: Vec<String>,
}

impl PipelineReport {
    pub fn absorb(&mut self, o: &PipelineReport) {
        self.documents += o.documents;
        self.sentences += o.sentences;
        self.truncated_sentences += o.truncated_sentences;
        self.dropped_truncated_quantities += o.dropped_truncated_quantities;
        self.multi_candidate_selections += o.multi_candidate_selections;
        self.qualifier_merge_conflicts += o.qualifier_merge_conflicts;
        self.property_without_entity += o.property_without_entity;
        for (k, v) in &o.empty_predictions {
            *self.empty_predictions.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &o.stage_errors {
            *self.stage_errors.entry(k.clone()).or_default() += v;
        }
        self.messages.extend(o.messages.iter().cloned());
    }

    fn error(&mut self, stage: &str, doc_id: &str, detail: impl std::fmt::Display) {
        *self.stage_errors.entry(stage.to_string()).or_default() += 1;
        self.messages.push(format!("{doc_id}: {stage}: {detail}"));
    }

    fn empty(&mut self, stage: &str) {
        *self.empty_predictions.entry(stage.to_string()).or_default() += 1;
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "documents = {}", self.documents);
        let _ = writeln!(s, "sentences = {}", self.sentences);
        let _ = writeln!(s, "truncated_sentences = {}", self.truncated_sentences);
        let _ = writeln!(s, "dropped_truncated_quantities = {}", self.dropped_truncated_quantities);
        let _ = writeln!(s, "multi_candidate_selections = {}", self.multi_candidate_selections);
        let _ = writeln!(s, "qualifier_merge_conflicts = {}", self.qualifier_merge_conflicts);
        let _ = writeln!(s, "property_without_entity = {}", self.property_without_entity);
        for (k, v) in &self.empty_predictions {
            let _ = writeln!(s, "empty_predictions.{k} = {v}");
        }
        for (k, v) in &self.stage_errors {
            let _ = writeln!(s, "stage_errors.{k} = {v}");
        }
        s
    }
}

/// The candidate nearest to `anchor` by character gap (0 when they
/// overlap); ties go to the earliest start.
pub fn select_closest(candidates: &[Span], anchor: Span) -> Result<Span, PipelineError> {
    candidates
        .iter()
        .copied()
        .min_by_key(|c| (c.gap(&anchor), c.start, c.end))
        .ok_or(PipelineError::NoCandidates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualifierTarget {
    Quantity,
    Property,
}

/// Reduce each list to its closest candidate, then union them. A span in
/// both lists keeps the property target. Returns the merged list and the
/// number of such duplicates.
pub fn merge_qualifiers(
    from_q: &[Span],
    from_p: &[Span],
    quantity: Span,
    property: Option<Span>,
) -> (Vec<(Span, QualifierTarget)>, usize) {
    let q = select_closest(from_q, quantity).ok();
    let p = property.and_then(|anchor| select_closest(from_p, anchor).ok());
    let mut out = Vec::new();
    let mut conflicts = 0;
    match (q, p) {
        (Some(a), Some(b)) if a == b => {
            conflicts += 1;
            out.push((b, QualifierTarget::Property));
        }
        (q, p) => {
            out.extend(q.map(|s| (s, QualifierTarget::Quantity)));
            out.extend(p.map(|s| (s, QualifierTarget::Property)));
        }
    }
    out.sort();
    (out, conflicts)
}

/// An annotation set before ids and relations are fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct SetDraft {
    pub quantity: Annotation,
    pub entity: Option<Annotation>,
    pub property: Option<Annotation>,
    pub qualifiers: Vec<(Annotation, QualifierTarget)>,
}

impl SetDraft {
    pub fn new(quantity: Annotation) -> SetDraft {
        SetDraft {
            quantity,
            entity: None,
            property: None,
            qualifiers: Vec::new(),
        }
    }
}

/// Wire up relations: entity → quantity without a property; property →
/// quantity and entity → property with one; each qualifier to its anchor
/// (the quantity when the property is missing). The flag reports a
/// property without an entity.
pub fn attach_relations(draft: SetDraft, set_id: u32) -> (AnnotationSet, bool) {
    let SetDraft {
        quantity,
        mut entity,
        mut property,
        qualifiers,
    } = draft;
    let qid = quantity.annot_id.clone();
    let orphan_property = property.is_some() && entity.is_none();
    match (&mut entity, &mut property) {
        (Some(e), Some(p)) => {
            p.set_relation(RelationType::HasQuantity, qid.clone());
            e.set_relation(RelationType::HasProperty, p.annot_id.clone());
        }
        (Some(e), None) => e.set_relation(RelationType::HasQuantity, qid.clone()),
        (None, Some(p)) => p.set_relation(RelationType::HasQuantity, qid.clone()),
        (None, None) => {}
    }
    let pid = property.as_ref().map(|p| p.annot_id.clone());
    let mut annotations = vec![quantity];
    annotations.extend(entity);
    annotations.extend(property);
    for (mut a, target) in qualifiers {
        let to = match (target, &pid) {
            (QualifierTarget::Property, Some(p)) => p.clone(),
            _ => qid.clone(),
        };
        a.set_relation(RelationType::Qualifies, to);
        annotations.push(a);
    }
    (AnnotationSet { set_id, annotations }, orphan_property)
}

struct SentenceRun<'a, 'b> {
    stages: &'a Stages<'b>,
    sentence: &'a Sentence,
    doc_id: &'a str,
    report: &'a mut PipelineReport,
}

impl SentenceRun<'_, '_> {
    fn marked(&mut self, stage: &str, primary: Span, secondary: Option<(Span, char)>) -> Option<(MarkedSentence, TokenAlignment)> {
        let marked = match insert_markers(self.sentence, primary, QUANTITY_MARKER, secondary) {
            Ok(m) => m,
            Err(e) => {
                self.report.error(stage, self.doc_id, e);
                return None;
            }
        };
        match align_marked(&marked, self.stages.tokenizer, self.stages.max_len) {
            Ok(al) => Some((marked, al)),
            Err(e) => {
                self.report.error(stage, self.doc_id, e);
                None
            }
        }
    }

    /// Candidates from a tagger on a marked copy, minus those overlapping
    /// `avoid`, reduced to the one closest to `anchor`.
    fn closest_from(
        &mut self,
        stage: &str,
        tagger: &dyn SpanTagger,
        primary: Span,
        secondary: Option<(Span, char)>,
        anchor: Span,
        avoid: &[Span],
    ) -> Option<Span> {
        let candidates = self.candidates(stage, tagger, primary, secondary, avoid)?;
        if candidates.len() > 1 {
            self.report.multi_candidate_selections += 1;
        }
        select_closest(&candidates, anchor).ok()
    }

    fn candidates(
        &mut self,
        stage: &str,
        tagger: &dyn SpanTagger,
        primary: Span,
        secondary: Option<(Span, char)>,
        avoid: &[Span],
    ) -> Option<Vec<Span>> {
        let (marked, al) = self.marked(stage, primary, secondary)?;
        let input = TagInput {
            sentence: self.sentence,
            marked: Some(&marked),
            alignment: &al,
        };
        let spans = match tagger.tag(&input) {
            Ok(s) => s,
            Err(e) => {
                self.report.error(stage, self.doc_id, e);
                return None;
            }
        };
        let len = self.sentence.char_len();
        let spans: Vec<Span> = spans
            .into_iter()
            .filter(|s| !s.is_empty() && s.end <= len && !avoid.iter().any(|a| a.overlaps(s)))
            .collect();
        if spans.is_empty() {
            self.report.empty(stage);
            return None;
        }
        Some(spans)
    }

    fn annotation(&self, id: String, kind: AnnotType, local: Span) -> Option<Annotation> {
        let text = sentence_slice(self.sentence, local)?.to_string();
        let span = to_paragraph_span(self.sentence, local).ok()?;
        Some(Annotation::new(id, kind, span, text))
    }
}

/// Run every stage over one document. Stage failures are recorded in the
/// report; the document always yields a (possibly empty) list of sets with
/// dense ids from 1.
pub fn run_pipeline(document: &Document, stages: &Stages) -> (Vec<AnnotationSet>, PipelineReport) {
    let mut report = PipelineReport {
        documents: 1,
        ..PipelineReport::default()
    };
    let doc_id = document.doc_id.as_str();
    let sentences = match split_sentences(document, stages.splitter) {
        Ok(s) => s,
        Err(e) => {
            report.error("split", doc_id, e);
            return (Vec::new(), report);
        }
    };
    let mut sets = Vec::new();
    for sentence in &sentences {
        report.sentences += 1;
        let alignment = match align_tokens(&sentence.text, stages.tokenizer, stages.max_len) {
            Ok(a) => a,
            Err(e) => {
                report.error("align", doc_id, e);
                continue;
            }
        };
        if alignment.truncated {
            report.truncated_sentences += 1;
        }
        let input = TagInput {
            sentence,
            marked: None,
            alignment: &alignment,
        };
        let mut quantities = match stages.quantity.tag(&input) {
            Ok(q) => q,
            Err(e) => {
                report.error("quantity", doc_id, e);
                continue;
            }
        };
        quantities.retain(|q| !q.is_empty() && q.end <= sentence.char_len());
        quantities.sort();
        quantities.dedup();
        if quantities.is_empty() {
            report.empty("quantity");
            continue;
        }
        let cut = alignment.covered_end();
        for q in quantities {
            if alignment.truncated && q.end >= cut {
                report.dropped_truncated_quantities += 1;
                continue;
            }
            let set_id = sets.len() as u32 + 1;
            let mut run = SentenceRun {
                stages,
                sentence,
                doc_id,
                report: &mut report,
            };
            let Some(mut quantity) = run.annotation(format!("T{set_id}-1"), AnnotType::Quantity, q) else {
                run.report.error("quantity", doc_id, format!("span {q} outside sentence"));
                continue;
            };

            if let Some(unit) = stages.unit {
                match unit.unit(&quantity.text) {
                    Some((text, _)) if !text.trim().is_empty() => quantity.unit = Some(text),
                    _ => run.report.empty("unit"),
                }
            }
            if let Some(model) = stages.modifiers {
                if let Some((marked, al)) = run.marked("modifiers", q, None) {
                    let input = TagInput {
                        sentence,
                        marked: Some(&marked),
                        alignment: &al,
                    };
                    match model.modifiers(&input) {
                        Ok(mods) => {
                            quantity.modifiers = mods.into_iter().filter(|m| *m != ModifierLabel::None).collect();
                        }
                        Err(e) => run.report.error("modifiers", doc_id, e),
                    }
                }
            }

            let mut draft = SetDraft::new(quantity);
            let entity = stages
                .entity
                .and_then(|t| run.closest_from("entity", t, q, None, q, &[q]));
            let property = match (entity, stages.property) {
                (Some(e), Some(t)) => run.closest_from("property", t, q, Some((e, ENTITY_MARKER)), q, &[q, e]),
                _ => None,
            };
            let taken: Vec<Span> = [Some(q), entity, property].into_iter().flatten().collect();
            let from_q = stages
                .qualifier_q
                .and_then(|t| run.candidates("qualifier_q", t, q, None, &taken))
                .unwrap_or_default();
            let from_p = match (property, stages.qualifier_p) {
                (Some(p), Some(t)) => run.candidates("qualifier_p", t, p, None, &taken).unwrap_or_default(),
                _ => Vec::new(),
            };
            run.report.multi_candidate_selections += usize::from(from_q.len() > 1) + usize::from(from_p.len() > 1);
            let (qualifiers, conflicts) = merge_qualifiers(&from_q, &from_p, q, property);
            run.report.qualifier_merge_conflicts += conflicts;

            draft.entity = entity.and_then(|e| run.annotation(format!("T{set_id}-2"), AnnotType::MeasuredEntity, e));
            draft.property = property.and_then(|p| run.annotation(format!("T{set_id}-3"), AnnotType::MeasuredProperty, p));
            for (k, (span, target)) in qualifiers.into_iter().enumerate() {
                if let Some(a) = run.annotation(format!("T{set_id}-{}", 4 + k), AnnotType::Qualifier, span) {
                    draft.qualifiers.push((a, target));
                }
            }
            let (set, orphan) = attach_relations(draft, set_id);
            if orphan {
                report.property_without_entity += 1;
            }
            sets.push(set);
        }
    }
    (sets, report)
}

/// Tokenizers a bundle can carry.
#[derive(Clone, Debug)]
pub enum BundleTokenizer {
    WordPiece(WordPiece),
    Whitespace(WhitespaceTokenizer),
}

impl BundleTokenizer {
    fn inner(&self) -> &dyn SubwordTokenizer {
        match self {
            BundleTokenizer::WordPiece(t) => t,
            BundleTokenizer::Whitespace(t) => t,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Tokenizer(e.to_string()))?;
        let meta = match self {
            BundleTokenizer::WordPiece(t) => {
                t.write_vocab(&dir.join("vocab.txt"))
                    .map_err(|e| PipelineError::Tokenizer(e.to_string()))?;
                TokenizerMeta::WordPiece { options: t.options().clone() }
            }
            BundleTokenizer::Whitespace(t) => TokenizerMeta::Whitespace { buckets: t.buckets },
        };
        Ok(write_json(&dir.join("tokenizer.json"), &meta)?)
    }

    pub fn load(dir: &Path) -> Result<BundleTokenizer, PipelineError> {
        let meta: TokenizerMeta = read_json(&dir.join("tokenizer.json"))?;
        Ok(match meta {
            TokenizerMeta::WordPiece { options } => BundleTokenizer::WordPiece(
                WordPiece::from_vocab_file(&dir.join("vocab.txt"), options)
                    .map_err(|e| PipelineError::Tokenizer(e.to_string()))?,
            ),
            TokenizerMeta::Whitespace { buckets } => BundleTokenizer::Whitespace(WhitespaceTokenizer { buckets }),
        })
    }
}

impl SubwordTokenizer for BundleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Piece> {
        self.inner().tokenize(text)
    }
    fn cls_id(&self) -> u32 {
        self.inner().cls_id()
    }
    fn sep_id(&self) -> u32 {
        self.inner().sep_id()
    }
    fn unk_id(&self) -> u32 {
        self.inner().unk_id()
    }
    fn pad_id(&self) -> u32 {
        self.inner().pad_id()
    }
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TokenizerMeta {
    WordPiece { options: BasicOptions },
    Whitespace { buckets: u32 },
}

/// Trained models for every stage. Property and qualifier-given-property
/// taggers may be absent; the pipeline then skips those stages.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub quantity_tagger: TaggerModel,
    pub entity_tagger: TaggerModel,
    pub property_tagger: Option<TaggerModel>,
    pub qualifier_q_tagger: TaggerModel,
    pub qualifier_p_tagger: Option<TaggerModel>,
    pub unit_detector: UnitDetectorModel,
    pub modifier_model: ModifierModel,
    pub tokenizer: BundleTokenizer,
}

pub fn variant_dir(run: &Path, name: &str) -> PathBuf {
    run.join(format!("variant-{name}")).join("best")
}

impl ModelBundle {
    pub fn stages<'a>(&'a self, splitter: &'a dyn SentenceSplitter) -> Stages<'a> {
        Stages {
            quantity: &self.quantity_tagger,
            entity: Some(&self.entity_tagger),
            property: self.property_tagger.as_ref().map(|t| t as &dyn SpanTagger),
            qualifier_q: Some(&self.qualifier_q_tagger),
            qualifier_p: self.qualifier_p_tagger.as_ref().map(|t| t as &dyn SpanTagger),
            unit: Some(&self.unit_detector),
            modifiers: Some(&self.modifier_model),
            tokenizer: &self.tokenizer,
            splitter,
            max_len: self.quantity_tagger.hyperparams.max_len,
        }
    }

    pub fn save(&self, run: &Path) -> Result<(), PipelineError> {
        for (variant, model) in [
            (TaggerVariant::Quantity, Some(&self.quantity_tagger)),
            (TaggerVariant::MeasuredEntity, Some(&self.entity_tagger)),
            (TaggerVariant::MeasuredProperty, self.property_tagger.as_ref()),
            (TaggerVariant::QualifierQ, Some(&self.qualifier_q_tagger)),
            (TaggerVariant::QualifierP, self.qualifier_p_tagger.as_ref()),
        ] {
            if let Some(m) = model {
                save_tagger(m, &variant_dir(run, variant.name()))?;
            }
        }
        save_unit_detector(&self.unit_detector, &variant_dir(run, "unit"))?;
        save_modifier_model(&self.modifier_model, &variant_dir(run, "modifier"))?;
        self.tokenizer.save(&run.join("tokenizer"))
    }

    /// Load from a run directory. Required slots that are missing are
    /// listed together in the error.
    pub fn load(run: &Path) -> Result<ModelBundle, PipelineError> {
        let required = [
            ("quantity", "tagset.json"),
            ("measured_entity", "tagset.json"),
            ("qualifier_q", "tagset.json"),
            ("unit", "unit.json"),
            ("modifier", "modifier.json"),
        ];
        let mut missing: Vec<String> = required
            .iter()
            .filter(|(name, file)| !variant_dir(run, name).join(file).is_file())
            .map(|(name, _)| name.to_string())
            .collect();
        if !run.join("tokenizer").join("tokenizer.json").is_file() {
            missing.push("tokenizer".into());
        }
        if !missing.is_empty() {
            return Err(PipelineError::IncompleteBundle {
                dir: run.to_path_buf(),
                missing,
            });
        }
        let optional = |name: &str| -> Result<Option<TaggerModel>, PipelineError> {
            let dir = variant_dir(run, name);
            if dir.join("tagset.json").is_file() {
                Ok(Some(load_tagger(&dir)?))
            } else {
                Ok(None)
            }
        };
        Ok(ModelBundle {
            quantity_tagger: load_tagger(&variant_dir(run, "quantity"))?,
            entity_tagger: load_tagger(&variant_dir(run, "measured_entity"))?,
            property_tagger: optional("measured_property")?,
            qualifier_q_tagger: load_tagger(&variant_dir(run, "qualifier_q"))?,
            qualifier_p_tagger: optional("qualifier_p")?,
            unit_detector: load_unit_detector(&variant_dir(run, "unit"))?,
            modifier_model: load_modifier_model(&variant_dir(run, "modifier"))?,
            tokenizer: BundleTokenizer::load(&run.join("tokenizer"))?,
        })
    }
}

/// Rule-based stand-ins for the trained models.
pub mod stubs {
    use super::*;

    /// Tags every occurrence of any listed phrase in the plain sentence,
    /// longest phrase first, never overlapping.
    #[derive(Clone, Debug, Default)]
    pub struct PhraseTagger {
        pub phrases: Vec<String>,
    }

    impl PhraseTagger {
        pub fn new<S: Into<String>>(phrases: impl IntoIterator<Item = S>) -> PhraseTagger {
            PhraseTagger {
                phrases: phrases.into_iter().map(Into::into).collect(),
            }
        }
    }

    impl SpanTagger for PhraseTagger {
        fn tag(&self, input: &TagInput) -> Result<Vec<Span>, String> {
            let chars: Vec<char> = input.sentence.text.chars().collect();
            let mut phrases: Vec<Vec<char>> = self.phrases.iter().map(|p| p.chars().collect()).collect();
            phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
            let mut taken = vec![false; chars.len()];
            let mut out = Vec::new();
            for p in phrases.iter().filter(|p| !p.is_empty() && p.len() <= chars.len()) {
                for i in 0..=chars.len() - p.len() {
                    if chars[i..i + p.len()] == p[..] && !taken[i..i + p.len()].iter().any(|&t| t) {
                        taken[i..i + p.len()].iter_mut().for_each(|t| *t = true);
                        out.push(Span::new(i, i + p.len()));
                    }
                }
            }
            out.sort();
            Ok(out)
        }
    }

    /// The last whitespace-separated word when it holds no digit.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct LastWordUnit;

    impl UnitPredictor for LastWordUnit {
        fn unit(&self, phrase: &str) -> Option<(String, Span)> {
            let chars: Vec<char> = phrase.chars().collect();
            let start = chars.iter().rposition(|c| c.is_whitespace())? + 1;
            let word: String = chars[start..].iter().collect();
            if word.is_empty() || word.chars().any(|c| c.is_ascii_digit()) {
                return None;
            }
            Some((word, Span::new(start, chars.len())))
        }
    }

    /// Always the same label set.
    #[derive(Clone, Debug)]
    pub struct FixedModifiers(pub BTreeSet<ModifierLabel>);

    impl ModifierPredictor for FixedModifiers {
        fn modifiers(&self, _input: &TagInput) -> Result<BTreeSet<ModifierLabel>, String> {
            Ok(self.0.clone())
        }
    }

    /// Fails on every call, for exercising error capture.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct FailingTagger;

    impl SpanTagger for FailingTagger {
        fn tag(&self, _input: &TagInput) -> Result<Vec<Span>, String> {
            Err("stage unavailable".into())
        }
    }
}
