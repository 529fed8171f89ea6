//! Paragraph texts and standoff TSV annotations.
//!
//! Offsets are counted in Unicode code points. Each document lives in
//! `<docId>.txt`; its annotations in `<docId>.tsv` with the columns
//! `docId, annotSet, annotType, startOffset, endOffset, annotId, text, other`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modcls::ModifierLabel;

pub const TSV_HEADER: [&str; 8] = [
    "docId",
    "annotSet",
    "annotType",
    "startOffset",
    "endOffset",
    "annotId",
    "text",
    "other",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no text file for document {doc_id} (expected {path})")]
    MissingText { doc_id: String, path: PathBuf },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("span text mismatch in {doc_id}/{annot_id}: file says {expected:?}, document has {found:?}")]
    SpanTextMismatch {
        doc_id: String,
        annot_id: String,
        expected: String,
        found: String,
    },
    #[error("annotation {doc_id}/{annot_id} cannot be written: {reason}")]
    Schema {
        doc_id: String,
        annot_id: String,
        reason: String,
    },
    #[error("corpus failed validation with {} violation(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("cannot split a corpus of {0} document(s)")]
    TooSmall(usize),
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("split of {docs} documents at ratio {ratio} leaves an empty partition")]
    EmptyPartition { docs: usize, ratio: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Half-open character range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Panics if `start >= end`.
    pub fn new(start: usize, end: usize) -> Span {
        assert!(start < end, "empty or inverted span ({start}, {end})");
        Span { start, end }
    }

    pub fn try_new(start: usize, end: usize) -> Option<Span> {
        (start < end).then_some(Span { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn shift(&self, by: usize) -> Span {
        Span {
            start: self.start + by,
            end: self.end + by,
        }
    }

    /// Character gap between two spans; 0 when they overlap or touch.
    pub fn gap(&self, other: &Span) -> usize {
        if self.overlaps(other) {
            0
        } else if other.start >= self.end {
            other.start - self.end
        } else {
            self.start - other.end
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

/// Number of code points in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slice `text` by code-point offsets. `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain([text.len()]);
    let lo = indices.by_ref().nth(start)?;
    let hi = if end == start {
        lo
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[lo..hi])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Document {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }

    pub fn char_len(&self) -> usize {
        char_len(&self.text)
    }

    pub fn slice(&self, span: Span) -> Option<&str> {
        char_slice(&self.text, span.start, span.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnnotType {
    Quantity,
    MeasuredEntity,
    MeasuredProperty,
    Qualifier,
}

impl AnnotType {
    pub const ALL: [AnnotType; 4] = [
        AnnotType::Quantity,
        AnnotType::MeasuredEntity,
        AnnotType::MeasuredProperty,
        AnnotType::Qualifier,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnnotType::Quantity => "Quantity",
            AnnotType::MeasuredEntity => "MeasuredEntity",
            AnnotType::MeasuredProperty => "MeasuredProperty",
            AnnotType::Qualifier => "Qualifier",
        }
    }
}

impl fmt::Display for AnnotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnnotType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnnotType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown annotation type {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    HasQuantity,
    HasProperty,
    Qualifies,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [
        RelationType::HasQuantity,
        RelationType::HasProperty,
        RelationType::Qualifies,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationType::HasQuantity => "HasQuantity",
            RelationType::HasProperty => "HasProperty",
            RelationType::Qualifies => "Qualifies",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationType,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub annot_id: String,
    pub annot_type: AnnotType,
    /// Document-relative.
    pub span: Span,
    pub text: String,
    pub unit: Option<String>,
    pub modifiers: BTreeSet<ModifierLabel>,
    pub relations: Vec<Relation>,
}

impl Annotation {
    pub fn new(
        annot_id: impl Into<String>,
        annot_type: AnnotType,
        span: Span,
        text: impl Into<String>,
    ) -> Annotation {
        Annotation {
            annot_id: annot_id.into(),
            annot_type,
            span,
            text: text.into(),
            unit: None,
            modifiers: BTreeSet::new(),
            relations: Vec::new(),
        }
    }

    pub fn relation(&self, kind: RelationType) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.kind == kind)
            .map(|r| r.target.as_str())
    }

    pub fn set_relation(&mut self, kind: RelationType, target: impl Into<String>) {
        let target = target.into();
        match self.relations.iter_mut().find(|r| r.kind == kind) {
            Some(r) => r.target = target,
            None => self.relations.push(Relation { kind, target }),
        }
    }

    pub fn remove_relation(&mut self, kind: RelationType) {
        self.relations.retain(|r| r.kind != kind);
    }
}

/// The annotations anchored on one Quantity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub set_id: u32,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn of_type(&self, kind: AnnotType) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.annot_type == kind)
    }

    pub fn first_of(&self, kind: AnnotType) -> Option<&Annotation> {
        self.of_type(kind).next()
    }

    pub fn quantity(&self) -> Option<&Annotation> {
        self.first_of(AnnotType::Quantity)
    }

    pub fn get(&self, annot_id: &str) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.annot_id == annot_id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: BTreeMap<String, Document>,
    pub annotation_sets: BTreeMap<String, Vec<AnnotationSet>>,
}

impl Corpus {
    pub fn add_document(&mut self, doc: Document) {
        self.documents.insert(doc.doc_id.clone(), doc);
    }

    pub fn sets(&self, doc_id: &str) -> &[AnnotationSet] {
        self.annotation_sets
            .get(doc_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn annotations(&self) -> impl Iterator<Item = (&str, &AnnotationSet, &Annotation)> {
        self.annotation_sets.iter().flat_map(|(doc_id, sets)| {
            sets.iter().flat_map(move |set| {
                set.annotations
                    .iter()
                    .map(move |a| (doc_id.as_str(), set, a))
            })
        })
    }

    /// Number of distinct annotations of a type. Entities shared between
    /// sets in the source file appear once per set and are counted once per
    /// distinct (document, id).
    pub fn count(&self, kind: AnnotType) -> usize {
        self.annotations()
            .filter(|(_, _, a)| a.annot_type == kind)
            .map(|(doc, _, a)| (doc, a.annot_id.as_str()))
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Restrict to the given documents, keeping their annotation sets.
    pub fn subset<'a>(&self, doc_ids: impl IntoIterator<Item = &'a str>) -> Corpus {
        let mut out = Corpus::default();
        for id in doc_ids {
            if let Some(doc) = self.documents.get(id) {
                out.add_document(doc.clone());
                if let Some(sets) = self.annotation_sets.get(id) {
                    out.annotation_sets.insert(id.to_string(), sets.clone());
                }
            }
        }
        out
    }
}

/// The `other` column.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtherColumn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mods: Vec<String>,
    #[serde(rename = "HasQuantity", default, skip_serializing_if = "Option::is_none")]
    pub has_quantity: Option<String>,
    #[serde(rename = "HasProperty", default, skip_serializing_if = "Option::is_none")]
    pub has_property: Option<String>,
    #[serde(rename = "Qualifies", default, skip_serializing_if = "Option::is_none")]
    pub qualifies: Option<String>,
}

impl OtherColumn {
    pub fn is_empty(&self) -> bool {
        *self == OtherColumn::default()
    }

    fn relation_slot(&mut self, kind: RelationType) -> &mut Option<String> {
        match kind {
            RelationType::HasQuantity => &mut self.has_quantity,
            RelationType::HasProperty => &mut self.has_property,
            RelationType::Qualifies => &mut self.qualifies,
        }
    }

    fn from_annotation(a: &Annotation) -> Result<OtherColumn, String> {
        let mut other = OtherColumn {
            unit: a.unit.clone(),
            mods: a.modifiers.iter().map(|m| m.as_str().to_string()).collect(),
            ..OtherColumn::default()
        };
        for r in &a.relations {
            let slot = other.relation_slot(r.kind);
            if slot.is_some() {
                return Err(format!("more than one {} relation", r.kind));
            }
            *slot = Some(r.target.clone());
        }
        Ok(other)
    }

    fn relations(&self) -> Vec<Relation> {
        RelationType::ALL
            .into_iter()
            .filter_map(|kind| {
                let target = match kind {
                    RelationType::HasQuantity => &self.has_quantity,
                    RelationType::HasProperty => &self.has_property,
                    RelationType::Qualifies => &self.qualifies,
                };
                target.clone().map(|target| Relation { kind, target })
            })
            .collect()
    }
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Read every `<docId>.txt` in `dir`.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    list_files(dir, "txt")?
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(Document::new(file_stem(&path), text))
        })
        .collect()
}

struct RawRow {
    line: u64,
    doc_id: String,
    set_id: u32,
    annotation: Annotation,
}

fn parse_row(path: &Path, record: &csv::StringRecord, line: u64) -> Result<RawRow, CorpusError> {
    let malformed = |reason: String| CorpusError::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    if record.len() != TSV_HEADER.len() {
        return Err(malformed(format!(
            "expected {} columns, found {}",
            TSV_HEADER.len(),
            record.len()
        )));
    }
    let int = |idx: usize| -> Result<usize, CorpusError> {
        record[idx].trim().parse::<usize>().map_err(|_| {
            malformed(format!("{} is not an integer: {:?}", TSV_HEADER[idx], &record[idx]))
        })
    };
    let set_id = int(1)? as u32;
    let annot_type: AnnotType = record[2].parse().map_err(malformed)?;
    let (start, end) = (int(3)?, int(4)?);
    let span = Span::try_new(start, end)
        .ok_or_else(|| malformed(format!("empty or inverted span ({start},{end})")))?;
    let other_text = record[7].trim();
    let other: OtherColumn = if other_text.is_empty() {
        OtherColumn::default()
    } else {
        serde_json::from_str(other_text)
            .map_err(|e| malformed(format!("bad `other` column: {e}")))?
    };
    let modifiers = other
        .mods
        .iter()
        .map(|m| m.parse::<ModifierLabel>().map_err(|e| malformed(e)))
        .collect::<Result<BTreeSet<_>, _>>()?;
    let annotation = Annotation {
        annot_id: record[5].to_string(),
        annot_type,
        span,
        text: record[6].to_string(),
        unit: other.unit.clone(),
        modifiers,
        relations: other.relations(),
    };
    Ok(RawRow {
        line,
        doc_id: record[0].to_string(),
        set_id,
        annotation,
    })
}

/// Parse one TSV file into annotation sets ordered by set number.
pub fn read_tsv(path: &Path) -> Result<(Option<String>, Vec<AnnotationSet>), CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CorpusError::MalformedRow {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
    let mut doc_id: Option<String> = None;
    let mut sets: BTreeMap<u32, Vec<Annotation>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| CorpusError::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let row = parse_row(path, &record, line)?;
        match &doc_id {
            Some(d) if *d != row.doc_id => {
                return Err(CorpusError::MalformedRow {
                    path: path.to_path_buf(),
                    line: row.line,
                    reason: format!("docId {} differs from {} earlier in file", row.doc_id, d),
                })
            }
            Some(_) => {}
            None => doc_id = Some(row.doc_id.clone()),
        }
        sets.entry(row.set_id).or_default().push(row.annotation);
    }
    let sets = sets
        .into_iter()
        .map(|(set_id, annotations)| AnnotationSet {
            set_id,
            annotations,
        })
        .collect();
    Ok((doc_id, sets))
}

/// Load texts and annotations. The result is guaranteed to validate cleanly.
pub fn load_corpus(text_dir: &Path, tsv_dir: &Path) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    for doc in load_documents(text_dir)? {
        corpus.add_document(doc);
    }
    for path in list_files(tsv_dir, "tsv")? {
        let stem = file_stem(&path);
        let (doc_id, sets) = read_tsv(&path)?;
        let doc_id = doc_id.unwrap_or(stem);
        let Some(doc) = corpus.documents.get(&doc_id) else {
            return Err(CorpusError::MissingText {
                path: text_dir.join(format!("{doc_id}.txt")),
                doc_id,
            });
        };
        for set in &sets {
            for a in &set.annotations {
                let found = doc.slice(a.span);
                if found != Some(a.text.as_str()) {
                    return Err(CorpusError::SpanTextMismatch {
                        doc_id: doc_id.clone(),
                        annot_id: a.annot_id.clone(),
                        expected: a.text.clone(),
                        found: found.unwrap_or("<out of range>").to_string(),
                    });
                }
            }
        }
        if !sets.is_empty() {
            corpus.annotation_sets.insert(doc_id, sets);
        }
    }
    let violations = validate_corpus(&corpus);
    if !violations.is_empty() {
        return Err(CorpusError::Invalid(violations));
    }
    Ok(corpus)
}

fn check_field(doc_id: &str, a: &Annotation, field: &str) -> Result<(), CorpusError> {
    if field.contains(['\n', '\r']) {
        return Err(CorpusError::Schema {
            doc_id: doc_id.to_string(),
            annot_id: a.annot_id.clone(),
            reason: "line break inside a field".to_string(),
        });
    }
    Ok(())
}

/// Serialize one document's sets in TSV form.
pub fn tsv_string(doc_id: &str, sets: &[AnnotationSet]) -> Result<String, CorpusError> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| CorpusError::Schema {
        doc_id: doc_id.to_string(),
        annot_id: String::new(),
        reason: e.to_string(),
    };
    writer.write_record(TSV_HEADER).map_err(csv_err)?;
    for set in sets {
        for a in &set.annotations {
            let other = OtherColumn::from_annotation(a).map_err(|reason| CorpusError::Schema {
                doc_id: doc_id.to_string(),
                annot_id: a.annot_id.clone(),
                reason,
            })?;
            let other = if other.is_empty() {
                String::new()
            } else {
                serde_json::to_string(&other).expect("plain struct serializes")
            };
            check_field(doc_id, a, &a.text)?;
            check_field(doc_id, a, &a.annot_id)?;
            writer
                .write_record([
                    doc_id,
                    &set.set_id.to_string(),
                    a.annot_type.as_str(),
                    &a.span.start.to_string(),
                    &a.span.end.to_string(),
                    &a.annot_id,
                    &a.text,
                    &other,
                ])
                .map_err(csv_err)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| CorpusError::Schema {
        doc_id: doc_id.to_string(),
        annot_id: String::new(),
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("fields are UTF-8"))
}

/// Write one TSV per document (header only for documents without sets).
pub fn write_tsv(corpus: &Corpus, out_dir: &Path) -> Result<usize, CorpusError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = 0;
    for doc_id in corpus.documents.keys() {
        let body = tsv_string(doc_id, corpus.sets(doc_id))?;
        let path = out_dir.join(format!("{doc_id}.tsv"));
        fs::write(&path, body).map_err(io_err(&path))?;
        written += 1;
    }
    Ok(written)
}

/// Write each document's text as `<docId>.txt`.
pub fn write_texts(corpus: &Corpus, out_dir: &Path) -> Result<usize, CorpusError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for doc in corpus.documents.values() {
        let path = out_dir.join(format!("{}.txt", doc.doc_id));
        fs::write(&path, &doc.text).map_err(io_err(&path))?;
    }
    Ok(corpus.documents.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    EmptyDocId,
    EmptyText,
    MissingDocument,
    SpanOutOfBounds,
    SpanTextMismatch,
    DuplicateAnnotId,
    QuantityOnlyField,
    DanglingRelation,
    QuantityCardinality,
    EntityCardinality,
    PropertyCardinality,
    RelationStructure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub doc_id: String,
    pub set_id: Option<u32>,
    pub annot_id: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.doc_id)?;
        if let Some(set) = self.set_id {
            write!(f, " set {set}")?;
        }
        if let Some(id) = &self.annot_id {
            write!(f, " {id}")?;
        }
        write!(f, ": {:?}: {}", self.rule, self.detail)
    }
}

fn validate_set(doc: Option<&Document>, doc_id: &str, set: &AnnotationSet, out: &mut Vec<Violation>) {
    let mut push = |annot_id: Option<&str>, rule: Rule, detail: String| {
        out.push(Violation {
            doc_id: doc_id.to_string(),
            set_id: Some(set.set_id),
            annot_id: annot_id.map(str::to_string),
            rule,
            detail,
        })
    };

    let mut ids: HashMap<&str, usize> = HashMap::new();
    for a in &set.annotations {
        *ids.entry(a.annot_id.as_str()).or_default() += 1;
    }
    for (id, n) in ids.iter().filter(|(_, n)| **n > 1) {
        push(Some(id), Rule::DuplicateAnnotId, format!("id used {n} times"));
    }

    for a in &set.annotations {
        let id = Some(a.annot_id.as_str());
        if let Some(doc) = doc {
            match doc.slice(a.span) {
                None => push(
                    id,
                    Rule::SpanOutOfBounds,
                    format!("span {} beyond text length {}", a.span, doc.char_len()),
                ),
                Some(s) if s != a.text => push(
                    id,
                    Rule::SpanTextMismatch,
                    format!("surface {:?} but text slice {:?}", a.text, s),
                ),
                Some(_) => {}
            }
        }
        if a.annot_type != AnnotType::Quantity && (a.unit.is_some() || !a.modifiers.is_empty()) {
            push(id, Rule::QuantityOnlyField, format!("{} carries unit or modifiers", a.annot_type));
        }
        for r in &a.relations {
            if !ids.contains_key(r.target.as_str()) {
                push(id, Rule::DanglingRelation, format!("{} -> {} not in set", r.kind, r.target));
            }
        }
    }

    let count = |t: AnnotType| set.of_type(t).count();
    let quantities = count(AnnotType::Quantity);
    if quantities != 1 {
        push(None, Rule::QuantityCardinality, format!("{quantities} Quantity annotations"));
    }
    let entities = count(AnnotType::MeasuredEntity);
    if entities > 1 {
        push(None, Rule::EntityCardinality, format!("{entities} MeasuredEntity annotations"));
    }
    let properties = count(AnnotType::MeasuredProperty);
    if properties > 1 {
        push(None, Rule::PropertyCardinality, format!("{properties} MeasuredProperty annotations"));
    }

    // Relation structure, checked only where the referenced annotations exist.
    let is_type = |target: &str, t: AnnotType| {
        set.get(target).is_some_and(|x| x.annot_type == t)
    };
    let entity = set.first_of(AnnotType::MeasuredEntity);
    let property = set.first_of(AnnotType::MeasuredProperty);
    match (entity, property) {
        (Some(e), Some(p)) => {
            if !p.relation(RelationType::HasQuantity).is_some_and(|t| is_type(t, AnnotType::Quantity)) {
                push(
                    Some(&p.annot_id),
                    Rule::RelationStructure,
                    "MeasuredProperty lacks HasQuantity to the Quantity".into(),
                );
            }
            if !e.relation(RelationType::HasProperty).is_some_and(|t| is_type(t, AnnotType::MeasuredProperty)) {
                push(
                    Some(&e.annot_id),
                    Rule::RelationStructure,
                    "MeasuredEntity lacks HasProperty to the MeasuredProperty".into(),
                );
            }
        }
        (Some(e), None) => {
            if !e.relation(RelationType::HasQuantity).is_some_and(|t| is_type(t, AnnotType::Quantity)) {
                push(
                    Some(&e.annot_id),
                    Rule::RelationStructure,
                    "MeasuredEntity lacks HasQuantity to the Quantity".into(),
                );
            }
        }
        _ => {}
    }
}

/// Every broken invariant, as data. Empty iff the corpus is well formed.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    for (key, doc) in &corpus.documents {
        let mut push = |rule: Rule, detail: &str| {
            out.push(Violation {
                doc_id: key.clone(),
                set_id: None,
                annot_id: None,
                rule,
                detail: detail.to_string(),
            })
        };
        if doc.doc_id.is_empty() {
            push(Rule::EmptyDocId, "document id is empty");
        }
        if doc.text.is_empty() {
            push(Rule::EmptyText, "document text is empty");
        }
    }
    for (doc_id, sets) in &corpus.annotation_sets {
        let doc = corpus.documents.get(doc_id);
        if doc.is_none() {
            out.push(Violation {
                doc_id: doc_id.clone(),
                set_id: None,
                annot_id: None,
                rule: Rule::MissingDocument,
                detail: "annotation sets reference an unknown document".into(),
            });
        }
        for set in sets {
            validate_set(doc, doc_id, set, &mut out);
        }
    }
    out
}

/// Document-level split; the first `floor(ratio * n)` shuffled ids form the
/// train half.
pub fn split_train_dev(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    let n = corpus.documents.len();
    if n < 2 {
        return Err(CorpusError::TooSmall(n));
    }
    let n_train = (ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(CorpusError::EmptyPartition { docs: n, ratio });
    }
    let mut ids: Vec<&str> = corpus.documents.keys().map(String::as_str).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, dev) = ids.split_at(n_train);
    Ok((corpus.subset(train.iter().copied()), corpus.subset(dev.iter().copied())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_slice_counts_code_points() {
        let text = "5 µm at 20 °C";
        assert_eq!(char_slice(text, 2, 4), Some("µm"));
        assert_eq!(char_slice(text, 8, 13), Some("20 °C"));
        assert_eq!(char_slice(text, 13, 13), Some(""));
        assert_eq!(char_slice(text, 12, 14), None);
    }

    #[test]
    fn span_gap() {
        let a = Span::new(10, 15);
        assert_eq!(a.gap(&Span::new(18, 20)), 3);
        assert_eq!(a.gap(&Span::new(0, 8)), 2);
        assert_eq!(a.gap(&Span::new(12, 30)), 0);
        assert_eq!(a.gap(&Span::new(15, 16)), 0);
    }

    #[test]
    fn other_column_parses_relations_and_mods() {
        let other: OtherColumn =
            serde_json::from_str(r#"{"unit": "mg", "mods": ["IsRange", "IsApproximate"]}"#).unwrap();
        assert_eq!(other.unit.as_deref(), Some("mg"));
        assert_eq!(other.mods.len(), 2);
        let other: OtherColumn = serde_json::from_str(r#"{"HasQuantity": "T1-1"}"#).unwrap();
        assert_eq!(
            other.relations(),
            vec![Relation {
                kind: RelationType::HasQuantity,
                target: "T1-1".into()
            }]
        );
    }

    #[test]
    fn duplicate_relation_kind_is_a_schema_error() {
        let mut a = Annotation::new("T1", AnnotType::MeasuredEntity, Span::new(0, 1), "x");
        a.relations.push(Relation { kind: RelationType::HasQuantity, target: "Q".into() });
        a.relations.push(Relation { kind: RelationType::HasQuantity, target: "R".into() });
        let set = AnnotationSet { set_id: 1, annotations: vec![a] };
        assert!(matches!(tsv_string("d", &[set]), Err(CorpusError::Schema { .. })));
    }

    #[test]
    fn split_rejects_bad_input() {
        let mut c = Corpus::default();
        c.add_document(Document::new("a", "x"));
        assert!(matches!(split_train_dev(&c, 0.9, 1), Err(CorpusError::TooSmall(1))));
        c.add_document(Document::new("b", "y"));
        assert!(matches!(split_train_dev(&c, 1.0, 1), Err(CorpusError::BadRatio(_))));
        assert!(matches!(split_train_dev(&c, 0.4, 1), Err(CorpusError::EmptyPartition { .. })));
        let (tr, dv) = split_train_dev(&c, 0.5, 1).unwrap();
        assert_eq!((tr.documents.len(), dv.documents.len()), (1, 1));
    }
}
