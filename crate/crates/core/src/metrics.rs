//! Exact Match, whitespace-token F1 and SQuAD-style F1-overlap, per class,
//! per relation and micro-averaged over everything.
//!
//! Scoring works in groups. Annotation sets of a document are first aligned
//! by the overlap of their Quantity spans; every class then contributes,
//! per aligned pair (or unaligned set), a group of predicted and gold items
//! that are paired one-to-one. A group scores
//! `Σ pair token-F1 / max(#pred, #gold)`, so unmatched items count as 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotType, Annotation, AnnotationSet, Corpus, RelationType, Span};
use crate::modcls::ModifierLabel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("documents only in predictions: {only_pred:?}; only in gold: {only_gold:?}")]
    DocumentMismatch {
        only_pred: Vec<String>,
        only_gold: Vec<String>,
    },
}

/// Multiset token precision, recall and F1 over whitespace tokens.
/// Two empty strings agree perfectly; empty against non-empty scores 0.
pub fn token_prf(pred: &str, gold: &str) -> (f64, f64, f64) {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if p.is_empty() || g.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (0.0, 0.0, 0.0);
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    (precision, recall, 2.0 * precision * recall / (precision + recall))
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    token_prf(pred, gold).2
}

/// What an item carries beyond its span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Plain,
    Unit(String),
    Modifiers(BTreeSet<ModifierLabel>),
    /// Relation target span, document frame.
    Target(Span),
}

/// One predicted or gold item: its span, surface text and payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub span: Span,
    pub text: String,
    pub payload: Payload,
}

impl Item {
    pub fn plain(span: Span, text: impl Into<String>) -> Item {
        Item {
            span,
            text: text.into(),
            payload: Payload::Plain,
        }
    }
}

/// 1 iff offsets and payload are identical.
pub fn exact_match(pred: &Item, gold: &Item) -> u8 {
    u8::from(pred.span == gold.span && pred.payload == gold.payload)
}

/// Per-pair agreement.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact: f64,
}

/// Agreement of a pred/gold pair under the payload rules: units and spans
/// by token overlap, modifier sets by label-set F1, relations by source
/// overlap provided the targets overlap.
pub fn pair_score(pred: &Item, gold: &Item) -> PairScore {
    let exact = f64::from(exact_match(pred, gold));
    let (precision, recall, f1) = match (&pred.payload, &gold.payload) {
        (Payload::Unit(p), Payload::Unit(g)) => token_prf(p, g),
        (Payload::Modifiers(p), Payload::Modifiers(g)) => {
            let common = p.intersection(g).count() as f64;
            if p.is_empty() && g.is_empty() {
                (1.0, 1.0, 1.0)
            } else if common == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                let pr = common / p.len() as f64;
                let rc = common / g.len() as f64;
                (pr, rc, 2.0 * pr * rc / (pr + rc))
            }
        }
        (Payload::Target(pt), Payload::Target(gt)) => {
            if pred.span.overlaps(&gold.span) && pt.overlaps(gt) {
                token_prf(&pred.text, &gold.text)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
        _ => token_prf(&pred.text, &gold.text),
    };
    PairScore {
        precision,
        recall,
        f1,
        exact,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    /// Highest-scoring pair first; ties go to the earlier gold item.
    #[default]
    Greedy,
    /// Maximum-total assignment.
    Optimal,
}

fn score_matrix(pred: &[Item], gold: &[Item]) -> Vec<Vec<PairScore>> {
    pred.iter().map(|p| gold.iter().map(|g| pair_score(p, g)).collect()).collect()
}

/// One-to-one pairs `(pred index, gold index)` with positive agreement.
pub fn pair_items(pred: &[Item], gold: &[Item], pairing: Pairing) -> Vec<(usize, usize, PairScore)> {
    let scores = score_matrix(pred, gold);
    let pairs: Vec<(usize, usize)> = match pairing {
        Pairing::Greedy => {
            let mut candidates: Vec<(usize, usize)> = (0..pred.len())
                .flat_map(|i| (0..gold.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| scores[i][j].f1 > 0.0)
                .collect();
            let gold_key = |j: usize| (gold[j].span.start, gold[j].span.end, j);
            let pred_key = |i: usize| (pred[i].span.start, pred[i].span.end, i);
            candidates.sort_by(|&(a, b), &(c, d)| {
                scores[c][d]
                    .f1
                    .total_cmp(&scores[a][b].f1)
                    .then_with(|| gold_key(b).cmp(&gold_key(d)))
                    .then_with(|| pred_key(a).cmp(&pred_key(c)))
            });
            let mut used_p = vec![false; pred.len()];
            let mut used_g = vec![false; gold.len()];
            let mut out = Vec::new();
            for (i, j) in candidates {
                if !used_p[i] && !used_g[j] {
                    used_p[i] = true;
                    used_g[j] = true;
                    out.push((i, j));
                }
            }
            out
        }
        Pairing::Optimal => {
            let weights: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| s.f1).collect()).collect();
            hungarian_max(&weights)
                .into_iter()
                .filter(|&(i, j)| scores[i][j].f1 > 0.0)
                .collect()
        }
    };
    pairs.into_iter().map(|(i, j)| (i, j, scores[i][j])).collect()
}

/// Maximum-weight assignment on a rectangular matrix (Kuhn–Munkres with
/// potentials, O(n³)).
fn hungarian_max(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays per the classical formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort();
    out
}

/// F1-overlap of one group: paired token-F1 summed over
/// `max(#pred, #gold)`. Two empty lists agree perfectly.
pub fn f1_overlap(pred: &[Item], gold: &[Item]) -> f64 {
    f1_overlap_with(pred, gold, Pairing::Greedy)
}

pub fn f1_overlap_with(pred: &[Item], gold: &[Item], pairing: Pairing) -> f64 {
    let denom = pred.len().max(gold.len());
    if denom == 0 {
        return 1.0;
    }
    let total: f64 = pair_items(pred, gold, pairing).iter().map(|(_, _, s)| s.f1).sum();
    total / denom as f64
}

/// Micro F1-overlap over many groups: summed pair scores over summed
/// `max(#pred, #gold)`. No items at all scores 1.0.
pub fn micro_f1_overlap<'a>(groups: impl IntoIterator<Item = (&'a [Item], &'a [Item])>) -> f64 {
    let mut tally = Tally::default();
    for (p, g) in groups {
        tally.add_group(p, g, Pairing::Greedy);
    }
    tally.scores().f1_overlap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreClass {
    Quantity,
    Unit,
    Modifier,
    MeasuredEntity,
    MeasuredProperty,
    Qualifier,
    HasQuantity,
    HasProperty,
    Qualifies,
}

impl ScoreClass {
    pub const ALL: [ScoreClass; 9] = [
        ScoreClass::Quantity,
        ScoreClass::Unit,
        ScoreClass::Modifier,
        ScoreClass::MeasuredEntity,
        ScoreClass::MeasuredProperty,
        ScoreClass::Qualifier,
        ScoreClass::HasQuantity,
        ScoreClass::HasProperty,
        ScoreClass::Qualifies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreClass::Quantity => "Quantity",
            ScoreClass::Unit => "Unit",
            ScoreClass::Modifier => "Modifier",
            ScoreClass::MeasuredEntity => "MeasuredEntity",
            ScoreClass::MeasuredProperty => "MeasuredProperty",
            ScoreClass::Qualifier => "Qualifier",
            ScoreClass::HasQuantity => "HasQuantity",
            ScoreClass::HasProperty => "HasProperty",
            ScoreClass::Qualifies => "Qualifies",
        }
    }
}

impl fmt::Display for ScoreClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Running sums for one class (or the global micro-average).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n_pred: usize,
    pub n_gold: usize,
    /// Σ max(#pred, #gold) over groups.
    pub slots: usize,
    pub precision_sum: f64,
    pub recall_sum: f64,
    pub f1_sum: f64,
    pub exact_sum: f64,
}

impl Tally {
    fn absorb(&mut self, other: &Tally) {
        self.n_pred += other.n_pred;
        self.n_gold += other.n_gold;
        self.slots += other.slots;
        self.precision_sum += other.precision_sum;
        self.recall_sum += other.recall_sum;
        self.f1_sum += other.f1_sum;
        self.exact_sum += other.exact_sum;
    }

    fn add_group(&mut self, pred: &[Item], gold: &[Item], pairing: Pairing) {
        self.n_pred += pred.len();
        self.n_gold += gold.len();
        self.slots += pred.len().max(gold.len());
        for (_, _, s) in pair_items(pred, gold, pairing) {
            self.precision_sum += s.precision;
            self.recall_sum += s.recall;
            self.f1_sum += s.f1;
            self.exact_sum += s.exact;
        }
    }

    pub fn scores(&self) -> Scores {
        let ratio = |num: f64, den: usize| {
            if den == 0 {
                if self.slots == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                num / den as f64
            }
        };
        let precision = ratio(self.precision_sum, self.n_pred);
        let recall = ratio(self.recall_sum, self.n_gold);
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            precision,
            recall,
            f_measure,
            f1_overlap: ratio(self.f1_sum, self.slots),
            exact_match: ratio(self.exact_sum, self.slots),
            n_pred: self.n_pred,
            n_gold: self.n_gold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub f1_overlap: f64,
    pub exact_match: f64,
    pub n_pred: usize,
    pub n_gold: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub per_class: BTreeMap<ScoreClass, Scores>,
    pub global: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: BTreeMap<ScoreClass, Scores>,
    pub global: Scores,
    pub per_group: BTreeMap<String, Breakdown>,
}

#[derive(Clone, Debug, Default)]
pub struct ScoreOptions {
    pub pairing: Pairing,
    /// doc_id → subdomain.
    pub groups: Option<BTreeMap<String, String>>,
}

/// Character intersection over union, used to align annotation sets.
fn span_iou(a: Span, b: Span) -> f64 {
    if !a.overlaps(&b) {
        return 0.0;
    }
    let inter = a.end.min(b.end) - a.start.max(b.start);
    let union = a.end.max(b.end) - a.start.min(b.start);
    inter as f64 / union as f64
}

/// Greedy alignment of annotation sets by Quantity-span overlap. Returns
/// index pairs into the two slices; unaligned sets are left out.
pub fn align_sets(pred: &[AnnotationSet], gold: &[AnnotationSet]) -> Vec<(usize, usize)> {
    let span_of = |s: &AnnotationSet| s.quantity().map(|q| q.span);
    let mut candidates = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if let (Some(ps), Some(gs)) = (span_of(p), span_of(g)) {
                let iou = span_iou(ps, gs);
                if iou > 0.0 {
                    candidates.push((iou, gs, ps, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gold.len()];
    let mut out = Vec::new();
    for (_, _, _, i, j) in candidates {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn without_none(mods: &BTreeSet<ModifierLabel>) -> BTreeSet<ModifierLabel> {
    mods.iter().copied().filter(|m| *m != ModifierLabel::None).collect()
}

/// The items one annotation set contributes to a class.
pub fn class_items(set: Option<&AnnotationSet>, class: ScoreClass) -> Vec<Item> {
    let Some(set) = set else {
        return Vec::new();
    };
    let span_items = |t: AnnotType| set.of_type(t).map(|a| Item::plain(a.span, a.text.clone())).collect();
    let relation_items = |kind: RelationType| {
        set.annotations
            .iter()
            .filter_map(|a: &Annotation| {
                let target = set.get(a.relation(kind)?)?;
                Some(Item {
                    span: a.span,
                    text: a.text.clone(),
                    payload: Payload::Target(target.span),
                })
            })
            .collect()
    };
    match class {
        ScoreClass::Quantity => span_items(AnnotType::Quantity),
        ScoreClass::MeasuredEntity => span_items(AnnotType::MeasuredEntity),
        ScoreClass::MeasuredProperty => span_items(AnnotType::MeasuredProperty),
        ScoreClass::Qualifier => span_items(AnnotType::Qualifier),
        ScoreClass::Unit => set
            .of_type(AnnotType::Quantity)
            .filter_map(|q| {
                let unit = q.unit.clone().filter(|u| !u.trim().is_empty())?;
                Some(Item {
                    span: q.span,
                    text: unit.clone(),
                    payload: Payload::Unit(unit),
                })
            })
            .collect(),
        ScoreClass::Modifier => set
            .of_type(AnnotType::Quantity)
            .filter_map(|q| {
                let mods = without_none(&q.modifiers);
                (!mods.is_empty()).then(|| Item {
                    span: q.span,
                    text: q.text.clone(),
                    payload: Payload::Modifiers(mods),
                })
            })
            .collect(),
        ScoreClass::HasQuantity => relation_items(RelationType::HasQuantity),
        ScoreClass::HasProperty => relation_items(RelationType::HasProperty),
        ScoreClass::Qualifies => relation_items(RelationType::Qualifies),
    }
}

/// Per-class tallies for one document.
pub fn score_document(
    pred: &[AnnotationSet],
    gold: &[AnnotationSet],
    pairing: Pairing,
) -> BTreeMap<ScoreClass, Tally> {
    let aligned = align_sets(pred, gold);
    let mut groups: Vec<(Option<&AnnotationSet>, Option<&AnnotationSet>)> =
        aligned.iter().map(|&(i, j)| (Some(&pred[i]), Some(&gold[j]))).collect();
    let pred_used: BTreeSet<usize> = aligned.iter().map(|p| p.0).collect();
    let gold_used: BTreeSet<usize> = aligned.iter().map(|p| p.1).collect();
    groups.extend((0..pred.len()).filter(|i| !pred_used.contains(i)).map(|i| (Some(&pred[i]), None)));
    groups.extend((0..gold.len()).filter(|j| !gold_used.contains(j)).map(|j| (None, Some(&gold[j]))));

    let mut out = BTreeMap::new();
    for class in ScoreClass::ALL {
        let tally: &mut Tally = out.entry(class).or_default();
        for (p, g) in &groups {
            tally.add_group(&class_items(*p, class), &class_items(*g, class), pairing);
        }
    }
    out
}

fn breakdown(tallies: &BTreeMap<ScoreClass, Tally>) -> (BTreeMap<ScoreClass, Scores>, Scores) {
    let mut global = Tally::default();
    let per_class = tallies
        .iter()
        .map(|(c, t)| {
            global.absorb(t);
            (*c, t.scores())
        })
        .collect();
    (per_class, global.scores())
}

/// Score a predicted corpus against gold. Both must cover the same
/// documents.
pub fn score_corpus(pred: &Corpus, gold: &Corpus, options: &ScoreOptions) -> Result<MetricReport, MetricError> {
    let pk: BTreeSet<&String> = pred.documents.keys().collect();
    let gk: BTreeSet<&String> = gold.documents.keys().collect();
    if pk != gk {
        return Err(MetricError::DocumentMismatch {
            only_pred: pk.difference(&gk).map(|s| s.to_string()).collect(),
            only_gold: gk.difference(&pk).map(|s| s.to_string()).collect(),
        });
    }
    let mut total: BTreeMap<ScoreClass, Tally> = BTreeMap::new();
    let mut by_group: BTreeMap<String, BTreeMap<ScoreClass, Tally>> = BTreeMap::new();
    for doc_id in gk {
        let doc_tallies = score_document(pred.sets(doc_id), gold.sets(doc_id), options.pairing);
        let group = options
            .groups
            .as_ref()
            .map(|g| g.get(doc_id).cloned().unwrap_or_else(|| "unassigned".to_string()));
        for (class, t) in &doc_tallies {
            total.entry(*class).or_default().absorb(t);
            if let Some(group) = &group {
                by_group.entry(group.clone()).or_default().entry(*class).or_default().absorb(t);
            }
        }
    }
    let (per_class, global) = breakdown(&total);
    let per_group = by_group
        .iter()
        .map(|(g, t)| {
            let (per_class, global) = breakdown(t);
            (
                g.clone(),
                Breakdown {
                    per_class,
                    global: Some(global),
                },
            )
        })
        .collect();
    Ok(MetricReport {
        per_class,
        global,
        per_group,
    })
}

impl MetricReport {
    /// Fixed-width table, one row per class plus the global row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>9} {:>9} {:>10} {:>11} {:>6} {:>6}",
            "class", "precision", "recall", "f_measure", "f1_overlap", "exact_match", "pred", "gold"
        );
        let mut row = |name: &str, sc: &Scores| {
            let _ = writeln!(
                s,
                "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>10.4} {:>11.4} {:>6} {:>6}",
                name, sc.precision, sc.recall, sc.f_measure, sc.f1_overlap, sc.exact_match, sc.n_pred, sc.n_gold
            );
        };
        for (c, sc) in &self.per_class {
            row(c.as_str(), sc);
        }
        row("overall", &self.global);
        s
    }

    /// `key = value` lines, e.g. `global.f1_overlap = 0.432000`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut emit = |prefix: &str, sc: &Scores| {
            let _ = writeln!(s, "{prefix}.precision = {:.6}", sc.precision);
            let _ = writeln!(s, "{prefix}.recall = {:.6}", sc.recall);
            let _ = writeln!(s, "{prefix}.f_measure = {:.6}", sc.f_measure);
            let _ = writeln!(s, "{prefix}.f1_overlap = {:.6}", sc.f1_overlap);
            let _ = writeln!(s, "{prefix}.exact_match = {:.6}", sc.exact_match);
            let _ = writeln!(s, "{prefix}.n_pred = {}", sc.n_pred);
            let _ = writeln!(s, "{prefix}.n_gold = {}", sc.n_gold);
        };
        emit("global", &self.global);
        for (c, sc) in &self.per_class {
            emit(&format!("class.{c}"), sc);
        }
        s
    }

    /// `group,class,f1_overlap,exact_match` rows; class `overall` carries the
    /// group's micro average.
    pub fn groups_csv(&self) -> String {
        let mut s = String::from("group,class,f1_overlap,exact_match\n");
        for (g, b) in &self.per_group {
            if let Some(global) = &b.global {
                let _ = writeln!(s, "{g},overall,{:.6},{:.6}", global.f1_overlap, global.exact_match);
            }
            for (c, sc) in &b.per_class {
                let _ = writeln!(s, "{g},{c},{:.6},{:.6}", sc.f1_overlap, sc.exact_match);
            }
        }
        s
    }
}
