//! Encoder-backed BIO tagger: tanh projections of the token and sentinel
//! states, a joint emission projection, and a linear-chain CRF on top.
//!
//! ```text
//! H'_i   = W1 · tanh(H_i) + b1
//! H'_cls = W0 · tanh(H_0) + b0
//! H''_i  = W2 · [H'_i ; H'_cls] + b2
//! p_i    = softmax(H''_i)          (or the raw logits, see EmissionMode)
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotType, Span};
use crate::crf::{nll_loss_and_grad, viterbi, CrfError, EmissionMatrix, TransitionParams};
use crate::encoder::{ContextEncoder, Encoder, EncoderError, EncoderGrads};
use crate::metrics::{micro_f1_overlap, Item};
use crate::nn::{bias_init, dropout_mask, flat, flat_mut, linear_init, softmax_rows, softmax_rows_backward, standard, Adam};
use crate::textprep::{decode_bio, BioSequence, Tag, TokenAlignment};

pub const NUM_TAGS: usize = 3;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("hidden states have {got} columns, the head expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no training examples")]
    EmptyData,
    #[error("example {index}: {tags} tags for {tokens} tokens")]
    Misaligned { index: usize, tags: usize, tokens: usize },
    #[error("example {index}: {len} tokens exceed max_len {max_len}")]
    TooLong { index: usize, len: usize, max_len: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("hyperparameter {0} must be positive")]
    Hyperparameter(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionMode {
    /// Row-softmax probabilities handed to the CRF.
    #[default]
    Softmax,
    /// Raw projection scores.
    Logits,
}

impl FromStr for EmissionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(EmissionMode::Softmax),
            "logits" => Ok(EmissionMode::Logits),
            other => Err(format!("unknown emission mode {other:?} (softmax|logits)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerVariant {
    Quantity,
    MeasuredEntity,
    MeasuredProperty,
    QualifierQ,
    QualifierP,
}

impl TaggerVariant {
    pub const ALL: [TaggerVariant; 5] = [
        TaggerVariant::Quantity,
        TaggerVariant::MeasuredEntity,
        TaggerVariant::MeasuredProperty,
        TaggerVariant::QualifierQ,
        TaggerVariant::QualifierP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaggerVariant::Quantity => "quantity",
            TaggerVariant::MeasuredEntity => "measured_entity",
            TaggerVariant::MeasuredProperty => "measured_property",
            TaggerVariant::QualifierQ => "qualifier_q",
            TaggerVariant::QualifierP => "qualifier_p",
        }
    }

    /// The annotation class this variant tags.
    pub fn target(self) -> AnnotType {
        match self {
            TaggerVariant::Quantity => AnnotType::Quantity,
            TaggerVariant::MeasuredEntity => AnnotType::MeasuredEntity,
            TaggerVariant::MeasuredProperty => AnnotType::MeasuredProperty,
            TaggerVariant::QualifierQ | TaggerVariant::QualifierP => AnnotType::Qualifier,
        }
    }
}

impl fmt::Display for TaggerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaggerVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaggerVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown tagger variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagHeadParams {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub dropout_rate: f64,
}

impl TagHeadParams {
    pub fn new(hidden_size: usize, num_tags: usize, dropout_rate: f64, rng: &mut impl Rng) -> TagHeadParams {
        let d = hidden_size;
        TagHeadParams {
            w0: linear_init(d, d, rng),
            b0: bias_init(d, d, rng),
            w1: linear_init(d, d, rng),
            b1: bias_init(d, d, rng),
            w2: linear_init(num_tags, 2 * d, rng),
            b2: bias_init(num_tags, 2 * d, rng),
            dropout_rate,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_tags(&self) -> usize {
        self.w2.nrows()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![
            flat(&self.w0),
            flat(&self.b0),
            flat(&self.w1),
            flat(&self.b1),
            flat(&self.w2),
            flat(&self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            flat_mut(&mut self.w0),
            flat_mut(&mut self.b0),
            flat_mut(&mut self.w1),
            flat_mut(&mut self.b1),
            flat_mut(&mut self.w2),
            flat_mut(&mut self.b2),
        ]
    }

    fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            w0: Array2::zeros(self.w0.raw_dim()),
            b0: Array1::zeros(self.b0.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGrads {
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            flat(&self.w0),
            flat(&self.b0),
            flat(&self.w1),
            flat(&self.b1),
            flat(&self.w2),
            flat(&self.b2),
        ]
    }

    fn add(&mut self, o: &HeadGrads) {
        self.w0 += &o.w0;
        self.b0 += &o.b0;
        self.w1 += &o.w1;
        self.b1 += &o.b1;
        self.w2 += &o.w2;
        self.b2 += &o.b2;
    }

    fn scale(&mut self, k: f64) {
        self.w0 *= k;
        self.b0 *= k;
        self.w1 *= k;
        self.b1 *= k;
        self.w2 *= k;
        self.b2 *= k;
    }
}

struct HeadCache {
    drop: Option<Array2<f64>>,
    t: Array2<f64>,
    a: Array2<f64>,
    c: Array1<f64>,
    out: Array2<f64>,
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

fn head_forward(
    hidden: &Array2<f64>,
    head: &TagHeadParams,
    mode: EmissionMode,
    drop: Option<Array2<f64>>,
) -> Result<HeadCache, TaggerError> {
    let d = head.hidden_size();
    if hidden.ncols() != d {
        return Err(TaggerError::Dimension {
            expected: d,
            got: hidden.ncols(),
        });
    }
    let x = match &drop {
        Some(m) => hidden * m,
        None => hidden.clone(),
    };
    let t = x.mapv(f64::tanh);
    let a = t.dot(&head.w1.t()) + &head.b1;
    let c = head.w0.dot(&t.row(0)) + &head.b0;
    let w2a = head.w2.slice(s![.., ..d]);
    let w2b = head.w2.slice(s![.., d..]);
    let z = a.dot(&w2a.t()) + &(w2b.dot(&c) + &head.b2);
    let out = match mode {
        EmissionMode::Softmax => softmax_rows(&z),
        EmissionMode::Logits => z,
    };
    Ok(HeadCache { drop, t, a, c, out })
}

/// Parameter gradients and the gradient with respect to the encoder output.
fn head_backward(head: &TagHeadParams, cache: &HeadCache, d_out: &Array2<f64>, mode: EmissionMode) -> (HeadGrads, Array2<f64>) {
    let d = head.hidden_size();
    let dz = match mode {
        EmissionMode::Softmax => softmax_rows_backward(&cache.out, d_out),
        EmissionMode::Logits => d_out.clone(),
    };
    let dz_sum = dz.sum_axis(Axis(0));
    let w2a = head.w2.slice(s![.., ..d]);
    let w2b = head.w2.slice(s![.., d..]);
    let dw2a = dz.t().dot(&cache.a);
    let dw2b = outer(dz_sum.view(), cache.c.view());
    let da = dz.dot(&w2a);
    let dc = w2b.t().dot(&dz_sum);
    let dw1 = da.t().dot(&cache.t);
    let db1 = da.sum_axis(Axis(0));
    let mut dt = da.dot(&head.w1);
    {
        let mut row0 = dt.row_mut(0);
        row0 += &head.w0.t().dot(&dc);
    }
    let dw0 = outer(dc.view(), cache.t.row(0));
    let mut dx = dt * &cache.t.mapv(|v| 1.0 - v * v);
    if let Some(m) = &cache.drop {
        dx *= m;
    }
    let grads = HeadGrads {
        w0: standard(dw0),
        b0: dc,
        w1: standard(dw1),
        b1: db1,
        w2: standard(concatenate![Axis(1), dw2a, dw2b]),
        b2: dz_sum,
    };
    (grads, standard(dx))
}

/// Emission rows for one sentence in evaluation mode (no dropout).
pub fn compute_emissions(hidden: &Array2<f64>, head: &TagHeadParams, mode: EmissionMode) -> Result<Array2<f64>, TaggerError> {
    Ok(head_forward(hidden, head, mode, None)?.out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerHyperparams {
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub emissions: EmissionMode,
    pub freeze_encoder: bool,
}

impl Default for TaggerHyperparams {
    fn default() -> Self {
        TaggerHyperparams {
            batch_size: 24,
            max_len: 255,
            learning_rate: 1e-5,
            dropout: 0.1,
            epochs: 15,
            patience: 3,
            seed: 42,
            emissions: EmissionMode::Softmax,
            freeze_encoder: false,
        }
    }
}

impl TaggerHyperparams {
    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.batch_size == 0 {
            return Err(TaggerError::Hyperparameter("batch_size"));
        }
        if self.max_len < 3 {
            return Err(TaggerError::Hyperparameter("max_len"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TaggerError::Hyperparameter("learning_rate"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TaggerError::Hyperparameter("dropout"));
        }
        if self.epochs == 0 {
            return Err(TaggerError::Hyperparameter("epochs"));
        }
        if self.patience == 0 {
            return Err(TaggerError::Hyperparameter("patience"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerModel {
    pub encoder: Encoder,
    pub head: TagHeadParams,
    pub crf: TransitionParams,
    pub variant: TaggerVariant,
    pub hyperparams: TaggerHyperparams,
}

/// Gradients for every trainable tagger parameter.
#[derive(Clone, Debug)]
pub struct TaggerGrads {
    pub head: HeadGrads,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
    pub encoder: EncoderGrads,
}

impl TaggerGrads {
    fn zeros(model: &TaggerModel) -> TaggerGrads {
        let t = model.crf.num_tags();
        TaggerGrads {
            head: model.head.zero_grads(),
            transitions: Array2::zeros((t, t)),
            start: Array1::zeros(t),
            end: Array1::zeros(t),
            encoder: model.encoder.zero_grads(),
        }
    }

    fn scale(&mut self, k: f64) {
        self.head.scale(k);
        self.transitions *= k;
        self.start *= k;
        self.end *= k;
        for g in &mut self.encoder {
            *g *= k;
        }
    }
}

/// CRF positions: every non-special token.
pub fn token_mask(alignment: &TokenAlignment) -> Vec<bool> {
    alignment.tokens.iter().map(|t| !t.special).collect()
}

impl TaggerModel {
    pub fn new(encoder: Encoder, variant: TaggerVariant, hyperparams: TaggerHyperparams, rng: &mut impl Rng) -> TaggerModel {
        let head = TagHeadParams::new(encoder.hidden_size(), NUM_TAGS, hyperparams.dropout, rng);
        TaggerModel {
            encoder,
            head,
            crf: TransitionParams::zeros(NUM_TAGS),
            variant,
            hyperparams,
        }
    }

    pub fn emissions(&self, ids: &[u32]) -> Result<Array2<f64>, TaggerError> {
        let hidden = self.encoder.encode(ids)?;
        compute_emissions(&hidden, &self.head, self.hyperparams.emissions)
    }

    /// Loss and gradients of one example. With `rng` the head applies
    /// dropout; without it the computation is deterministic. Returns
    /// `None` when the mask selects nothing.
    pub fn loss_and_grads(
        &self,
        ids: &[u32],
        mask: &[bool],
        gold: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<(f64, TaggerGrads)>, TaggerError> {
        if !mask.iter().any(|&m| m) {
            return Ok(None);
        }
        let hidden = self.encoder.encode(ids)?;
        let drop = rng.map(|r| dropout_mask(hidden.dim(), self.head.dropout_rate, r));
        let mode = self.hyperparams.emissions;
        let cache = head_forward(&hidden, &self.head, mode, drop)?;
        let em = EmissionMatrix::new(cache.out.clone(), mask.to_vec())?;
        let (loss, crf_grads) = nll_loss_and_grad(&em, &self.crf, gold)?;
        let (head_grads, dx) = head_backward(&self.head, &cache, &crf_grads.emissions, mode);
        let mut grads = TaggerGrads {
            head: head_grads,
            transitions: crf_grads.transitions,
            start: crf_grads.start,
            end: crf_grads.end,
            encoder: self.encoder.zero_grads(),
        };
        self.encoder.backward(ids, &dx, &mut grads.encoder);
        Ok(Some((loss, grads)))
    }

    fn step(&mut self, adam: &mut Adam, grads: &TaggerGrads) {
        let freeze = self.hyperparams.freeze_encoder;
        let mut params = self.head.params_mut();
        params.push(flat_mut(&mut self.crf.transitions));
        params.push(flat_mut(&mut self.crf.start));
        params.push(flat_mut(&mut self.crf.end));
        let mut g = grads.head.flat();
        g.push(flat(&grads.transitions));
        g.push(flat(&grads.start));
        g.push(flat(&grads.end));
        if !freeze {
            params.extend(self.encoder.params_mut());
            g.extend(grads.encoder.iter().map(flat));
        }
        adam.step(params, g);
    }
}

/// Most probable tag sequence; special tokens are always O.
pub fn predict_tags(model: &TaggerModel, alignment: &TokenAlignment) -> Result<BioSequence, TaggerError> {
    let mask = token_mask(alignment);
    if !mask.iter().any(|&m| m) {
        return Ok(BioSequence::all_o(alignment.len()));
    }
    let scores = model.emissions(&alignment.ids())?;
    let path = viterbi(&EmissionMatrix::new(scores, mask)?, &model.crf)?;
    Ok(BioSequence::from_indices(&path))
}

pub fn predict_batch(model: &TaggerModel, alignments: &[TokenAlignment]) -> Result<Vec<BioSequence>, TaggerError> {
    alignments.iter().map(|a| predict_tags(model, a)).collect()
}

/// Sentence-relative spans predicted for an alignment.
pub fn predict_spans(model: &TaggerModel, alignment: &TokenAlignment) -> Result<Vec<Span>, TaggerError> {
    let tags = predict_tags(model, alignment)?;
    decode_bio(&tags, alignment).map_err(|e| TaggerError::Checkpoint {
        path: PathBuf::new(),
        reason: e.to_string(),
    })
}

/// Scoring items for decoded spans; the item text lists the covered token
/// positions so overlap is measured in tokens.
pub fn span_items(alignment: &TokenAlignment, tags: &BioSequence) -> Vec<Item> {
    let spans = decode_bio(tags, alignment).unwrap_or_default();
    spans
        .into_iter()
        .map(|span| {
            let text = alignment
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.special && t.span.is_some_and(|s| s.overlaps(&span)))
                .map(|(i, _)| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            Item::plain(span, text)
        })
        .collect()
}

/// Micro F1-overlap of predicted against gold spans over a data set.
pub fn evaluate_tagger(model: &TaggerModel, data: &[(TokenAlignment, BioSequence)]) -> Result<f64, TaggerError> {
    let mut groups = Vec::with_capacity(data.len());
    for (alignment, gold) in data {
        let pred = predict_tags(model, alignment)?;
        groups.push((span_items(alignment, &pred), span_items(alignment, gold)));
    }
    Ok(micro_f1_overlap(groups.iter().map(|(p, g)| (p.as_slice(), g.as_slice()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1_overlap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn save(&self, path: &Path) -> Result<(), TaggerError> {
        write_json(path, self)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn check_data(data: &[(TokenAlignment, BioSequence)], max_len: usize) -> Result<(), TaggerError> {
    for (index, (alignment, tags)) in data.iter().enumerate() {
        if alignment.len() != tags.tags.len() {
            return Err(TaggerError::Misaligned {
                index,
                tags: tags.tags.len(),
                tokens: alignment.len(),
            });
        }
        if alignment.len() > max_len {
            return Err(TaggerError::TooLong {
                index,
                len: alignment.len(),
                max_len,
            });
        }
    }
    Ok(())
}

/// Train a tagger with CRF loss and Adam. The returned model is the epoch
/// with the best dev F1-overlap (lowest training loss when `dev` is empty).
pub fn train_tagger(
    train: &[(TokenAlignment, BioSequence)],
    dev: &[(TokenAlignment, BioSequence)],
    hp: &TaggerHyperparams,
    variant: TaggerVariant,
    encoder: Encoder,
) -> Result<(TaggerModel, TrainingLog), TaggerError> {
    hp.validate()?;
    if train.is_empty() {
        return Err(TaggerError::EmptyData);
    }
    check_data(train, hp.max_len)?;
    check_data(dev, hp.max_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut model = TaggerModel::new(encoder, variant, hp.clone(), &mut rng);
    let mut adam = Adam::new(hp.learning_rate);
    let prepared: Vec<(Vec<u32>, Vec<bool>, Vec<usize>)> = train
        .iter()
        .map(|(a, t)| (a.ids(), token_mask(a), t.indices()))
        .collect();

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, TaggerModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for (batch, chunk) in order.chunks(hp.batch_size).enumerate() {
            let mut grads = TaggerGrads::zeros(&model);
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            for &i in chunk {
                let (ids, mask, gold) = &prepared[i];
                if let Some((loss, g)) = model.loss_and_grads(ids, mask, gold, Some(&mut rng))? {
                    batch_loss += loss;
                    used += 1;
                    grads.head.add(&g.head);
                    grads.transitions += &g.transitions;
                    grads.start += &g.start;
                    grads.end += &g.end;
                    for (acc, e) in grads.encoder.iter_mut().zip(&g.encoder) {
                        *acc += e;
                    }
                }
            }
            if used == 0 {
                continue;
            }
            if !batch_loss.is_finite() {
                return Err(TaggerError::NonFiniteLoss {
                    epoch,
                    batch,
                    loss: batch_loss,
                });
            }
            grads.scale(1.0 / used as f64);
            model.step(&mut adam, &grads);
            epoch_loss += batch_loss;
            counted += used;
        }
        let train_loss = epoch_loss / counted.max(1) as f64;
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(evaluate_tagger(&model, dev)?)
        };
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            dev_f1_overlap: dev_f1,
        });
        let score = dev_f1.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if dev_f1.is_some() && since_best >= hp.patience {
                log.stopped_early = epoch < hp.epochs;
                break;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TagSetMeta {
    variant: TaggerVariant,
    tags: Vec<String>,
    emissions: EmissionMode,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TaggerError> {
    let text = serde_json::to_string(value).map_err(|source| TaggerError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|source| TaggerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, TaggerError> {
    let text = fs::read_to_string(path).map_err(|source| TaggerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| TaggerError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `encoder.json`, `head.json`, `crf.json`, `hyperparams.json` and
/// `tagset.json` into `dir`.
pub fn save_tagger(model: &TaggerModel, dir: &Path) -> Result<(), TaggerError> {
    fs::create_dir_all(dir).map_err(|source| TaggerError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_json(&dir.join("encoder.json"), &model.encoder)?;
    write_json(&dir.join("head.json"), &model.head)?;
    write_json(&dir.join("crf.json"), &model.crf)?;
    write_json(&dir.join("hyperparams.json"), &model.hyperparams)?;
    let meta = TagSetMeta {
        variant: model.variant,
        tags: Tag::ALL.iter().map(|t| t.to_string()).collect(),
        emissions: model.hyperparams.emissions,
    };
    write_json(&dir.join("tagset.json"), &meta)
}

pub fn load_tagger(dir: &Path) -> Result<TaggerModel, TaggerError> {
    let encoder: Encoder = read_json(&dir.join("encoder.json"))?;
    let head: TagHeadParams = read_json(&dir.join("head.json"))?;
    let crf: TransitionParams = read_json(&dir.join("crf.json"))?;
    let hyperparams: TaggerHyperparams = read_json(&dir.join("hyperparams.json"))?;
    let meta: TagSetMeta = read_json(&dir.join("tagset.json"))?;
    let bad = |reason: String| TaggerError::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let expected: Vec<String> = Tag::ALL.iter().map(|t| t.to_string()).collect();
    if meta.tags != expected {
        return Err(bad(format!("tag set {:?}, expected {:?}", meta.tags, expected)));
    }
    if head.hidden_size() != encoder.hidden_size() {
        return Err(bad(format!(
            "head expects hidden size {}, encoder has {}",
            head.hidden_size(),
            encoder.hidden_size()
        )));
    }
    if head.num_tags() != crf.num_tags() {
        return Err(bad("head and CRF disagree on the tag count".into()));
    }
    Ok(TaggerModel {
        encoder,
        head,
        crf,
        variant: meta.variant,
        hyperparams,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::HashEncoder;
    use crate::textprep::{align_tokens, encode_bio, WhitespaceTokenizer};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn emission_shape_at_full_size() {
        let enc = HashEncoder::new(1, 768);
        let hidden = enc.encode(&(0..10).collect::<Vec<u32>>()).unwrap();
        let head = TagHeadParams::new(768, 3, 0.1, &mut rng(0));
        let e = compute_emissions(&hidden, &head, EmissionMode::Softmax).unwrap();
        assert_eq!(e.dim(), (10, 3));
        for row in e.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn constant_logits_give_uniform_rows() {
        let hidden = HashEncoder::new(3, 8).encode(&[1, 2, 3, 4]).unwrap();
        let mut head = TagHeadParams::new(8, 3, 0.0, &mut rng(1));
        head.w2.fill(0.0);
        head.b2.fill(2.5);
        let e = compute_emissions(&hidden, &head, EmissionMode::Softmax).unwrap();
        for v in e.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let hidden = Array2::zeros((3, 5));
        let head = TagHeadParams::new(4, 3, 0.0, &mut rng(0));
        assert!(matches!(
            compute_emissions(&hidden, &head, EmissionMode::Logits),
            Err(TaggerError::Dimension { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn specials_only_sentence_is_all_o() {
        let tok = WhitespaceTokenizer::default();
        let al = align_tokens("", &tok, 16).unwrap();
        let model = TaggerModel::new(
            Encoder::hash(0, 8),
            TaggerVariant::Quantity,
            TaggerHyperparams::default(),
            &mut rng(0),
        );
        assert_eq!(predict_tags(&model, &al).unwrap(), BioSequence::all_o(al.len()));
    }

    fn memorize(text: &str, span: Span, emissions: EmissionMode, epochs: usize) -> (TaggerModel, TokenAlignment, BioSequence, f64) {
        let tok = WhitespaceTokenizer::default();
        let al = align_tokens(text, &tok, 32).unwrap();
        let gold = encode_bio(&al, &[span]).unwrap();
        let hp = TaggerHyperparams {
            batch_size: 1,
            learning_rate: 5e-2,
            dropout: 0.0,
            epochs,
            emissions,
            ..TaggerHyperparams::default()
        };
        let data = vec![(al.clone(), gold.clone())];
        let (model, _) = train_tagger(&data, &[], &hp, TaggerVariant::Quantity, Encoder::hash(4, 16)).unwrap();
        let (loss, _) = model
            .loss_and_grads(&al.ids(), &token_mask(&al), &gold.indices(), None)
            .unwrap()
            .unwrap();
        (model, al, gold, loss)
    }

    #[test]
    fn memorizes_one_example() {
        let (model, al, gold, loss) = memorize("the mass is 25 kg", Span::new(12, 17), EmissionMode::Softmax, 800);
        assert!(loss < 0.01, "loss {loss}");
        assert_eq!(predict_tags(&model, &al).unwrap(), gold);

        let (model, al, gold, loss) = memorize("the mass is 25 kg today", Span::new(12, 17), EmissionMode::Logits, 400);
        assert!(loss < 0.01, "loss {loss}");
        assert_eq!(predict_tags(&model, &al).unwrap(), gold);
    }

    #[test]
    fn softmax_emissions_bound_the_margin_to_shifted_spans() {
        // Moving "25 kg" one token left keeps every transition feature, so
        // only emissions (each in (0,1)) separate the two paths.
        let (model, al, gold, loss) = memorize("the mass is 25 kg today", Span::new(12, 17), EmissionMode::Softmax, 800);
        assert_eq!(predict_tags(&model, &al).unwrap(), gold);
        assert!(loss > (1.0 + (-4.0f64).exp()).ln(), "loss {loss}");
    }

    #[test]
    fn rejects_bad_training_input() {
        let hp = TaggerHyperparams::default();
        assert!(matches!(
            train_tagger(&[], &[], &hp, TaggerVariant::Quantity, Encoder::hash(0, 4)),
            Err(TaggerError::EmptyData)
        ));
        let tok = WhitespaceTokenizer::default();
        let al = align_tokens("a b", &tok, 16).unwrap();
        let data = vec![(al, BioSequence::all_o(2))];
        assert!(matches!(
            train_tagger(&data, &[], &hp, TaggerVariant::Quantity, Encoder::hash(0, 4)),
            Err(TaggerError::Misaligned { .. })
        ));
        let bad = TaggerHyperparams {
            batch_size: 0,
            ..hp
        };
        assert!(matches!(bad.validate(), Err(TaggerError::Hyperparameter("batch_size"))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in TaggerVariant::ALL {
            assert_eq!(v.name().parse::<TaggerVariant>().unwrap(), v);
        }
        assert!("unit".parse::<TaggerVariant>().is_err());
    }
}
