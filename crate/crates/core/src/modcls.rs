//! Multi-label modifier classification over "$"-marked Quantity spans.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ContextEncoder, Encoder, EncoderError, EncoderGrads};
use crate::nn::{bce_prob, bce_with_logit, bias_init, dropout_mask, flat, flat_mut, linear_init, sigmoid, softmax, standard, Adam};
use crate::tagheads::{read_json, write_json, TaggerError};
use crate::textprep::{align_marked, MarkedSentence, SubwordTokenizer, TextError, TokenAlignment, QUANTITY_MARKER};

pub const NUM_LABELS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModifierLabel {
    HasTolerance,
    IsApproximate,
    IsCount,
    IsList,
    IsMean,
    IsMeanHasSD,
    IsMeanHasTolerance,
    IsMeanIsRange,
    IsMedian,
    IsRange,
    IsRangeHasTolerance,
    None,
}

impl ModifierLabel {
    pub const ALL: [ModifierLabel; 12] = [
        ModifierLabel::HasTolerance,
        ModifierLabel::IsApproximate,
        ModifierLabel::IsCount,
        ModifierLabel::IsList,
        ModifierLabel::IsMean,
        ModifierLabel::IsMeanHasSD,
        ModifierLabel::IsMeanHasTolerance,
        ModifierLabel::IsMeanIsRange,
        ModifierLabel::IsMedian,
        ModifierLabel::IsRange,
        ModifierLabel::IsRangeHasTolerance,
        ModifierLabel::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModifierLabel::HasTolerance => "HasTolerance",
            ModifierLabel::IsApproximate => "IsApproximate",
            ModifierLabel::IsCount => "IsCount",
            ModifierLabel::IsList => "IsList",
            ModifierLabel::IsMean => "IsMean",
            ModifierLabel::IsMeanHasSD => "IsMeanHasSD",
            ModifierLabel::IsMeanHasTolerance => "IsMeanHasTolerance",
            ModifierLabel::IsMeanIsRange => "IsMeanIsRange",
            ModifierLabel::IsMedian => "IsMedian",
            ModifierLabel::IsRange => "IsRange",
            ModifierLabel::IsRangeHasTolerance => "IsRangeHasTolerance",
            ModifierLabel::None => "None",
        }
    }
}

impl fmt::Display for ModifierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModifierLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModifierLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown modifier label {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum ModifierError {
    #[error("empty token range")]
    EmptyRange,
    #[error("token range ({0}, {1}) outside {2} rows")]
    RangeOutOfBounds(usize, usize, usize),
    #[error("expected exactly one \"$\"-enclosed quantity")]
    MarkerPairs,
    #[error("no training examples")]
    EmptyData,
    #[error("example {0} has an empty gold label set")]
    EmptyLabelSet(usize),
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("hyperparameter {0} out of range")]
    Hyperparameter(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] TaggerError),
}

/// Mean of hidden rows `i..=j`.
pub fn quantity_repr(hidden: ArrayView2<f64>, range: (usize, usize)) -> Result<Array1<f64>, ModifierError> {
    let (i, j) = range;
    if j < i {
        return Err(ModifierError::EmptyRange);
    }
    if j >= hidden.nrows() {
        return Err(ModifierError::RangeOutOfBounds(i, j, hidden.nrows()));
    }
    Ok(hidden.slice(s![i..=j, ..]).mean_axis(Axis(0)).expect("non-empty range"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelActivation {
    /// Independent per-label probabilities.
    #[default]
    Sigmoid,
    /// One distribution over all labels.
    Softmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    Fixed,
    /// Pick the dev-best threshold from 0.30, 0.35, ..., 0.70.
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModifierHyperparams {
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub activation: LabelActivation,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl Default for ModifierHyperparams {
    fn default() -> Self {
        ModifierHyperparams {
            batch_size: 24,
            max_len: 255,
            learning_rate: 1e-5,
            dropout: 0.1,
            threshold: 0.5,
            threshold_mode: ThresholdMode::Fixed,
            activation: LabelActivation::Sigmoid,
            epochs: 15,
            patience: 3,
            seed: 42,
            freeze_encoder: false,
        }
    }
}

impl ModifierHyperparams {
    pub fn validate(&self) -> Result<(), ModifierError> {
        let checks: [(bool, &'static str); 7] = [
            (self.batch_size > 0, "batch_size"),
            (self.max_len >= 3, "max_len"),
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate"),
            ((0.0..1.0).contains(&self.dropout), "dropout"),
            (self.threshold > 0.0 && self.threshold < 1.0, "threshold"),
            (self.epochs > 0, "epochs"),
            (self.patience > 0, "patience"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, name)) => Err(ModifierError::Hyperparameter(name)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModifierModel {
    pub encoder: Encoder,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub threshold: f64,
    pub hyperparams: ModifierHyperparams,
}

#[derive(Clone, Debug)]
pub struct ModifierGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub encoder: EncoderGrads,
}

/// Labels at or above the threshold; real labels beat None; nothing
/// selected means {None}.
pub fn select_labels(probs: &[f64], threshold: f64) -> BTreeSet<ModifierLabel> {
    let mut out: BTreeSet<ModifierLabel> = ModifierLabel::ALL
        .into_iter()
        .zip(probs)
        .filter(|(_, &p)| p >= threshold)
        .map(|(l, _)| l)
        .collect();
    if out.len() > 1 {
        out.remove(&ModifierLabel::None);
    }
    if out.is_empty() {
        out.insert(ModifierLabel::None);
    }
    out
}

fn targets(gold: &BTreeSet<ModifierLabel>) -> Array1<f64> {
    let mut y = Array1::zeros(NUM_LABELS);
    for l in gold {
        y[l.index()] = 1.0;
    }
    y
}

impl ModifierModel {
    pub fn new(encoder: Encoder, hyperparams: ModifierHyperparams, rng: &mut impl Rng) -> ModifierModel {
        let d = encoder.hidden_size();
        ModifierModel {
            w: linear_init(NUM_LABELS, d, rng),
            b: bias_init(NUM_LABELS, d, rng),
            threshold: hyperparams.threshold,
            encoder,
            hyperparams,
        }
    }

    fn range(alignment: &TokenAlignment) -> Result<(usize, usize), ModifierError> {
        alignment.marked_range(QUANTITY_MARKER).ok_or(ModifierError::MarkerPairs)
    }

    fn activate(&self, z: &Array1<f64>) -> Array1<f64> {
        match self.hyperparams.activation {
            LabelActivation::Sigmoid => z.mapv(sigmoid),
            LabelActivation::Softmax => softmax(z.view()),
        }
    }

    /// Label probabilities for a "$"-marked alignment, evaluation mode.
    pub fn probabilities(&self, alignment: &TokenAlignment) -> Result<Array1<f64>, ModifierError> {
        let range = Self::range(alignment)?;
        let hidden = self.encoder.encode(&alignment.ids())?;
        let u = quantity_repr(hidden.view(), range)?.mapv(f64::tanh);
        Ok(self.activate(&(self.w.dot(&u) + &self.b)))
    }

    /// Mean per-label BCE of one example and its gradients.
    pub fn loss_and_grads(
        &self,
        alignment: &TokenAlignment,
        gold: &BTreeSet<ModifierLabel>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ModifierGrads), ModifierError> {
        let (i, j) = Self::range(alignment)?;
        let ids = alignment.ids();
        let hidden = self.encoder.encode(&ids)?;
        let mean = quantity_repr(hidden.view(), (i, j))?;
        let drop = rng.map(|r| dropout_mask((1, mean.len()), self.hyperparams.dropout, r).remove_axis(Axis(0)));
        let x = match &drop {
            Some(m) => &mean * m,
            None => mean,
        };
        let u = x.mapv(f64::tanh);
        let z = self.w.dot(&u) + &self.b;
        let y = targets(gold);
        let l = NUM_LABELS as f64;
        let (loss, dz) = match self.hyperparams.activation {
            LabelActivation::Sigmoid => {
                let loss = z.iter().zip(&y).map(|(&zk, &yk)| bce_with_logit(zk, yk)).sum::<f64>() / l;
                (loss, (z.mapv(sigmoid) - &y) / l)
            }
            LabelActivation::Softmax => {
                let p = softmax(z.view());
                let pc = p.mapv(|v| v.clamp(1e-12, 1.0 - 1e-12));
                let loss = p.iter().zip(&y).map(|(&pk, &yk)| bce_prob(pk, yk)).sum::<f64>() / l;
                let dp = (&pc - &y) / (&pc * &pc.mapv(|v| 1.0 - v)) / l;
                let dot = p.dot(&dp);
                (loss, &p * &(dp - dot))
            }
        };
        let w_grad = standard(dz.view().insert_axis(Axis(1)).dot(&u.view().insert_axis(Axis(0))));
        let mut dx = self.w.t().dot(&dz) * u.mapv(|v| 1.0 - v * v);
        if let Some(m) = &drop {
            dx *= m;
        }
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        let share = dx / (j - i + 1) as f64;
        for r in i..=j {
            d_hidden.row_mut(r).assign(&share);
        }
        let mut encoder = self.encoder.zero_grads();
        self.encoder.backward(&ids, &d_hidden, &mut encoder);
        Ok((loss, ModifierGrads { w: w_grad, b: dz, encoder }))
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = vec![flat_mut(&mut self.w), flat_mut(&mut self.b)];
        if !self.hyperparams.freeze_encoder {
            p.extend(self.encoder.params_mut());
        }
        p
    }
}

pub fn predict_modifiers(model: &ModifierModel, alignment: &TokenAlignment) -> Result<BTreeSet<ModifierLabel>, ModifierError> {
    let probs = model.probabilities(alignment)?;
    Ok(select_labels(probs.as_slice().expect("contiguous"), model.threshold))
}

/// Tokenize a marked sentence and predict its modifiers.
pub fn predict_marked(
    model: &ModifierModel,
    marked: &MarkedSentence,
    tokenizer: &dyn SubwordTokenizer,
) -> Result<BTreeSet<ModifierLabel>, ModifierError> {
    let alignment = align_marked(marked, tokenizer, model.hyperparams.max_len)?;
    predict_modifiers(model, &alignment)
}

/// Micro-F1 over label memberships.
pub fn micro_f1(pred: &[BTreeSet<ModifierLabel>], gold: &[BTreeSet<ModifierLabel>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        tp += p.intersection(g).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn evaluate_at(probs: &[Vec<f64>], gold: &[BTreeSet<ModifierLabel>], threshold: f64) -> f64 {
    let pred: Vec<_> = probs.iter().map(|p| select_labels(p, threshold)).collect();
    micro_f1(&pred, gold)
}

/// Candidate thresholds 0.30..=0.70 in steps of 0.05.
pub fn threshold_grid() -> Vec<f64> {
    (0..=8).map(|k| 0.30 + 0.05 * k as f64).collect()
}

/// Best threshold on the grid; ties go to the value closest to 0.5.
pub fn sweep_threshold(probs: &[Vec<f64>], gold: &[BTreeSet<ModifierLabel>]) -> f64 {
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for t in threshold_grid() {
        let f = evaluate_at(probs, gold, t);
        let closer = (t - 0.5).abs() < (best.1 - 0.5).abs() - 1e-12;
        if f > best.0 + 1e-12 || ((f - best.0).abs() <= 1e-12 && closer) {
            best = (f, t);
        }
    }
    best.1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModifierTrainingLog {
    pub epochs: Vec<ModifierEpoch>,
    pub best_epoch: usize,
    pub threshold: f64,
}

fn all_probs(model: &ModifierModel, data: &[(TokenAlignment, BTreeSet<ModifierLabel>)]) -> Result<Vec<Vec<f64>>, ModifierError> {
    data.iter().map(|(a, _)| Ok(model.probabilities(a)?.to_vec())).collect()
}

/// Train with per-label BCE and Adam on "$"-marked alignments.
pub fn train_modifier_classifier(
    train: &[(TokenAlignment, BTreeSet<ModifierLabel>)],
    dev: &[(TokenAlignment, BTreeSet<ModifierLabel>)],
    hp: &ModifierHyperparams,
    encoder: Encoder,
) -> Result<(ModifierModel, ModifierTrainingLog), ModifierError> {
    hp.validate()?;
    if train.is_empty() {
        return Err(ModifierError::EmptyData);
    }
    for (i, (a, g)) in train.iter().chain(dev).enumerate() {
        if g.is_empty() {
            return Err(ModifierError::EmptyLabelSet(i));
        }
        ModifierModel::range(a)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut model = ModifierModel::new(encoder, hp.clone(), &mut rng);
    let mut adam = Adam::new(hp.learning_rate);
    let mut log = ModifierTrainingLog::default();
    let mut best: Option<(f64, ModifierModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dev_gold: Vec<_> = dev.iter().map(|(_, g)| g.clone()).collect();
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let mut w = Array2::zeros(model.w.raw_dim());
            let mut b = Array1::zeros(NUM_LABELS);
            let mut enc = model.encoder.zero_grads();
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = model.loss_and_grads(&train[i].0, &train[i].1, Some(&mut rng))?;
                loss += l;
                w += &g.w;
                b += &g.b;
                for (acc, e) in enc.iter_mut().zip(&g.encoder) {
                    *acc += e;
                }
            }
            if !loss.is_finite() {
                return Err(ModifierError::NonFiniteLoss { epoch, loss });
            }
            let k = 1.0 / chunk.len() as f64;
            w *= k;
            b *= k;
            let mut grads = vec![flat(&w), flat(&b)];
            if !hp.freeze_encoder {
                enc.iter_mut().for_each(|e| *e *= k);
                grads.extend(enc.iter().map(flat));
            }
            adam.step(model.params_mut(), grads);
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(evaluate_at(&all_probs(&model, dev)?, &dev_gold, model.threshold))
        };
        log.epochs.push(ModifierEpoch {
            epoch,
            train_loss,
            dev_micro_f1: dev_f1,
        });
        let score = dev_f1.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if dev_f1.is_some() && since_best >= hp.patience {
                break;
            }
        }
    }
    let mut model = best.map(|(_, m)| m).unwrap_or(model);
    if hp.threshold_mode == ThresholdMode::Sweep {
        let data = if dev.is_empty() { train } else { dev };
        let gold: Vec<_> = data.iter().map(|(_, g)| g.clone()).collect();
        model.threshold = sweep_threshold(&all_probs(&model, data)?, &gold);
    }
    log.threshold = model.threshold;
    Ok((model, log))
}

pub fn save_modifier_model(model: &ModifierModel, dir: &Path) -> Result<(), ModifierError> {
    fs::create_dir_all(dir).map_err(|source| TaggerError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(write_json(&dir.join("modifier.json"), model)?)
}

pub fn load_modifier_model(dir: &Path) -> Result<ModifierModel, ModifierError> {
    Ok(read_json(&dir.join("modifier.json"))?)
}
