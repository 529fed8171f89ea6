//! Character-level BiLSTM that marks the unit characters inside a Quantity
//! phrase.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Span;
use crate::nn::{bce_with_logit, flat, flat_mut, linear_init, sigmoid, Adam};
use crate::tagheads::{read_json, write_json, TaggerError};

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

#[derive(Debug, Error)]
pub enum UnitError {
    #[error("no training pairs")]
    EmptyData,
    #[error("pair {index}: mask has {mask} bits for a phrase of {chars} characters")]
    MaskMismatch { index: usize, mask: usize, chars: usize },
    #[error("pair {index}: empty phrase")]
    EmptyPhrase { index: usize },
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("hyperparameter {0} must be positive")]
    Hyperparameter(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] TaggerError),
}

/// Character index with PAD at 0 and UNK at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        CharVocab { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    /// Characters in first-seen order.
    pub fn build<'a>(phrases: impl IntoIterator<Item = &'a str>) -> CharVocab {
        let mut chars = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for p in phrases {
            for c in p.chars() {
                if seen.insert(c) {
                    chars.push(c);
                }
            }
        }
        CharVocab::from(chars)
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_INDEX)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedChars {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

pub fn encode_chars(phrase: &str, vocab: &CharVocab, max_len: usize) -> EncodedChars {
    let ids: Vec<usize> = phrase.chars().take(max_len).map(|c| vocab.get(c)).collect();
    EncodedChars {
        truncated: phrase.chars().count() > max_len,
        ids,
    }
}

/// One LSTM direction; gate blocks ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmParams {
    fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> LstmParams {
        let mut b = Array1::zeros(4 * hidden);
        // Forget-gate bias of 1 keeps early gradients flowing.
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmParams {
            wx: linear_init(4 * hidden, input, rng),
            wh: linear_init(4 * hidden, hidden, rng),
            b,
        }
    }

    fn hidden(&self) -> usize {
        self.wh.ncols()
    }

    fn zeros_like(&self) -> LstmParams {
        LstmParams {
            wx: Array2::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

struct StepCache {
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c: Array1<f64>,
    tanh_c: Array1<f64>,
}

struct DirCache {
    steps: Vec<StepCache>,
    hs: Vec<Array1<f64>>,
}

fn lstm_forward(p: &LstmParams, xs: &[ArrayView1<f64>]) -> DirCache {
    let h = p.hidden();
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::<f64>::zeros(h);
    let mut steps = Vec::with_capacity(xs.len());
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let z = p.wx.dot(x) + p.wh.dot(&h_prev) + &p.b;
        let i = z.slice(s![..h]).mapv(sigmoid);
        let f = z.slice(s![h..2 * h]).mapv(sigmoid);
        let g = z.slice(s![2 * h..3 * h]).mapv(f64::tanh);
        let o = z.slice(s![3 * h..]).mapv(sigmoid);
        let c = &f * &c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let hn = &o * &tanh_c;
        steps.push(StepCache {
            i,
            f,
            g,
            o,
            c: c.clone(),
            tanh_c,
        });
        hs.push(hn.clone());
        h_prev = hn;
        c_prev = c;
    }
    DirCache { steps, hs }
}

/// Backprop through time. `dh_out[t]` is the loss gradient at the output of
/// step `t`; returns gradients for the inputs.
fn lstm_backward(
    p: &LstmParams,
    xs: &[ArrayView1<f64>],
    cache: &DirCache,
    dh_out: &[Array1<f64>],
    grads: &mut LstmParams,
) -> Vec<Array1<f64>> {
    let h = p.hidden();
    let n = xs.len();
    let mut dxs = vec![Array1::zeros(p.wx.ncols()); n];
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    let zero = Array1::<f64>::zeros(h);
    for t in (0..n).rev() {
        let st = &cache.steps[t];
        let c_prev = if t > 0 { &cache.steps[t - 1].c } else { &zero };
        let h_prev = if t > 0 { &cache.hs[t - 1] } else { &zero };
        let dh = &dh_out[t] + &dh_next;
        let d_o = &dh * &st.tanh_c;
        let dc = &dh * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
        let di = &dc * &st.g;
        let dg = &dc * &st.i;
        let df = &dc * c_prev;
        dc_next = &dc * &st.f;
        let mut dz = Array1::zeros(4 * h);
        dz.slice_mut(s![..h]).assign(&(&di * &st.i.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![h..2 * h]).assign(&(&df * &st.f.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![2 * h..3 * h]).assign(&(&dg * &st.g.mapv(|v| 1.0 - v * v)));
        dz.slice_mut(s![3 * h..]).assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));
        let dz_col = dz.view().insert_axis(Axis(1));
        grads.wx += &dz_col.dot(&xs[t].insert_axis(Axis(0)));
        grads.wh += &dz_col.dot(&h_prev.view().insert_axis(Axis(0)));
        grads.b += &dz;
        dxs[t] = p.wx.t().dot(&dz);
        dh_next = p.wh.t().dot(&dz);
    }
    dxs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitHyperparams {
    pub embedding_dim: usize,
    pub hidden_size: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for UnitHyperparams {
    fn default() -> Self {
        UnitHyperparams {
            embedding_dim: 32,
            hidden_size: 32,
            max_len: 64,
            batch_size: 38,
            learning_rate: 1e-4,
            epochs: 30,
            patience: 5,
            threshold: 0.5,
            seed: 42,
        }
    }
}

impl UnitHyperparams {
    pub fn validate(&self) -> Result<(), UnitError> {
        let checks: [(bool, &'static str); 7] = [
            (self.embedding_dim > 0, "embedding_dim"),
            (self.hidden_size > 0, "hidden_size"),
            (self.max_len > 0, "max_len"),
            (self.batch_size > 0, "batch_size"),
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate"),
            (self.epochs > 0, "epochs"),
            (self.patience > 0, "patience"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, name)) => Err(UnitError::Hyperparameter(name)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitDetectorModel {
    pub vocab: CharVocab,
    pub embedding: Array2<f64>,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// Output projection over `[h_fwd; h_bwd]`, plus its bias.
    pub out_w: Array1<f64>,
    pub out_b: Array1<f64>,
    pub hyperparams: UnitHyperparams,
}

#[derive(Clone, Debug)]
pub struct UnitGrads {
    pub embedding: Array2<f64>,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub out_w: Array1<f64>,
    pub out_b: Array1<f64>,
}

impl UnitGrads {
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            flat(&self.embedding),
            flat(&self.forward.wx),
            flat(&self.forward.wh),
            flat(&self.forward.b),
            flat(&self.backward.wx),
            flat(&self.backward.wh),
            flat(&self.backward.b),
            flat(&self.out_w),
            flat(&self.out_b),
        ]
    }

    fn add(&mut self, o: &UnitGrads) {
        self.embedding += &o.embedding;
        for (a, b) in [(&mut self.forward, &o.forward), (&mut self.backward, &o.backward)] {
            a.wx += &b.wx;
            a.wh += &b.wh;
            a.b += &b.b;
        }
        self.out_w += &o.out_w;
        self.out_b += &o.out_b;
    }

    fn scale(&mut self, k: f64) {
        self.embedding *= k;
        for a in [&mut self.forward, &mut self.backward] {
            a.wx *= k;
            a.wh *= k;
            a.b *= k;
        }
        self.out_w *= k;
        self.out_b *= k;
    }
}

struct Forward {
    fwd: DirCache,
    bwd: DirCache,
    logits: Vec<f64>,
}

impl UnitDetectorModel {
    pub fn new(vocab: CharVocab, hp: UnitHyperparams, rng: &mut impl Rng) -> UnitDetectorModel {
        let e = hp.embedding_dim;
        let h = hp.hidden_size;
        let mut embedding = Array2::from_shape_simple_fn((vocab.len(), e), || rng.random_range(-1.0..=1.0));
        embedding.row_mut(PAD_INDEX).fill(0.0);
        UnitDetectorModel {
            embedding,
            forward: LstmParams::new(e, h, rng),
            backward: LstmParams::new(e, h, rng),
            out_w: linear_init(1, 2 * h, rng).remove_axis(Axis(0)),
            out_b: Array1::zeros(1),
            vocab,
            hyperparams: hp,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            flat_mut(&mut self.embedding),
            flat_mut(&mut self.forward.wx),
            flat_mut(&mut self.forward.wh),
            flat_mut(&mut self.forward.b),
            flat_mut(&mut self.backward.wx),
            flat_mut(&mut self.backward.wh),
            flat_mut(&mut self.backward.b),
            flat_mut(&mut self.out_w),
            flat_mut(&mut self.out_b),
        ]
    }

    fn zero_grads(&self) -> UnitGrads {
        UnitGrads {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
            out_w: Array1::zeros(self.out_w.raw_dim()),
            out_b: Array1::zeros(1),
        }
    }

    fn run(&self, ids: &[usize]) -> Forward {
        let xs: Vec<ArrayView1<f64>> = ids.iter().map(|&i| self.embedding.row(i)).collect();
        let rev: Vec<ArrayView1<f64>> = xs.iter().rev().cloned().collect();
        let fwd = lstm_forward(&self.forward, &xs);
        let bwd = lstm_forward(&self.backward, &rev);
        let h = self.hyperparams.hidden_size;
        let n = ids.len();
        let logits = (0..n)
            .map(|t| {
                self.out_w.slice(s![..h]).dot(&fwd.hs[t]) + self.out_w.slice(s![h..]).dot(&bwd.hs[n - 1 - t]) + self.out_b[0]
            })
            .collect();
        Forward { fwd, bwd, logits }
    }

    /// Per-character unit probabilities.
    pub fn probabilities(&self, phrase: &str) -> Vec<f64> {
        let enc = encode_chars(phrase, &self.vocab, self.hyperparams.max_len);
        if enc.ids.is_empty() {
            return Vec::new();
        }
        self.run(&enc.ids).logits.into_iter().map(sigmoid).collect()
    }

    /// Summed BCE over the characters of one phrase and its gradients.
    pub fn loss_and_grads(&self, ids: &[usize], target: &[bool]) -> (f64, UnitGrads) {
        let mut grads = self.zero_grads();
        if ids.is_empty() {
            return (0.0, grads);
        }
        let n = ids.len();
        let h = self.hyperparams.hidden_size;
        let fw = self.run(ids);
        let mut loss = 0.0;
        let mut dh_f = Vec::with_capacity(n);
        let mut dh_b = vec![Array1::zeros(h); n];
        let w_f = self.out_w.slice(s![..h]);
        let w_b = self.out_w.slice(s![h..]);
        for t in 0..n {
            let y = f64::from(u8::from(target[t]));
            let z = fw.logits[t];
            loss += bce_with_logit(z, y);
            let dz = sigmoid(z) - y;
            grads.out_b[0] += dz;
            let mut gf = grads.out_w.slice_mut(s![..h]);
            gf.scaled_add(dz, &fw.fwd.hs[t]);
            let mut gb = grads.out_w.slice_mut(s![h..]);
            gb.scaled_add(dz, &fw.bwd.hs[n - 1 - t]);
            dh_f.push(&w_f * dz);
            dh_b[n - 1 - t] = &w_b * dz;
        }
        let xs: Vec<ArrayView1<f64>> = ids.iter().map(|&i| self.embedding.row(i)).collect();
        let rev: Vec<ArrayView1<f64>> = xs.iter().rev().cloned().collect();
        let dx_f = lstm_backward(&self.forward, &xs, &fw.fwd, &dh_f, &mut grads.forward);
        let dx_b = lstm_backward(&self.backward, &rev, &fw.bwd, &dh_b, &mut grads.backward);
        for t in 0..n {
            let mut row = grads.embedding.row_mut(ids[t]);
            row += &dx_f[t];
            row += &dx_b[n - 1 - t];
        }
        (loss, grads)
    }
}

/// Thresholded character mask, `min(len, max_len)` bits long.
pub fn predict_mask(model: &UnitDetectorModel, phrase: &str) -> Vec<bool> {
    let threshold = model.hyperparams.threshold;
    model.probabilities(phrase).into_iter().map(|p| p >= threshold).collect()
}

/// Longest run of set bits; ties go to the earliest run.
pub fn mask_to_span(mask: &[bool]) -> Option<Span> {
    let mut best: Option<Span> = None;
    let mut start = None;
    for (i, &bit) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (bit, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|b| i - s > b.len()) {
                    best = Some(Span::new(s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// The predicted unit and its phrase-relative span, if any.
pub fn predict_unit(model: &UnitDetectorModel, phrase: &str) -> Option<(String, Span)> {
    let span = mask_to_span(&predict_mask(model, phrase))?;
    let text: String = phrase.chars().skip(span.start).take(span.len()).collect();
    Some((text, span))
}

/// Gold mask for `unit` inside `phrase`: every occurrence delimited by
/// non-alphanumeric characters, or every occurrence at all when none is.
/// `None` when the unit does not occur.
pub fn unit_mask(phrase: &str, unit: &str) -> Option<Vec<bool>> {
    let chars: Vec<char> = phrase.chars().collect();
    let needle: Vec<char> = unit.chars().collect();
    if needle.is_empty() || needle.len() > chars.len() {
        return None;
    }
    let hits: Vec<usize> = (0..=chars.len() - needle.len())
        .filter(|&i| chars[i..i + needle.len()] == needle[..])
        .collect();
    if hits.is_empty() {
        return None;
    }
    let bounded: Vec<usize> = hits
        .iter()
        .copied()
        .filter(|&i| {
            let before = i == 0 || !chars[i - 1].is_alphanumeric();
            let end = i + needle.len();
            let after = end == chars.len() || !chars[end].is_alphanumeric();
            before && after
        })
        .collect();
    let chosen = if bounded.is_empty() { hits } else { bounded };
    let mut mask = vec![false; chars.len()];
    for i in chosen {
        mask[i..i + needle.len()].iter_mut().for_each(|b| *b = true);
    }
    Some(mask)
}

/// Character-level F1 of predicted against gold masks over a data set.
pub fn char_f1(model: &UnitDetectorModel, data: &[(String, Vec<bool>)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (phrase, gold) in data {
        let pred = predict_mask(model, phrase);
        for (p, g) in pred.iter().zip(gold) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_char_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitTrainingLog {
    pub epochs: Vec<UnitEpoch>,
    pub best_epoch: usize,
}

impl UnitTrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn check_pairs(pairs: &[(String, Vec<bool>)]) -> Result<(), UnitError> {
    for (index, (phrase, mask)) in pairs.iter().enumerate() {
        let chars = phrase.chars().count();
        if chars == 0 {
            return Err(UnitError::EmptyPhrase { index });
        }
        if mask.len() != chars {
            return Err(UnitError::MaskMismatch {
                index,
                mask: mask.len(),
                chars,
            });
        }
    }
    Ok(())
}

/// Train on (phrase, gold mask) pairs. The loss is the mean per-character
/// BCE of each batch; the returned model is the epoch with the best dev
/// character-F1 (lowest training loss without dev data).
pub fn train_unit_detector(
    train: &[(String, Vec<bool>)],
    dev: &[(String, Vec<bool>)],
    hp: &UnitHyperparams,
) -> Result<(UnitDetectorModel, UnitTrainingLog), UnitError> {
    hp.validate()?;
    if train.is_empty() {
        return Err(UnitError::EmptyData);
    }
    check_pairs(train)?;
    check_pairs(dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let vocab = CharVocab::build(train.iter().map(|(p, _)| p.as_str()));
    let mut model = UnitDetectorModel::new(vocab, hp.clone(), &mut rng);
    let prepared: Vec<(Vec<usize>, Vec<bool>)> = train
        .iter()
        .map(|(p, m)| {
            let enc = encode_chars(p, &model.vocab, hp.max_len);
            let n = enc.ids.len();
            (enc.ids, m[..n].to_vec())
        })
        .collect();
    let mut adam = Adam::new(hp.learning_rate);
    let mut log = UnitTrainingLog::default();
    let mut best: Option<(f64, UnitDetectorModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_chars = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let mut grads = model.zero_grads();
            let mut loss = 0.0;
            let mut chars = 0usize;
            for &i in chunk {
                let (ids, target) = &prepared[i];
                let (l, g) = model.loss_and_grads(ids, target);
                loss += l;
                chars += ids.len();
                grads.add(&g);
            }
            if !loss.is_finite() {
                return Err(UnitError::NonFiniteLoss { epoch, loss });
            }
            grads.scale(1.0 / chars as f64);
            let g = grads.flat();
            adam.step(model.params_mut(), g);
            epoch_loss += loss;
            epoch_chars += chars;
        }
        let train_loss = epoch_loss / epoch_chars as f64;
        let dev_f1 = (!dev.is_empty()).then(|| char_f1(&model, dev));
        log.epochs.push(UnitEpoch {
            epoch,
            train_loss,
            dev_char_f1: dev_f1,
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
    Ok((best.map(|(_, m)| m).unwrap_or(model), log))
}

pub fn save_unit_detector(model: &UnitDetectorModel, dir: &Path) -> Result<(), UnitError> {
    fs::create_dir_all(dir).map_err(|source| TaggerError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(write_json(&dir.join("unit.json"), model)?)
}

pub fn load_unit_detector(dir: &Path) -> Result<UnitDetectorModel, UnitError> {
    let model: UnitDetectorModel = read_json(&dir.join("unit.json"))?;
    if model.embedding.nrows() != model.vocab.len() {
        return Err(UnitError::Checkpoint(TaggerError::Checkpoint {
            path: PathBuf::from(dir),
            reason: "embedding rows do not match the vocabulary".into(),
        }));
    }
    Ok(model)
}
