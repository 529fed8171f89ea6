//! Linear-chain CRF over per-token tag scores.
//!
//! A sequence `y` of the unmasked positions scores
//! `start[y0] + Σ emit[i, yi] + Σ trans[yi, yi+1] + end[y_last]`. All
//! accumulation is in `f64`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("{got} tags for a sequence of {expected} positions")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tag {tag} outside a tag set of size {num_tags}")]
    TagOutOfRange { tag: usize, num_tags: usize },
    #[error("emission matrix has {got} columns, transitions expect {expected}")]
    TagCountMismatch { expected: usize, got: usize },
    #[error("mask has {mask} entries for {rows} emission rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("mask selects no position")]
    EmptyMask,
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    /// `transitions[[i, j]]`: score of tag `j` following tag `i`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl TransitionParams {
    pub fn zeros(num_tags: usize) -> TransitionParams {
        TransitionParams {
            transitions: Array2::zeros((num_tags, num_tags)),
            start: Array1::zeros(num_tags),
            end: Array1::zeros(num_tags),
        }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn random(num_tags: usize, scale: f64, rng: &mut impl Rng) -> TransitionParams {
        let mut draw = || rng.random_range(-scale..=scale);
        TransitionParams {
            transitions: Array2::from_shape_simple_fn((num_tags, num_tags), &mut draw),
            start: Array1::from_shape_simple_fn(num_tags, &mut draw),
            end: Array1::from_shape_simple_fn(num_tags, &mut draw),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    pub fn is_finite(&self) -> bool {
        self.transitions.iter().chain(&self.start).chain(&self.end).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionMatrix {
    pub scores: Array2<f64>,
    pub mask: Vec<bool>,
}

impl EmissionMatrix {
    pub fn new(scores: Array2<f64>, mask: Vec<bool>) -> Result<EmissionMatrix, CrfError> {
        if mask.len() != scores.nrows() {
            return Err(CrfError::MaskLength {
                mask: mask.len(),
                rows: scores.nrows(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(CrfError::EmptyMask);
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::NonFinite);
        }
        Ok(EmissionMatrix { scores, mask })
    }

    /// All positions unmasked.
    pub fn unmasked(scores: Array2<f64>) -> Result<EmissionMatrix, CrfError> {
        let n = scores.nrows();
        EmissionMatrix::new(scores, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn num_tags(&self) -> usize {
        self.scores.ncols()
    }

    fn active(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

fn check_shapes(emissions: &EmissionMatrix, params: &TransitionParams) -> Result<(), CrfError> {
    if emissions.num_tags() != params.num_tags() {
        return Err(CrfError::TagCountMismatch {
            expected: params.num_tags(),
            got: emissions.num_tags(),
        });
    }
    Ok(())
}

fn check_tags(emissions: &EmissionMatrix, tags: &[usize]) -> Result<(), CrfError> {
    if tags.len() != emissions.len() {
        return Err(CrfError::LengthMismatch {
            expected: emissions.len(),
            got: tags.len(),
        });
    }
    let t = emissions.num_tags();
    if let Some(&tag) = tags.iter().find(|&&tag| tag >= t) {
        return Err(CrfError::TagOutOfRange { tag, num_tags: t });
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Score of one tag path. Tags at masked positions are ignored.
pub fn sequence_score(emissions: &EmissionMatrix, params: &TransitionParams, tags: &[usize]) -> Result<f64, CrfError> {
    check_shapes(emissions, params)?;
    check_tags(emissions, tags)?;
    let active = emissions.active();
    let first = tags[active[0]];
    let last = tags[active[active.len() - 1]];
    let mut score = params.start[first] + params.end[last];
    for (k, &i) in active.iter().enumerate() {
        score += emissions.scores[[i, tags[i]]];
        if k > 0 {
            score += params.transitions[[tags[active[k - 1]], tags[i]]];
        }
    }
    Ok(score)
}

/// Forward log-scores `alpha[k][j]` over the active positions.
fn forward(emissions: &EmissionMatrix, params: &TransitionParams, active: &[usize]) -> Array2<f64> {
    let t = params.num_tags();
    let mut alpha = Array2::zeros((active.len(), t));
    for j in 0..t {
        alpha[[0, j]] = params.start[j] + emissions.scores[[active[0], j]];
    }
    for k in 1..active.len() {
        for j in 0..t {
            let prev = alpha.row(k - 1);
            let lse = log_sum_exp((0..t).map(|i| prev[i] + params.transitions[[i, j]]));
            alpha[[k, j]] = lse + emissions.scores[[active[k], j]];
        }
    }
    alpha
}

/// Backward log-scores `beta[k][i]`: log-sum over suffixes after position k
/// given tag i at k, including the end score.
fn backward(emissions: &EmissionMatrix, params: &TransitionParams, active: &[usize]) -> Array2<f64> {
    let t = params.num_tags();
    let n = active.len();
    let mut beta = Array2::zeros((n, t));
    for i in 0..t {
        beta[[n - 1, i]] = params.end[i];
    }
    for k in (0..n - 1).rev() {
        for i in 0..t {
            let next = beta.row(k + 1);
            beta[[k, i]] = log_sum_exp(
                (0..t).map(|j| params.transitions[[i, j]] + emissions.scores[[active[k + 1], j]] + next[j]),
            );
        }
    }
    beta
}

fn final_lse(alpha_last: ArrayView1<f64>, params: &TransitionParams) -> f64 {
    log_sum_exp((0..params.num_tags()).map(|j| alpha_last[j] + params.end[j]))
}

/// log Σ_y exp(score(y)) by the forward recursion.
pub fn log_partition(emissions: &EmissionMatrix, params: &TransitionParams) -> Result<f64, CrfError> {
    check_shapes(emissions, params)?;
    let active = emissions.active();
    let alpha = forward(emissions, params, &active);
    Ok(final_lse(alpha.row(active.len() - 1), params))
}

/// Negative log-likelihood of `gold`.
pub fn nll_loss(emissions: &EmissionMatrix, params: &TransitionParams, gold: &[usize]) -> Result<f64, CrfError> {
    let score = sequence_score(emissions, params, gold)?;
    Ok(log_partition(emissions, params)? - score)
}

/// Gradient of [`nll_loss`] with respect to every score.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfGradients {
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Loss and its gradient via forward-backward marginals: expected feature
/// counts minus the gold path's counts.
pub fn nll_loss_and_grad(
    emissions: &EmissionMatrix,
    params: &TransitionParams,
    gold: &[usize],
) -> Result<(f64, CrfGradients), CrfError> {
    let score = sequence_score(emissions, params, gold)?;
    let t = params.num_tags();
    let active = emissions.active();
    let n = active.len();
    let alpha = forward(emissions, params, &active);
    let beta = backward(emissions, params, &active);
    let log_z = final_lse(alpha.row(n - 1), params);

    let mut g = CrfGradients {
        emissions: Array2::zeros(emissions.scores.raw_dim()),
        transitions: Array2::zeros((t, t)),
        start: Array1::zeros(t),
        end: Array1::zeros(t),
    };
    for k in 0..n {
        for j in 0..t {
            let marginal = (alpha[[k, j]] + beta[[k, j]] - log_z).exp();
            g.emissions[[active[k], j]] += marginal;
            if k == 0 {
                g.start[j] += marginal;
            }
            if k == n - 1 {
                g.end[j] += marginal;
            }
        }
        if k + 1 < n {
            for i in 0..t {
                for j in 0..t {
                    let pair = alpha[[k, i]]
                        + params.transitions[[i, j]]
                        + emissions.scores[[active[k + 1], j]]
                        + beta[[k + 1, j]]
                        - log_z;
                    g.transitions[[i, j]] += pair.exp();
                }
            }
        }
    }
    for (k, &i) in active.iter().enumerate() {
        g.emissions[[i, gold[i]]] -= 1.0;
        if k > 0 {
            g.transitions[[gold[active[k - 1]], gold[i]]] -= 1.0;
        }
    }
    g.start[gold[active[0]]] -= 1.0;
    g.end[gold[active[n - 1]]] -= 1.0;
    Ok((log_z - score, g))
}

/// Highest-scoring path. Among equal-scoring paths the lexicographically
/// smallest (lowest tag index at the earliest differing position) wins.
/// Masked positions are filled with tag 0.
pub fn viterbi(emissions: &EmissionMatrix, params: &TransitionParams) -> Result<Vec<usize>, CrfError> {
    check_shapes(emissions, params)?;
    let t = params.num_tags();
    let active = emissions.active();
    let n = active.len();
    // best[k][i]: best suffix score from position k holding tag i, with
    // emission at k and the end score included.
    let mut best = Array2::<f64>::zeros((n, t));
    for i in 0..t {
        best[[n - 1, i]] = emissions.scores[[active[n - 1], i]] + params.end[i];
    }
    for k in (0..n - 1).rev() {
        for i in 0..t {
            let tail = (0..t)
                .map(|j| params.transitions[[i, j]] + best[[k + 1, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            best[[k, i]] = emissions.scores[[active[k], i]] + tail;
        }
    }
    let argmax_first = |scores: &mut dyn Iterator<Item = f64>| {
        let mut arg = 0;
        let mut top = f64::NEG_INFINITY;
        for (j, s) in scores.enumerate() {
            if s > top {
                top = s;
                arg = j;
            }
        }
        arg
    };
    let mut path = vec![0usize; emissions.len()];
    let mut prev = argmax_first(&mut (0..t).map(|i| params.start[i] + best[[0, i]]));
    path[active[0]] = prev;
    for k in 1..n {
        let next = argmax_first(&mut (0..t).map(|j| params.transitions[[prev, j]] + best[[k, j]]));
        path[active[k]] = next;
        prev = next;
    }
    Ok(path)
}
