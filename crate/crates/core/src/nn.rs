//! Small numeric building blocks shared by the trainable heads.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Adam with bias correction. Parameters are handed over as flat slices in
/// a fixed order on every step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter groups changed between steps");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual linear-layer init.
pub fn linear_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn bias_init(len: usize, fan_in: usize, rng: &mut impl Rng) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = row.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s = softmax(row.view());
        row.assign(&s);
    }
    out
}

/// Backprop through a row softmax: `dz = p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_rows_backward(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.outer_iter().zip(grad.outer_iter()).zip(out.outer_iter_mut()) {
        let dot = p.dot(&g);
        o.assign(&(&p * &(&g - dot)));
    }
    out
}

/// Binary cross-entropy of a logit against a 0/1 target, computed stably.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a probability, clamped away from 0 and 1.
pub fn bce_prob(p: f64, target: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Inverted-dropout scale factors: 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// The same array in row-major layout.
pub fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Standard-layout slice of an owned array.
pub fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("owned arrays are contiguous")
}

pub fn flat_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("owned arrays are contiguous")
}

/// splitmix64: a fast, well-mixed 64-bit hash step.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash to a uniform value in `[-1, 1)`.
pub fn hash_unit(a: u64, b: u64, c: u64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.5, -3.0];
        let mut adam = Adam::new(0.1);
        adam.step(vec![&mut p], vec![&g]);
        // First bias-corrected step is lr * sign(g) up to eps.
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = array![[0.3, -1.2, 0.8], [2.0, 0.1, -0.4]];
        let g = array![[1.0, -0.5, 0.25], [0.3, 0.9, -1.1]];
        let f = |z: &Array2<f64>| (softmax_rows(z) * &g).sum();
        let analytic = softmax_rows_backward(&softmax_rows(&z), &g);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((fd - analytic[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bce_forms_agree() {
        for &(x, t) in &[(0.0, 1.0), (3.0, 0.0), (-20.0, 1.0), (5.0, 1.0)] {
            assert!((bce_with_logit(x, t) - bce_prob(sigmoid(x), t)).abs() < 1e-6);
        }
    }

    #[test]
    fn hash_unit_in_range_and_deterministic() {
        for i in 0..1000 {
            let v = hash_unit(7, i, 3);
            assert!((-1.0..1.0).contains(&v));
            assert_eq!(v, hash_unit(7, i, 3));
        }
    }

    #[test]
    fn dropout_mask_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = dropout_mask((200, 50), 0.1, &mut rng);
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.05);
        assert_eq!(dropout_mask((2, 2), 0.0, &mut rng), Array2::<f64>::ones((2, 2)));
    }
}
