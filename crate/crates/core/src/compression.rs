//! Target-conditioned compression of source behavior representations.
//!
//! A user's merged representation `H_i = E^S_i + E^T_i` is gated by a relaxed
//! Bernoulli reliability `λ_i`; the unreliable share is replaced by Gaussian
//! noise drawn from the batch statistics of `H`:
//!
//! ```text
//! λ_i = sigmoid((z_i + log(m_i / (1 - m_i))) / t)      m_i ~ U(0, 1)
//! Ĥ_i = λ_i H_i + (1 - λ_i) ε_i                         ε_i ~ N(μ_H, σ_H²)
//! ```
//!
//! Two objectives act on the result: an upper bound on the information `Ĥ`
//! keeps about its inputs (`l_kl`) and an InfoNCE term tying `Ĥ_i` to the
//! user's own target representation (`l_cl`). Every loss here comes with its
//! exact gradient; batch statistics are constants for differentiation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Gumbel-sigmoid temperature `t`.
    pub gate_temperature: f64,
    /// InfoNCE temperature `τ`.
    pub contrast_temperature: f64,
    /// Gate network hidden width.
    pub hidden: usize,
    pub sigma_floor: f64,
    pub m_floor: f64,
    pub norm_floor: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            gate_temperature: 0.5,
            contrast_temperature: 0.2,
            hidden: 32,
            sigma_floor: 1e-4,
            m_floor: 1e-6,
            norm_floor: 1e-12,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic_noise(m: f64) -> f64 {
    (m / (1.0 - m)).ln()
}

/// Relaxed Bernoulli sample with logit `z`, uniform draw `m` and temperature `t`.
pub fn gumbel_sigmoid(z: f64, m: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::invalid("gate_temperature", format!("must be > 0, got {t}")));
    }
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::invalid("uniform draw", format!("must lie in (0, 1), got {m}")));
    }
    Ok(sigmoid((z + logistic_noise(m)) / t))
}

/// `H = E^S + E^T`.
pub fn merge_representations(source_users: &Matrix, target_users: &Matrix) -> Result<Matrix> {
    let mut h = source_users.clone();
    h.add_scaled(1.0, target_users)?;
    Ok(h)
}

/// One-hidden-layer tanh network producing a gate logit per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNetwork {
    /// `hidden × d`
    pub w1: Matrix,
    /// `1 × hidden`
    pub b1: Matrix,
    /// `1 × hidden`
    pub w2: Matrix,
    /// `1 × 1`
    pub b2: Matrix,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GateCache {
    /// `B × hidden` tanh activations.
    pub hidden: Matrix,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GateGradients {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl GateNetwork {
    /// Glorot-style normal initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let std1 = (2.0 / (dim + hidden) as f64).sqrt();
        let std2 = (2.0 / (hidden + 1) as f64).sqrt();
        GateNetwork {
            w1: Matrix::random_normal(hidden, dim, std1, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(1, hidden, std2, rng),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, h: &Matrix) -> Result<GateCache> {
        if h.cols() != self.dim() {
            return Err(Error::Shape {
                context: "GateNetwork::forward",
                expected: (h.rows(), self.dim()),
                actual: h.shape(),
            });
        }
        let width = self.hidden();
        let mut hidden = Matrix::zeros(h.rows(), width);
        let mut logits = Vec::with_capacity(h.rows());
        for i in 0..h.rows() {
            let x = h.row(i);
            let act = hidden.row_mut(i);
            for (j, a) in act.iter_mut().enumerate() {
                *a = (dot(self.w1.row(j), x) + self.b1[(0, j)]).tanh();
            }
            logits.push(dot(self.w2.row(0), act) + self.b2[(0, 0)]);
        }
        Ok(GateCache { hidden, logits })
    }

    /// Back-propagates `grad_logits` to the weights and to the input rows.
    pub fn backward(&self, h: &Matrix, cache: &GateCache, grad_logits: &[f64]) -> (GateGradients, Matrix) {
        let width = self.hidden();
        let mut grads = GateGradients {
            w1: Matrix::zeros(width, self.dim()),
            b1: Matrix::zeros(1, width),
            w2: Matrix::zeros(1, width),
            b2: Matrix::zeros(1, 1),
        };
        let mut grad_h = Matrix::zeros(h.rows(), self.dim());
        for (i, &gz) in grad_logits.iter().enumerate() {
            if gz == 0.0 {
                continue;
            }
            let act = cache.hidden.row(i);
            grads.b2[(0, 0)] += gz;
            axpy(gz, act, grads.w2.row_mut(0));
            for (j, &a) in act.iter().enumerate().take(width) {
                let ga = gz * self.w2[(0, j)] * (1.0 - a * a);
                grads.b1[(0, j)] += ga;
                axpy(ga, h.row(i), grads.w1.row_mut(j));
                axpy(ga, self.w1.row(j), grad_h.row_mut(i));
            }
        }
        (grads, grad_h)
    }
}

/// Per-dimension batch mean and (population) standard deviation of `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BatchStats {
    pub fn compute(h: &Matrix, sigma_floor: f64) -> Self {
        let (b, d) = h.shape();
        let n = b.max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..b {
            axpy(1.0, h.row(i), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..b {
            for (k, v) in var.iter_mut().enumerate() {
                let c = h[(i, k)] - mean[k];
                *v += c * c;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(sigma_floor)).collect();
        BatchStats { mean, std }
    }
}

/// Standard normal draws, `B × d`.
pub fn standard_normal_draws<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Returns `(Ĥ, ε)` with `ε_i = μ + σ ⊙ n_i` and `Ĥ_i = λ_i H_i + (1 - λ_i) ε_i`.
pub fn mix_noise(h: &Matrix, lambda: &[f64], stats: &BatchStats, noise_draws: &Matrix) -> Result<(Matrix, Matrix)> {
    let (b, d) = h.shape();
    if noise_draws.shape() != (b, d) || lambda.len() != b || stats.mean.len() != d {
        return Err(Error::Shape {
            context: "mix_noise",
            expected: (b, d),
            actual: noise_draws.shape(),
        });
    }
    let mut eps = Matrix::zeros(b, d);
    let mut h_hat = Matrix::zeros(b, d);
    for i in 0..b {
        let l = lambda[i];
        for k in 0..d {
            let e = stats.mean[k] + stats.std[k] * noise_draws[(i, k)];
            eps[(i, k)] = e;
            h_hat[(i, k)] = l * h[(i, k)] + (1.0 - l) * e;
        }
    }
    Ok((h_hat, eps))
}

/// Deterministic serving-time mixing: `Ĥ_i = p_i H_i + (1 - p_i) μ` with
/// `p_i = sigmoid(z_i)`.
pub fn expected_mix(h: &Matrix, logits: &[f64], mean: &[f64]) -> Matrix {
    let mut out = h.clone();
    for (i, &z) in logits.iter().enumerate() {
        let p = sigmoid(z);
        for (k, x) in out.row_mut(i).iter_mut().enumerate() {
            *x = p * *x + (1.0 - p) * mean[k];
        }
    }
    out
}

/// Value and gradients of the compression bound.
#[derive(Clone, Debug)]
pub struct KlTerm {
    pub value: f64,
    pub grad_lambda: Vec<f64>,
    pub grad_h: Matrix,
    /// `M = Σ_j (1 - λ_j)²` before flooring.
    pub m: f64,
}

/// Upper bound on `I(Ĥ; G^S, G^T)`:
///
/// ```text
/// M   = Σ_j (1 - λ_j)²
/// Q_k = Σ_j λ_j (H_jk - μ_k) / σ_k
/// L   = mean_k [ -½ ln max(M, m_floor) + M / 2B + Q_k² / 2B ]
/// ```
pub fn l_kl(lambda: &[f64], h: &Matrix, stats: &BatchStats, m_floor: f64) -> Result<KlTerm> {
    let (b, d) = h.shape();
    if lambda.len() != b || stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::Shape {
            context: "l_kl",
            expected: (b, d),
            actual: (lambda.len(), stats.mean.len()),
        });
    }
    if b == 0 {
        return Err(Error::invalid("batch", "l_kl needs at least one row"));
    }
    let bf = b as f64;
    let m: f64 = lambda.iter().map(|l| (1.0 - l) * (1.0 - l)).sum();
    let floored = m <= m_floor;
    let mut q = vec![0.0; d];
    for j in 0..b {
        for k in 0..d {
            q[k] += lambda[j] * (h[(j, k)] - stats.mean[k]) / stats.std[k];
        }
    }
    let q_term = q.iter().map(|qk| qk * qk).sum::<f64>() / (2.0 * bf * d as f64);
    let value = -0.5 * m.max(m_floor).ln() + m / (2.0 * bf) + q_term;

    let df = d as f64;
    let mut grad_lambda = Vec::with_capacity(b);
    let mut grad_h = Matrix::zeros(b, d);
    for j in 0..b {
        let one_minus = 1.0 - lambda[j];
        let mut g = -one_minus / bf;
        if !floored {
            g += one_minus / m;
        }
        for k in 0..d {
            let coeff = q[k] / (bf * df * stats.std[k]);
            g += coeff * (h[(j, k)] - stats.mean[k]);
            grad_h[(j, k)] = coeff * lambda[j];
        }
        grad_lambda.push(g);
    }
    Ok(KlTerm {
        value,
        grad_lambda,
        grad_h,
        m,
    })
}

#[derive(Clone, Debug)]
pub struct ContrastTerm {
    pub value: f64,
    pub grad_target: Matrix,
    pub grad_h_hat: Matrix,
}

/// InfoNCE between compressed `Ĥ_i` (anchor) and target representations, with
/// `E^T_i` the positive and every other `E^T_j` in the batch a negative.
pub fn l_cl(target_users: &Matrix, h_hat: &Matrix, tau: f64, norm_floor: f64) -> Result<ContrastTerm> {
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "contrast_temperature",
            format!("must be > 0, got {tau}"),
        ));
    }
    if target_users.shape() != h_hat.shape() {
        return Err(Error::Shape {
            context: "l_cl",
            expected: target_users.shape(),
            actual: h_hat.shape(),
        });
    }
    let (b, d) = h_hat.shape();
    let norms = |m: &Matrix| -> Vec<(f64, f64)> {
        (0..m.rows())
            .map(|i| {
                let raw = dot(m.row(i), m.row(i)).sqrt();
                (raw, raw.max(norm_floor))
            })
            .collect()
    };
    let t_norm = norms(target_users);
    let h_norm = norms(h_hat);

    let mut grad_target = Matrix::zeros(b, d);
    let mut grad_h_hat = Matrix::zeros(b, d);
    let mut total = 0.0;
    let bf = b as f64;
    let mut cos = vec![0.0; b];
    let mut prob = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            cos[j] = dot(target_users.row(j), h_hat.row(i)) / (t_norm[j].1 * h_norm[i].1);
        }
        let max = cos.iter().fold(f64::NEG_INFINITY, |a, &c| a.max(c / tau));
        let mut sum = 0.0;
        for j in 0..b {
            prob[j] = (cos[j] / tau - max).exp();
            sum += prob[j];
        }
        total += max + sum.ln() - cos[i] / tau;
        for j in 0..b {
            prob[j] /= sum;
            let g = (prob[j] - if i == j { 1.0 } else { 0.0 }) / (bf * tau);
            if g == 0.0 {
                continue;
            }
            // d cos(a, c) / da = c / (|a||c|) - cos · a / |a|²   (|a| above floor)
            let (a_raw, a_n) = t_norm[j];
            let (c_raw, c_n) = h_norm[i];
            let scale = 1.0 / (a_n * c_n);
            let a_self = if a_raw > norm_floor {
                cos[j] / (a_n * a_raw)
            } else {
                0.0
            };
            let c_self = if c_raw > norm_floor {
                cos[j] / (c_n * c_raw)
            } else {
                0.0
            };
            for k in 0..d {
                let a = target_users[(j, k)];
                let c = h_hat[(i, k)];
                grad_target[(j, k)] += g * (c * scale - a * a_self);
                grad_h_hat[(i, k)] += g * (a * scale - c * c_self);
            }
        }
    }
    Ok(ContrastTerm {
        value: total / bf,
        grad_target,
        grad_h_hat,
    })
}
