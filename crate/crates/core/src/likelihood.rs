//! Response models, quadratic-approximation marginal likelihoods and the
//! conjugate parameter updates that go with them.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

/// Log-mean bound for the count model; `exp` of anything larger is treated
/// as divergence.
pub const COUNT_PHI_BOUND: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite gradient at y = {y}, phi = {phi}")]
    NonFinite { y: f64, phi: f64 },
    #[error("count model log-mean {0} outside [-30, 30]")]
    Diverged(f64),
    #[error("noise scale must be positive, got {0}")]
    BadSigma(f64),
    #[error("leaf statistics are not additive: parent {parent:?} != left + right {sum:?}")]
    NotAdditive { parent: LeafStats, sum: LeafStats },
    #[error("residual variance update only applies to the normal model")]
    NotNormal,
    #[error("invalid prior: {0}")]
    BadPrior(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Normal,
    Count,
    Classification,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "count" | "count-variance" => Ok(Self::Count),
            "classification" | "binary-logistic" | "logistic" => Ok(Self::Classification),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Per-sample response distribution `f(y | phi)`.
///
/// The count model is `y ~ Normal(e^phi, e^phi)`; any exposure offset is
/// added to `phi` by the caller. Classification fits one binary-logistic
/// model per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseModel {
    Normal { sigma: f64 },
    CountVariance,
    BinaryLogistic,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ResponseModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Self::Normal { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(ModelError::BadSigma(sigma))
            }
            _ => Ok(()),
        }
    }

    fn count_mean(phi: f64) -> Result<f64, ModelError> {
        if cfg!(debug_assertions) && phi.abs() > COUNT_PHI_BOUND {
            return Err(ModelError::Diverged(phi));
        }
        Ok(phi.clamp(-COUNT_PHI_BOUND, COUNT_PHI_BOUND).exp())
    }

    /// First and second derivatives of `log f(y | phi)` in `phi`.
    pub fn gradients(&self, y: f64, phi: f64) -> Result<(f64, f64), ModelError> {
        let (d1, d2) = match *self {
            Self::Normal { sigma } => {
                let s2 = sigma * sigma;
                ((y - phi) / s2, -1.0 / s2)
            }
            Self::CountVariance => {
                let m = Self::count_mean(phi)?;
                let q = (y - m) * (y - m) / (2.0 * m);
                (-0.5 + q + y - m, -y - q)
            }
            Self::BinaryLogistic => {
                let p = logistic(phi);
                (y - p, -p * (1.0 - p))
            }
        };
        if d1.is_finite() && d2.is_finite() {
            Ok((d1, d2))
        } else {
            Err(ModelError::NonFinite { y, phi })
        }
    }

    /// Exact `log f(y | phi)`.
    pub fn log_likelihood(&self, y: f64, phi: f64) -> Result<f64, ModelError> {
        let ll = match *self {
            Self::Normal { sigma } => {
                let r = (y - phi) / sigma;
                -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * r * r
            }
            Self::CountVariance => {
                let phi_c = phi.clamp(-COUNT_PHI_BOUND, COUNT_PHI_BOUND);
                let m = Self::count_mean(phi)?;
                -0.5 * (2.0 * PI).ln() - 0.5 * phi_c - (y - m) * (y - m) / (2.0 * m)
            }
            Self::BinaryLogistic => y * phi - softplus(phi),
        };
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(ModelError::NonFinite { y, phi })
        }
    }
}

/// Summed exact log-likelihood over paired responses and latent values.
pub fn exact_log_likelihood(
    model: &ResponseModel,
    y: &[f64],
    phi: &[f64],
) -> Result<f64, ModelError> {
    y.iter()
        .zip(phi)
        .map(|(&y, &p)| model.log_likelihood(y, p))
        .sum()
}

/// Per-sample derivatives at the current fit, used to build J/H statistics
/// while one tree is resampled. Entries past `n_train` are never read.
#[derive(Debug, Clone, Default)]
pub struct GradientTable {
    pub ldot: Vec<f64>,
    pub lddot: Vec<f64>,
    /// Exact log-likelihood at the expansion point.
    pub loglik: Vec<f64>,
    /// Full linear predictor at the expansion point (offset included).
    pub phi_hat: Vec<f64>,
    /// Contribution of the tree being resampled.
    pub phi_t_hat: Vec<f64>,
}

impl GradientTable {
    /// Builds the table for the first `y.len()` (training) samples.
    pub fn build(
        model: &ResponseModel,
        y: &[f64],
        phi_hat: &[f64],
        phi_t_hat: &[f64],
    ) -> Result<Self, ModelError> {
        let n = y.len();
        let mut t = Self {
            ldot: Vec::with_capacity(n),
            lddot: Vec::with_capacity(n),
            loglik: Vec::with_capacity(n),
            phi_hat: phi_hat[..n].to_vec(),
            phi_t_hat: phi_t_hat[..n].to_vec(),
        };
        for i in 0..n {
            let (d1, d2) = model.gradients(y[i], phi_hat[i])?;
            t.ldot.push(d1);
            t.lddot.push(d2);
            t.loglik.push(model.log_likelihood(y[i], phi_hat[i])?);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.ldot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ldot.is_empty()
    }

    /// `ldot_i - phi_t_i * lddot_i`, the per-sample J contribution.
    #[inline]
    pub fn j_term(&self, i: usize) -> f64 {
        self.ldot[i] - self.phi_t_hat[i] * self.lddot[i]
    }

    /// Second-order surrogate of the log-likelihood with the tree's
    /// contribution for sample `i` replaced by `mu`.
    pub fn quadratic_loglik(&self, i: usize, mu: f64) -> f64 {
        let d = mu - self.phi_t_hat[i];
        self.loglik[i] + d * self.ldot[i] + 0.5 * d * d * self.lddot[i]
    }

    /// The piece of the leaf marginal that cancels in every ratio.
    pub fn const_term(&self, indices: &[usize]) -> f64 {
        indices
            .iter()
            .map(|&i| {
                let t = self.phi_t_hat[i];
                self.loglik[i] - t * self.ldot[i] + 0.5 * t * t * self.lddot[i]
            })
            .sum()
    }
}

/// Sufficient statistics of a leaf under the quadratic approximation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub j: f64,
    pub h: f64,
    pub count: usize,
}

impl Add for LeafStats {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            j: self.j + o.j,
            h: self.h + o.h,
            count: self.count + o.count,
        }
    }
}

impl Sub for LeafStats {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            j: self.j - o.j,
            h: self.h - o.h,
            count: self.count - o.count,
        }
    }
}

pub fn leaf_stats(indices: &[usize], grad: &GradientTable) -> LeafStats {
    indices
        .iter()
        .fold(LeafStats::default(), |acc, &i| LeafStats {
            j: acc.j + grad.j_term(i),
            h: acc.h - grad.lddot[i],
            count: acc.count + 1,
        })
}

/// Tree-structure and leaf-weight hyperparameters.
///
/// `sigma_mu2` is the current leaf-weight variance; the sampler updates it
/// every sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mu0: f64,
    pub sigma_mu2: f64,
    pub a: f64,
    pub b: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
            mu0: 0.0,
            sigma_mu2: 1.0,
            a: 3.0,
            b: 1.0,
            nu: 3.0,
            lambda: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadPrior(m.into()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.sigma_mu2 > 0.0) {
            return bad("sigma_mu^2 must be positive");
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return bad("a and b must be positive");
        }
        if !(self.nu > 0.0 && self.lambda > 0.0) {
            return bad("nu and lambda must be positive");
        }
        Ok(())
    }

    /// Prior split probability of a node at `depth`.
    pub fn p_split(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

#[inline]
fn quad_term(s: LeafStats, prior: &PriorConfig) -> (f64, f64) {
    let prec = s.h + 1.0 / prior.sigma_mu2;
    let lin = s.j + prior.mu0 / prior.sigma_mu2;
    (lin * lin / prec, prec.ln())
}

/// Log marginal likelihood of one leaf under the quadratic surrogate.
/// `const_term` is [`GradientTable::const_term`] over the leaf.
pub fn log_m_hat(stats: LeafStats, const_term: f64, prior: &PriorConfig) -> f64 {
    let (q, lp) = quad_term(stats, prior);
    -prior.mu0 * prior.mu0 / (2.0 * prior.sigma_mu2) + const_term + 0.5 * q
        - 0.5 * prior.sigma_mu2.ln()
        - 0.5 * lp
}

/// Closed-form split log-ratio without the additivity check.
#[inline]
pub(crate) fn split_log_ratio_raw(
    parent: LeafStats,
    left: LeafStats,
    right: LeafStats,
    prior: &PriorConfig,
) -> f64 {
    let (ql, ll) = quad_term(left, prior);
    let (qr, lr) = quad_term(right, prior);
    let (qp, lp) = quad_term(parent, prior);
    0.5 * (ql + qr - qp - prior.mu0 * prior.mu0 / prior.sigma_mu2)
        - 0.5 * (ll + lr - lp)
        - 0.5 * prior.sigma_mu2.ln()
}

/// Parent-dependent part of the split log-ratio, hoisted out of scans that
/// evaluate many cuts of the same leaf.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplitBase {
    inv_s2: f64,
    mu0_s2: f64,
    base: f64,
}

impl SplitBase {
    pub(crate) fn new(parent: LeafStats, prior: &PriorConfig) -> Self {
        let (qp, lp) = quad_term(parent, prior);
        let inv_s2 = 1.0 / prior.sigma_mu2;
        let mu0_s2 = prior.mu0 * inv_s2;
        Self {
            inv_s2,
            mu0_s2,
            base: -0.5 * (qp + prior.mu0 * mu0_s2) + 0.5 * lp - 0.5 * prior.sigma_mu2.ln(),
        }
    }

    /// Same value as [`split_log_ratio_raw`] up to rounding.
    #[inline]
    pub(crate) fn ratio(&self, left: LeafStats, right: LeafStats) -> f64 {
        let pl = left.h + self.inv_s2;
        let pr = right.h + self.inv_s2;
        let jl = left.j + self.mu0_s2;
        let jr = right.j + self.mu0_s2;
        self.base + 0.5 * (jl * jl / pl + jr * jr / pr) - 0.5 * (pl * pr).ln()
    }
}

fn check_additive(parent: LeafStats, left: LeafStats, right: LeafStats) -> Result<(), ModelError> {
    let sum = left + right;
    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
    if sum.count == parent.count && tol(sum.j, parent.j) && tol(sum.h, parent.h) {
        Ok(())
    } else {
        Err(ModelError::NotAdditive { parent, sum })
    }
}

/// `log m(left) + log m(right) - log m(parent)` with constants cancelled.
pub fn split_log_ratio(
    parent: LeafStats,
    left: LeafStats,
    right: LeafStats,
    prior: &PriorConfig,
) -> Result<f64, ModelError> {
    check_additive(parent, left, right)?;
    Ok(split_log_ratio_raw(parent, left, right, prior))
}

/// Log-ratio for merging two sibling leaves; the negated split ratio.
pub fn merge_log_ratio(left: LeafStats, right: LeafStats, prior: &PriorConfig) -> f64 {
    let (qm, lm) = quad_term(left + right, prior);
    let (ql, ll) = quad_term(left, prior);
    let (qr, lr) = quad_term(right, prior);
    0.5 * (qm - ql - qr + prior.mu0 * prior.mu0 / prior.sigma_mu2) - 0.5 * (lm - ll - lr)
        + 0.5 * prior.sigma_mu2.ln()
}

/// Conditional posterior mean and variance of a leaf weight.
pub fn leaf_posterior(stats: LeafStats, prior: &PriorConfig) -> (f64, f64) {
    let prec = stats.h + 1.0 / prior.sigma_mu2;
    ((stats.j + prior.mu0 / prior.sigma_mu2) / prec, 1.0 / prec)
}

pub fn sample_leaf_weight<R: Rng + ?Sized>(
    stats: LeafStats,
    prior: &PriorConfig,
    rng: &mut R,
) -> f64 {
    let (mean, var) = leaf_posterior(stats, prior);
    Normal::new(mean, var.sqrt())
        .expect("posterior variance is positive")
        .sample(rng)
}

/// Draw from inverse-gamma(shape, scale).
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("shape and scale are positive");
    1.0 / g.sample(rng)
}

/// Shape and scale of the `sigma_mu^2` conditional posterior.
pub fn sigma_mu_posterior(weights: &[f64], prior: &PriorConfig) -> (f64, f64) {
    let ss: f64 = weights.iter().map(|w| (w - prior.mu0).powi(2)).sum();
    ((weights.len() as f64 + prior.a) / 2.0, (ss + prior.b) / 2.0)
}

/// Draws `sigma_mu^2` given every leaf weight in the ensemble.
pub fn sample_sigma_mu<R: Rng + ?Sized>(weights: &[f64], prior: &PriorConfig, rng: &mut R) -> f64 {
    let (shape, scale) = sigma_mu_posterior(weights, prior);
    sample_inv_gamma(shape, scale, rng)
}

/// Shape and scale of the residual-variance posterior,
/// `sigma^2 ~ inv-Gamma((nu + n) / 2, (nu lambda + SSR) / 2)`.
pub fn sigma_normal_posterior(residuals: &[f64], nu: f64, lambda: f64) -> (f64, f64) {
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    (
        (nu + residuals.len() as f64) / 2.0,
        (nu * lambda + ssr) / 2.0,
    )
}

/// Draws `sigma^2` for the normal model.
pub fn sample_sigma_normal<R: Rng + ?Sized>(
    model: &ResponseModel,
    residuals: &[f64],
    nu: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if !matches!(model, ResponseModel::Normal { .. }) {
        return Err(ModelError::NotNormal);
    }
    let (shape, scale) = sigma_normal_posterior(residuals, nu, lambda);
    Ok(sample_inv_gamma(shape, scale, rng))
}

/// Picks `lambda` so that `P(sigma < sigma_hat) = quantile` under
/// `sigma^2 ~ inv-Gamma(nu / 2, nu lambda / 2)`.
pub fn calibrate_lambda(sigma_hat: f64, nu: f64, quantile: f64) -> f64 {
    // nu lambda / sigma^2 ~ chi^2_nu, so sigma < sigma_hat iff the chi-square
    // variable exceeds nu lambda / sigma_hat^2.
    let chi = ChiSquared::new(nu).expect("nu is positive");
    sigma_hat * sigma_hat * chi.inverse_cdf(1.0 - quantile) / nu
}

/// Initial leaf-weight scale `range / (2 sqrt(T))` by response model.
pub fn initial_sigma_mu(kind: ModelKind, trees: usize) -> f64 {
    let range = match kind {
        ModelKind::Normal => 0.5,
        ModelKind::Count => 6.0,
        ModelKind::Classification => 3.0,
    };
    range / (2.0 * (trees as f64).sqrt())
}
