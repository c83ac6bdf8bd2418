//! Output distributions of the actor and critic heads.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Closed-form probability distribution over values of type `Value`.
pub trait Distribution {
    type Value;

    fn log_prob(&self, x: &Self::Value) -> Result<f64>;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Value;
    fn entropy(&self) -> f64;
    /// `KL(self || other)`.
    fn kl(&self, other: &Self) -> Result<f64>;
}

/// Softmax distribution over `logits.len()` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::dims("categorical over zero outcomes"));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("categorical logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        Ok(Categorical {
            log_probs: logits.iter().map(|&z| z - lse).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn mode(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0
    }

    /// Gradient of `log p(a)` with respect to the logits: `e_a - p`.
    pub fn grad_log_prob(&self, a: usize) -> Result<Vec<f64>> {
        self.check(a)?;
        let mut g: Vec<f64> = self.probs().iter().map(|p| -p).collect();
        g[a] += 1.0;
        Ok(g)
    }

    /// Gradient of the entropy with respect to the logits: `-p_i (log p_i + H)`.
    pub fn grad_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        self.log_probs.iter().map(|&l| -l.exp() * (l + h)).collect()
    }

    fn check(&self, a: usize) -> Result<()> {
        if a >= self.len() {
            return Err(Error::dims(format!("action {a} outside {} outcomes", self.len())));
        }
        Ok(())
    }
}

impl Distribution for Categorical {
    type Value = usize;

    fn log_prob(&self, a: &usize) -> Result<f64> {
        self.check(*a)?;
        Ok(self.log_probs[*a])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &l) in self.log_probs.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.mode()
    }

    fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dims("categoricals of different size"));
        }
        Ok(self
            .log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(&lp, &lq)| {
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (lp - lq)
                }
            })
            .sum::<f64>()
            .max(0.0))
    }
}

/// Diagonal Gaussian with per-dimension log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(Error::dims(format!(
                "gaussian mean of length {} with log-std of length {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(&log_std).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// `d log p / d mean = (x - mu) / sigma^2`
    pub fn grad_log_prob_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((&x, &m), &ls)| (x - m) * (-2.0 * ls).exp())
            .collect())
    }

    /// `d log p / d log_std = (x - mu)^2 / sigma^2 - 1`
    pub fn grad_log_prob_log_std(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((&x, &m), &ls)| (x - m).powi(2) * (-2.0 * ls).exp() - 1.0)
            .collect())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims(format!("{}-dim point for {}-dim gaussian", x.len(), self.dim())));
        }
        Ok(())
    }
}

impl Distribution for DiagGaussian {
    type Value = Vec<f64>;

    fn log_prob(&self, x: &Vec<f64>) -> Result<f64> {
        self.check(x)?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((&x, &m), &ls)| {
                let z = (x - m) * (-ls).exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn entropy(&self) -> f64 {
        self.log_std.iter().map(|&ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::dims("gaussians of different dimension"));
        }
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (mp, lp) = (self.mean[i], self.log_std[i]);
            let (mq, lq) = (other.mean[i], other.log_std[i]);
            let var_ratio = (2.0 * (lp - lq)).exp();
            let diff = (mp - mq) * (-lq).exp();
            total += lq - lp + 0.5 * (var_ratio + diff * diff) - 0.5;
        }
        Ok(total.max(0.0))
    }
}

/// Critic output distribution `N(v; V(s), sigma^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticGaussian {
    mean: f64,
    sigma: f64,
}

impl CriticGaussian {
    /// Default output scale; `sigma = 1` is plain Gauss-Newton.
    pub const DEFAULT_SIGMA: f64 = 1.0;

    pub fn new(mean: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mean.is_finite() {
            return Err(Error::NonFinite(format!("critic gaussian mean {mean}, sigma {sigma}")));
        }
        Ok(CriticGaussian { mean, sigma })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `d log p / d mean = (v - V) / sigma^2`
    pub fn grad_log_prob_mean(&self, v: f64) -> f64 {
        (v - self.mean) / (self.sigma * self.sigma)
    }
}

impl Distribution for CriticGaussian {
    type Value = f64;

    fn log_prob(&self, v: &f64) -> Result<f64> {
        let z = (v - self.mean) / self.sigma;
        Ok(-0.5 * z * z - self.sigma.ln() - 0.5 * LN_2PI)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mean + self.sigma * rng.sample::<f64, _>(StandardNormal)
    }

    fn entropy(&self) -> f64 {
        self.sigma.ln() + 0.5 * (LN_2PI + 1.0)
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        let ratio = (self.sigma / other.sigma).powi(2);
        let diff = (self.mean - other.mean) / other.sigma;
        Ok((0.5 * (ratio + diff * diff - 1.0) - 0.5 * ratio.ln()).max(0.0))
    }
}

/// An action drawn from a policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Either policy family.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyDistribution {
    Categorical(Categorical),
    DiagGaussian(DiagGaussian),
}

impl PolicyDistribution {
    /// Most likely action.
    pub fn mode(&self) -> Action {
        match self {
            PolicyDistribution::Categorical(c) => Action::Discrete(c.mode()),
            PolicyDistribution::DiagGaussian(g) => Action::Continuous(g.mean().to_vec()),
        }
    }
}

impl Distribution for PolicyDistribution {
    type Value = Action;

    fn log_prob(&self, x: &Action) -> Result<f64> {
        match (self, x) {
            (PolicyDistribution::Categorical(c), Action::Discrete(a)) => c.log_prob(a),
            (PolicyDistribution::DiagGaussian(g), Action::Continuous(v)) => g.log_prob(v),
            _ => Err(Error::FamilyMismatch("action kind does not match policy".into())),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            PolicyDistribution::Categorical(c) => Action::Discrete(c.sample(rng)),
            PolicyDistribution::DiagGaussian(g) => Action::Continuous(g.sample(rng)),
        }
    }

    fn entropy(&self) -> f64 {
        match self {
            PolicyDistribution::Categorical(c) => c.entropy(),
            PolicyDistribution::DiagGaussian(g) => g.entropy(),
        }
    }

    fn kl(&self, other: &Self) -> Result<f64> {
        match (self, other) {
            (PolicyDistribution::Categorical(p), PolicyDistribution::Categorical(q)) => p.kl(q),
            (PolicyDistribution::DiagGaussian(p), PolicyDistribution::DiagGaussian(q)) => p.kl(q),
            _ => Err(Error::FamilyMismatch("categorical vs gaussian".into())),
        }
    }
}
