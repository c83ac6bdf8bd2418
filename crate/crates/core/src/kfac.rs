//! Kronecker-factored curvature.
//!
//! Each dense layer's Fisher block is approximated by `A ⊗ S`, where
//! `A = E[a a^T]` over homogeneous layer inputs and `S = E[g g^T]` over
//! pre-activation gradients of the sampled log-likelihood. With the
//! column-stacking `vec`, the block acts on a weight-shaped matrix `T` as
//! `S T A`, so the natural gradient of `G` is `S^-1 G A^-1` and the
//! quadratic form of `D` is `<D, S D A>`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::sym_inverse;
use crate::net::ParamSet;
use crate::Matrix;

/// Below this the quadratic form is treated as zero and the step is not clipped.
pub const TINY_QUADRATIC: f64 = 1e-30;
/// Tolerance under which a negative quadratic form is clamped rather than reported.
pub const NEGATIVE_FORM_TOLERANCE: f64 = -1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Decays linearly to zero at the end of training.
    Linear,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Linear => "linear",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "linear" => Ok(Schedule::Linear),
            other => Err(Error::config("schedule", format!("expected constant or linear, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfacConfig {
    /// Largest step size.
    pub eta_max: f64,
    /// Trust-region radius on the quadratic KL of one update.
    pub delta: f64,
    /// Tikhonov damping, split across the two factors.
    pub damping_lambda: f64,
    /// Running-average decay of the factor statistics.
    pub stat_decay: f64,
    /// Updates between inverse refreshes.
    pub inverse_interval: usize,
    /// Applied to `eta_max`; `delta` stays fixed.
    pub schedule: Schedule,
}

impl Default for KfacConfig {
    fn default() -> Self {
        KfacConfig {
            eta_max: 0.25,
            delta: 0.001,
            damping_lambda: 0.01,
            stat_decay: 0.99,
            inverse_interval: 20,
            schedule: Schedule::Linear,
        }
    }
}

impl KfacConfig {
    /// Checks ranges; `prefix` names the config section in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key(k), format!("must be positive, got {v}")))
            }
        };
        positive("eta_max", self.eta_max)?;
        positive("delta", self.delta)?;
        positive("damping_lambda", self.damping_lambda)?;
        if !(0.0..1.0).contains(&self.stat_decay) {
            return Err(Error::config(key("stat_decay"), "must lie in [0, 1)"));
        }
        if self.inverse_interval == 0 {
            return Err(Error::config(key("inverse_interval"), "must be at least 1"));
        }
        Ok(())
    }
}

/// Running Kronecker factors for one layer together with the damped factors
/// and inverses from the most recent refresh.
#[derive(Clone, Debug)]
pub struct LayerFactors {
    a_hat: Matrix,
    s_hat: Matrix,
    a_damped: Option<Matrix>,
    s_damped: Option<Matrix>,
    a_inv: Option<Matrix>,
    s_inv: Option<Matrix>,
    steps_since_inverse: usize,
    inverse_interval: usize,
    decay: f64,
    updates: usize,
}

impl LayerFactors {
    /// Factors for a layer with `in_dim + 1` homogeneous inputs and `out_dim` outputs.
    pub fn new(in_dim: usize, out_dim: usize, decay: f64, inverse_interval: usize) -> Self {
        LayerFactors {
            a_hat: Matrix::zeros(in_dim + 1, in_dim + 1),
            s_hat: Matrix::zeros(out_dim, out_dim),
            a_damped: None,
            s_damped: None,
            a_inv: None,
            s_inv: None,
            steps_since_inverse: 0,
            inverse_interval: inverse_interval.max(1),
            decay,
            updates: 0,
        }
    }

    pub fn a_hat(&self) -> &Matrix {
        &self.a_hat
    }

    pub fn s_hat(&self) -> &Matrix {
        &self.s_hat
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn steps_since_inverse(&self) -> usize {
        self.steps_since_inverse
    }

    /// Damped inverses from the last refresh.
    pub fn inverses(&self) -> Option<(&Matrix, &Matrix)> {
        Some((self.a_inv.as_ref()?, self.s_inv.as_ref()?))
    }

    /// Damped factors from the last refresh.
    pub fn damped(&self) -> Option<(&Matrix, &Matrix)> {
        Some((self.a_damped.as_ref()?, self.s_damped.as_ref()?))
    }

    /// Blends in the batch second moments of `a` (batch x (C_in+1)) and `g`
    /// (batch x C_out). The first call replaces the zero initial state.
    pub fn update(&mut self, a: &Matrix, g: &Matrix) -> Result<()> {
        if a.rows() == 0 || a.rows() != g.rows() {
            return Err(Error::dims("activation and gradient batches differ or are empty"));
        }
        if a.cols() != self.a_hat.rows() || g.cols() != self.s_hat.rows() {
            return Err(Error::dims(format!(
                "layer factors are {}/{} wide, got {}/{}",
                self.a_hat.rows(),
                self.s_hat.rows(),
                a.cols(),
                g.cols()
            )));
        }
        let inv_n = 1.0 / a.rows() as f64;
        let rho = if self.updates == 0 { 0.0 } else { self.decay };
        self.a_hat.blend_assign(&a.gram().scale(inv_n), rho)?;
        self.s_hat.blend_assign(&g.gram().scale(inv_n), rho)?;
        self.updates += 1;
        self.steps_since_inverse += 1;
        Ok(())
    }

    /// Whether the cached inverses must be refreshed before the next solve.
    pub fn needs_refresh(&self) -> bool {
        self.a_inv.is_none() || self.steps_since_inverse >= self.inverse_interval
    }

    /// Recomputes the damped factors and their inverses.
    pub fn refresh(&mut self, lambda: f64) -> Result<()> {
        if self.updates == 0 {
            return Err(Error::dims("factors have no statistics yet"));
        }
        let (ca, cs) = damping_split(&self.a_hat, &self.s_hat, lambda);
        let a_d = self.a_hat.add_diagonal(ca)?;
        let s_d = self.s_hat.add_diagonal(cs)?;
        self.a_inv = Some(sym_inverse(&a_d, 0.0)?);
        self.s_inv = Some(sym_inverse(&s_d, 0.0)?);
        self.a_damped = Some(a_d);
        self.s_damped = Some(s_d);
        self.steps_since_inverse = 0;
        Ok(())
    }

    /// Natural gradient of a weight gradient using the cached inverses.
    pub fn natural_gradient(&self, grad: &Matrix) -> Result<Matrix> {
        if self.steps_since_inverse > self.inverse_interval {
            return Err(Error::StaleInverse {
                steps: self.steps_since_inverse,
                interval: self.inverse_interval,
            });
        }
        let (a_inv, s_inv) = self.inverses().ok_or(Error::StaleInverse {
            steps: self.steps_since_inverse,
            interval: self.inverse_interval,
        })?;
        natural_gradient(a_inv, s_inv, grad)
    }

    /// `vec(D)^T (A_damped ⊗ S_damped) vec(D)` with the factors the cached
    /// inverses came from.
    pub fn quadratic_form(&self, delta_w: &Matrix) -> Result<f64> {
        let (a, s) = self.damped().ok_or(Error::StaleInverse {
            steps: self.steps_since_inverse,
            interval: self.inverse_interval,
        })?;
        quadratic_form(a, s, delta_w)
    }
}

/// `(A_hat, S_hat, lambda) -> (pi sqrt(lambda), sqrt(lambda) / pi)` where
/// `pi^2` is the ratio of the mean diagonal entries of the two factors.
/// Falls back to `pi = 1` when either trace is not positive.
pub fn damping_split(a_hat: &Matrix, s_hat: &Matrix, lambda: f64) -> (f64, f64) {
    let sqrt_lambda = lambda.max(0.0).sqrt();
    let ta = a_hat.trace() / a_hat.rows() as f64;
    let ts = s_hat.trace() / s_hat.rows() as f64;
    let pi = if ta > 0.0 && ts > 0.0 && (ta / ts).is_finite() {
        (ta / ts).sqrt()
    } else {
        1.0
    };
    (pi * sqrt_lambda, sqrt_lambda / pi)
}

/// Updates running factors, see [`LayerFactors::update`].
pub fn update_factors(factors: &mut LayerFactors, a: &Matrix, g: &Matrix) -> Result<()> {
    factors.update(a, g)
}

/// Refreshes and returns `(A_inv, S_inv)`, see [`LayerFactors::refresh`].
pub fn damped_inverses(factors: &mut LayerFactors, lambda: f64) -> Result<(Matrix, Matrix)> {
    factors.refresh(lambda)?;
    let (a, s) = factors.inverses().expect("just refreshed");
    Ok((a.clone(), s.clone()))
}

/// `S_inv * grad * A_inv`, i.e. `unvec((A ⊗ S)^-1 vec(grad))`.
pub fn natural_gradient(a_inv: &Matrix, s_inv: &Matrix, grad: &Matrix) -> Result<Matrix> {
    s_inv.matmul(grad)?.matmul(a_inv)
}

/// `<D, S D A>`; errors when the value is below [`NEGATIVE_FORM_TOLERANCE`].
pub fn quadratic_form(a: &Matrix, s: &Matrix, delta_w: &Matrix) -> Result<f64> {
    let q = delta_w.dot(&s.matmul(delta_w)?.matmul(a)?)?;
    if q < NEGATIVE_FORM_TOLERANCE {
        return Err(Error::NegativeForm(q));
    }
    Ok(q.max(0.0))
}

/// `min(eta_max, sqrt(2 delta / q))`, or `eta_max` for a vanishing `q`.
pub fn trust_region_scale(q: f64, eta_max: f64, delta: f64) -> f64 {
    if q <= TINY_QUADRATIC {
        return eta_max;
    }
    eta_max.min((2.0 * delta / q).sqrt())
}

/// Whether [`trust_region_scale`] picks the radius branch.
pub fn clip_active(q: f64, eta_max: f64, delta: f64) -> bool {
    q > TINY_QUADRATIC && (2.0 * delta / q).sqrt() < eta_max
}

pub fn lr_schedule(schedule: Schedule, step: usize, total_steps: usize, eta_max: f64) -> f64 {
    match schedule {
        Schedule::Constant => eta_max,
        Schedule::Linear if total_steps == 0 => eta_max,
        Schedule::Linear => eta_max * (1.0 - step.min(total_steps) as f64 / total_steps as f64),
    }
}

/// Diagonal curvature for parameters outside any dense layer (the Gaussian
/// log-std vector): a running average of squared scores.
#[derive(Clone, Debug)]
pub struct DiagonalFactor {
    second_moment: Vec<f64>,
    damped: Option<Vec<f64>>,
    decay: f64,
    updates: usize,
}

impl DiagonalFactor {
    pub fn new(dim: usize, decay: f64) -> Self {
        DiagonalFactor {
            second_moment: vec![0.0; dim],
            damped: None,
            decay,
            updates: 0,
        }
    }

    /// `scores` holds one row per sample.
    pub fn update(&mut self, scores: &Matrix) -> Result<()> {
        if scores.cols() != self.second_moment.len() || scores.rows() == 0 {
            return Err(Error::dims("diagonal factor width"));
        }
        let rho = if self.updates == 0 { 0.0 } else { self.decay };
        let inv_n = 1.0 / scores.rows() as f64;
        for (j, m) in self.second_moment.iter_mut().enumerate() {
            let mean_sq = (0..scores.rows()).map(|i| scores[(i, j)].powi(2)).sum::<f64>() * inv_n;
            *m = rho * *m + (1.0 - rho) * mean_sq;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn refresh(&mut self, lambda: f64) {
        self.damped = Some(self.second_moment.iter().map(|m| m + lambda).collect());
    }

    pub fn natural_gradient(&self, grad: &[f64]) -> Result<Vec<f64>> {
        let d = self.damped.as_ref().ok_or(Error::StaleInverse { steps: 0, interval: 0 })?;
        if d.len() != grad.len() {
            return Err(Error::dims("diagonal factor width"));
        }
        Ok(grad.iter().zip(d).map(|(g, d)| g / d).collect())
    }

    pub fn quadratic_form(&self, delta: &[f64]) -> Result<f64> {
        let d = self.damped.as_ref().ok_or(Error::StaleInverse { steps: 0, interval: 0 })?;
        Ok(delta.iter().zip(d).map(|(x, d)| d * x * x).sum())
    }
}

/// Curvature state for one network: a factor pair per dense layer that is
/// preconditioned, plus the log-std diagonal when present.
#[derive(Clone, Debug)]
pub struct KfacState {
    layers: Vec<Option<LayerFactors>>,
    log_std: Option<DiagonalFactor>,
    config: KfacConfig,
    refreshes: usize,
}

/// Preconditioned update for a whole network.
#[derive(Clone, Debug)]
pub struct Preconditioned {
    pub direction: ParamSet,
    /// Quadratic form over the preconditioned blocks only.
    pub quadratic: f64,
}

impl KfacState {
    /// `layer_shapes` lists `(in_dim, out_dim)` per layer; `natural[i] = false`
    /// leaves layer `i` on the Euclidean metric (no factors, excluded from the
    /// quadratic form).
    pub fn new(layer_shapes: &[(usize, usize)], natural: &[bool], log_std_dim: Option<usize>, config: KfacConfig) -> Self {
        let layers = layer_shapes
            .iter()
            .zip(natural)
            .map(|(&(i, o), &nat)| nat.then(|| LayerFactors::new(i, o, config.stat_decay, config.inverse_interval)))
            .collect();
        KfacState {
            layers,
            log_std: log_std_dim.map(|d| DiagonalFactor::new(d, config.stat_decay)),
            config,
            refreshes: 0,
        }
    }

    pub fn config(&self) -> &KfacConfig {
        &self.config
    }

    pub fn layer(&self, i: usize) -> Option<&LayerFactors> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn is_natural(&self, i: usize) -> bool {
        self.layer(i).is_some()
    }

    /// Number of inverse refreshes so far.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Folds in one batch of statistics: per-layer inputs and per-sample
    /// pre-activation gradients, and log-std scores when present.
    pub fn update_statistics(&mut self, inputs: &[Matrix], pre_grads: &[Matrix], log_std_scores: Option<&Matrix>) -> Result<()> {
        if inputs.len() != self.layers.len() || pre_grads.len() != self.layers.len() {
            return Err(Error::dims("statistics for the wrong number of layers"));
        }
        for ((f, a), g) in self.layers.iter_mut().zip(inputs).zip(pre_grads) {
            if let Some(f) = f {
                f.update(a, g)?;
            }
        }
        if let (Some(d), Some(scores)) = (self.log_std.as_mut(), log_std_scores) {
            d.update(scores)?;
        }
        Ok(())
    }

    /// Refreshes inverses that are due. Returns whether anything was refreshed.
    pub fn refresh_if_due(&mut self) -> Result<bool> {
        let due = self.layers.iter().flatten().any(LayerFactors::needs_refresh);
        if !due {
            return Ok(false);
        }
        let lambda = self.config.damping_lambda;
        for f in self.layers.iter_mut().flatten() {
            f.refresh(lambda)?;
        }
        if let Some(d) = self.log_std.as_mut() {
            d.refresh(lambda);
        }
        self.refreshes += 1;
        Ok(true)
    }

    /// Applies the block-diagonal inverse to `grad`; Euclidean layers pass through.
    pub fn precondition(&self, grad: &ParamSet) -> Result<Preconditioned> {
        if grad.weights.len() != self.layers.len() {
            return Err(Error::dims("gradient has the wrong number of layers"));
        }
        let mut quadratic = 0.0;
        let mut weights = Vec::with_capacity(grad.weights.len());
        for (f, g) in self.layers.iter().zip(&grad.weights) {
            match f {
                Some(f) => {
                    // d' F d = d' g when d = F^-1 g
                    let d = f.natural_gradient(g)?;
                    quadratic += d.dot(g)?;
                    weights.push(d);
                }
                None => weights.push(g.clone()),
            }
        }
        let log_std = match (&grad.log_std, &self.log_std) {
            (Some(g), Some(d)) => {
                let nat = d.natural_gradient(g)?;
                quadratic += crate::linalg::dot_slices(&nat, g);
                Some(nat)
            }
            (Some(g), None) => Some(g.clone()),
            (None, _) => None,
        };
        if quadratic < NEGATIVE_FORM_TOLERANCE {
            return Err(Error::NegativeForm(quadratic));
        }
        Ok(Preconditioned {
            direction: ParamSet { weights, log_std },
            quadratic: quadratic.max(0.0),
        })
    }
}
