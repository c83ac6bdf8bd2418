//! Actor-critic models and their updates.
//!
//! The objective minimized by both algorithms is
//!
//! ```text
//! -mean(log pi(a|s) * A) + c_v * 0.5 * mean((R - V)^2) / sigma^2 - beta * mean(H(pi(.|s)))
//! ```
//!
//! with advantages `A` held constant. ACKTR preconditions its gradient with
//! the Kronecker-factored Fisher of `p(a, v | s) = pi(a|s) N(v; V(s), sigma^2)`
//! and scales the step so its quadratic KL stays within the trust radius;
//! A2C uses momentum SGD on the raw gradient.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{Action, Categorical, CriticGaussian, DiagGaussian, Distribution, PolicyDistribution};
use crate::error::{Error, Result};
use crate::kfac::{clip_active, lr_schedule, trust_region_scale, KfacConfig, KfacState};
use crate::net::{Activation, Architecture, ForwardTrace, HeadKind, Network, ParamSet, PolicyHead};
use crate::rl::{collect_rollout, ActionSpec, Policy, RolloutBatch, VecEnv};
use crate::Matrix;

/// Floor on the adaptive critic scale.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Decay of the adaptive critic scale's running moments.
pub const SIGMA_DECAY: f64 = 0.99;

macro_rules! string_enum {
    ($name:ident, $key:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config($key, format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Acktr,
    A2c,
}

string_enum!(Algorithm, "algorithm", { Acktr => "acktr", A2c => "a2c" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// One trunk with a policy head and a value head.
    Shared,
    /// Separate actor and critic networks.
    Disjoint,
}

string_enum!(Topology, "topology", { Shared => "shared", Disjoint => "disjoint" });

/// Metric used for the critic's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticNorm {
    /// Plain gradient for the critic blocks.
    Euclidean,
    /// Fisher of a unit-variance Gaussian output.
    GaussNewton,
    /// Fisher of a Gaussian whose scale tracks the Bellman-error spread.
    AdaptiveGaussNewton,
}

string_enum!(CriticNorm, "critic_norm", {
    Euclidean => "euclidean",
    GaussNewton => "gauss-newton",
    AdaptiveGaussNewton => "adaptive-gauss-newton",
});

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub topology: Topology,
    pub critic_norm: CriticNorm,
    /// Curvature settings for the shared network, or the actor when disjoint.
    pub kfac: KfacConfig,
    /// Curvature settings for the critic of a disjoint model.
    pub critic_kfac: KfacConfig,
    pub entropy_weight: f64,
    /// Weight of the critic loss on a shared network.
    pub value_loss_weight: f64,
    /// Segment length.
    pub k: usize,
    pub n_envs: usize,
    pub gamma: f64,
    pub total_timesteps: usize,
    pub hidden: Vec<usize>,
    pub policy_activation: Activation,
    pub value_activation: Activation,
    /// A2C momentum.
    pub momentum: f64,
    /// Output samples per state in the Fisher statistics pass.
    pub fisher_samples: usize,
    pub normalize_advantages: bool,
    pub normalize_observations: bool,
    /// Credit steps cut by an episode cap with the value of the state they
    /// ended in.
    pub timeout_bootstrap: bool,
    /// Measure the exact KL every this many updates (0 = never).
    pub exact_kl_interval: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            algorithm: Algorithm::Acktr,
            topology: Topology::Shared,
            critic_norm: CriticNorm::GaussNewton,
            kfac: KfacConfig::default(),
            critic_kfac: KfacConfig::default(),
            entropy_weight: 0.01,
            value_loss_weight: 0.5,
            k: 20,
            n_envs: 4,
            gamma: 0.99,
            total_timesteps: 100_000,
            hidden: vec![64, 64],
            policy_activation: Activation::Tanh,
            value_activation: Activation::Elu,
            momentum: 0.9,
            fisher_samples: 1,
            normalize_advantages: false,
            normalize_observations: false,
            timeout_bootstrap: true,
            exact_kl_interval: 0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn batch_size(&self) -> usize {
        self.k * self.n_envs
    }

    /// Number of updates a full run performs.
    pub fn total_updates(&self) -> usize {
        self.total_timesteps.div_ceil(self.batch_size().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.kfac.validate("kfac.")?;
        if self.topology == Topology::Disjoint {
            self.critic_kfac.validate("critic_kfac.")?;
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::config("trainer.entropy_weight", "must be nonnegative"));
        }
        if !(self.value_loss_weight >= 0.0) {
            return Err(Error::config("trainer.value_loss_weight", "must be nonnegative"));
        }
        if self.k == 0 {
            return Err(Error::config("trainer.k", "must be positive"));
        }
        if self.n_envs == 0 {
            return Err(Error::config("trainer.batch_size", "must be a positive multiple of k"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("trainer.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("trainer.momentum", "must lie in [0, 1)"));
        }
        if self.fisher_samples == 0 {
            return Err(Error::config("trainer.fisher_samples", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Policy and value function, on one shared trunk or as two networks.
#[derive(Clone, Debug, PartialEq)]
pub enum ActorCritic {
    Shared(Network),
    Disjoint { actor: Network, critic: Network },
}

/// Forward results for a batch of states.
pub struct Evaluation {
    pub policies: Vec<PolicyDistribution>,
    pub values: Vec<f64>,
    /// One trace per network, in [`ActorCritic::networks`] order.
    pub traces: Vec<ForwardTrace>,
}

impl ActorCritic {
    pub fn new<R: rand::Rng + ?Sized>(obs_dim: usize, actions: &ActionSpec, cfg: &TrainerConfig, rng: &mut R) -> Result<Self> {
        let policy = match actions {
            ActionSpec::Discrete(n) => PolicyHead::Categorical(*n),
            ActionSpec::Continuous { low, .. } => PolicyHead::Gaussian(low.len()),
        };
        match cfg.topology {
            Topology::Shared => Ok(ActorCritic::Shared(Network::new(
                &Architecture {
                    input_dim: obs_dim,
                    hidden: cfg.hidden.clone(),
                    activation: cfg.policy_activation,
                    head: HeadKind::Joint(policy),
                },
                rng,
            )?)),
            Topology::Disjoint => {
                let actor = Network::new(
                    &Architecture {
                        input_dim: obs_dim,
                        hidden: cfg.hidden.clone(),
                        activation: cfg.policy_activation,
                        head: HeadKind::Policy(policy),
                    },
                    rng,
                )?;
                let critic = Network::new(
                    &Architecture {
                        input_dim: obs_dim,
                        hidden: cfg.hidden.clone(),
                        activation: cfg.value_activation,
                        head: HeadKind::Value,
                    },
                    rng,
                )?;
                Ok(ActorCritic::Disjoint { actor, critic })
            }
        }
    }

    pub fn topology(&self) -> Topology {
        match self {
            ActorCritic::Shared(_) => Topology::Shared,
            ActorCritic::Disjoint { .. } => Topology::Disjoint,
        }
    }

    pub fn networks(&self) -> Vec<&Network> {
        match self {
            ActorCritic::Shared(n) => vec![n],
            ActorCritic::Disjoint { actor, critic } => vec![actor, critic],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            ActorCritic::Shared(n) => vec![n],
            ActorCritic::Disjoint { actor, critic } => vec![actor, critic],
        }
    }

    /// The network carrying the policy head.
    pub fn actor(&self) -> &Network {
        match self {
            ActorCritic::Shared(n) => n,
            ActorCritic::Disjoint { actor, .. } => actor,
        }
    }

    pub fn policy_head(&self) -> PolicyHead {
        self.actor().head_kind().policy().expect("actor has a policy head")
    }

    pub fn evaluate(&self, states: &Matrix) -> Result<Evaluation> {
        let (policy_out, value_out, traces) = match self {
            ActorCritic::Shared(net) => {
                let (mut out, trace) = net.forward(states)?;
                let value = out.pop().expect("joint head");
                let policy = out.pop().expect("joint head");
                (policy, value, vec![trace])
            }
            ActorCritic::Disjoint { actor, critic } => {
                let (mut pout, ptrace) = actor.forward(states)?;
                let (mut vout, vtrace) = critic.forward(states)?;
                (pout.pop().unwrap(), vout.pop().unwrap(), vec![ptrace, vtrace])
            }
        };
        let policies = policy_distributions(self.actor(), &policy_out)?;
        Ok(Evaluation {
            policies,
            values: value_out.into_vec(),
            traces,
        })
    }
}

/// Per-row policy distributions from a policy head output.
pub fn policy_distributions(actor: &Network, out: &Matrix) -> Result<Vec<PolicyDistribution>> {
    (0..out.rows())
        .map(|i| match actor.head_kind().policy() {
            Some(PolicyHead::Categorical(_)) => Ok(PolicyDistribution::Categorical(Categorical::new(out.row(i))?)),
            Some(PolicyHead::Gaussian(_)) => Ok(PolicyDistribution::DiagGaussian(DiagGaussian::new(
                out.row(i).to_vec(),
                actor.log_std().expect("gaussian head has log-std").to_vec(),
            )?)),
            None => Err(Error::dims("network has no policy head")),
        })
        .collect()
}

impl Policy for ActorCritic {
    fn act(&self, states: &Matrix, rng: &mut dyn RngCore) -> Result<(Vec<Action>, Vec<f64>)> {
        let eval = self.evaluate(states)?;
        let actions = eval.policies.iter().map(|p| p.sample(rng)).collect();
        Ok((actions, eval.values))
    }

    fn values(&self, states: &Matrix) -> Result<Vec<f64>> {
        match self {
            ActorCritic::Shared(net) => Ok(net.forward(states)?.0.pop().unwrap().into_vec()),
            ActorCritic::Disjoint { critic, .. } => Ok(critic.forward(states)?.0.pop().unwrap().into_vec()),
        }
    }
}

/// Critic output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticSigma {
    mode: CriticNorm,
    mean: f64,
    second_moment: f64,
    updates: usize,
    sigma: f64,
}

impl CriticSigma {
    pub fn new(mode: CriticNorm) -> Self {
        CriticSigma {
            mode,
            mean: 0.0,
            second_moment: 0.0,
            updates: 0,
            sigma: CriticGaussian::DEFAULT_SIGMA,
        }
    }

    pub fn current(&self) -> f64 {
        self.sigma
    }

    /// Folds in a batch of Bellman errors and returns the scale to use. Only
    /// the adaptive mode tracks the errors; the others always return 1.
    pub fn update(&mut self, bellman_errors: &[f64]) -> f64 {
        if self.mode != CriticNorm::AdaptiveGaussNewton || bellman_errors.is_empty() {
            return self.sigma;
        }
        let n = bellman_errors.len() as f64;
        let m = bellman_errors.iter().sum::<f64>() / n;
        let s = bellman_errors.iter().map(|e| e * e).sum::<f64>() / n;
        if self.updates == 0 {
            self.mean = m;
            self.second_moment = s;
        } else {
            self.mean = SIGMA_DECAY * self.mean + (1.0 - SIGMA_DECAY) * m;
            self.second_moment = SIGMA_DECAY * self.second_moment + (1.0 - SIGMA_DECAY) * s;
        }
        self.updates += 1;
        self.sigma = (self.second_moment - self.mean * self.mean).max(0.0).sqrt().max(SIGMA_FLOOR);
        self.sigma
    }
}

/// One-shot form of [`CriticSigma::update`] for a fresh estimator.
pub fn critic_sigma(mode: CriticNorm, bellman_errors: &[f64]) -> f64 {
    CriticSigma::new(mode).update(bellman_errors)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Gradient of the objective, one parameter set per network.
pub fn objective_gradient(
    model: &ActorCritic,
    eval: &Evaluation,
    batch: &RolloutBatch,
    sigma: f64,
    cfg: &TrainerConfig,
) -> Result<(Vec<ParamSet>, LossTerms)> {
    let n = batch.len();
    if eval.policies.len() != n || batch.actions.len() != n {
        return Err(Error::dims("evaluation does not match batch"));
    }
    let adv = if cfg.normalize_advantages {
        normalized(&batch.advantages)
    } else {
        batch.advantages.clone()
    };
    let inv_var = 1.0 / (sigma * sigma);
    let value_weight = match model.topology() {
        Topology::Shared => cfg.value_loss_weight,
        Topology::Disjoint => 1.0,
    };
    let beta = cfg.entropy_weight;
    let width = model.policy_head().output_dim();
    let mut policy_grad = Matrix::zeros(n, width);
    let mut log_std_grad = vec![0.0; width];
    let mut value_grad = Matrix::zeros(n, 1);
    let mut terms = LossTerms::default();
    for i in 0..n {
        let a = &batch.actions[i];
        terms.policy_loss -= eval.policies[i].log_prob(a)? * adv[i];
        terms.entropy += eval.policies[i].entropy();
        match (&eval.policies[i], a) {
            (PolicyDistribution::Categorical(c), Action::Discrete(a)) => {
                let score = c.grad_log_prob(*a)?;
                let ent = c.grad_entropy();
                for j in 0..width {
                    policy_grad[(i, j)] = -adv[i] * score[j] - beta * ent[j];
                }
            }
            (PolicyDistribution::DiagGaussian(g), Action::Continuous(x)) => {
                let dm = g.grad_log_prob_mean(x)?;
                let ds = g.grad_log_prob_log_std(x)?;
                for j in 0..width {
                    policy_grad[(i, j)] = -adv[i] * dm[j];
                    log_std_grad[j] += -adv[i] * ds[j] - beta;
                }
            }
            _ => return Err(Error::FamilyMismatch("batch action does not match policy".into())),
        }
        let err = eval.values[i] - batch.returns[i];
        terms.value_loss += 0.5 * err * err;
        value_grad[(i, 0)] = value_weight * err * inv_var;
    }
    let inv_n = 1.0 / n as f64;
    terms.policy_loss *= inv_n;
    terms.value_loss *= inv_n;
    terms.entropy *= inv_n;
    let log_std_grad: Vec<f64> = log_std_grad.iter().map(|g| g * inv_n).collect();

    let mut grads = match model {
        ActorCritic::Shared(net) => vec![net.backward(&eval.traces[0], &[policy_grad, value_grad])?.params],
        ActorCritic::Disjoint { actor, critic } => vec![
            actor.backward(&eval.traces[0], &[policy_grad])?.params,
            critic.backward(&eval.traces[1], &[value_grad])?.params,
        ],
    };
    if let Some(ls) = grads[0].log_std.as_mut() {
        ls.copy_from_slice(&log_std_grad);
    }
    Ok((grads, terms))
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Statistics for one network's Kronecker factors.
#[derive(Clone, Debug)]
pub struct FisherStats {
    pub inputs: Vec<Matrix>,
    pub pre_grads: Vec<Matrix>,
    pub log_std_scores: Option<Matrix>,
}

/// Samples outputs from the model's own predictive distribution and
/// backpropagates their log-likelihood. Policy outputs come from
/// `pi(.|s)`, critic outputs from `N(V(s), sigma^2)`; with a Euclidean
/// critic the value output contributes nothing. Returns one entry per
/// network plus the number of policy samples drawn.
pub fn fisher_stat_pass(
    model: &ActorCritic,
    eval: &Evaluation,
    sigma: f64,
    samples_per_state: usize,
    critic_norm: CriticNorm,
    rng: &mut dyn RngCore,
) -> Result<(Vec<FisherStats>, usize)> {
    let n = eval.policies.len();
    let width = model.policy_head().output_dim();
    let critic_on = critic_norm != CriticNorm::Euclidean;
    let gaussian = matches!(model.policy_head(), PolicyHead::Gaussian(_));
    let mut policy_rounds = Vec::with_capacity(samples_per_state);
    let mut value_rounds = Vec::with_capacity(samples_per_state);
    let mut score_rounds = Vec::with_capacity(samples_per_state);
    let mut drawn = 0;
    for _ in 0..samples_per_state {
        let mut pg = Matrix::zeros(n, width);
        let mut scores = Matrix::zeros(n, width);
        let mut vg = Matrix::zeros(n, 1);
        for i in 0..n {
            match &eval.policies[i] {
                PolicyDistribution::Categorical(c) => {
                    let b = c.sample(rng);
                    pg.row_mut(i).copy_from_slice(&c.grad_log_prob(b)?);
                }
                PolicyDistribution::DiagGaussian(g) => {
                    let x = g.sample(rng);
                    pg.row_mut(i).copy_from_slice(&g.grad_log_prob_mean(&x)?);
                    scores.row_mut(i).copy_from_slice(&g.grad_log_prob_log_std(&x)?);
                }
            }
            drawn += 1;
            if critic_on {
                let critic = CriticGaussian::new(eval.values[i], sigma)?;
                let v = critic.sample(rng);
                vg[(i, 0)] = critic.grad_log_prob_mean(v);
            }
        }
        policy_rounds.push(pg);
        value_rounds.push(vg);
        score_rounds.push(scores);
    }
    let stack_inputs = |trace: &ForwardTrace| -> Result<Vec<Matrix>> {
        trace.inputs.iter().map(|a| vstack(&vec![a; samples_per_state])).collect()
    };
    let stack_grads = |rounds: Vec<Vec<Matrix>>| -> Result<Vec<Matrix>> {
        let layers = rounds[0].len();
        (0..layers)
            .map(|l| vstack(&rounds.iter().map(|r| &r[l]).collect::<Vec<_>>()))
            .collect()
    };
    let log_std_scores = if gaussian {
        Some(vstack(&score_rounds.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let stats = match model {
        ActorCritic::Shared(net) => {
            let rounds = policy_rounds
                .into_iter()
                .zip(value_rounds)
                .map(|(p, v)| net.backward(&eval.traces[0], &[p, v]).map(|g| g.pre_activation))
                .collect::<Result<Vec<_>>>()?;
            vec![FisherStats {
                inputs: stack_inputs(&eval.traces[0])?,
                pre_grads: stack_grads(rounds)?,
                log_std_scores,
            }]
        }
        ActorCritic::Disjoint { actor, critic } => {
            let actor_rounds = policy_rounds
                .into_iter()
                .map(|p| actor.backward(&eval.traces[0], &[p]).map(|g| g.pre_activation))
                .collect::<Result<Vec<_>>>()?;
            let critic_rounds = value_rounds
                .into_iter()
                .map(|v| critic.backward(&eval.traces[1], &[v]).map(|g| g.pre_activation))
                .collect::<Result<Vec<_>>>()?;
            vec![
                FisherStats {
                    inputs: stack_inputs(&eval.traces[0])?,
                    pre_grads: stack_grads(actor_rounds)?,
                    log_std_scores,
                },
                FisherStats {
                    inputs: stack_inputs(&eval.traces[1])?,
                    pre_grads: stack_grads(critic_rounds)?,
                    log_std_scores: None,
                },
            ]
        }
    };
    Ok((stats, drawn))
}

fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let cols = parts[0].cols();
    let rows = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in parts {
        if m.cols() != cols {
            return Err(Error::dims("vstack column mismatch"));
        }
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

/// What one update did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub update_index: usize,
    pub timesteps: usize,
    pub episodes: usize,
    pub mean_reward_100: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Step size applied to the policy parameters.
    pub eta_effective: f64,
    /// `0.5 * eta^2 * q` of the policy-bearing network (ACKTR only).
    pub quad_kl: Option<f64>,
    /// Whether the trust-region branch set `eta` (ACKTR only).
    pub clip_active: bool,
    pub exact_kl: Option<f64>,
    pub sigma_critic: f64,
    pub step_wall_ms: f64,
}

#[derive(Clone, Debug)]
enum Optimizer {
    Acktr(Vec<KfacState>),
    A2c(Vec<ParamSet>),
}

/// Usage counters for the two kinds of actions an update touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActionCounters {
    /// Taken actions read by the policy-gradient term.
    pub taken_actions_used: usize,
    /// Fresh actions drawn for curvature statistics.
    pub fisher_samples_drawn: usize,
}

/// A model together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Agent {
    pub model: ActorCritic,
    optimizer: Optimizer,
    sigma: CriticSigma,
    config: TrainerConfig,
    counters: ActionCounters,
}

impl Agent {
    pub fn new(model: ActorCritic, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = match config.algorithm {
            Algorithm::Acktr => Optimizer::Acktr(kfac_states(&model, &config)),
            Algorithm::A2c => Optimizer::A2c(model.networks().into_iter().map(ParamSet::zeros_like).collect()),
        };
        Ok(Agent {
            model,
            optimizer,
            sigma: CriticSigma::new(config.critic_norm),
            config,
            counters: ActionCounters::default(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn counters(&self) -> ActionCounters {
        self.counters
    }

    pub fn critic_sigma(&self) -> &CriticSigma {
        &self.sigma
    }

    /// Curvature state per network (ACKTR only).
    pub fn kfac(&self) -> Option<&[KfacState]> {
        match &self.optimizer {
            Optimizer::Acktr(s) => Some(s),
            Optimizer::A2c(_) => None,
        }
    }

    /// One update on a fresh on-policy batch.
    pub fn step(&mut self, batch: &RolloutBatch, step_index: usize, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        match self.config.algorithm {
            Algorithm::Acktr => self.acktr_step(batch, step_index, rng),
            Algorithm::A2c => self.a2c_step(batch, step_index),
        }
    }

    pub fn acktr_step(&mut self, batch: &RolloutBatch, step_index: usize, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        let Optimizer::Acktr(states) = &mut self.optimizer else {
            return Err(Error::config("algorithm", "agent was not built for ACKTR"));
        };
        let cfg = &self.config;
        let sigma = self.sigma.update(&batch.bellman_errors());
        let eval = self.model.evaluate(&batch.states)?;
        let (grads, terms) = objective_gradient(&self.model, &eval, batch, sigma, cfg)?;
        self.counters.taken_actions_used += batch.len();

        let (stats, drawn) = fisher_stat_pass(&self.model, &eval, sigma, cfg.fisher_samples, cfg.critic_norm, rng)?;
        self.counters.fisher_samples_drawn += drawn;
        for (state, s) in states.iter_mut().zip(&stats) {
            state.update_statistics(&s.inputs, &s.pre_grads, s.log_std_scores.as_ref())?;
            state.refresh_if_due()?;
        }

        let total = cfg.total_updates();
        let mut steps = Vec::with_capacity(grads.len());
        let mut policy_eta = 0.0;
        let mut policy_q = 0.0;
        let mut policy_clipped = false;
        for (idx, (state, g)) in states.iter().zip(&grads).enumerate() {
            let pre = state.precondition(g)?;
            let kcfg = if idx == 0 { &cfg.kfac } else { &cfg.critic_kfac };
            let eta_max = lr_schedule(kcfg.schedule, step_index, total, kcfg.eta_max);
            let euclidean_critic = idx == 1 && cfg.critic_norm == CriticNorm::Euclidean;
            let eta = if euclidean_critic {
                eta_max
            } else {
                trust_region_scale(pre.quadratic, eta_max, kcfg.delta)
            };
            if idx == 0 {
                policy_eta = eta;
                policy_q = pre.quadratic;
                policy_clipped = clip_active(pre.quadratic, eta_max, kcfg.delta);
            }
            steps.push((pre.direction, eta));
        }
        for (net, (dir, eta)) in self.model.networks_mut().into_iter().zip(&steps) {
            net.apply_update(dir, *eta)?;
        }
        Ok(StepMetrics {
            update_index: step_index + 1,
            timesteps: 0,
            episodes: 0,
            mean_reward_100: None,
            policy_loss: terms.policy_loss,
            value_loss: terms.value_loss,
            entropy: terms.entropy,
            eta_effective: policy_eta,
            quad_kl: Some(0.5 * policy_eta * policy_eta * policy_q),
            clip_active: policy_clipped,
            exact_kl: None,
            sigma_critic: sigma,
            step_wall_ms: 0.0,
        })
    }

    pub fn a2c_step(&mut self, batch: &RolloutBatch, step_index: usize) -> Result<StepMetrics> {
        let Optimizer::A2c(momentum) = &mut self.optimizer else {
            return Err(Error::config("algorithm", "agent was not built for A2C"));
        };
        let cfg = &self.config;
        let sigma = self.sigma.update(&batch.bellman_errors());
        let eval = self.model.evaluate(&batch.states)?;
        let (grads, terms) = objective_gradient(&self.model, &eval, batch, sigma, cfg)?;
        self.counters.taken_actions_used += batch.len();
        let total = cfg.total_updates();
        let mut policy_lr = 0.0;
        for (idx, ((net, m), g)) in self.model.networks_mut().into_iter().zip(momentum.iter_mut()).zip(&grads).enumerate() {
            let kcfg = if idx == 0 { &cfg.kfac } else { &cfg.critic_kfac };
            let lr = lr_schedule(kcfg.schedule, step_index, total, kcfg.eta_max);
            let mut next = m.scale(cfg.momentum);
            next.add_scaled_assign(g, 1.0)?;
            net.apply_update(&next, lr)?;
            *m = next;
            if idx == 0 {
                policy_lr = lr;
            }
        }
        Ok(StepMetrics {
            update_index: step_index + 1,
            timesteps: 0,
            episodes: 0,
            mean_reward_100: None,
            policy_loss: terms.policy_loss,
            value_loss: terms.value_loss,
            entropy: terms.entropy,
            eta_effective: policy_lr,
            quad_kl: None,
            clip_active: false,
            exact_kl: None,
            sigma_critic: sigma,
            step_wall_ms: 0.0,
        })
    }
}

fn kfac_states(model: &ActorCritic, cfg: &TrainerConfig) -> Vec<KfacState> {
    model
        .networks()
        .into_iter()
        .enumerate()
        .map(|(idx, net)| {
            let shapes: Vec<(usize, usize)> = net.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect();
            let euclid = cfg.critic_norm == CriticNorm::Euclidean;
            let natural: Vec<bool> = (0..shapes.len())
                .map(|l| match model.topology() {
                    Topology::Shared => !(euclid && Some(l) == net.value_layer()),
                    Topology::Disjoint => !(euclid && idx == 1),
                })
                .collect();
            let kcfg = if idx == 0 { cfg.kfac.clone() } else { cfg.critic_kfac.clone() };
            KfacState::new(&shapes, &natural, net.log_std().map(<[f64]>::len), kcfg)
        })
        .collect()
}

/// Measures the KL between the models before and after an update on the
/// batch states, given the critic scale used by the update.
pub type KlProbe<'a> = &'a dyn Fn(&ActorCritic, &ActorCritic, &Matrix, f64) -> Result<f64>;

/// A training run in progress: agent, environments and RNG streams.
pub struct Trainer {
    agent: Agent,
    envs: VecEnv,
    act_rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
    updates: usize,
}

impl Trainer {
    /// Builds the model from `cfg.seed`. Parameter init, action sampling and
    /// Fisher sampling each get their own stream.
    pub fn new(cfg: &TrainerConfig, envs: VecEnv) -> Result<Self> {
        cfg.validate()?;
        if envs.len() != cfg.n_envs {
            return Err(Error::config("trainer.batch_size", "environment count differs from batch_size / k"));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = ActorCritic::new(envs.observation_dim(), &envs.action_spec(), cfg, &mut init_rng)?;
        let mut act_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        act_rng.set_stream(1_000_001);
        let mut fisher_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        fisher_rng.set_stream(1_000_002);
        Ok(Trainer {
            agent: Agent::new(model, cfg.clone())?,
            envs,
            act_rng,
            fisher_rng,
            updates: 0,
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn envs(&self) -> &VecEnv {
        &self.envs
    }

    pub fn updates_done(&self) -> usize {
        self.updates
    }

    pub fn is_done(&self) -> bool {
        self.updates >= self.agent.config.total_updates()
    }

    /// Collects one batch and updates on it. `kl_probe`, when given, is
    /// evaluated on the batch states every `exact_kl_interval` updates with
    /// the models before and after the update. The wall time covers both
    /// rollout and update.
    pub fn update(&mut self, kl_probe: Option<KlProbe<'_>>) -> Result<StepMetrics> {
        let cfg = &self.agent.config;
        let (k, gamma, interval, timeout_bootstrap) = (cfg.k, cfg.gamma, cfg.exact_kl_interval, cfg.timeout_bootstrap);
        let step_index = self.updates;
        let start = Instant::now();
        let batch = collect_rollout(&mut self.envs, &self.agent.model, k, gamma, timeout_bootstrap, &mut self.act_rng)?;
        let measure = kl_probe.is_some() && interval > 0 && (step_index + 1) % interval == 0;
        let before = measure.then(|| self.agent.model.clone());
        let mut m = self.agent.step(&batch, step_index, &mut self.fisher_rng)?;
        let elapsed = start.elapsed();
        if let (Some(old), Some(probe)) = (before, kl_probe) {
            m.exact_kl = Some(probe(&old, &self.agent.model, &batch.states, m.sigma_critic)?);
        }
        m.timesteps = self.envs.timesteps();
        m.episodes = self.envs.episodes();
        m.mean_reward_100 = self.envs.mean_recent_return();
        m.step_wall_ms = elapsed.as_secs_f64() * 1e3;
        self.updates += 1;
        Ok(m)
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }
}

/// Everything a training run produced.
pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `cfg.total_timesteps` of training on `envs`.
pub fn train(cfg: &TrainerConfig, envs: VecEnv, kl_probe: Option<KlProbe<'_>>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, envs)?;
    let mut metrics = Vec::new();
    while !trainer.is_done() {
        metrics.push(trainer.update(kl_probe)?);
    }
    Ok(TrainOutcome {
        agent: trainer.into_agent(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfac::Schedule;
    use rand::Rng;

    fn small_cfg(topology: Topology, critic_norm: CriticNorm) -> TrainerConfig {
        TrainerConfig {
            topology,
            critic_norm,
            hidden: vec![5],
            k: 4,
            n_envs: 2,
            total_timesteps: 400,
            ..TrainerConfig::default()
        }
    }

    fn batch_for(model: &ActorCritic, envs: &mut VecEnv, seed: u64) -> RolloutBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        collect_rollout(envs, model, 4, 0.99, true, &mut rng).unwrap()
    }

    #[test]
    fn sigma_modes() {
        assert_eq!(critic_sigma(CriticNorm::GaussNewton, &[3.0, -7.0]), 1.0);
        assert_eq!(critic_sigma(CriticNorm::Euclidean, &[3.0, -7.0]), 1.0);
        assert_eq!(critic_sigma(CriticNorm::AdaptiveGaussNewton, &[0.0, 0.0]), SIGMA_FLOOR);
        assert!((critic_sigma(CriticNorm::AdaptiveGaussNewton, &[-1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_sigma_matches_weighted_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches: Vec<Vec<f64>> = (0..30)
            .map(|i| (0..8).map(|_| rng.random_range(-1.0..1.0) * (1.0 + i as f64 * 0.1)).collect())
            .collect();
        let mut est = CriticSigma::new(CriticNorm::AdaptiveGaussNewton);
        for (t, _) in batches.iter().enumerate() {
            let got = est.update(&batches[t]);
            // explicit weights: batch 0 gets decay^t, batch j>0 gets (1-decay) decay^(t-j)
            let (mut m, mut s) = (0.0, 0.0);
            for (j, b) in batches[..=t].iter().enumerate() {
                let w = if j == 0 {
                    SIGMA_DECAY.powi(t as i32)
                } else {
                    (1.0 - SIGMA_DECAY) * SIGMA_DECAY.powi((t - j) as i32)
                };
                m += w * b.iter().sum::<f64>() / b.len() as f64;
                s += w * b.iter().map(|e| e * e).sum::<f64>() / b.len() as f64;
            }
            let expected = (s - m * m).max(0.0).sqrt().max(SIGMA_FLOOR);
            assert!((got - expected).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_signal_leaves_parameters_unchanged() {
        let mut cfg = small_cfg(Topology::Shared, CriticNorm::GaussNewton);
        cfg.entropy_weight = 0.0;
        let mut envs = VecEnv::from_name("cartpole", 2, 0, false).unwrap();
        let model = ActorCritic::new(4, &ActionSpec::Discrete(2), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut batch = batch_for(&model, &mut envs, 0);
        batch.returns = batch.values.clone();
        batch.advantages = vec![0.0; batch.len()];
        let mut agent = Agent::new(model.clone(), cfg).unwrap();
        let m = agent.step(&batch, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(agent.model, model);
        assert_eq!(m.quad_kl, Some(0.0));
    }

    #[test]
    fn quadratic_kl_respects_radius() {
        for topology in [Topology::Shared, Topology::Disjoint] {
            let cfg = TrainerConfig {
                total_timesteps: 2000,
                ..small_cfg(topology, CriticNorm::GaussNewton)
            };
            let envs = VecEnv::from_name("cartpole", cfg.n_envs, 3, false).unwrap();
            let out = train(&cfg, envs, None).unwrap();
            for m in &out.metrics {
                let q = m.quad_kl.unwrap();
                assert!(q <= cfg.kfac.delta + 1e-8);
                if m.clip_active {
                    assert!((q - cfg.kfac.delta).abs() <= 1e-8);
                }
            }
            assert!(out.metrics.iter().any(|m| m.clip_active));
        }
    }

    #[test]
    fn disjoint_actor_factors_ignore_the_critic() {
        let cfg = small_cfg(Topology::Disjoint, CriticNorm::GaussNewton);
        let mut envs = VecEnv::from_name("cartpole", 2, 0, false).unwrap();
        let model = ActorCritic::new(4, &ActionSpec::Discrete(2), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = batch_for(&model, &mut envs, 0);
        let mut zeroed = model.clone();
        if let ActorCritic::Disjoint { critic, .. } = &mut zeroed {
            let n = critic.param_count();
            critic.unflatten_params(&vec![0.0; n]).unwrap();
        }
        let stats = |m: &ActorCritic| {
            let eval = m.evaluate(&batch.states).unwrap();
            fisher_stat_pass(m, &eval, 1.0, 1, CriticNorm::GaussNewton, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap()
                .0
        };
        let (a, b) = (stats(&model), stats(&zeroed));
        assert_eq!(a[0].pre_grads, b[0].pre_grads);
        assert_eq!(a[0].inputs, b[0].inputs);
    }

    #[test]
    fn euclidean_critic_takes_raw_gradient_steps() {
        let cfg = small_cfg(Topology::Shared, CriticNorm::Euclidean);
        let mut envs = VecEnv::from_name("cartpole", 2, 0, false).unwrap();
        let model = ActorCritic::new(4, &ActionSpec::Discrete(2), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = batch_for(&model, &mut envs, 0);
        let eval = model.evaluate(&batch.states).unwrap();
        let (grads, _) = objective_gradient(&model, &eval, &batch, 1.0, &cfg).unwrap();
        let mut agent = Agent::new(model.clone(), cfg).unwrap();
        let m = agent.step(&batch, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let v = model.actor().value_layer().unwrap();
        let before = model.actor().layers()[v].weight();
        let after = agent.model.actor().layers()[v].weight();
        let expected = before.sub(&grads[0].weights[v].scale(m.eta_effective)).unwrap();
        assert!(after.max_abs_diff(&expected).unwrap() <= 1e-15);
    }

    #[test]
    fn counters_separate_taken_and_sampled_actions() {
        let cfg = TrainerConfig {
            fisher_samples: 3,
            ..small_cfg(Topology::Shared, CriticNorm::GaussNewton)
        };
        let mut envs = VecEnv::from_name("cartpole", 2, 0, false).unwrap();
        let model = ActorCritic::new(4, &ActionSpec::Discrete(2), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = batch_for(&model, &mut envs, 0);
        let mut agent = Agent::new(model.clone(), cfg.clone()).unwrap();
        agent.step(&batch, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(agent.counters().taken_actions_used, 8);
        assert_eq!(agent.counters().fisher_samples_drawn, 24);
        // the objective gradient does not depend on the sampling stream
        let eval = model.evaluate(&batch.states).unwrap();
        let (g1, _) = objective_gradient(&model, &eval, &batch, 1.0, &cfg).unwrap();
        let (g2, _) = objective_gradient(&model, &eval, &batch, 1.0, &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn a2c_plain_descent_and_stationarity() {
        let cfg = TrainerConfig {
            algorithm: Algorithm::A2c,
            momentum: 0.0,
            kfac: KfacConfig {
                eta_max: 0.1,
                schedule: Schedule::Constant,
                ..KfacConfig::default()
            },
            ..small_cfg(Topology::Shared, CriticNorm::GaussNewton)
        };
        let mut envs = VecEnv::from_name("cartpole", 2, 0, false).unwrap();
        let model = ActorCritic::new(4, &ActionSpec::Discrete(2), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = batch_for(&model, &mut envs, 0);
        let eval = model.evaluate(&batch.states).unwrap();
        let (grads, _) = objective_gradient(&model, &eval, &batch, 1.0, &cfg).unwrap();
        let mut agent = Agent::new(model.clone(), cfg.clone()).unwrap();
        agent.step(&batch, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut expected = model.clone();
        expected.networks_mut()[0].apply_update(&grads[0], 0.1).unwrap();
        assert_eq!(agent.model, expected);

        let mut still = batch.clone();
        still.returns = still.values.clone();
        still.advantages = vec![0.0; still.len()];
        let zero_cfg = TrainerConfig {
            entropy_weight: 0.0,
            momentum: 0.9,
            ..cfg
        };
        let mut agent = Agent::new(model.clone(), zero_cfg).unwrap();
        for i in 0..5 {
            agent.step(&still, i, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        }
        assert_eq!(agent.model, model);
    }

    #[test]
    fn continuous_disjoint_training_runs() {
        let cfg = TrainerConfig {
            topology: Topology::Disjoint,
            hidden: vec![8],
            k: 5,
            n_envs: 2,
            total_timesteps: 200,
            ..TrainerConfig::default()
        };
        let envs = VecEnv::from_name("pendulum", 2, 1, true).unwrap();
        let out = train(&cfg, envs, None).unwrap();
        assert_eq!(out.metrics.len(), 20);
        assert!(out.agent.model.actor().log_std().is_some());
        assert!(out.metrics.iter().all(|m| m.quad_kl.unwrap() <= cfg.kfac.delta + 1e-8));
    }

    #[test]
    fn config_validation_names_the_key() {
        let cfg = TrainerConfig {
            gamma: 1.5,
            ..TrainerConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "trainer.gamma"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = TrainerConfig {
            kfac: KfacConfig {
                delta: 0.0,
                ..KfacConfig::default()
            },
            ..TrainerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "kfac.delta"));
    }
}
