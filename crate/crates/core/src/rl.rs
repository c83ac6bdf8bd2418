//! Environments, rollout collection and k-step returns.
//!
//! Rollout batches are laid out env-major: the transition of environment `e`
//! at segment step `t` is row `e * k + t`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::Action;
use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpec {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpec {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpec::Discrete(n) => *n,
            ActionSpec::Continuous { low, .. } => low.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// The episode is over, for whatever reason.
    pub terminal: bool,
    /// The episode was cut by the step cap rather than ended by the task.
    pub truncated: bool,
}

pub trait Env: Send {
    fn observation_dim(&self) -> usize;
    fn action_spec(&self) -> ActionSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Fails with [`Error::EnvFault`] when called on a finished episode.
    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Transition>;
}

fn discrete(action: &Action, n: usize) -> Result<usize> {
    match action {
        Action::Discrete(a) if *a < n => Ok(*a),
        other => Err(Error::EnvFault(format!("invalid discrete action {other:?}"))),
    }
}

fn finished() -> Error {
    Error::EnvFault("step called after a terminal transition without reset".into())
}

/// Cart-pole balancing with Euler integration.
#[derive(Clone, Debug)]
pub struct CartPole {
    state: [f64; 4],
    steps: usize,
    done: bool,
    pub max_steps: usize,
}

impl CartPole {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 10.0;
    const DT: f64 = 0.02;
    const X_LIMIT: f64 = 2.4;
    const THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;

    pub fn new() -> Self {
        CartPole {
            state: [0.0; 4],
            steps: 0,
            done: true,
            max_steps: 200,
        }
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for CartPole {
    fn observation_dim(&self) -> usize {
        4
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete(2)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
        if self.done {
            return Err(finished());
        }
        let a = discrete(action, 2)?;
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if a == 1 { Self::FORCE } else { -Self::FORCE };
        let total_mass = Self::MASS_CART + Self::MASS_POLE;
        let pole_mass_length = Self::MASS_POLE * Self::HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (Self::GRAVITY * sin - cos * temp)
            / (Self::HALF_LENGTH * (4.0 / 3.0 - Self::MASS_POLE * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
        self.state = [
            x + Self::DT * x_dot,
            x_dot + Self::DT * x_acc,
            theta + Self::DT * theta_dot,
            theta_dot + Self::DT * theta_acc,
        ];
        self.steps += 1;
        let fell = self.state[0].abs() > Self::X_LIMIT || self.state[2].abs() > Self::THETA_LIMIT;
        self.done = fell || self.steps >= self.max_steps;
        Ok(Transition {
            next_state: self.state.to_vec(),
            reward: 1.0,
            terminal: self.done,
            truncated: self.done && !fell,
        })
    }
}

/// Torque-limited pendulum swing-up; reward is the negative shaped cost
/// `angle^2 + 0.1 speed^2 + 0.001 torque^2`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    theta: f64,
    theta_dot: f64,
    steps: usize,
    done: bool,
    pub max_steps: usize,
}

impl Pendulum {
    const MAX_SPEED: f64 = 8.0;
    const MAX_TORQUE: f64 = 2.0;
    const DT: f64 = 0.05;
    const G: f64 = 10.0;
    const MASS: f64 = 1.0;
    const LENGTH: f64 = 1.0;

    pub fn new() -> Self {
        Pendulum {
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            done: true,
            max_steps: 200,
        }
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Env for Pendulum {
    fn observation_dim(&self) -> usize {
        3
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous {
            low: vec![-Self::MAX_TORQUE],
            high: vec![Self::MAX_TORQUE],
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
        if self.done {
            return Err(finished());
        }
        let u = match action {
            Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => v[0].clamp(-Self::MAX_TORQUE, Self::MAX_TORQUE),
            other => return Err(Error::EnvFault(format!("invalid pendulum action {other:?}"))),
        };
        let cost = wrap_angle(self.theta).powi(2) + 0.1 * self.theta_dot.powi(2) + 0.001 * u * u;
        let acc = 3.0 * Self::G / (2.0 * Self::LENGTH) * self.theta.sin() + 3.0 / (Self::MASS * Self::LENGTH.powi(2)) * u;
        self.theta_dot = (self.theta_dot + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * Self::DT;
        self.steps += 1;
        self.done = self.steps >= self.max_steps;
        Ok(Transition {
            next_state: self.observe(),
            reward: -cost,
            terminal: self.done,
            truncated: self.done,
        })
    }
}

/// Finite MDP given as an explicit transition table.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` lists `(probability, next_state, reward)`.
    pub transitions: Vec<Vec<Vec<(f64, usize, f64)>>>,
    /// Terminal states have value zero and no outgoing transitions.
    pub terminal: Vec<bool>,
    pub start: usize,
}

/// Chain of `n` states with the agent starting at state 1. Action 0 moves
/// left, action 1 moves right; with probability `slip` the move is reversed.
/// State 0 is a terminal paying `left_reward`, state `n - 1` a terminal
/// paying `right_reward`; every other move costs `step_cost`.
#[derive(Clone, Debug)]
pub struct GridChain {
    pub n: usize,
    pub left_reward: f64,
    pub right_reward: f64,
    pub step_cost: f64,
    pub slip: f64,
    pub max_steps: usize,
    position: usize,
    steps: usize,
    done: bool,
}

impl GridChain {
    pub fn new(n: usize) -> Self {
        assert!(n >= 3, "grid chain needs at least three states");
        GridChain {
            n,
            left_reward: 0.1,
            right_reward: 1.0,
            step_cost: 0.01,
            slip: 0.0,
            max_steps: 50,
            position: 1,
            steps: 0,
            done: true,
        }
    }

    pub fn start(&self) -> usize {
        1
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        v[s] = 1.0;
        v
    }

    fn outcome(&self, next: usize) -> (f64, bool) {
        if next == 0 {
            (self.left_reward, true)
        } else if next == self.n - 1 {
            (self.right_reward, true)
        } else {
            (-self.step_cost, false)
        }
    }

    /// The transition table this environment samples from (ignoring the step cap).
    pub fn to_mdp(&self) -> TabularMdp {
        let mut transitions = vec![vec![Vec::new(); 2]; self.n];
        let mut terminal = vec![false; self.n];
        terminal[0] = true;
        terminal[self.n - 1] = true;
        for (s, row) in transitions.iter_mut().enumerate() {
            if terminal[s] {
                continue;
            }
            for (a, outs) in row.iter_mut().enumerate() {
                let intended = if a == 1 { s + 1 } else { s - 1 };
                let reversed = if a == 1 { s - 1 } else { s + 1 };
                for (p, next) in [(1.0 - self.slip, intended), (self.slip, reversed)] {
                    if p > 0.0 {
                        let (r, _) = self.outcome(next);
                        outs.push((p, next, r));
                    }
                }
            }
        }
        TabularMdp {
            n_states: self.n,
            n_actions: 2,
            transitions,
            terminal,
            start: self.start(),
        }
    }
}

impl Env for GridChain {
    fn observation_dim(&self) -> usize {
        self.n
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Discrete(2)
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.position = self.start();
        self.steps = 0;
        self.done = false;
        self.one_hot(self.position)
    }

    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Transition> {
        if self.done {
            return Err(finished());
        }
        let mut right = discrete(action, 2)? == 1;
        if self.slip > 0.0 && rng.random::<f64>() < self.slip {
            right = !right;
        }
        self.position = if right { self.position + 1 } else { self.position - 1 };
        let (reward, terminal) = self.outcome(self.position);
        self.steps += 1;
        self.done = terminal || self.steps >= self.max_steps;
        Ok(Transition {
            next_state: self.one_hot(self.position),
            reward,
            terminal: self.done,
            truncated: self.done && !terminal,
        })
    }
}

pub const ENV_NAMES: [&str; 3] = ["cartpole", "pendulum", "gridchain"];

/// Builds an environment by registry name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "cartpole" => Ok(Box::new(CartPole::new())),
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "gridchain" => Ok(Box::new(GridChain::new(10))),
        other => Err(Error::config("env", format!("unknown environment `{other}`, expected one of {ENV_NAMES:?}"))),
    }
}

/// Running mean and variance of observations; normalized values are clipped to ±10.
#[derive(Clone, Debug)]
pub struct RunningNormalizer {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: f64,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        RunningNormalizer {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn observe(&mut self, x: &[f64]) {
        let n = self.count + 1.0;
        for ((m, v), &xi) in self.mean.iter_mut().zip(&mut self.var).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *v = (*v * self.count + d * (xi - *m)) / n;
        }
        self.count = n;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((&xi, &m), &v)| ((xi - m) / (v + 1e-8).sqrt()).clamp(-10.0, 10.0))
            .collect()
    }
}

/// Anything that picks actions and estimates values for a batch of states.
pub trait Policy {
    /// Sampled actions and critic values, one per state row.
    fn act(&self, states: &Matrix, rng: &mut dyn RngCore) -> Result<(Vec<Action>, Vec<f64>)>;
    fn values(&self, states: &Matrix) -> Result<Vec<f64>>;
}

/// A set of environments stepped in lockstep, each with its own RNG stream
/// (stream `i + 1` of the master seed).
pub struct VecEnv {
    envs: Vec<Box<dyn Env>>,
    rngs: Vec<ChaCha8Rng>,
    raw_obs: Vec<Vec<f64>>,
    episode_return: Vec<f64>,
    normalizer: Option<RunningNormalizer>,
    completed: usize,
    recent: VecDeque<f64>,
    timesteps: usize,
}

impl VecEnv {
    pub fn new(envs: Vec<Box<dyn Env>>, seed: u64, normalize: bool) -> Result<Self> {
        let first = envs.first().ok_or_else(|| Error::config("n_envs", "need at least one environment"))?;
        let dim = first.observation_dim();
        let spec = first.action_spec();
        if envs.iter().any(|e| e.observation_dim() != dim || e.action_spec() != spec) {
            return Err(Error::EnvFault("environments disagree on spaces".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..envs.len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        let mut envs = envs;
        let raw_obs = envs.iter_mut().zip(&mut rngs).map(|(e, r)| e.reset(r)).collect::<Vec<_>>();
        let mut normalizer = normalize.then(|| RunningNormalizer::new(dim));
        if let Some(n) = normalizer.as_mut() {
            raw_obs.iter().for_each(|o| n.observe(o));
        }
        let n = envs.len();
        Ok(VecEnv {
            envs,
            rngs,
            raw_obs,
            episode_return: vec![0.0; n],
            normalizer,
            completed: 0,
            recent: VecDeque::with_capacity(100),
            timesteps: 0,
        })
    }

    /// `n` copies of a registry environment.
    pub fn from_name(name: &str, n: usize, seed: u64, normalize: bool) -> Result<Self> {
        let envs = (0..n).map(|_| make_env(name)).collect::<Result<Vec<_>>>()?;
        Self::new(envs, seed, normalize)
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observation_dim(&self) -> usize {
        self.envs[0].observation_dim()
    }

    pub fn action_spec(&self) -> ActionSpec {
        self.envs[0].action_spec()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn episodes(&self) -> usize {
        self.completed
    }

    /// Mean undiscounted return of the last 100 finished episodes.
    pub fn mean_recent_return(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }

    pub fn normalizer(&self) -> Option<&RunningNormalizer> {
        self.normalizer.as_ref()
    }

    fn observation(&self, raw: &[f64]) -> Vec<f64> {
        match &self.normalizer {
            Some(n) => n.normalize(raw),
            None => raw.to_vec(),
        }
    }

    /// Current observations as seen by the policy, one row per environment.
    pub fn observations(&self) -> Matrix {
        let dim = self.observation_dim();
        let rows: Vec<f64> = self.raw_obs.iter().flat_map(|o| self.observation(o)).collect();
        Matrix::from_vec(self.len(), dim, rows).expect("observations are finite")
    }

    /// Steps every environment once; finished episodes are reset immediately.
    pub fn step(&mut self, actions: &[Action]) -> Result<Vec<StepOutcome>> {
        if actions.len() != self.len() {
            return Err(Error::dims("one action per environment"));
        }
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let tr = self.envs[i].step(&actions[i], &mut self.rngs[i])?;
            if !tr.reward.is_finite() {
                return Err(Error::EnvFault(format!("non-finite reward from env {i}")));
            }
            self.episode_return[i] += tr.reward;
            let final_observation = tr.truncated.then(|| self.observation(&tr.next_state));
            let next = if tr.terminal {
                if self.recent.len() == 100 {
                    self.recent.pop_front();
                }
                self.recent.push_back(self.episode_return[i]);
                self.completed += 1;
                self.episode_return[i] = 0.0;
                self.envs[i].reset(&mut self.rngs[i])
            } else {
                tr.next_state
            };
            if let Some(n) = self.normalizer.as_mut() {
                n.observe(&next);
            }
            self.raw_obs[i] = next;
            out.push(StepOutcome {
                reward: tr.reward,
                terminal: tr.terminal,
                truncated: tr.truncated,
                final_observation,
            });
        }
        self.timesteps += self.len();
        Ok(out)
    }
}

/// What one environment did in [`VecEnv::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
    /// Policy-view observation the cut episode ended in (truncated steps only).
    pub final_observation: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    /// `k * n_envs` rows, env-major.
    pub states: Matrix,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    /// Terminal because of the step cap.
    pub truncated: Vec<bool>,
    /// `V(s_final)` at truncated steps when timeout bootstrapping is on, else 0.
    pub timeout_values: Vec<f64>,
    pub values: Vec<f64>,
    /// Critic value of the state after the segment, per environment.
    pub bootstrap_values: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub k: usize,
    pub n_envs: usize,
    pub gamma: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `R_t - V(s_t)`.
    pub fn bellman_errors(&self) -> Vec<f64> {
        self.returns.iter().zip(&self.values).map(|(r, v)| r - v).collect()
    }
}

/// Runs `k` steps in every environment with actions sampled from `policy`.
/// With `timeout_bootstrap`, a step cut by the cap is credited with
/// `gamma * V(s_final)` in its return instead of treating the cap as the
/// end of the world.
pub fn collect_rollout(
    envs: &mut VecEnv,
    policy: &dyn Policy,
    k: usize,
    gamma: f64,
    timeout_bootstrap: bool,
    rng: &mut dyn RngCore,
) -> Result<RolloutBatch> {
    if k == 0 {
        return Err(Error::config("k", "segment length must be positive"));
    }
    let n = envs.len();
    let dim = envs.observation_dim();
    let mut states = vec![0.0; n * k * dim];
    let mut actions = vec![Action::Discrete(0); n * k];
    let mut rewards = vec![0.0; n * k];
    let mut terminals = vec![false; n * k];
    let mut truncated = vec![false; n * k];
    let mut final_rows = Vec::new();
    let mut final_obs = Vec::new();
    let mut values = vec![0.0; n * k];
    for t in 0..k {
        let obs = envs.observations();
        let (acts, vals) = policy.act(&obs, rng)?;
        for e in 0..n {
            let row = e * k + t;
            states[row * dim..(row + 1) * dim].copy_from_slice(obs.row(e));
            values[row] = vals[e];
        }
        let results = envs.step(&acts)?;
        for (e, (a, out)) in acts.into_iter().zip(results).enumerate() {
            let row = e * k + t;
            actions[row] = a;
            rewards[row] = out.reward;
            terminals[row] = out.terminal;
            truncated[row] = out.truncated;
            if let (true, Some(obs)) = (timeout_bootstrap, out.final_observation) {
                final_rows.push(row);
                final_obs.extend(obs);
            }
        }
    }
    let bootstrap_values = policy.values(&envs.observations())?;
    let mut timeout_values = vec![0.0; n * k];
    if !final_rows.is_empty() {
        let v = policy.values(&Matrix::from_vec(final_rows.len(), dim, final_obs)?)?;
        for (row, v) in final_rows.into_iter().zip(v) {
            timeout_values[row] = v;
        }
    }
    let credited: Vec<f64> = rewards.iter().zip(&timeout_values).map(|(r, v)| r + gamma * v).collect();
    let returns = kstep_returns(&credited, &terminals, &bootstrap_values, gamma)?;
    let advantages = advantages(&returns, &values)?;
    Ok(RolloutBatch {
        states: Matrix::from_vec(n * k, dim, states)?,
        actions,
        rewards,
        terminals,
        truncated,
        timeout_values,
        values,
        bootstrap_values,
        returns,
        advantages,
        k,
        n_envs: n,
        gamma,
    })
}

/// Discounted k-step returns for env-major segments. Segment `e` covers
/// `rewards[e*k..(e+1)*k]` and is seeded with `bootstrap_values[e]`; a
/// terminal flag cuts the recursion so nothing flows back across it.
pub fn kstep_returns(rewards: &[f64], terminals: &[bool], bootstrap_values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = bootstrap_values.len();
    if n == 0 || rewards.len() != terminals.len() || rewards.len() % n != 0 {
        return Err(Error::dims(format!(
            "{} rewards, {} terminals, {} bootstrap values",
            rewards.len(),
            terminals.len(),
            n
        )));
    }
    let k = rewards.len() / n;
    let mut out = vec![0.0; rewards.len()];
    for e in 0..n {
        let mut running = bootstrap_values[e];
        for t in (0..k).rev() {
            let i = e * k + t;
            if terminals[i] {
                running = 0.0;
            }
            running = rewards[i] + gamma * running;
            out[i] = running;
        }
    }
    Ok(out)
}

pub fn advantages(returns: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if returns.len() != values.len() {
        return Err(Error::dims("returns and values differ in length"));
    }
    Ok(returns.iter().zip(values).map(|(r, v)| r - v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic environment whose reward encodes (env id, step).
    struct Sentinel {
        id: usize,
        t: usize,
        horizon: usize,
    }

    impl Env for Sentinel {
        fn observation_dim(&self) -> usize {
            1
        }
        fn action_spec(&self) -> ActionSpec {
            ActionSpec::Discrete(2)
        }
        fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
            self.t = 0;
            vec![0.0]
        }
        fn step(&mut self, _a: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
            self.t += 1;
            Ok(Transition {
                next_state: vec![self.t as f64],
                reward: (self.id * 1000 + self.t) as f64,
                terminal: self.t == self.horizon,
                truncated: false,
            })
        }
    }

    /// Always picks action `fixed`, values every state at `value`.
    struct Fixed {
        fixed: usize,
        value: f64,
    }

    impl Policy for Fixed {
        fn act(&self, states: &Matrix, _rng: &mut dyn RngCore) -> Result<(Vec<Action>, Vec<f64>)> {
            Ok((vec![Action::Discrete(self.fixed); states.rows()], vec![self.value; states.rows()]))
        }
        fn values(&self, states: &Matrix) -> Result<Vec<f64>> {
            Ok(vec![self.value; states.rows()])
        }
    }

    /// Pays 1 per step and cuts every episode after `cap` steps.
    struct Capped {
        t: usize,
        cap: usize,
    }

    impl Env for Capped {
        fn observation_dim(&self) -> usize {
            1
        }
        fn action_spec(&self) -> ActionSpec {
            ActionSpec::Discrete(2)
        }
        fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
            self.t = 0;
            vec![0.0]
        }
        fn step(&mut self, _a: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
            self.t += 1;
            Ok(Transition {
                next_state: vec![self.t as f64],
                reward: 1.0,
                terminal: self.t == self.cap,
                truncated: self.t == self.cap,
            })
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn kstep_examples() {
        let r = kstep_returns(&[1.0, 1.0], &[false, false], &[4.0], 0.5).unwrap();
        assert!(close(&r, &[2.5, 3.0]));
        let r = kstep_returns(&[1.0, 2.0, 3.0], &[false; 3], &[50.0], 0.0).unwrap();
        assert!(close(&r, &[1.0, 2.0, 3.0]));
        let r = kstep_returns(&[7.0, 1.0], &[true, false], &[100.0], 0.9).unwrap();
        assert_eq!(r[0], 7.0);
        assert!(matches!(kstep_returns(&[1.0], &[false, true], &[0.0], 0.9), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn advantage_examples() {
        assert!(close(&advantages(&[2.5], &[2.0]).unwrap(), &[0.5]));
        assert!(close(&advantages(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), &[0.0, 0.0]));
        assert!(close(&advantages(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), &[1.0, 2.0]));
        assert!(advantages(&[1.0], &[]).is_err());
    }

    #[test]
    fn forward_and_backward_return_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 7;
        let n = 3;
        let gamma = 0.93;
        let rewards: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let terminals: Vec<bool> = (0..n * k).map(|_| rng.random::<f64>() < 0.2).collect();
        let boot: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let backward = kstep_returns(&rewards, &terminals, &boot, gamma).unwrap();
        for e in 0..n {
            for t in 0..k {
                // explicit truncated sum
                let mut total = 0.0;
                let mut discount = 1.0;
                let mut cut = false;
                for i in t..k {
                    total += discount * rewards[e * k + i];
                    discount *= gamma;
                    if terminals[e * k + i] {
                        cut = true;
                        break;
                    }
                }
                if !cut {
                    total += discount * boot[e];
                }
                assert!((total - backward[e * k + t]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn streams_do_not_interleave() {
        let envs: Vec<Box<dyn Env>> = (0..3)
            .map(|id| Box::new(Sentinel { id: id + 1, t: 0, horizon: 100 }) as Box<dyn Env>)
            .collect();
        let mut venv = VecEnv::new(envs, 0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = collect_rollout(&mut venv, &Fixed { fixed: 0, value: 0.0 }, 4, 0.9, false, &mut rng).unwrap();
        for e in 0..3 {
            for t in 0..4 {
                assert_eq!(batch.rewards[e * 4 + t], ((e + 1) * 1000 + t + 1) as f64);
            }
        }
    }

    #[test]
    fn single_transition_batch() {
        let mut venv = VecEnv::from_name("cartpole", 1, 5, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = collect_rollout(&mut venv, &Fixed { fixed: 1, value: 0.5 }, 1, 0.99, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.states.shape(), (1, 4));
        assert_eq!(batch.bootstrap_values.len(), 1);
    }

    #[test]
    fn terminal_envs_reset_and_keep_shape() {
        let envs: Vec<Box<dyn Env>> = (0..2)
            .map(|id| Box::new(Sentinel { id, t: 0, horizon: 1 }) as Box<dyn Env>)
            .collect();
        let mut venv = VecEnv::new(envs, 0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = collect_rollout(&mut venv, &Fixed { fixed: 0, value: 9.0 }, 3, 0.9, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 6);
        assert!(batch.terminals.iter().all(|&d| d));
        // every stored state is the reset state
        assert!(batch.states.as_slice().iter().all(|&x| x == 0.0));
        assert!(batch.returns.iter().zip(&batch.rewards).all(|(r, w)| r == w));
        assert_eq!(venv.episodes(), 6);
    }

    #[test]
    fn gridchain_hand_trace() {
        let mut venv = VecEnv::from_name("gridchain", 1, 0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = collect_rollout(&mut venv, &Fixed { fixed: 1, value: 0.0 }, 9, 0.5, false, &mut rng).unwrap();
        // start at 1, eight moves right reach the goal at 9, then a reset
        for t in 0..8 {
            assert_eq!(batch.states[(t, t + 1)], 1.0);
        }
        assert_eq!(&batch.rewards[..8], &[-0.01, -0.01, -0.01, -0.01, -0.01, -0.01, -0.01, 1.0]);
        assert_eq!(batch.terminals.iter().position(|&d| d), Some(7));
        assert_eq!(batch.states[(8, 1)], 1.0);
    }

    #[test]
    fn step_after_terminal_is_an_error() {
        let mut env = GridChain::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let tr = env.step(&Action::Discrete(1), &mut rng).unwrap();
        assert!(tr.terminal);
        assert!(matches!(env.step(&Action::Discrete(1), &mut rng), Err(Error::EnvFault(_))));
        let mut cp = CartPole::new();
        assert!(cp.step(&Action::Discrete(0), &mut rng).is_err());
    }

    #[test]
    fn cartpole_caps_episodes() {
        let mut env = CartPole::new();
        env.max_steps = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let mut n = 0;
        loop {
            n += 1;
            if env.step(&Action::Discrete(n % 2), &mut rng).unwrap().terminal {
                break;
            }
        }
        assert_eq!(n, 5);
    }

    #[test]
    fn cartpole_falls_under_constant_push() {
        let mut env = CartPole::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.reset(&mut rng);
        let mut n = 0;
        while !env.step(&Action::Discrete(1), &mut rng).unwrap().terminal {
            n += 1;
        }
        assert!(n < 60, "pole should fall quickly, lasted {n}");
    }

    #[test]
    fn pendulum_rewards_are_costs() {
        let mut env = Pendulum::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = env.reset(&mut rng);
        assert!((obs[0].powi(2) + obs[1].powi(2) - 1.0).abs() < 1e-12);
        let tr = env.step(&Action::Continuous(vec![5.0]), &mut rng).unwrap();
        assert!(tr.reward <= 0.0 && tr.reward >= -(PI * PI + 0.1 * 64.0 + 0.004) - 1e-9);
        assert!(env.step(&Action::Discrete(0), &mut rng).is_err());
    }

    #[test]
    fn gridchain_mdp_matches_env() {
        let g = GridChain::new(5);
        let mdp = g.to_mdp();
        assert_eq!(mdp.transitions[3][1], vec![(1.0, 4, 1.0)]);
        assert_eq!(mdp.transitions[1][0], vec![(1.0, 0, 0.1)]);
        assert_eq!(mdp.transitions[2][1], vec![(1.0, 3, -0.01)]);
        assert!(mdp.terminal[0] && mdp.terminal[4]);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let run = || {
            let mut venv = VecEnv::from_name("cartpole", 2, 11, true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            collect_rollout(&mut venv, &Fixed { fixed: 0, value: 1.0 }, 30, 0.99, false, &mut rng)
                .unwrap()
                .states
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_env_is_config_error() {
        assert!(matches!(make_env("atari"), Err(Error::Config { .. })));
    }

    #[test]
    fn timeout_bootstrap_credits_the_cut_state() {
        let run = |bootstrap: bool| {
            let mut venv = VecEnv::new(vec![Box::new(Capped { t: 0, cap: 2 })], 0, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            collect_rollout(&mut venv, &Fixed { fixed: 0, value: 5.0 }, 3, 0.5, bootstrap, &mut rng).unwrap()
        };
        let on = run(true);
        assert_eq!(on.truncated, vec![false, true, false]);
        assert!(close(&on.rewards, &[1.0, 1.0, 1.0]));
        assert!(close(&on.timeout_values, &[0.0, 5.0, 0.0]));
        assert!(close(&on.returns, &[2.75, 3.5, 3.5]));
        let off = run(false);
        assert!(close(&off.timeout_values, &[0.0; 3]));
        assert!(close(&off.returns, &[1.5, 1.0, 3.5]));
    }
}
