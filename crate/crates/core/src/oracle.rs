//! Brute-force ground truth for the approximations in [`crate::kfac`].
//!
//! Nothing here calls the production forward/backward passes. Models are
//! read once through their flattened parameters and architecture, then
//! re-evaluated scalar by scalar; scores come from finite differences.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{ActorCritic, CriticNorm};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{Activation, Architecture, HeadKind, Network, PolicyHead};
use crate::rl::TabularMdp;
use crate::Matrix;

/// Largest model the dense Fisher oracle accepts.
pub const MAX_PARAMS: usize = 200;
/// Step for finite-difference output Jacobians.
pub const JACOBIAN_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
struct RefLayer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

/// Scalar re-implementation of a network, driven by a flat parameter vector.
#[derive(Clone, Debug)]
pub struct ReferenceNet {
    layers: Vec<RefLayer>,
    trunk_len: usize,
    head: HeadKind,
    params: Vec<f64>,
}

/// Positions of each quantity in [`ReferenceNet::outputs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputLayout {
    pub policy: Option<(PolicyHead, usize)>,
    pub value: Option<usize>,
    pub log_std: Option<usize>,
    pub len: usize,
}

impl ReferenceNet {
    pub fn from_network(net: &Network) -> Self {
        ReferenceNet {
            layers: net
                .layers()
                .iter()
                .map(|l| RefLayer {
                    inputs: l.in_dim(),
                    outputs: l.out_dim(),
                    activation: l.activation(),
                })
                .collect(),
            trunk_len: net.trunk_len(),
            head: net.head_kind(),
            params: net.flatten_params(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layout(&self) -> OutputLayout {
        let mut len = 0;
        let policy = self.head.policy().map(|p| {
            let at = len;
            len += p.output_dim();
            (p, at)
        });
        let value = self.head.has_value().then(|| {
            len += 1;
            len - 1
        });
        let log_std = match self.head.policy() {
            Some(PolicyHead::Gaussian(d)) => {
                len += d;
                Some(len - d)
            }
            _ => None,
        };
        OutputLayout {
            policy,
            value,
            log_std,
            len,
        }
    }

    /// Policy outputs, then the value, then log-std, for one state.
    pub fn outputs(&self, params: &[f64], state: &[f64]) -> Vec<f64> {
        assert_eq!(params.len(), self.params.len(), "parameter count");
        let mut offset = 0;
        let mut x = state.to_vec();
        for layer in &self.layers[..self.trunk_len] {
            x = affine(params, &mut offset, layer, &x)
                .into_iter()
                .map(|s| activate(layer.activation, s))
                .collect();
        }
        let mut out = Vec::new();
        for layer in &self.layers[self.trunk_len..] {
            out.extend(affine(params, &mut offset, layer, &x));
        }
        out.extend_from_slice(&params[offset..]);
        out
    }

    /// Finite-difference Jacobian of [`ReferenceNet::outputs`], outputs by parameters.
    pub fn jacobian(&self, params: &[f64], state: &[f64]) -> Matrix {
        let n_out = self.layout().len;
        let mut jac = Matrix::zeros(n_out, params.len());
        let mut p = params.to_vec();
        for j in 0..params.len() {
            let orig = p[j];
            p[j] = orig + JACOBIAN_EPS;
            let hi = self.outputs(&p, state);
            p[j] = orig - JACOBIAN_EPS;
            let lo = self.outputs(&p, state);
            p[j] = orig;
            for i in 0..n_out {
                jac[(i, j)] = (hi[i] - lo[i]) / (2.0 * JACOBIAN_EPS);
            }
        }
        jac
    }
}

fn affine(params: &[f64], offset: &mut usize, layer: &RefLayer, x: &[f64]) -> Vec<f64> {
    let rows = layer.outputs;
    let mut s = vec![0.0; rows];
    // weights are stored column by column; the last column is the bias
    for c in 0..=layer.inputs {
        let xc = if c < layer.inputs { x[c] } else { 1.0 };
        for (r, sr) in s.iter_mut().enumerate() {
            *sr += params[*offset + c * rows + r] * xc;
        }
    }
    *offset += rows * (layer.inputs + 1);
    s
}

fn activate(a: Activation, s: f64) -> f64 {
    match a {
        Activation::Tanh => s.tanh(),
        Activation::Relu => {
            if s > 0.0 {
                s
            } else {
                0.0
            }
        }
        Activation::Elu => {
            if s > 0.0 {
                s
            } else {
                s.exp() - 1.0
            }
        }
        Activation::Linear => s,
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Expectation mode for [`exact_fisher`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    /// Exact expectation: categorical actions enumerated with their
    /// probabilities, Gaussian outputs in closed form.
    Enumerate,
    /// Mean over this many sampled outputs per state.
    MonteCarlo(usize),
}

/// Dense Fisher over the flattened parameter ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFisher {
    pub matrix: Matrix,
    /// Sampled outputs used (0 for an exact expectation).
    pub samples: usize,
}

impl DenseFisher {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn asymmetry(&self) -> f64 {
        self.matrix.asymmetry()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(&self.matrix).into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Fisher of the network's predictive distribution averaged over `states`.
/// Policy heads contribute `pi(a|s)`; value heads contribute
/// `N(v; V(s), critic_sigma^2)` when `critic_sigma` is given.
pub fn exact_fisher(
    net: &Network,
    states: &Matrix,
    mode: FisherMode,
    critic_sigma: Option<f64>,
    rng: &mut dyn RngCore,
) -> Result<DenseFisher> {
    let reference = ReferenceNet::from_network(net);
    let p = reference.param_count();
    if p > MAX_PARAMS {
        return Err(Error::TooManyParams {
            params: p,
            limit: MAX_PARAMS,
        });
    }
    if states.cols() != net.input_dim() || states.rows() == 0 {
        return Err(Error::dims("states do not match network input"));
    }
    let layout = reference.layout();
    let mut fisher = Matrix::zeros(p, p);
    let mut samples = 0;
    for i in 0..states.rows() {
        let x = states.row(i);
        let out = reference.outputs(reference.params(), x);
        let jac = reference.jacobian(reference.params(), x);
        let mut accumulate = |score_out: &[f64], weight: f64| {
            let score = pull_back(&jac, score_out);
            for a in 0..p {
                let wa = weight * score[a];
                if wa == 0.0 {
                    continue;
                }
                for b in 0..p {
                    fisher[(a, b)] += wa * score[b];
                }
            }
        };
        match mode {
            FisherMode::Enumerate => {
                if let Some((head, at)) = layout.policy {
                    match head {
                        PolicyHead::Categorical(n) => {
                            let probs = softmax(&out[at..at + n]);
                            for b in 0..n {
                                let mut s = vec![0.0; layout.len];
                                for j in 0..n {
                                    s[at + j] = f64::from(u8::from(j == b)) - probs[j];
                                }
                                accumulate(&s, probs[b]);
                            }
                        }
                        PolicyHead::Gaussian(d) => {
                            let ls = layout.log_std.expect("gaussian head has log-std");
                            for j in 0..d {
                                let sd = out[ls + j].exp();
                                let mut s = vec![0.0; layout.len];
                                s[at + j] = 1.0 / sd;
                                accumulate(&s, 1.0);
                                // E[(z^2 - 1)^2] = 2
                                let mut s = vec![0.0; layout.len];
                                s[ls + j] = 1.0;
                                accumulate(&s, 2.0);
                            }
                        }
                    }
                }
                if let (Some(v), Some(sigma)) = (layout.value, critic_sigma) {
                    let mut s = vec![0.0; layout.len];
                    s[v] = 1.0 / sigma;
                    accumulate(&s, 1.0);
                }
            }
            FisherMode::MonteCarlo(n) => {
                for _ in 0..n {
                    let mut s = vec![0.0; layout.len];
                    if let Some((head, at)) = layout.policy {
                        match head {
                            PolicyHead::Categorical(k) => {
                                let probs = softmax(&out[at..at + k]);
                                let b = sample_index(&probs, rng);
                                for j in 0..k {
                                    s[at + j] = f64::from(u8::from(j == b)) - probs[j];
                                }
                            }
                            PolicyHead::Gaussian(d) => {
                                let ls = layout.log_std.expect("gaussian head has log-std");
                                for j in 0..d {
                                    let sd = out[ls + j].exp();
                                    let z: f64 = rng.sample(StandardNormal);
                                    s[at + j] = z / sd;
                                    s[ls + j] = z * z - 1.0;
                                }
                            }
                        }
                    }
                    if let (Some(v), Some(sigma)) = (layout.value, critic_sigma) {
                        let z: f64 = rng.sample(StandardNormal);
                        s[v] = z / sigma;
                    }
                    accumulate(&s, 1.0);
                    samples += 1;
                }
            }
        }
    }
    let scale = match mode {
        FisherMode::Enumerate => 1.0 / states.rows() as f64,
        FisherMode::MonteCarlo(n) => 1.0 / (states.rows() * n.max(1)) as f64,
    };
    Ok(DenseFisher {
        matrix: fisher.scale(scale),
        samples,
    })
}

fn pull_back(jac: &Matrix, score_out: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; jac.cols()];
    for (i, &s) in score_out.iter().enumerate() {
        if s != 0.0 {
            for (gj, &jij) in g.iter_mut().zip(jac.row(i)) {
                *gj += s * jij;
            }
        }
    }
    g
}

fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `(F + lambda I)^-1 g` by Gaussian elimination with partial pivoting.
pub fn dense_natural_gradient(fisher: &DenseFisher, g: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = fisher.dim();
    if g.len() != n {
        return Err(Error::dims(format!("gradient has {} entries, Fisher is {n}x{n}", g.len())));
    }
    let mut a = fisher.matrix.add_diagonal(lambda)?;
    let mut b = g.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        if a[(pivot, col)].abs() <= scale * 1e-15 {
            return Err(Error::NotInvertible { escalations: 0 });
        }
        if pivot != col {
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = t;
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a[(r, j)] - f * a[(col, j)];
                a[(r, j)] = v;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|j| a[(r, j)] * x[j]).sum();
        x[r] = (b[r] - tail) / a[(r, r)];
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= 1e-30 * (1.0 + a.frobenius_norm().powi(2)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let data = a.as_mut_slice();
                for k in 0..n {
                    let akp = data[k * n + p];
                    let akq = data[k * n + q];
                    data[k * n + p] = c * akp - s * akq;
                    data[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = data[p * n + k];
                    let aqk = data[q * n + k];
                    data[p * n + k] = c * apk - s * aqk;
                    data[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Mean over `states` of `KL(old || new)` for the policy, plus the critic
/// Gaussian term at scale `critic_sigma` when given.
pub fn exact_kl(old: &Network, new: &Network, states: &Matrix, critic_sigma: Option<f64>) -> Result<f64> {
    let (ro, rn) = (ReferenceNet::from_network(old), ReferenceNet::from_network(new));
    if ro.layout() != rn.layout() || ro.param_count() != rn.param_count() || states.cols() != old.input_dim() {
        return Err(Error::dims("models do not share an architecture"));
    }
    let layout = ro.layout();
    let mut total = 0.0;
    for i in 0..states.rows() {
        let x = states.row(i);
        let (po, pn) = (ro.outputs(ro.params(), x), rn.outputs(rn.params(), x));
        if let Some((head, at)) = layout.policy {
            match head {
                PolicyHead::Categorical(n) => {
                    let (a, b) = (softmax(&po[at..at + n]), softmax(&pn[at..at + n]));
                    total += a
                        .iter()
                        .zip(&b)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p.ln() - q.ln()))
                        .sum::<f64>();
                }
                PolicyHead::Gaussian(d) => {
                    let ls = layout.log_std.unwrap();
                    for j in 0..d {
                        let (m1, m2) = (po[at + j], pn[at + j]);
                        let (l1, l2) = (po[ls + j], pn[ls + j]);
                        let (v1, v2) = ((2.0 * l1).exp(), (2.0 * l2).exp());
                        total += l2 - l1 + (v1 + (m1 - m2).powi(2)) / (2.0 * v2) - 0.5;
                    }
                }
            }
        }
        if let (Some(v), Some(sigma)) = (layout.value, critic_sigma) {
            total += (po[v] - pn[v]).powi(2) / (2.0 * sigma * sigma);
        }
    }
    Ok(total / states.rows() as f64)
}

/// KL of the distribution a model's trust region controls: the joint
/// policy/critic output of a shared network under a Gauss-Newton critic,
/// otherwise the policy alone.
pub fn actor_critic_kl(old: &ActorCritic, new: &ActorCritic, states: &Matrix, sigma: f64, norm: CriticNorm) -> Result<f64> {
    match (old, new) {
        (ActorCritic::Shared(a), ActorCritic::Shared(b)) => {
            let critic = (norm != CriticNorm::Euclidean).then_some(sigma);
            exact_kl(a, b, states, critic)
        }
        (ActorCritic::Disjoint { actor: a, .. }, ActorCritic::Disjoint { actor: b, .. }) => exact_kl(a, b, states, None),
        _ => Err(Error::dims("models have different topologies")),
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    /// Greedy action per state (0 for terminal states).
    pub policy: Vec<usize>,
    pub start_value: f64,
    /// Sup-norm Bellman residual of `values`.
    pub residual: f64,
}

fn q_value(mdp: &TabularMdp, values: &[f64], s: usize, a: usize, gamma: f64) -> f64 {
    mdp.transitions[s][a]
        .iter()
        .map(|&(p, next, r)| p * (r + gamma * if mdp.terminal[next] { 0.0 } else { values[next] }))
        .sum()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::config("gamma", "value iteration needs 0 < gamma < 1"))
    }
}

/// Optimal values of a tabular MDP to within `tol` in sup norm. Terminal
/// states are worth zero; rewards are paid on transitions.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64, tol: f64) -> Result<ValueIteration> {
    check_gamma(gamma)?;
    let n = mdp.n_states;
    let mut values = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    (0..mdp.n_actions)
                        .map(|a| q_value(mdp, &values, s, a, gamma))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let change = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        // a change of c bounds the distance to the fixed point by c * gamma / (1 - gamma)
        if change * gamma / (1.0 - gamma) <= tol * 0.5 {
            break;
        }
    }
    let policy: Vec<usize> = (0..n)
        .map(|s| {
            if mdp.terminal[s] {
                return 0;
            }
            (0..mdp.n_actions)
                .max_by(|&a, &b| q_value(mdp, &values, s, a, gamma).total_cmp(&q_value(mdp, &values, s, b, gamma)))
                .unwrap()
        })
        .collect();
    let residual = bellman_residual(mdp, &values, gamma);
    Ok(ValueIteration {
        start_value: values[mdp.start],
        values,
        policy,
        residual,
    })
}

/// Sup-norm residual of the Bellman optimality equation.
pub fn bellman_residual(mdp: &TabularMdp, values: &[f64], gamma: f64) -> f64 {
    (0..mdp.n_states)
        .filter(|&s| !mdp.terminal[s])
        .map(|s| {
            let best = (0..mdp.n_actions)
                .map(|a| q_value(mdp, values, s, a, gamma))
                .fold(f64::NEG_INFINITY, f64::max);
            (best - values[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Values of a deterministic policy to within `tol`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &[usize], gamma: f64, tol: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if policy.len() != mdp.n_states || policy.iter().any(|&a| a >= mdp.n_actions) {
        return Err(Error::dims("policy does not fit the MDP"));
    }
    let mut values = vec![0.0; mdp.n_states];
    loop {
        let next: Vec<f64> = (0..mdp.n_states)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    q_value(mdp, &values, s, policy[s], gamma)
                }
            })
            .collect();
        let change = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        if change * gamma / (1.0 - gamma) <= tol * 0.5 {
            return Ok(values);
        }
    }
}

/// Greedy deterministic policy of a network with a categorical head on
/// one-hot tabular states.
pub fn greedy_tabular_policy(net: &Network, mdp: &TabularMdp) -> Result<Vec<usize>> {
    let reference = ReferenceNet::from_network(net);
    let Some((PolicyHead::Categorical(n), at)) = reference.layout().policy else {
        return Err(Error::FamilyMismatch("greedy tabular policy needs a categorical head".into()));
    };
    if net.input_dim() != mdp.n_states || n != mdp.n_actions {
        return Err(Error::dims("network does not fit the MDP"));
    }
    Ok((0..mdp.n_states)
        .map(|s| {
            let mut x = vec![0.0; mdp.n_states];
            x[s] = 1.0;
            let out = reference.outputs(reference.params(), &x);
            (0..n).max_by(|&a, &b| out[at + a].total_cmp(&out[at + b])).unwrap()
        })
        .collect())
}

/// Outcome of one oracle invariant.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, limit: f64, what: &str) -> Check {
    Check {
        name,
        passed: value <= limit,
        detail: format!("{what} = {value:.3e} (limit {limit:.1e})"),
    }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let b = Matrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    b.gram().add_diagonal(1.0).expect("square")
}

fn random_network(arch: &Architecture, rng: &mut ChaCha8Rng) -> Result<Network> {
    let mut net = Network::new(arch, rng)?;
    let flat: Vec<f64> = (0..net.param_count()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect();
    net.unflatten_params(&flat)?;
    Ok(net)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The full invariant suite behind `oracle-check`.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |r: Result<Check>, name: &'static str| {
        out.push(r.unwrap_or_else(|e| Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        }))
    };

    push(check_kron(&mut rng), "kron-inverse-identity");
    push(check_flatten_ordering(&mut rng), "flatten-ordering");
    push(check_gradients(&mut rng), "finite-difference-gradients");
    push(check_fisher_modes(&mut rng), "fisher-enumerate-vs-monte-carlo");
    push(check_fisher_shape(&mut rng), "fisher-symmetric-psd");
    push(check_deterministic_limit(&mut rng), "fisher-deterministic-limit");
    push(check_kl_taylor(&mut rng), "kl-taylor-consistency");
    push(check_batch_one(&mut rng), "kfac-batch-one-vs-dense");
    push(check_value_iteration(), "value-iteration-residual");
    out
}

fn check_kron(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (np, nq) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (p, q) = (random_spd(np, rng), random_spd(nq, rng));
        let lhs = linalg::sym_inverse(&linalg::kron(&p, &q), 0.0)?;
        let rhs = linalg::kron(&linalg::sym_inverse(&p, 0.0)?, &linalg::sym_inverse(&q, 0.0)?);
        worst = worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok(check("kron-inverse-identity", worst, 1e-9, "max abs error"))
}

fn check_flatten_ordering(rng: &mut ChaCha8Rng) -> Result<Check> {
    let arch = Architecture {
        input_dim: 3,
        hidden: vec![4, 3],
        activation: Activation::Tanh,
        head: HeadKind::Joint(PolicyHead::Gaussian(2)),
    };
    let net = random_network(&arch, rng)?;
    let reference = ReferenceNet::from_network(&net);
    let states = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
    let (outs, _) = net.forward(&states)?;
    let mut worst = 0.0f64;
    for i in 0..5 {
        let r = reference.outputs(reference.params(), states.row(i));
        for j in 0..2 {
            worst = worst.max((r[j] - outs[0][(i, j)]).abs());
        }
        worst = worst.max((r[2] - outs[1][(i, 0)]).abs());
    }
    Ok(check("flatten-ordering", worst, 1e-12, "max output difference"))
}

/// Loss used to cross-check backward: `sum_i w_i . out_i` per head, with
/// fixed random weights, averaged over the batch.
fn check_gradients(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    let heads = [
        HeadKind::Policy(PolicyHead::Categorical(3)),
        HeadKind::Policy(PolicyHead::Gaussian(2)),
        HeadKind::Value,
        HeadKind::Joint(PolicyHead::Categorical(2)),
        HeadKind::Joint(PolicyHead::Gaussian(1)),
    ];
    for head in heads {
        for act in [Activation::Tanh, Activation::Elu, Activation::Relu, Activation::Linear] {
            let arch = Architecture {
                input_dim: 3,
                hidden: vec![4],
                activation: act,
                head,
            };
            let net = random_network(&arch, rng)?;
            worst = worst.max(gradient_error(&net, rng)?);
        }
    }
    Ok(check("finite-difference-gradients", worst, 1e-6, "worst relative error"))
}

/// Relative error between backward() and finite differences for a random
/// linear functional of the outputs.
pub fn gradient_error(net: &Network, rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = 3;
    let states = Matrix::from_fn(batch, net.input_dim(), |_, _| rng.random_range(-1.5..1.5));
    let (outs, trace) = net.forward(&states)?;
    let weights: Vec<Matrix> = outs
        .iter()
        .map(|o| Matrix::from_fn(o.rows(), o.cols(), |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let analytic = net.backward(&trace, &weights)?.params.flatten();
    let reference = ReferenceNet::from_network(net);
    let layout = reference.layout();
    let loss = |p: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..batch {
            let o = reference.outputs(p, states.row(i));
            let mut head = 0;
            if let Some((ph, at)) = layout.policy {
                for j in 0..ph.output_dim() {
                    total += weights[head][(i, j)] * o[at + j];
                }
                head += 1;
            }
            if let Some(v) = layout.value {
                total += weights[head][(i, 0)] * o[v];
            }
        }
        total / batch as f64
    };
    let mut numeric = finite_diff_grad(&loss, reference.params(), 1e-5);
    // backward leaves log-std gradients to the caller
    if let Some(ls) = net.log_std() {
        let n = numeric.len();
        numeric[n - ls.len()..].iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(relative_error(&analytic, &numeric))
}

fn check_fisher_modes(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = random_network(
        &Architecture {
            input_dim: 2,
            hidden: vec![],
            activation: Activation::Linear,
            head: HeadKind::Policy(PolicyHead::Categorical(2)),
        },
        rng,
    )?;
    let states = Matrix::from_rows(&[vec![0.5, -1.0]])?;
    let exact = exact_fisher(&net, &states, FisherMode::Enumerate, None, rng)?;
    let mc = exact_fisher(&net, &states, FisherMode::MonteCarlo(1_000_000), None, rng)?;
    let err = exact.matrix.sub(&mc.matrix)?.frobenius_norm() / exact.matrix.frobenius_norm();
    Ok(check("fisher-enumerate-vs-monte-carlo", err, 0.01, "relative Frobenius difference"))
}

fn check_fisher_shape(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = random_network(
        &Architecture {
            input_dim: 3,
            hidden: vec![4],
            activation: Activation::Tanh,
            head: HeadKind::Joint(PolicyHead::Categorical(3)),
        },
        rng,
    )?;
    let states = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    let f = exact_fisher(&net, &states, FisherMode::Enumerate, Some(1.0), rng)?;
    let (asym, min_eig) = (f.asymmetry(), f.min_eigenvalue());
    Ok(Check {
        name: "fisher-symmetric-psd",
        passed: asym <= 1e-10 && min_eig >= -1e-8,
        detail: format!("asymmetry = {asym:.3e}, smallest eigenvalue = {min_eig:.3e}"),
    })
}

fn check_deterministic_limit(_rng: &mut ChaCha8Rng) -> Result<Check> {
    let w = Matrix::from_rows(&[vec![20.0, 0.0], vec![-20.0, 0.0]])?;
    let net = Network::from_layers(
        vec![crate::net::DenseLayer::new(w, Activation::Linear)?],
        HeadKind::Policy(PolicyHead::Categorical(2)),
        None,
    )?;
    let states = Matrix::from_rows(&[vec![1.0]])?;
    let f = exact_fisher(&net, &states, FisherMode::Enumerate, None, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(check("fisher-deterministic-limit", f.matrix.frobenius_norm(), 1e-6, "Fisher norm"))
}

fn check_kl_taylor(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for head in [HeadKind::Joint(PolicyHead::Categorical(3)), HeadKind::Policy(PolicyHead::Gaussian(2))] {
        let net = random_network(
            &Architecture {
                input_dim: 3,
                hidden: vec![3],
                activation: Activation::Tanh,
                head,
            },
            rng,
        )?;
        worst = worst.max(kl_taylor_gap(&net, 1e-3, rng)?);
    }
    Ok(check("kl-taylor-consistency", worst, 0.05, "|KL / quadratic - 1|"))
}

/// `|exact_kl / (0.5 eps^2 d'Fd) - 1|` for a random unit direction `d`.
pub fn kl_taylor_gap(net: &Network, eps: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let sigma = net.head_kind().has_value().then_some(1.0);
    let states = Matrix::from_fn(4, net.input_dim(), |_, _| rng.random_range(-1.0..1.0));
    let fisher = exact_fisher(net, &states, FisherMode::Enumerate, sigma, rng)?;
    let mut d: Vec<f64> = (0..net.param_count()).map(|_| rng.sample(StandardNormal)).collect();
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    d.iter_mut().for_each(|x| *x /= norm);
    let fd = fisher.matrix.matvec(&d)?;
    let quad = 0.5 * eps * eps * d.iter().zip(&fd).map(|(a, b)| a * b).sum::<f64>();
    let mut moved = net.clone();
    let flat: Vec<f64> = net.flatten_params().iter().zip(&d).map(|(p, di)| p + eps * di).collect();
    moved.unflatten_params(&flat)?;
    let kl = exact_kl(net, &moved, &states, sigma)?;
    Ok((kl / quad - 1.0).abs())
}

/// K-FAC direction vs. the dense solve for a single-layer softmax policy on
/// one tabular state, with both metrics built from the same sampled action.
/// The K-FAC side runs through the production passes; the dense side uses
/// the reference model and a finite-difference Jacobian.
pub fn batch_one_agreement(n_states: usize, state: usize, seed: u64, lambda: f64) -> Result<f64> {
    use crate::distributions::Categorical;
    use crate::kfac::{KfacConfig, KfacState};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(
        &Architecture {
            input_dim: n_states,
            hidden: vec![],
            activation: Activation::Linear,
            head: HeadKind::Policy(PolicyHead::Categorical(2)),
        },
        &mut rng,
    )?;
    let mut x = vec![0.0; n_states];
    x[state] = 1.0;
    let states = Matrix::from_vec(1, n_states, x.clone())?;
    let (taken, adv, beta) = (rng.random_range(0..2usize), rng.random_range(-2.0..2.0), 0.01);
    let sample_seed = rng.random::<u64>();

    // dense side: g = J' dL/dz with the objective -adv log pi(a) - beta H
    let reference = ReferenceNet::from_network(&net);
    let probs = softmax(&reference.outputs(reference.params(), &x));
    let entropy: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
    let dl_dz: Vec<f64> = (0..2)
        .map(|j| {
            let score = f64::from(u8::from(j == taken)) - probs[j];
            let d_entropy = -probs[j] * (probs[j].ln() + entropy);
            -adv * score - beta * d_entropy
        })
        .collect();
    let jac = reference.jacobian(reference.params(), &x);
    let grad = pull_back(&jac, &dl_dz);
    let fisher = exact_fisher(&net, &states, FisherMode::MonteCarlo(1), None, &mut ChaCha8Rng::seed_from_u64(sample_seed))?;
    let dense = dense_natural_gradient(&fisher, &grad, lambda)?;

    // K-FAC side, same sampled action
    let (outs, trace) = net.forward(&states)?;
    let pi = Categorical::new(outs[0].row(0))?;
    let b = sample_index(&pi.probs(), &mut ChaCha8Rng::seed_from_u64(sample_seed));
    let score = Matrix::from_vec(1, 2, pi.grad_log_prob(b)?)?;
    let stats = net.backward(&trace, &[score])?;
    let objective: Vec<f64> = pi
        .grad_log_prob(taken)?
        .iter()
        .zip(pi.grad_entropy())
        .map(|(s, h)| -adv * s - beta * h)
        .collect();
    let g = net.backward(&trace, &[Matrix::from_vec(1, 2, objective)?])?.params;
    let config = KfacConfig {
        damping_lambda: lambda,
        stat_decay: 0.0,
        inverse_interval: 1,
        ..KfacConfig::default()
    };
    let mut kfac = KfacState::new(&[(n_states, 2)], &[true], None, config);
    kfac.update_statistics(&trace.inputs, &stats.pre_activation, None)?;
    kfac.refresh_if_due()?;
    let direction = kfac.precondition(&g)?.direction.flatten();
    Ok(cosine(&direction, &dense))
}

fn check_batch_one(_rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for (i, s) in (1..9).enumerate() {
        worst = worst.max(1.0 - batch_one_agreement(10, s, i as u64, 1e-8)?);
    }
    Ok(check("kfac-batch-one-vs-dense", worst, 1e-6, "1 - cosine"))
}

fn check_value_iteration() -> Result<Check> {
    let mdp = crate::rl::GridChain::new(10).to_mdp();
    let vi = value_iteration(&mdp, 0.99, 1e-12)?;
    Ok(check("value-iteration-residual", vi.residual, 1e-12, "Bellman residual"))
}
