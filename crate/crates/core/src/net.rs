//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Every layer computes `s = W [a; 1]` followed by an elementwise
//! activation; the bias lives in the last column of `W`. The forward trace
//! keeps each layer's homogeneous input `[a; 1]` and pre-activation `s`, and
//! the backward pass keeps the per-sample pre-activation gradients, which is
//! exactly what the Kronecker factors are built from.
//!
//! Parameter ordering (`flatten_params`): layers in order, trunk first then
//! heads (policy head before value head), each weight matrix column-stacked
//! (see [`crate::linalg::vec`]), followed by the Gaussian log-std vector when
//! the network has one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{orthogonal, unvec, vec};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// ELU with alpha = 1.
    Elu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => s.tanh(),
            Activation::Relu => s.max(0.0),
            Activation::Elu => {
                if s > 0.0 {
                    s
                } else {
                    s.exp_m1()
                }
            }
            Activation::Linear => s,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = s.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if s > 0.0 {
                    1.0
                } else {
                    s.exp()
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Linear => "linear",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Parse {
                what: "activation".into(),
                reason: format!("unknown activation `{other}`"),
            }),
        }
    }
}

/// Output distribution parameterized by a policy head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyHead {
    /// Logits over `n` actions.
    Categorical(usize),
    /// Mean of a `d`-dimensional diagonal Gaussian; log-std is a free vector.
    Gaussian(usize),
}

impl PolicyHead {
    pub fn output_dim(self) -> usize {
        match self {
            PolicyHead::Categorical(n) | PolicyHead::Gaussian(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Policy(PolicyHead),
    Value,
    /// Policy head and value head on a shared trunk.
    Joint(PolicyHead),
}

impl HeadKind {
    pub fn policy(self) -> Option<PolicyHead> {
        match self {
            HeadKind::Policy(p) | HeadKind::Joint(p) => Some(p),
            HeadKind::Value => None,
        }
    }

    pub fn has_value(self) -> bool {
        matches!(self, HeadKind::Value | HeadKind::Joint(_))
    }

    fn head_dims(self) -> Vec<usize> {
        match self {
            HeadKind::Policy(p) => vec![p.output_dim()],
            HeadKind::Value => vec![1],
            HeadKind::Joint(p) => vec![p.output_dim(), 1],
        }
    }

    fn has_log_std(self) -> bool {
        matches!(self.policy(), Some(PolicyHead::Gaussian(_)))
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Policy(PolicyHead::Categorical(n)) => write!(f, "categorical {n}"),
            HeadKind::Policy(PolicyHead::Gaussian(n)) => write!(f, "gaussian {n}"),
            HeadKind::Value => write!(f, "value"),
            HeadKind::Joint(PolicyHead::Categorical(n)) => write!(f, "joint-categorical {n}"),
            HeadKind::Joint(PolicyHead::Gaussian(n)) => write!(f, "joint-gaussian {n}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Parse {
            what: "head kind".into(),
            reason: format!("{reason}: `{s}`"),
        };
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(|| bad("empty"))?;
        if kind == "value" {
            return Ok(HeadKind::Value);
        }
        let n: usize = parts
            .next()
            .and_then(|n| n.parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| bad("missing output dimension"))?;
        Ok(match kind {
            "categorical" => HeadKind::Policy(PolicyHead::Categorical(n)),
            "gaussian" => HeadKind::Policy(PolicyHead::Gaussian(n)),
            "joint-categorical" => HeadKind::Joint(PolicyHead::Categorical(n)),
            "joint-gaussian" => HeadKind::Joint(PolicyHead::Gaussian(n)),
            _ => return Err(bad("unknown head kind")),
        })
    }
}

/// Shape of a network to build.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weight: Matrix,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, activation: Activation) -> Result<Self> {
        if weight.cols() < 2 {
            return Err(Error::dims("layer weight needs an input column and a bias column"));
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite("layer weight".into()));
        }
        Ok(DenseLayer { weight, activation })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Input activations `[a; 1]` and pre-activations `s` for every layer.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Parameter-shaped collection: one matrix per layer plus the optional log-std.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub weights: Vec<Matrix>,
    pub log_std: Option<Vec<f64>>,
}

impl ParamSet {
    pub fn zeros_like(net: &Network) -> Self {
        ParamSet {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            log_std: net.log_std.as_ref().map(|v| vec![0.0; v.len()]),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        ParamSet {
            weights: self.weights.iter().map(|w| w.scale(s)).collect(),
            log_std: self.log_std.as_ref().map(|v| v.iter().map(|x| x * s).collect()),
        }
    }

    pub fn add_scaled_assign(&mut self, other: &ParamSet, s: f64) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::dims("parameter sets have different layer counts"));
        }
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.add_scaled_assign(o, s)?;
        }
        match (&mut self.log_std, &other.log_std) {
            (Some(a), Some(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += s * y;
                }
            }
            (None, None) => {}
            _ => return Err(Error::dims("log-std presence or length differs")),
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.weights.iter().flat_map(vec).collect();
        if let Some(ls) = &self.log_std {
            out.extend_from_slice(ls);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.log_std.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct GradientSet {
    /// Batch-mean parameter gradients. `log_std` is zero-filled; the caller
    /// owns the loss and adds its log-std term.
    pub params: ParamSet,
    /// Per-sample gradients with respect to each layer's pre-activations
    /// (batch x C_out), not divided by the batch size.
    pub pre_activation: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    trunk_len: usize,
    head: HeadKind,
    log_std: Option<Vec<f64>>,
}

impl Network {
    /// Orthogonally initialized network: gain 1 for hidden and value layers,
    /// 0.01 for the policy head, zero biases, zero log-std.
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::dims("zero-width layer"));
        }
        let mut layers = Vec::new();
        let mut prev = arch.input_dim;
        let draw = |rows: usize, cols: usize, gain: f64, rng: &mut R| {
            let core = orthogonal(rows, cols, gain, || rng.sample::<f64, _>(StandardNormal));
            Matrix::from_fn(rows, cols + 1, |i, j| if j < cols { core[(i, j)] } else { 0.0 })
        };
        for &h in &arch.hidden {
            layers.push(DenseLayer::new(draw(h, prev, 1.0, rng), arch.activation)?);
            prev = h;
        }
        let trunk_len = layers.len();
        let dims = arch.head.head_dims();
        for (k, &out) in dims.iter().enumerate() {
            let is_policy = arch.head.policy().is_some() && k == 0;
            let gain = if is_policy { 0.01 } else { 1.0 };
            layers.push(DenseLayer::new(draw(out, prev, gain, rng), Activation::Linear)?);
        }
        let log_std = match arch.head.policy() {
            Some(PolicyHead::Gaussian(d)) => Some(vec![0.0; d]),
            _ => None,
        };
        Ok(Network {
            layers,
            trunk_len,
            head: arch.head,
            log_std,
        })
    }

    /// Assembles a network from explicit layers. The last one (or two, for a
    /// joint head) layers are heads and must be linear.
    pub fn from_layers(layers: Vec<DenseLayer>, head: HeadKind, log_std: Option<Vec<f64>>) -> Result<Self> {
        let dims = head.head_dims();
        if layers.len() < dims.len() {
            return Err(Error::dims("fewer layers than heads"));
        }
        let trunk_len = layers.len() - dims.len();
        for w in layers[..trunk_len].windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::dims("trunk layers do not chain"));
            }
        }
        let trunk_out = if trunk_len == 0 {
            layers[0].in_dim()
        } else {
            layers[trunk_len - 1].out_dim()
        };
        for (layer, &d) in layers[trunk_len..].iter().zip(&dims) {
            if layer.in_dim() != trunk_out || layer.out_dim() != d {
                return Err(Error::dims("head layer shape does not match head kind"));
            }
            if layer.activation != Activation::Linear {
                return Err(Error::dims("head layers must be linear"));
            }
        }
        match (head.has_log_std(), &log_std) {
            (true, Some(v)) if v.len() == head.policy().unwrap().output_dim() => {}
            (false, None) => {}
            _ => return Err(Error::dims("log-std does not match head kind")),
        }
        Ok(Network {
            layers,
            trunk_len,
            head,
            log_std,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk_len
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn log_std(&self) -> Option<&[f64]> {
        self.log_std.as_deref()
    }

    /// Index of the policy head layer, if any.
    pub fn policy_layer(&self) -> Option<usize> {
        self.head.policy().map(|_| self.trunk_len)
    }

    /// Index of the value head layer, if any.
    pub fn value_layer(&self) -> Option<usize> {
        match self.head {
            HeadKind::Value => Some(self.trunk_len),
            HeadKind::Joint(_) => Some(self.trunk_len + 1),
            HeadKind::Policy(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols()).sum::<usize>()
            + self.log_std.as_ref().map_or(0, Vec::len)
    }

    pub fn params(&self) -> ParamSet {
        ParamSet {
            weights: self.layers.iter().map(|l| l.weight.clone()).collect(),
            log_std: self.log_std.clone(),
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.params().flatten()
    }

    /// Inverse of [`Network::flatten_params`].
    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dims(format!(
                "{} parameters for a network with {}",
                flat.len(),
                self.param_count()
            )));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flattened parameters".into()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let (r, c) = layer.weight.shape();
            layer.weight = unvec(&flat[offset..offset + r * c], r, c)?;
            offset += r * c;
        }
        if let Some(ls) = &mut self.log_std {
            let n = ls.len();
            ls.copy_from_slice(&flat[offset..offset + n]);
        }
        Ok(())
    }

    /// Runs the network on a batch of states (one per row). Returns one output
    /// matrix per head: the policy head first, then the value head.
    pub fn forward(&self, states: &Matrix) -> Result<(Vec<Matrix>, ForwardTrace)> {
        if states.cols() != self.input_dim() {
            return Err(Error::dims(format!(
                "states have {} columns, network expects {}",
                states.cols(),
                self.input_dim()
            )));
        }
        let batch = states.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = homogeneous(states, |x| x);
        for layer in &self.layers[..self.trunk_len] {
            let s = current.matmul_nt(&layer.weight)?;
            let next = homogeneous(&s, |x| layer.activation.apply(x));
            inputs.push(current);
            pre.push(s);
            current = next;
        }
        let mut outputs = Vec::new();
        for layer in &self.layers[self.trunk_len..] {
            let s = current.matmul_nt(&layer.weight)?;
            outputs.push(s.clone());
            inputs.push(current.clone());
            pre.push(s);
        }
        debug_assert!(inputs.iter().all(|a| a.rows() == batch));
        Ok((
            outputs,
            ForwardTrace {
                inputs,
                pre_activations: pre,
            },
        ))
    }

    /// Reverse-mode pass. `output_grads` holds one per-sample gradient matrix
    /// per head, in [`Network::forward`] order. Weight gradients are averaged
    /// over the batch; pre-activation gradients are kept per sample.
    pub fn backward(&self, trace: &ForwardTrace, output_grads: &[Matrix]) -> Result<GradientSet> {
        let n_heads = self.layers.len() - self.trunk_len;
        if output_grads.len() != n_heads || trace.inputs.len() != self.layers.len() {
            return Err(Error::dims("backward: head count or trace length mismatch"));
        }
        let batch = trace.batch_size();
        let mut pre_grads: Vec<Option<Matrix>> = vec![None; self.layers.len()];
        for (k, g) in output_grads.iter().enumerate() {
            let idx = self.trunk_len + k;
            if g.shape() != trace.pre_activations[idx].shape() {
                return Err(Error::dims(format!(
                    "output gradient {:?} for head output {:?}",
                    g.shape(),
                    trace.pre_activations[idx].shape()
                )));
            }
            pre_grads[idx] = Some(g.clone());
        }
        if self.trunk_len > 0 {
            // gradient flowing into the trunk output, summed over heads
            let width = self.layers[self.trunk_len - 1].out_dim();
            let mut upstream = Matrix::zeros(batch, width);
            for (k, g) in output_grads.iter().enumerate() {
                let w = &self.layers[self.trunk_len + k].weight;
                upstream.add_scaled_assign(&drop_bias_column(&g.matmul(w)?), 1.0)?;
            }
            for idx in (0..self.trunk_len).rev() {
                let layer = &self.layers[idx];
                let s = &trace.pre_activations[idx];
                let mut ds = upstream;
                for (d, &sv) in ds.as_mut_slice().iter_mut().zip(s.as_slice()) {
                    *d *= layer.activation.derivative(sv);
                }
                if idx > 0 {
                    upstream = drop_bias_column(&ds.matmul(&layer.weight)?);
                } else {
                    upstream = Matrix::zeros(1, 1);
                }
                pre_grads[idx] = Some(ds);
            }
        }
        let pre_activation: Vec<Matrix> = pre_grads.into_iter().map(|g| g.expect("every layer visited")).collect();
        let inv_batch = 1.0 / batch as f64;
        let weights = pre_activation
            .iter()
            .zip(&trace.inputs)
            .map(|(g, a)| g.matmul_tn(a).map(|w| w.scale(inv_batch)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientSet {
            params: ParamSet {
                weights,
                log_std: self.log_std.as_ref().map(|v| vec![0.0; v.len()]),
            },
            pre_activation,
        })
    }

    /// `W <- W - scale * delta` for every layer (and log-std). Nothing is
    /// modified if the result would contain a non-finite value.
    pub fn apply_update(&mut self, delta: &ParamSet, scale: f64) -> Result<()> {
        if delta.weights.len() != self.layers.len() {
            return Err(Error::dims("update has wrong layer count"));
        }
        for (layer, d) in self.layers.iter().zip(&delta.weights) {
            if layer.weight.shape() != d.shape() {
                return Err(Error::dims("update layer shape mismatch"));
            }
        }
        if scale == 0.0 {
            return Ok(());
        }
        let mut next = self.params();
        next.add_scaled_assign(delta, -scale)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteUpdate(format!("scale {scale:e}")));
        }
        for (layer, w) in self.layers.iter_mut().zip(next.weights) {
            layer.weight = w;
        }
        self.log_std = next.log_std;
        Ok(())
    }

    /// Text checkpoint: a header with the head kind and layer shapes,
    /// followed by every parameter in flatten order, one per line, in
    /// shortest round-trip decimal form.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("acktr-network 1\n");
        out.push_str(&format!("head {}\n", self.head));
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for layer in &self.layers {
            out.push_str(&format!(
                "layer {} {} {}\n",
                layer.in_dim(),
                layer.out_dim(),
                layer.activation
            ));
        }
        let flat = self.flatten_params();
        out.push_str(&format!("params {}\n", flat.len()));
        for p in flat {
            out.push_str(&format!("{p:?}\n"));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Parse {
            what: "network checkpoint".into(),
            reason,
        };
        let mut lines = text.lines();
        let mut next = |expect: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{expect}` line")))?;
            line.strip_prefix(expect)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{expect}`, found `{line}`")))
        };
        if next("acktr-network")? != "1" {
            return Err(bad("unsupported version".into()));
        }
        let head: HeadKind = next("head")?.parse()?;
        let n_layers: usize = next("layers")?.parse().map_err(|e| bad(format!("{e}")))?;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let spec = next("layer")?;
            let fields: Vec<&str> = spec.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad(format!("layer line `{spec}`")));
            }
            let in_dim: usize = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            let out_dim: usize = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
            shapes.push((in_dim, out_dim, fields[2].parse::<Activation>()?));
        }
        let n_params: usize = next("params")?.parse().map_err(|e| bad(format!("{e}")))?;
        let mut flat = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let line = lines.next().ok_or_else(|| bad("truncated parameters".into()))?;
            flat.push(line.trim().parse::<f64>().map_err(|e| bad(format!("{e}")))?);
        }
        let layers = shapes
            .iter()
            .map(|&(i, o, act)| DenseLayer::new(Matrix::from_fn(o, i + 1, |_, _| 0.0), act))
            .collect::<Result<Vec<_>>>()?;
        let log_std = match head.policy() {
            Some(PolicyHead::Gaussian(d)) => Some(vec![0.0; d]),
            _ => None,
        };
        let mut net = Network::from_layers(layers, head, log_std)?;
        net.unflatten_params(&flat)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// Applies `f` elementwise and appends a constant-1 column.
fn homogeneous(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let c = m.cols();
    Matrix::from_fn(m.rows(), c + 1, |i, j| if j < c { f(m[(i, j)]) } else { 1.0 })
}

fn drop_bias_column(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() - 1, |i, j| m[(i, j)])
}
