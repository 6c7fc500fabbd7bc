//! Hybrid networks: amplitude encoding, a stack of V layers joined by
//! learnable skip connections, and a classical softmax head. Also the MLP
//! baseline used for comparison.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{vlayer_backward, vlayer_forward_shifted, GateShift, StateVector, VLayerCache, VLayerParams};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// How the outputs of the quantum-inspired layers are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionMode {
    /// `O_l = U O_{l-1} + λ_{l-1} O_{l-1}` (QRFNN).
    Residual,
    /// `O_l = U O_{l-1} + Σ_{j<l} λ_{l,j} O_j` (QDFNN).
    Dense,
    /// Plain stack without skips (TQFNN).
    None,
    /// One skip around the whole stack.
    ResAll,
    /// One skip around every two consecutive layers.
    Res2,
}

impl ConnectionMode {
    pub const ALL: [ConnectionMode; 5] = [
        ConnectionMode::None,
        ConnectionMode::Residual,
        ConnectionMode::Dense,
        ConnectionMode::ResAll,
        ConnectionMode::Res2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConnectionMode::Residual => "residual",
            ConnectionMode::Dense => "dense",
            ConnectionMode::None => "none",
            ConnectionMode::ResAll => "res-all",
            ConnectionMode::Res2 => "res-2",
        }
    }

    /// Conventional model name for reports.
    pub fn model_name(&self) -> &'static str {
        match self {
            ConnectionMode::Residual => "QRFNN",
            ConnectionMode::Dense => "QDFNN",
            ConnectionMode::None => "TQFNN",
            ConnectionMode::ResAll => "ResQFNN-all",
            ConnectionMode::Res2 => "ResQFNN-2",
        }
    }
}

impl fmt::Display for ConnectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConnectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" | "qrfnn" => Ok(ConnectionMode::Residual),
            "dense" | "qdfnn" => Ok(ConnectionMode::Dense),
            "none" | "tqfnn" => Ok(ConnectionMode::None),
            "res-all" | "resqfnn-all" => Ok(ConnectionMode::ResAll),
            "res-2" | "resqfnn-2" => Ok(ConnectionMode::Res2),
            other => Err(Error::InvalidArgument(format!("unknown connection mode '{other}'"))),
        }
    }
}

/// A learnable skip: `λ[lambda] · O_from` is added into `O_to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipEdge {
    pub from: usize,
    pub to: usize,
    pub lambda: usize,
}

/// Skip edges of a stack with `depth` layers, in λ-index order. Dense edges
/// are ordered by target layer then source, i.e. `λ_{l,j}` sits at
/// `l(l−1)/2 + j`.
pub fn skip_edges(mode: ConnectionMode, depth: usize) -> Vec<SkipEdge> {
    let mut edges = Vec::new();
    let mut push = |from, to| {
        let lambda = edges.len();
        edges.push(SkipEdge { from, to, lambda });
    };
    match mode {
        ConnectionMode::None => {}
        ConnectionMode::Residual => (1..=depth).for_each(|l| push(l - 1, l)),
        ConnectionMode::Dense => {
            for l in 1..=depth {
                for j in 0..l {
                    push(j, l);
                }
            }
        }
        ConnectionMode::ResAll => {
            if depth > 0 {
                push(0, depth)
            }
        }
        ConnectionMode::Res2 => {
            let mut start = 0;
            while start < depth {
                let end = (start + 2).min(depth);
                push(start, end);
                start = end;
            }
        }
    }
    edges
}

/// Index of `λ_{l,j}` in a dense model's λ vector.
pub fn dense_lambda_index(l: usize, j: usize) -> usize {
    debug_assert!(j < l);
    l * (l - 1) / 2 + j
}

/// Amplitude encoding: divide by the Euclidean norm.
pub fn encode(x: &[f64]) -> Result<StateVector> {
    let eta = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if eta == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if !eta.is_finite() {
        return Err(Error::NonFinite("input encoding".into()));
    }
    StateVector::new(x.iter().map(|v| v / eta).collect())
}

pub fn residual_combine(u_out: &StateVector, prev: &StateVector, lambda: f64) -> Result<StateVector> {
    if u_out.dim() != prev.dim() {
        return Err(Error::DimensionMismatch {
            expected: u_out.dim(),
            actual: prev.dim(),
        });
    }
    StateVector::new(
        u_out
            .amp()
            .iter()
            .zip(prev.amp())
            .map(|(u, p)| u + lambda * p)
            .collect(),
    )
}

pub fn dense_combine(u_out: &StateVector, history: &[StateVector], lambdas: &[f64]) -> Result<StateVector> {
    if history.len() != lambdas.len() {
        return Err(Error::DimensionMismatch {
            expected: history.len(),
            actual: lambdas.len(),
        });
    }
    let mut out = u_out.clone();
    for (h, &lam) in history.iter().zip(lambdas) {
        if h.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.dim(),
                actual: h.dim(),
            });
        }
        for (o, v) in out.amp_mut().iter_mut().zip(h.amp()) {
            *o += lam * v;
        }
    }
    Ok(out)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn fingerprint<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h = DefaultHasher::new();
    for part in parts {
        h.write_usize(part.len());
        for v in part {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Perturbations applied inside a QINN forward pass (see `noise::AttackSpec`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QinnPerturbation {
    /// `(layer, parameter index, shift)`.
    pub gates: Vec<(usize, usize, GateShift)>,
    /// `(λ index, ε)`: the skip uses `λ + ε`.
    pub lambdas: Vec<(usize, f64)>,
}

impl QinnPerturbation {
    pub fn is_empty(&self) -> bool {
        self.gates.is_empty() && self.lambdas.is_empty()
    }
}

/// Quantum-inspired residual / dense feedforward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QinnModel {
    dim: usize,
    classes: usize,
    mode: ConnectionMode,
    layers: Vec<VLayerParams>,
    lambdas: Vec<f64>,
    /// `classes × dim`, row-major.
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    seed: Option<u64>,
}

/// Everything `QinnModel::backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct QinnCache {
    fingerprint: u64,
    /// `O_0 … O_L`.
    states: Vec<StateVector>,
    layers: Vec<VLayerCache>,
    lambdas: Vec<f64>,
}

impl QinnCache {
    pub fn states(&self) -> &[StateVector] {
        &self.states
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QinnForward {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub cache: QinnCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QinnGrads {
    pub alpha: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    /// Cotangent of the encoded state `O_0`.
    pub encoded: Vec<f64>,
}

impl QinnGrads {
    /// Same layout as [`QinnModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.alpha.iter().flatten().copied().collect();
        out.extend_from_slice(&self.lambdas);
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }
}

impl PartialEq for QinnCache {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.states == other.states
    }
}

impl QinnModel {
    /// Seeded model with the default initialisation: angles uniform on
    /// `[−π/4, π/4]`, head weights uniform on `±1/√N`, zero bias, and
    /// skip coefficients that start the stack as a plain residual chain.
    pub fn new(dim: usize, depth: usize, classes: usize, mode: ConnectionMode, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let mut circuit_rng = rng_for(seed, Stream::CircuitInit);
        let layers = (0..depth)
            .map(|_| VLayerParams::random(dim, &mut circuit_rng))
            .collect::<Result<Vec<_>>>()?;
        let lambdas = default_lambdas(mode, depth);
        let mut head_rng = rng_for(seed, Stream::HeadInit);
        let bound = 1.0 / (dim as f64).sqrt();
        let head_w = (0..classes * dim).map(|_| head_rng.random_range(-bound..=bound)).collect();
        let mut model = Self::from_parts(dim, classes, mode, layers, lambdas, head_w, vec![0.0; classes])?;
        model.seed = Some(seed);
        Ok(model)
    }

    pub fn from_parts(
        dim: usize,
        classes: usize,
        mode: ConnectionMode,
        layers: Vec<VLayerParams>,
        lambdas: Vec<f64>,
        head_w: Vec<f64>,
        head_b: Vec<f64>,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension {
                dim,
                reason: "a QINN needs at least two amplitudes",
            });
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        for layer in &layers {
            if layer.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: layer.dim(),
                });
            }
        }
        let n_skips = skip_edges(mode, layers.len()).len();
        if lambdas.len() != n_skips {
            return Err(Error::DimensionMismatch {
                expected: n_skips,
                actual: lambdas.len(),
            });
        }
        if head_w.len() != classes * dim {
            return Err(Error::DimensionMismatch {
                expected: classes * dim,
                actual: head_w.len(),
            });
        }
        if head_b.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                actual: head_b.len(),
            });
        }
        let model = Self {
            dim,
            classes,
            mode,
            layers,
            lambdas,
            head_w,
            head_b,
            seed: None,
        };
        if !model.parameters().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mode(&self) -> ConnectionMode {
        self.mode
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn layers(&self) -> &[VLayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [VLayerParams] {
        &mut self.layers
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambdas_mut(&mut self) -> &mut [f64] {
        &mut self.lambdas
    }

    pub fn head_w(&self) -> &[f64] {
        &self.head_w
    }

    pub fn head_w_mut(&mut self) -> &mut [f64] {
        &mut self.head_w
    }

    pub fn head_b(&self) -> &[f64] {
        &self.head_b
    }

    pub fn head_b_mut(&mut self) -> &mut [f64] {
        &mut self.head_b
    }

    pub fn skip_edges(&self) -> Vec<SkipEdge> {
        skip_edges(self.mode, self.layers.len())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum::<usize>() + self.lambdas.len() + self.head_w.len() + self.head_b.len()
    }

    /// Flat parameter vector: angles layer by layer, then λ, head weights, head bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.layers.iter().flat_map(|l| l.alpha().iter().copied()).collect();
        out.extend_from_slice(&self.lambdas);
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (head, tail) = rest.split_at(layer.len());
            layer.alpha_mut().copy_from_slice(head);
            rest = tail;
        }
        for dst in [&mut self.lambdas, &mut self.head_w, &mut self.head_b] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Offset of the first angle of `layer` in the flat parameter vector.
    pub fn alpha_offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(|l| l.len()).sum()
    }

    pub fn lambda_offset(&self) -> usize {
        self.alpha_offset(self.layers.len())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(
            self.layers
                .iter()
                .map(|l| l.alpha())
                .chain([self.lambdas.as_slice(), &self.head_w, &self.head_b]),
        )
    }

    fn check_perturbation(&self, pert: &QinnPerturbation) -> Result<()> {
        for &(layer, r, _) in &pert.gates {
            if layer >= self.layers.len() {
                return Err(Error::IndexOutOfRange {
                    index: layer,
                    limit: self.layers.len(),
                });
            }
            if r >= self.layers[layer].len() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    limit: self.layers[layer].len(),
                });
            }
        }
        for &(k, _) in &pert.lambdas {
            if k >= self.lambdas.len() {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    limit: self.lambdas.len(),
                });
            }
        }
        Ok(())
    }

    fn run_stack(&self, encoded: StateVector, pert: &QinnPerturbation) -> Result<(Vec<StateVector>, Vec<VLayerCache>, Vec<f64>)> {
        self.check_perturbation(pert)?;
        if encoded.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: encoded.dim(),
            });
        }
        let mut lambdas = self.lambdas.clone();
        for &(k, eps) in &pert.lambdas {
            lambdas[k] += eps;
        }
        let edges = self.skip_edges();
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        states.push(encoded);
        let mut shifts = Vec::new();
        for (l, params) in self.layers.iter().enumerate() {
            shifts.clear();
            shifts.extend(pert.gates.iter().filter(|g| g.0 == l).map(|g| (g.1, g.2)));
            let (mut out, cache) = vlayer_forward_shifted(&states[l], params, &shifts)?;
            for e in edges.iter().filter(|e| e.to == l + 1) {
                let lam = lambdas[e.lambda];
                for (o, v) in out.amp_mut().iter_mut().zip(states[e.from].amp()) {
                    *o += lam * v;
                }
            }
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("quantum-inspired layer {}", l + 1)));
            }
            states.push(out);
            caches.push(cache);
        }
        Ok((states, caches, lambdas))
    }

    /// Runs the layer stack on an arbitrary `O_0` (no encoding, no head).
    pub fn propagate(&self, state: &StateVector) -> Result<StateVector> {
        let (mut states, _, _) = self.run_stack(state.clone(), &QinnPerturbation::default())?;
        Ok(states.pop().expect("stack has at least one state"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<QinnForward> {
        self.forward_perturbed(x, &QinnPerturbation::default())
    }

    pub fn forward_perturbed(&self, x: &[f64], pert: &QinnPerturbation) -> Result<QinnForward> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let encoded = encode(x)?;
        let (states, layers, lambdas) = self.run_stack(encoded, pert)?;
        let last = states.last().expect("stack has at least one state");
        let logits = affine(&self.head_w, &self.head_b, last.amp());
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("output head".into()));
        }
        let probabilities = softmax(&logits);
        Ok(QinnForward {
            logits,
            probabilities,
            cache: QinnCache {
                fingerprint: self.fingerprint(),
                states,
                layers,
                lambdas,
            },
        })
    }

    /// Exact reverse-mode gradients of `grad_logitsᵀ · logits`.
    pub fn backward(&self, cache: &QinnCache, grad_logits: &[f64]) -> Result<QinnGrads> {
        if cache.fingerprint != self.fingerprint() || cache.states.len() != self.layers.len() + 1 {
            return Err(Error::Contract("forward cache does not match current parameters".into()));
        }
        if grad_logits.len() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                actual: grad_logits.len(),
            });
        }
        let n = self.dim;
        let depth = self.layers.len();
        let last = cache.states[depth].amp();

        let mut head_w = vec![0.0; self.classes * n];
        let mut bars = vec![vec![0.0; n]; depth + 1];
        for (c, &g) in grad_logits.iter().enumerate() {
            let row = &self.head_w[c * n..(c + 1) * n];
            for k in 0..n {
                head_w[c * n + k] = g * last[k];
                bars[depth][k] += g * row[k];
            }
        }

        let edges = self.skip_edges();
        let mut lambdas = vec![0.0; self.lambdas.len()];
        let mut alpha = vec![Vec::new(); depth];
        for l in (1..=depth).rev() {
            let bar = std::mem::take(&mut bars[l]);
            for e in edges.iter().filter(|e| e.to == l) {
                let from = cache.states[e.from].amp();
                lambdas[e.lambda] = bar.iter().zip(from).map(|(a, b)| a * b).sum();
                let lam = cache.lambdas[e.lambda];
                for (dst, v) in bars[e.from].iter_mut().zip(&bar) {
                    *dst += lam * v;
                }
            }
            let cot = StateVector::new(bar)?;
            let (in_cot, g) = vlayer_backward(&cache.layers[l - 1], &self.layers[l - 1], &cot)?;
            for (dst, v) in bars[l - 1].iter_mut().zip(in_cot.amp()) {
                *dst += v;
            }
            alpha[l - 1] = g;
        }
        Ok(QinnGrads {
            alpha,
            lambdas,
            head_w,
            head_b: grad_logits.to_vec(),
            encoded: std::mem::take(&mut bars[0]),
        })
    }
}

fn default_lambdas(mode: ConnectionMode, depth: usize) -> Vec<f64> {
    skip_edges(mode, depth)
        .iter()
        .map(|e| match mode {
            ConnectionMode::Dense if e.from + 1 != e.to => 0.0,
            _ => 1.0,
        })
        .collect()
}

/// Hidden activation of the MLP baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Leaky ReLU with slope 0.01.
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.01;

    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    Self::LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    Self::LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky-relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "leaky-relu" | "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Perturbations applied inside an MLP forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlpPerturbation {
    pub layer: usize,
    /// `(flat weight index, ε)`: the affine map uses `w + ε`.
    pub weights: Vec<(usize, f64)>,
    /// `(unit, ε)`: `ε` is added to the unit's activated output.
    pub outputs: Vec<(usize, f64)>,
}

/// Fully connected baseline: hidden affine+activation layers and a softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    /// Layer `k` is `sizes[k+1] × sizes[k]`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    fingerprint: u64,
    /// Input of every affine layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Effective weights of the perturbed layer, if any.
    perturbed: Option<(usize, Vec<f64>)>,
}

impl MlpCache {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone)]
pub struct MlpForward {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub cache: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl MlpModel {
    /// `hidden` widths between an `input`-wide layer and `classes` outputs.
    /// Weights uniform on `±1/√fan_in`, zero biases.
    pub fn new(input: usize, hidden: &[usize], classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut hidden_rng = rng_for(seed, Stream::CircuitInit);
        let mut head_rng = rng_for(seed, Stream::HeadInit);
        let n_layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let bound = 1.0 / (sizes[k] as f64).sqrt();
            let rng = if k + 1 == n_layers { &mut head_rng } else { &mut hidden_rng };
            weights.push((0..sizes[k] * sizes[k + 1]).map(|_| rng.random_range(-bound..=bound)).collect());
            biases.push(vec![0.0; sizes[k + 1]]);
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            activation,
            seed: Some(seed),
        })
    }

    pub fn from_parts(sizes: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || weights.len() != sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::InvalidArgument("layer list does not match sizes".into()));
        }
        for k in 0..weights.len() {
            if weights[k].len() != sizes[k] * sizes[k + 1] {
                return Err(Error::DimensionMismatch {
                    expected: sizes[k] * sizes[k + 1],
                    actual: weights[k].len(),
                });
            }
            if biases[k].len() != sizes[k + 1] {
                return Err(Error::DimensionMismatch {
                    expected: sizes[k + 1],
                    actual: biases[k].len(),
                });
            }
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            activation,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("sizes has at least two entries")
    }

    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Flat parameters: for each layer, its weights then its biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        let mut rest = params;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(b.len());
            b.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Offset of layer `k`'s first weight in the flat parameter vector.
    pub fn weight_offset(&self, layer: usize) -> usize {
        self.weights[..layer]
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(
            self.weights
                .iter()
                .map(|w| w.as_slice())
                .chain(self.biases.iter().map(|b| b.as_slice())),
        )
    }

    fn check_perturbation(&self, pert: &MlpPerturbation) -> Result<()> {
        if pert.weights.is_empty() && pert.outputs.is_empty() {
            return Ok(());
        }
        if pert.layer >= self.hidden_layers() {
            return Err(Error::IndexOutOfRange {
                index: pert.layer,
                limit: self.hidden_layers(),
            });
        }
        let w_len = self.weights[pert.layer].len();
        if let Some(&(i, _)) = pert.weights.iter().find(|(i, _)| *i >= w_len) {
            return Err(Error::IndexOutOfRange { index: i, limit: w_len });
        }
        let units = self.sizes[pert.layer + 1];
        if let Some(&(u, _)) = pert.outputs.iter().find(|(u, _)| *u >= units) {
            return Err(Error::IndexOutOfRange { index: u, limit: units });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpForward> {
        self.forward_perturbed(x, &MlpPerturbation::default())
    }

    /// Unlike the QINN forward pass, non-finite values propagate to the
    /// output instead of raising, so exploding baselines can be observed.
    pub fn forward_perturbed(&self, x: &[f64], pert: &MlpPerturbation) -> Result<MlpForward> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        self.check_perturbation(pert)?;
        let perturbed = if pert.weights.is_empty() {
            None
        } else {
            let mut w = self.weights[pert.layer].clone();
            for &(i, eps) in &pert.weights {
                w[i] += eps;
            }
            Some((pert.layer, w))
        };
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut cur = x.to_vec();
        for k in 0..n_layers {
            let w = match &perturbed {
                Some((layer, w)) if *layer == k => w.as_slice(),
                _ => self.weights[k].as_slice(),
            };
            let z = affine(w, &self.biases[k], &cur);
            inputs.push(std::mem::take(&mut cur));
            if k + 1 == n_layers {
                cur = z;
            } else {
                let mut a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
                if k == pert.layer {
                    for &(u, eps) in &pert.outputs {
                        a[u] += eps;
                    }
                }
                pre.push(z);
                cur = a;
            }
        }
        let probabilities = softmax(&cur);
        Ok(MlpForward {
            logits: cur,
            probabilities,
            cache: MlpCache {
                fingerprint: self.fingerprint(),
                inputs,
                pre,
                perturbed,
            },
        })
    }

    pub fn backward(&self, cache: &MlpCache, grad_logits: &[f64]) -> Result<MlpGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::Contract("forward cache does not match current parameters".into()));
        }
        if grad_logits.len() != self.classes() {
            return Err(Error::DimensionMismatch {
                expected: self.classes(),
                actual: grad_logits.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut weights = vec![Vec::new(); n_layers];
        let mut biases = vec![Vec::new(); n_layers];
        let mut delta = grad_logits.to_vec();
        for k in (0..n_layers).rev() {
            if k + 1 < n_layers {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[k]) {
                    *d *= self.activation.derivative(z);
                }
            }
            let input = &cache.inputs[k];
            let cols = input.len();
            let w = match &cache.perturbed {
                Some((layer, w)) if *layer == k => w.as_slice(),
                _ => self.weights[k].as_slice(),
            };
            let mut gw = vec![0.0; w.len()];
            let mut back = vec![0.0; cols];
            for (r, &d) in delta.iter().enumerate() {
                for c in 0..cols {
                    gw[r * cols + c] = d * input[c];
                    back[c] += w[r * cols + c] * d;
                }
            }
            weights[k] = gw;
            biases[k] = std::mem::replace(&mut delta, back);
        }
        Ok(MlpGrads { weights, biases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&[3.0, 4.0, 0.0, 0.0]).unwrap().amp(), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(encode(&[0.0, 1.0, 0.0]).unwrap().amp(), &[0.0, 1.0, 0.0]);
        assert!(matches!(encode(&[0.0; 4]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn residual_combine_examples() {
        let u = sv(&[1.0, 2.0]);
        assert_eq!(residual_combine(&u, &sv(&[7.0, 8.0]), 0.0).unwrap(), u);
        assert_eq!(residual_combine(&u, &sv(&[-1.0, -2.0]), 1.0).unwrap().amp(), &[0.0, 0.0]);
        assert_eq!(residual_combine(&u, &sv(&[3.0, 4.0]), 0.5).unwrap().amp(), &[2.5, 4.0]);
        assert!(residual_combine(&u, &sv(&[1.0, 2.0, 3.0]), 1.0).is_err());
    }

    #[test]
    fn dense_combine_examples() {
        let u = sv(&[1.0, 0.0]);
        let hist = vec![sv(&[1.0, 1.0]), sv(&[0.0, 2.0])];
        assert_eq!(dense_combine(&u, &hist, &[1.0, 0.5]).unwrap().amp(), &[2.0, 2.0]);
        assert_eq!(dense_combine(&u, &hist, &[0.0, 0.0]).unwrap(), u);
        assert_eq!(
            dense_combine(&u, &hist[..1], &[0.3]).unwrap(),
            residual_combine(&u, &hist[0], 0.3).unwrap()
        );
        assert!(dense_combine(&u, &hist, &[1.0]).is_err());
    }

    #[test]
    fn skip_edge_layouts() {
        assert!(skip_edges(ConnectionMode::None, 3).is_empty());
        assert_eq!(skip_edges(ConnectionMode::Residual, 3).len(), 3);
        assert_eq!(skip_edges(ConnectionMode::Dense, 3).len(), 6);
        let d = skip_edges(ConnectionMode::Dense, 4);
        for e in &d {
            assert_eq!(e.lambda, dense_lambda_index(e.to, e.from));
        }
        assert_eq!(
            skip_edges(ConnectionMode::ResAll, 4),
            vec![SkipEdge { from: 0, to: 4, lambda: 0 }]
        );
        let r2: Vec<_> = skip_edges(ConnectionMode::Res2, 5).iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(r2, vec![(0, 2), (2, 4), (4, 5)]);
    }

    #[test]
    fn default_initialisation() {
        let m = QinnModel::new(4, 3, 3, ConnectionMode::Dense, 11).unwrap();
        for e in m.skip_edges() {
            let expect = if e.from + 1 == e.to { 1.0 } else { 0.0 };
            assert_eq!(m.lambdas()[e.lambda], expect);
        }
        let bound = 0.5;
        assert!(m.head_w().iter().all(|w| w.abs() <= bound));
        assert!(m.head_b().iter().all(|b| *b == 0.0));
        let q = std::f64::consts::FRAC_PI_4;
        assert!(m.layers().iter().all(|l| l.alpha().iter().all(|a| a.abs() <= q)));
        let r = QinnModel::new(4, 3, 3, ConnectionMode::Residual, 11).unwrap();
        assert_eq!(r.lambdas(), &[1.0, 1.0, 1.0]);
        // Same seed, same shapes: identical head and circuit across modes.
        assert_eq!(m.head_w(), r.head_w());
        assert_eq!(m.layers(), r.layers());
    }

    #[test]
    fn model_shape_validation() {
        let layers = vec![VLayerParams::zeros(3).unwrap()];
        assert!(QinnModel::from_parts(3, 2, ConnectionMode::Residual, layers.clone(), vec![], vec![0.0; 6], vec![0.0; 2]).is_err());
        assert!(QinnModel::from_parts(3, 2, ConnectionMode::None, layers.clone(), vec![], vec![0.0; 5], vec![0.0; 2]).is_err());
        assert!(QinnModel::from_parts(3, 2, ConnectionMode::None, layers.clone(), vec![], vec![0.0; 6], vec![0.0; 2]).is_ok());
        assert!(QinnModel::from_parts(3, 2, ConnectionMode::None, layers, vec![], vec![f64::NAN; 6], vec![0.0; 2]).is_err());
        assert!(QinnModel::new(4, 0, 3, ConnectionMode::None, 1).is_err());
    }

    #[test]
    fn residual_identity_circuit_doubles_state() {
        let layers = vec![VLayerParams::zeros(3).unwrap()];
        let w = vec![1.0, 0.0, 0.0, 0.0, 2.0, -1.0];
        let b = vec![0.1, -0.2];
        let m = QinnModel::from_parts(3, 2, ConnectionMode::Residual, layers, vec![1.0], w.clone(), b.clone()).unwrap();
        let x = [1.0, 2.0, 2.0];
        let out = m.forward(&x).unwrap();
        let o0 = encode(&x).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|c| 2.0 * (0..3).map(|k| w[c * 3 + k] * o0.amp()[k]).sum::<f64>() + b[c])
            .collect();
        for (a, e) in out.logits.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_lambda_gradient_is_dot_product() {
        let mut m = QinnModel::new(4, 1, 3, ConnectionMode::Residual, 3).unwrap();
        m.lambdas_mut()[0] = 0.7;
        let x = [0.2, 0.9, 0.4, 0.1];
        let f = m.forward(&x).unwrap();
        let g_logits = [0.3, -0.5, 0.2];
        let grads = m.backward(&f.cache, &g_logits).unwrap();
        // grad_O1 = Wᵀ g
        let grad_o1: Vec<f64> = (0..4).map(|k| (0..3).map(|c| m.head_w()[c * 4 + k] * g_logits[c]).sum()).collect();
        let o0 = f.cache.states()[0].amp();
        let expect: f64 = grad_o1.iter().zip(o0).map(|(a, b)| a * b).sum();
        assert!((grads.lambdas[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_grad_logits_give_zero_grads() {
        for mode in ConnectionMode::ALL {
            let m = QinnModel::new(5, 3, 4, mode, 9).unwrap();
            let f = m.forward(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
            let g = m.backward(&f.cache, &[0.0; 4]).unwrap();
            assert!(g.flatten().iter().all(|v| *v == 0.0), "{mode}");
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut m = QinnModel::new(4, 2, 3, ConnectionMode::Dense, 2).unwrap();
        let f = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        m.head_b_mut()[0] = 1.0;
        assert!(matches!(m.backward(&f.cache, &[0.1, 0.2, 0.3]), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_roundtrip() {
        let mut m = QinnModel::new(4, 2, 3, ConnectionMode::Dense, 2).unwrap();
        let p: Vec<f64> = (0..m.num_params()).map(|i| i as f64 * 0.01).collect();
        m.set_parameters(&p).unwrap();
        assert_eq!(m.parameters(), p);
        assert_eq!(m.layers()[1].alpha()[0], p[m.alpha_offset(1)]);
        assert!(m.set_parameters(&p[1..]).is_err());
        let mut bad = p.clone();
        bad[0] = f64::INFINITY;
        assert!(m.set_parameters(&bad).is_err());
        assert_eq!(m.parameters(), p);
    }

    #[test]
    fn mlp_zero_weights_uniform() {
        let mut m = MlpModel::new(4, &[4, 4], 4, Activation::Tanh, 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_parameters(&zeros).unwrap();
        let f = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(f.probabilities.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mlp_single_linear_layer_is_matmul() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.5, -0.5];
        let m = MlpModel::from_parts(vec![3, 2], vec![w], vec![b], Activation::Tanh).unwrap();
        let f = m.forward(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(f.logits, vec![1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]);
    }

    #[test]
    fn mlp_perturbation_validation() {
        let m = MlpModel::new(3, &[3], 2, Activation::LeakyRelu, 1).unwrap();
        let bad_layer = MlpPerturbation {
            layer: 1,
            weights: vec![(0, 0.1)],
            outputs: vec![],
        };
        assert!(m.forward_perturbed(&[1.0, 1.0, 1.0], &bad_layer).is_err());
        let bad_idx = MlpPerturbation {
            layer: 0,
            weights: vec![(9, 0.1)],
            outputs: vec![],
        };
        assert!(m.forward_perturbed(&[1.0, 1.0, 1.0], &bad_idx).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("qdfnn".parse::<ConnectionMode>().unwrap(), ConnectionMode::Dense);
        assert_eq!("res-2".parse::<ConnectionMode>().unwrap(), ConnectionMode::Res2);
        assert!("wide".parse::<ConnectionMode>().is_err());
    }
}
