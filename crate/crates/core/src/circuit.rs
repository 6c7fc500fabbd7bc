//! Planar rotation gates and the palindromic "V" layer built from them.
//!
//! A gate `T_i(θ)` is the identity except for the 2×2 block
//! `[[cos θ, −sin θ], [sin θ, cos θ]]` on the (1-indexed) coordinates `i, i+1`.
//! A layer on `N` amplitudes chains `2N−3` such gates with axes
//! `1, 2, …, N−1, N−2, …, 1`. As a matrix the layer is
//! `T_1(α_0)·T_2(α_1)⋯T_1(α_{2N−4})`; acting on a state, the rightmost factor
//! is applied first, so parameter `α_{2N−4}` drives the first gate the state
//! meets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real amplitude vector carried between quantum-inspired layers.
///
/// Only freshly encoded states are unit norm; skip connections are free to
/// move a state off the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector {
    amp: Vec<f64>,
}

impl StateVector {
    pub fn new(amp: Vec<f64>) -> Result<Self> {
        if amp.len() < 2 {
            return Err(Error::InvalidDimension {
                dim: amp.len(),
                reason: "a state needs at least two amplitudes",
            });
        }
        Ok(Self { amp })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange {
                index: k,
                limit: dim,
            });
        }
        let mut s = Self::zeros(dim)?;
        s.amp[k] = 1.0;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.amp.len()
    }

    pub fn amp(&self) -> &[f64] {
        &self.amp
    }

    pub fn amp_mut(&mut self) -> &mut [f64] {
        &mut self.amp
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.amp
    }

    pub fn norm(&self) -> f64 {
        self.amp.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StateVector) -> f64 {
        self.amp.iter().zip(&other.amp).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.amp.iter().all(|a| a.is_finite())
    }
}

/// A single planar rotation on coordinates `axis` and `axis + 1` (1-indexed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarGate {
    pub axis: usize,
    pub angle: f64,
}

impl PlanarGate {
    pub fn new(axis: usize, angle: f64) -> Self {
        Self { axis, angle }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.axis == 0 || self.axis >= dim {
            return Err(Error::IndexOutOfRange {
                index: self.axis,
                limit: dim - 1,
            });
        }
        Ok(())
    }
}

/// Perturbation of one gate's trigonometric entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateShift {
    /// The gate rotates by `α + ε`; still orthogonal.
    Angle(f64),
    /// `sin α` and `cos α` are each replaced by `sin α + ε`, `cos α + ε`.
    Entries(f64),
}

/// Resolved 2×2 block of one gate, with its derivative w.r.t. the stored angle.
#[derive(Debug, Clone, Copy, PartialEq)]
struct GateKernel {
    /// 0-indexed lower coordinate.
    lo: usize,
    c: f64,
    s: f64,
    dc: f64,
    ds: f64,
}

impl GateKernel {
    fn new(axis: usize, alpha: f64, shift: Option<GateShift>) -> Self {
        let lo = axis - 1;
        match shift {
            None => Self::rotation(lo, alpha),
            Some(GateShift::Angle(eps)) => Self::rotation(lo, alpha + eps),
            Some(GateShift::Entries(eps)) => {
                let (s, c) = alpha.sin_cos();
                Self {
                    lo,
                    c: c + eps,
                    s: s + eps,
                    dc: -s,
                    ds: c,
                }
            }
        }
    }

    fn rotation(lo: usize, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            lo,
            c,
            s,
            dc: -s,
            ds: c,
        }
    }

    #[inline]
    fn apply(&self, amp: &mut [f64]) {
        let (a, b) = (amp[self.lo], amp[self.lo + 1]);
        amp[self.lo] = self.c * a - self.s * b;
        amp[self.lo + 1] = self.s * a + self.c * b;
    }

    #[inline]
    fn apply_transpose(&self, amp: &mut [f64]) {
        let (a, b) = (amp[self.lo], amp[self.lo + 1]);
        amp[self.lo] = self.c * a + self.s * b;
        amp[self.lo + 1] = -self.s * a + self.c * b;
    }

    /// `cotᵀ · (∂block/∂α) · x` restricted to the two active coordinates.
    #[inline]
    fn angle_grad(&self, x: &[f64], cot: &[f64]) -> f64 {
        let (a, b) = (x[self.lo], x[self.lo + 1]);
        cot[self.lo] * (self.dc * a - self.ds * b) + cot[self.lo + 1] * (self.ds * a + self.dc * b)
    }
}

/// Number of gates (and angles) in one layer on `dim` amplitudes.
pub fn gate_count(dim: usize) -> usize {
    2 * dim - 3
}

/// Axis of every gate in parameter order `r = 0 … 2N−4`.
pub fn gate_index_sequence(dim: usize) -> Result<Vec<usize>> {
    if dim < 2 {
        return Err(Error::InvalidDimension {
            dim,
            reason: "a V layer needs at least two amplitudes",
        });
    }
    Ok((0..gate_count(dim))
        .map(|r| if r + 2 <= dim { r + 1 } else { 2 * dim - 3 - r })
        .collect())
}

pub fn apply_gate(state: &StateVector, gate: &PlanarGate) -> Result<StateVector> {
    gate.check(state.dim())?;
    let mut out = state.clone();
    GateKernel::new(gate.axis, gate.angle, None).apply(&mut out.amp);
    Ok(out)
}

pub fn apply_gate_transpose(state: &StateVector, gate: &PlanarGate) -> Result<StateVector> {
    gate.check(state.dim())?;
    let mut out = state.clone();
    GateKernel::new(gate.axis, gate.angle, None).apply_transpose(&mut out.amp);
    Ok(out)
}

/// The `2N−3` rotation angles of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VLayerParams {
    dim: usize,
    alpha: Vec<f64>,
}

impl VLayerParams {
    pub fn new(dim: usize, alpha: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension {
                dim,
                reason: "a V layer needs at least two amplitudes",
            });
        }
        if alpha.len() != gate_count(dim) {
            return Err(Error::DimensionMismatch {
                expected: gate_count(dim),
                actual: alpha.len(),
            });
        }
        Ok(Self { dim, alpha })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; gate_count(dim.max(2))])
    }

    /// Angles drawn uniformly from `[−π/4, π/4]`.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let q = std::f64::consts::FRAC_PI_4;
        let n = gate_count(dim.max(2));
        Self::new(dim, (0..n).map(|_| rng.random_range(-q..=q)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn axes(&self) -> Vec<usize> {
        gate_index_sequence(self.dim).expect("dim validated at construction")
    }

    /// Gates in the order they act on a state.
    pub fn gates_in_application_order(&self) -> Vec<(usize, PlanarGate)> {
        let axes = self.axes();
        (0..self.alpha.len())
            .rev()
            .map(|r| (r, PlanarGate::new(axes[r], self.alpha[r])))
            .collect()
    }
}

/// Intermediate states of one layer's forward sweep.
#[derive(Debug, Clone)]
pub struct VLayerCache {
    alpha: Vec<f64>,
    /// Parameter index of each applied gate, in application order.
    order: Vec<usize>,
    kernels: Vec<GateKernel>,
    /// Input state followed by the state after each applied gate.
    states: Vec<Vec<f64>>,
}

impl VLayerCache {
    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn output(&self) -> &[f64] {
        self.states.last().expect("cache always holds the input state")
    }
}

pub fn vlayer_forward(state: &StateVector, params: &VLayerParams) -> Result<(StateVector, VLayerCache)> {
    vlayer_forward_shifted(state, params, &[])
}

/// Layer forward pass with some gates perturbed; `shifts` pairs parameter
/// indices with the perturbation applied to that gate.
pub fn vlayer_forward_shifted(
    state: &StateVector,
    params: &VLayerParams,
    shifts: &[(usize, GateShift)],
) -> Result<(StateVector, VLayerCache)> {
    if state.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            actual: state.dim(),
        });
    }
    let n_gates = params.alpha.len();
    let mut per_gate: Vec<Option<GateShift>> = vec![None; n_gates];
    for &(r, shift) in shifts {
        if r >= n_gates {
            return Err(Error::IndexOutOfRange {
                index: r,
                limit: n_gates,
            });
        }
        per_gate[r] = Some(shift);
    }

    let axes = params.axes();
    let mut order = Vec::with_capacity(n_gates);
    let mut kernels = Vec::with_capacity(n_gates);
    let mut states = Vec::with_capacity(n_gates + 1);
    let mut cur = state.amp.clone();
    states.push(cur.clone());
    for r in (0..n_gates).rev() {
        let k = GateKernel::new(axes[r], params.alpha[r], per_gate[r]);
        k.apply(&mut cur);
        order.push(r);
        kernels.push(k);
        states.push(cur.clone());
    }
    let cache = VLayerCache {
        alpha: params.alpha.clone(),
        order,
        kernels,
        states,
    };
    Ok((StateVector { amp: cur }, cache))
}

/// Reverse sweep: returns `Uᵀ·cotangent` and `∂(cotangentᵀ U x)/∂α_r` for every `r`.
pub fn vlayer_backward(
    cache: &VLayerCache,
    params: &VLayerParams,
    cotangent: &StateVector,
) -> Result<(StateVector, Vec<f64>)> {
    let same_params = cache.alpha.len() == params.alpha.len()
        && cache
            .alpha
            .iter()
            .zip(&params.alpha)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_params {
        return Err(Error::Contract(
            "layer cache was produced with different parameters".into(),
        ));
    }
    if cotangent.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            actual: cotangent.dim(),
        });
    }
    let mut grad = vec![0.0; params.alpha.len()];
    let mut cot = cotangent.amp.clone();
    for t in (0..cache.kernels.len()).rev() {
        let k = &cache.kernels[t];
        grad[cache.order[t]] = k.angle_grad(&cache.states[t], &cot);
        k.apply_transpose(&mut cot);
    }
    Ok((StateVector { amp: cot }, grad))
}

/// Dense `N×N` matrix of a single gate, row-major.
pub fn gate_matrix(dim: usize, gate: &PlanarGate) -> Result<Vec<Vec<f64>>> {
    gate.check(dim)?;
    let mut m = identity(dim);
    let (s, c) = gate.angle.sin_cos();
    let i = gate.axis - 1;
    m[i][i] = c;
    m[i][i + 1] = -s;
    m[i + 1][i] = s;
    m[i + 1][i + 1] = c;
    Ok(m)
}

/// Largest dimension accepted by [`build_unitary`].
pub const MAX_DENSE_DIM: usize = 64;

/// Dense layer matrix formed as the explicit left-to-right product of the
/// gate matrices. Intended as a test oracle for [`vlayer_forward`].
pub fn build_unitary(params: &VLayerParams) -> Result<Vec<Vec<f64>>> {
    if params.dim > MAX_DENSE_DIM {
        return Err(Error::InvalidDimension {
            dim: params.dim,
            reason: "dense oracle limited to 64 amplitudes",
        });
    }
    let axes = params.axes();
    let mut acc = identity(params.dim);
    for (r, &axis) in axes.iter().enumerate() {
        let g = gate_matrix(params.dim, &PlanarGate::new(axis, params.alpha[r]))?;
        acc = matmul(&acc, &g);
    }
    Ok(acc)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let inner = b.len();
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..inner).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn index_sequence_examples() {
        assert_eq!(gate_index_sequence(4).unwrap(), vec![1, 2, 3, 2, 1]);
        assert_eq!(gate_index_sequence(2).unwrap(), vec![1]);
        assert_eq!(gate_index_sequence(6).unwrap(), vec![1, 2, 3, 4, 5, 4, 3, 2, 1]);
        assert!(matches!(gate_index_sequence(1), Err(Error::InvalidDimension { .. })));
        assert!(gate_index_sequence(0).is_err());
    }

    #[test]
    fn gate_examples() {
        let x = sv(&[0.3, -1.2, 4.0]);
        assert_eq!(apply_gate(&x, &PlanarGate::new(2, 0.0)).unwrap(), x);

        let y = apply_gate(&sv(&[1.0, 0.0]), &PlanarGate::new(1, FRAC_PI_2)).unwrap();
        assert!(max_abs_diff(y.amp(), &[0.0, 1.0]) < 1e-15);

        let y = apply_gate(&sv(&[5.0, 1.0, 0.0]), &PlanarGate::new(2, FRAC_PI_2)).unwrap();
        assert!(max_abs_diff(y.amp(), &[5.0, 0.0, 1.0]) < 1e-15);

        let y = apply_gate_transpose(&sv(&[0.0, 1.0]), &PlanarGate::new(1, FRAC_PI_2)).unwrap();
        assert!(max_abs_diff(y.amp(), &[1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn gate_axis_out_of_range() {
        let x = sv(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            apply_gate(&x, &PlanarGate::new(3, 0.1)),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(apply_gate(&x, &PlanarGate::new(0, 0.1)).is_err());
        assert!(apply_gate_transpose(&x, &PlanarGate::new(3, 0.1)).is_err());
    }

    #[test]
    fn zero_angles_are_identity() {
        let x = sv(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let p = VLayerParams::zeros(5).unwrap();
        let (y, cache) = vlayer_forward(&x, &p).unwrap();
        assert_eq!(y, x);
        assert_eq!(cache.states().len(), 2 * 5 - 2);
        let m = build_unitary(&p).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_dim_layer_is_single_gate() {
        let theta = 0.7;
        let p = VLayerParams::new(2, vec![theta]).unwrap();
        let x = sv(&[0.6, -0.8]);
        let (y, _) = vlayer_forward(&x, &p).unwrap();
        let g = apply_gate(&x, &PlanarGate::new(1, theta)).unwrap();
        assert_eq!(y, g);
        let m = build_unitary(&p).unwrap();
        let (s, c) = theta.sin_cos();
        assert_eq!(m, vec![vec![c, -s], vec![s, c]]);
    }

    #[test]
    fn first_applied_gate_uses_last_parameter() {
        // With N=3 the applied order is α_2 (axis 1), α_1 (axis 2), α_0 (axis 1).
        let p = VLayerParams::new(3, vec![0.0, 0.0, FRAC_PI_2]).unwrap();
        let (y, _) = vlayer_forward(&sv(&[1.0, 0.0, 0.0]), &p).unwrap();
        assert!(max_abs_diff(y.amp(), &[0.0, 1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn dense_oracle_matches_gatewise_n5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = VLayerParams::new(5, (0..7).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let x = sv(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let m = build_unitary(&p).unwrap();
        let mx: Vec<f64> = m.iter().map(|row| row.iter().zip(x.amp()).map(|(a, b)| a * b).sum()).collect();
        let (y, _) = vlayer_forward(&x, &p).unwrap();
        assert!(max_abs_diff(y.amp(), &mx) < 1e-10);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = VLayerParams::random(4, &mut rng).unwrap();
        let x = sv(&[0.5, 0.5, 0.5, 0.5]);
        let (_, cache) = vlayer_forward(&x, &p).unwrap();
        let (ct, g) = vlayer_backward(&cache, &p, &StateVector::zeros(4).unwrap()).unwrap();
        assert!(ct.amp().iter().all(|v| *v == 0.0));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_single_gate_hand_value() {
        let p = VLayerParams::new(2, vec![0.0]).unwrap();
        let (_, cache) = vlayer_forward(&sv(&[1.0, 0.0]), &p).unwrap();
        let (_, g) = vlayer_backward(&cache, &p, &sv(&[0.0, 1.0])).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut p = VLayerParams::new(3, vec![0.1, 0.2, 0.3]).unwrap();
        let (_, cache) = vlayer_forward(&sv(&[1.0, 0.0, 0.0]), &p).unwrap();
        p.alpha_mut()[1] = 0.25;
        assert!(matches!(
            vlayer_backward(&cache, &p, &sv(&[1.0, 0.0, 0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn params_reject_wrong_length() {
        assert!(matches!(
            VLayerParams::new(4, vec![0.0; 4]),
            Err(Error::DimensionMismatch { expected: 5, actual: 4 })
        ));
        assert!(VLayerParams::new(1, vec![]).is_err());
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let p = VLayerParams::zeros(4).unwrap();
        assert!(vlayer_forward(&sv(&[1.0, 0.0, 0.0]), &p).is_err());
        assert!(vlayer_forward_shifted(&sv(&[1.0, 0.0, 0.0, 0.0]), &p, &[(5, GateShift::Angle(0.1))]).is_err());
    }

    #[test]
    fn entry_shift_hand_value() {
        let p = VLayerParams::new(2, vec![0.0]).unwrap();
        let (y, _) = vlayer_forward_shifted(&sv(&[1.0, 0.0]), &p, &[(0, GateShift::Entries(0.1))]).unwrap();
        assert!(max_abs_diff(y.amp(), &[1.1, 0.1]) < 1e-15);
        let (y, _) = vlayer_forward_shifted(&sv(&[1.0, 0.0]), &p, &[(0, GateShift::Angle(FRAC_PI_2))]).unwrap();
        assert!(max_abs_diff(y.amp(), &[0.0, 1.0]) < 1e-15);
    }

    #[test]
    fn dense_oracle_rejects_large_dims() {
        let p = VLayerParams::zeros(65).unwrap();
        assert!(build_unitary(&p).is_err());
    }
}
