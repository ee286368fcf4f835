//! Safe rational activations: `phi(x) = P(x) / (1 + |Q(x)|)` applied
//! group-wise over a channel dimension.
//!
//! The denominator is always >= 1, so the function has no poles anywhere and
//! stays well-behaved under arbitrary coefficient updates. Polynomials are
//! evaluated by Horner's scheme; the degree of each polynomial is capped at 8
//! to keep f64 evaluation stable on the pre-activation ranges we care about.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nora::NoraDelta;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Maximum polynomial degree representable by [`RationalCoeffs`]; high
/// degrees only appear in fitting studies.
pub const MAX_DEGREE: usize = 12;

/// Stricter cap for coefficients used as activations, where inputs can reach
/// |x| = 8 and f64 evaluation must stay well-conditioned.
pub const MAX_ACTIVATION_DEGREE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RationalError {
    #[error("coefficient vector must be non-empty and finite")]
    BadCoefficients,
    #[error("polynomial degree {degree} exceeds cap {MAX_DEGREE}")]
    DegreeTooHigh { degree: usize },
    #[error("rational evaluation overflowed at input magnitude |x| = {magnitude:e}")]
    NonFiniteEval { magnitude: f64 },
    #[error("{groups} groups do not evenly partition {channels} channels")]
    BadGrouping { groups: usize, channels: usize },
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("coefficient shape mismatch: expected {expected} entries, got {got}")]
    CoeffShape { expected: usize, got: usize },
    #[error("upstream gradient shape {got:?} does not match input {expected:?}")]
    UpstreamShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn canon_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

fn horner_derivative(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in (1..coeffs.len()).rev() {
        acc = acc * x + i as f64 * coeffs[i];
    }
    acc
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One group's numerator/denominator coefficients: `a_0..a_m`, `b_0..b_n`.
///
/// Negative zeros are canonicalized on construction so that adding an exact
/// zero delta reproduces the base bit pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalCoeffs {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl RationalCoeffs {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self, RationalError> {
        if a.is_empty() || b.is_empty() || a.iter().chain(b.iter()).any(|c| !c.is_finite()) {
            return Err(RationalError::BadCoefficients);
        }
        for degree in [a.len() - 1, b.len() - 1] {
            if degree > MAX_DEGREE {
                return Err(RationalError::DegreeTooHigh { degree });
            }
        }
        Ok(RationalCoeffs {
            a: a.into_iter().map(canon_zero).collect(),
            b: b.into_iter().map(canon_zero).collect(),
        })
    }

    /// `phi(x) = x`: identity numerator, zero denominator polynomial.
    pub fn identity(m: usize, n: usize) -> Self {
        let mut a = vec![0.0; m + 1];
        if m >= 1 {
            a[1] = 1.0;
        }
        RationalCoeffs {
            a,
            b: vec![0.0; n + 1],
        }
    }

    /// `(m, n)` polynomial degrees.
    pub fn degrees(&self) -> (usize, usize) {
        (self.a.len() - 1, self.b.len() - 1)
    }

    pub fn numerator(&self) -> &[f64] {
        &self.a
    }

    pub fn denominator(&self) -> &[f64] {
        &self.b
    }

    /// `phi(x)` at a scalar input.
    pub fn eval_scalar(&self, x: f64) -> f64 {
        horner(&self.a, x) / (1.0 + horner(&self.b, x).abs())
    }

    /// Analytic `phi'(x)` with the kink convention `sign(0) = 0`.
    pub fn derivative_scalar(&self, x: f64) -> f64 {
        let p = horner(&self.a, x);
        let q = horner(&self.b, x);
        let dp = horner_derivative(&self.a, x);
        let dq = horner_derivative(&self.b, x);
        let d = 1.0 + q.abs();
        (dp * d - p * sign0(q) * dq) / (d * d)
    }

    /// Denominator `1 + |Q(x)|`; always >= 1.
    pub fn denominator_value(&self, x: f64) -> f64 {
        1.0 + horner(&self.b, x).abs()
    }
}

/// Elementwise safe rational evaluation of a whole tensor.
pub fn eval_rational(coeffs: &RationalCoeffs, x: &Tensor) -> Result<Tensor, RationalError> {
    let mut out = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let y = coeffs.eval_scalar(v);
        if !y.is_finite() {
            return Err(RationalError::NonFiniteEval { magnitude: v.abs() });
        }
        out.push(y);
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Per-group coefficient and input gradients of the grouped activation,
/// in closed form, reduced over every position that shares a group.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffGradients {
    /// d loss / d a_i for each group.
    pub a: Vec<Vec<f64>>,
    /// d loss / d b_j for each group.
    pub b: Vec<Vec<f64>>,
    /// d loss / d x, same shape as the input.
    pub input: Tensor,
}

/// `G` groups of base rational coefficients mapped onto a channel dimension,
/// with optional per-group low-rank deltas.
///
/// Channel `c` of `C` uses group `floor(c * G / C)`: a fixed partition into
/// contiguous blocks of `C / G` channels, constant across rows and batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedRationalLayer {
    degrees: (usize, usize),
    channels: usize,
    base_trainable: bool,
    groups: Vec<GroupState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub base: RationalCoeffs,
    pub delta: Option<NoraDelta>,
}

/// Tape variables for one forward pass of a grouped layer, keyed by the
/// dotted parameter paths the model traversal uses.
pub struct RationalBindings {
    pub pairs: Vec<(String, Var)>,
}

impl GroupedRationalLayer {
    /// Layer with `num_groups` copies of one coefficient set.
    pub fn new_shared(
        coeffs: RationalCoeffs,
        num_groups: usize,
        channels: usize,
    ) -> Result<Self, RationalError> {
        if num_groups == 0 || channels == 0 || channels % num_groups != 0 {
            return Err(RationalError::BadGrouping {
                groups: num_groups,
                channels,
            });
        }
        let degrees = coeffs.degrees();
        for degree in [degrees.0, degrees.1] {
            if degree > MAX_ACTIVATION_DEGREE {
                return Err(RationalError::DegreeTooHigh { degree });
            }
        }
        Ok(GroupedRationalLayer {
            degrees,
            channels,
            base_trainable: false,
            groups: (0..num_groups)
                .map(|_| GroupState {
                    base: coeffs.clone(),
                    delta: None,
                })
                .collect(),
        })
    }

    /// Layer from explicit per-group coefficients.
    pub fn from_groups(
        groups: Vec<RationalCoeffs>,
        channels: usize,
    ) -> Result<Self, RationalError> {
        let g = groups.len();
        if g == 0 || channels == 0 || channels % g != 0 {
            return Err(RationalError::BadGrouping {
                groups: g,
                channels,
            });
        }
        let degrees = groups[0].degrees();
        if groups.iter().any(|c| c.degrees() != degrees) {
            return Err(RationalError::CoeffShape {
                expected: degrees.0 + 1,
                got: 0,
            });
        }
        for degree in [degrees.0, degrees.1] {
            if degree > MAX_ACTIVATION_DEGREE {
                return Err(RationalError::DegreeTooHigh { degree });
            }
        }
        Ok(GroupedRationalLayer {
            degrees,
            channels,
            base_trainable: false,
            groups: groups
                .into_iter()
                .map(|base| GroupState { base, delta: None })
                .collect(),
        })
    }

    pub fn degrees(&self) -> (usize, usize) {
        self.degrees
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn group_of_channel(&self, channel: usize) -> usize {
        channel * self.groups.len() / self.channels
    }

    pub fn base(&self, group: usize) -> &RationalCoeffs {
        &self.groups[group].base
    }

    pub fn delta(&self, group: usize) -> Option<&NoraDelta> {
        self.groups[group].delta.as_ref()
    }

    pub fn base_trainable(&self) -> bool {
        self.base_trainable
    }

    pub fn set_base_trainable(&mut self, flag: bool) {
        self.base_trainable = flag;
    }

    pub(crate) fn groups_mut(&mut self) -> &mut Vec<GroupState> {
        &mut self.groups
    }

    pub(crate) fn groups_ref(&self) -> &[GroupState] {
        &self.groups
    }

    /// Base coefficients plus the group's effective delta, as plain coeffs.
    pub fn effective_coeffs(&self, group: usize) -> RationalCoeffs {
        let state = &self.groups[group];
        match &state.delta {
            None => state.base.clone(),
            Some(delta) => delta.apply(&state.base),
        }
    }

    /// Plain (tape-free) forward pass: channel `c` goes through its group's
    /// effective rational. Output shape equals input shape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor, RationalError> {
        let channels = *x.shape().last().ok_or(RationalError::ChannelMismatch {
            expected: self.channels,
            got: 0,
        })?;
        if channels != self.channels {
            return Err(RationalError::ChannelMismatch {
                expected: self.channels,
                got: channels,
            });
        }
        let effective: Vec<RationalCoeffs> =
            (0..self.groups.len()).map(|g| self.effective_coeffs(g)).collect();
        let mut out = Vec::with_capacity(x.numel());
        for (i, &v) in x.data().iter().enumerate() {
            let g = self.group_of_channel(i % channels);
            let y = effective[g].eval_scalar(v);
            if !y.is_finite() {
                return Err(RationalError::NonFiniteEval { magnitude: v.abs() });
            }
            out.push(y);
        }
        Ok(Tensor::new(x.shape().to_vec(), out)?)
    }

    /// Closed-form gradients: `d phi / d a_i = x^i / D` and
    /// `d phi / d b_j = -P sign(Q) x^j / D^2` with `D = 1 + |Q(x)|` and
    /// `sign(0) = 0`, summed over all positions sharing a group. Gradients
    /// are taken at the effective (delta-applied) coefficients.
    pub fn coeff_gradients(
        &self,
        x: &Tensor,
        upstream: &Tensor,
    ) -> Result<CoeffGradients, RationalError> {
        if upstream.shape() != x.shape() {
            return Err(RationalError::UpstreamShape {
                expected: x.shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let channels = *x.shape().last().ok_or(RationalError::ChannelMismatch {
            expected: self.channels,
            got: 0,
        })?;
        if channels != self.channels {
            return Err(RationalError::ChannelMismatch {
                expected: self.channels,
                got: channels,
            });
        }
        let (m, n) = self.degrees;
        let effective: Vec<RationalCoeffs> =
            (0..self.groups.len()).map(|g| self.effective_coeffs(g)).collect();
        let mut grad_a = vec![vec![0.0; m + 1]; self.groups.len()];
        let mut grad_b = vec![vec![0.0; n + 1]; self.groups.len()];
        let mut grad_x = vec![0.0; x.numel()];
        for (i, (&xv, &up)) in x.data().iter().zip(upstream.data()).enumerate() {
            let g = self.group_of_channel(i % channels);
            let coeffs = &effective[g];
            let p = horner(coeffs.numerator(), xv);
            let q = horner(coeffs.denominator(), xv);
            let d = 1.0 + q.abs();
            let mut pow = 1.0;
            for i_a in 0..=m {
                grad_a[g][i_a] += up * pow / d;
                pow *= xv;
            }
            let scale = -p * sign0(q) / (d * d);
            let mut pow = 1.0;
            for j_b in 0..=n {
                grad_b[g][j_b] += up * scale * pow;
                pow *= xv;
            }
            grad_x[i] = up * coeffs.derivative_scalar(xv);
        }
        Ok(CoeffGradients {
            a: grad_a,
            b: grad_b,
            input: Tensor::new(x.shape().to_vec(), grad_x)?,
        })
    }

    /// Leases base coefficients and delta factors onto a tape, returning the
    /// per-group effective coefficient nodes ready for
    /// [`Tape::grouped_rational`]. Parameter paths are emitted relative to
    /// `prefix` and match [`GroupedRationalLayer::for_each_param`].
    pub fn lease_on_tape(
        &self,
        tape: &mut Tape,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<(Vec<Var>, Vec<Var>), TensorError> {
        let mut num_vars = Vec::with_capacity(self.groups.len());
        let mut den_vars = Vec::with_capacity(self.groups.len());
        for (g, state) in self.groups.iter().enumerate() {
            let (m, n) = self.degrees;
            let a_leaf = tape.input(
                &Tensor::new(vec![m + 1], state.base.numerator().to_vec())?
                    .requires_grad(self.base_trainable),
            );
            let b_leaf = tape.input(
                &Tensor::new(vec![n + 1], state.base.denominator().to_vec())?
                    .requires_grad(self.base_trainable),
            );
            pairs.push((format!("{prefix}.g{g}.a"), a_leaf));
            pairs.push((format!("{prefix}.g{g}.b"), b_leaf));
            let (a_eff, b_eff) = match &state.delta {
                None => (a_leaf, b_leaf),
                Some(delta) => delta.build_effective(
                    tape,
                    a_leaf,
                    b_leaf,
                    m + 1,
                    n + 1,
                    &format!("{prefix}.g{g}"),
                    pairs,
                )?,
            };
            num_vars.push(a_eff);
            den_vars.push(b_eff);
        }
        Ok((num_vars, den_vars))
    }

    /// One-shot tape forward: lease plus [`Tape::grouped_rational`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
    ) -> Result<(Var, RationalBindings), TensorError> {
        let mut pairs = Vec::new();
        let (num_vars, den_vars) = self.lease_on_tape(tape, prefix, &mut pairs)?;
        let out = tape.grouped_rational(x, num_vars, den_vars)?;
        Ok((out, RationalBindings { pairs }))
    }

    /// Canonical mutable traversal over every parameter owned by the layer.
    pub fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        let base_trainable = self.base_trainable;
        for (g, state) in self.groups.iter_mut().enumerate() {
            f(
                &format!("{prefix}.g{g}.a"),
                state.base.a_mut(),
                vec![0],
                base_trainable,
                false,
            );
            f(
                &format!("{prefix}.g{g}.b"),
                state.base.b_mut(),
                vec![0],
                base_trainable,
                false,
            );
            if let Some(delta) = state.delta.as_mut() {
                delta.for_each_param(&format!("{prefix}.g{g}"), f);
            }
        }
    }
}

impl RationalCoeffs {
    pub(crate) fn a_mut(&mut self) -> &mut Vec<f64> {
        &mut self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Vec<f64> {
        &mut self.b
    }

    pub(crate) fn with_offsets(&self, da: &[f64], db: &[f64]) -> RationalCoeffs {
        debug_assert_eq!(da.len(), self.a.len());
        debug_assert_eq!(db.len(), self.b.len());
        RationalCoeffs {
            a: self.a.iter().zip(da).map(|(x, d)| x + d).collect(),
            b: self.b.iter().zip(db).map(|(x, d)| x + d).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_numerator_zero_denominator() {
        let c = RationalCoeffs::new(vec![0.0, 1.0], vec![0.0]).unwrap();
        assert_eq!(c.eval_scalar(3.0), 3.0);
        assert_eq!(c.eval_scalar(-7.25), -7.25);
    }

    #[test]
    fn constant_halves() {
        let c = RationalCoeffs::new(vec![1.0], vec![1.0]).unwrap();
        for x in [-5.0, 0.0, 2.5] {
            assert_eq!(c.eval_scalar(x), 0.5);
        }
    }

    #[test]
    fn degree_zero_closure() {
        let c = RationalCoeffs::new(vec![0.7], vec![-0.5]).unwrap();
        for x in [-2.0, 0.0, 3.0] {
            assert!((c.eval_scalar(x) - 0.7 / 1.5).abs() < 1e-15);
            assert_eq!(c.derivative_scalar(x), 0.0);
        }
    }

    #[test]
    fn degree_cap_enforced() {
        assert!(matches!(
            RationalCoeffs::new(vec![0.0; 14], vec![0.0]),
            Err(RationalError::DegreeTooHigh { degree: 13 })
        ));
        // Degree 9-12 coefficients are representable but rejected as
        // activations.
        let high = RationalCoeffs::new(vec![0.0; 10], vec![0.0]).unwrap();
        assert!(matches!(
            GroupedRationalLayer::new_shared(high, 1, 4),
            Err(RationalError::DegreeTooHigh { degree: 9 })
        ));
    }

    #[test]
    fn denominator_at_least_one() {
        let c = RationalCoeffs::new(vec![1.0, -0.3, 0.2], vec![-2.0, 1.5, -0.7]).unwrap();
        for i in 0..200 {
            let x = -4.0 + i as f64 * 0.04;
            assert!(c.denominator_value(x) >= 1.0);
        }
    }

    #[test]
    fn eval_overflow_names_magnitude() {
        let c = RationalCoeffs::new(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![0.0])
            .unwrap();
        let x = Tensor::new(vec![1], vec![1e60]).unwrap();
        match eval_rational(&c, &x) {
            Err(RationalError::NonFiniteEval { magnitude }) => assert_eq!(magnitude, 1e60),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn coeff_gradient_at_origin() {
        // d phi / d a_0 = 1 / (1 + |b_0|); higher numerator grads vanish at x = 0.
        let c = RationalCoeffs::new(vec![0.1, 0.2, 0.3], vec![0.5, -0.4]).unwrap();
        let layer = GroupedRationalLayer::new_shared(c, 1, 1).unwrap();
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let up = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let grads = layer.coeff_gradients(&x, &up).unwrap();
        assert!((grads.a[0][0] - 1.0 / 1.5).abs() < 1e-15);
        assert_eq!(grads.a[0][1], 0.0);
        assert_eq!(grads.a[0][2], 0.0);
    }

    #[test]
    fn denominator_gradient_zero_at_kink() {
        // Q(x) = 0 everywhere: sign(0) = 0 forces d phi / d b_j = 0.
        let c = RationalCoeffs::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let layer = GroupedRationalLayer::new_shared(c, 1, 1).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.7, -1.3]).unwrap();
        let up = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let grads = layer.coeff_gradients(&x, &up).unwrap();
        assert_eq!(grads.b[0], vec![0.0, 0.0]);
    }

    #[test]
    fn grouped_layer_validates_partition() {
        let c = RationalCoeffs::identity(1, 0);
        assert!(GroupedRationalLayer::new_shared(c.clone(), 3, 8).is_err());
        assert!(GroupedRationalLayer::new_shared(c, 4, 8).is_ok());
    }

    #[test]
    fn grouped_channel_mismatch_is_dimension_error() {
        let c = RationalCoeffs::identity(1, 0);
        let layer = GroupedRationalLayer::new_shared(c, 2, 4).unwrap();
        let x = Tensor::new(vec![1, 6], vec![0.0; 6]).unwrap();
        assert!(matches!(
            layer.eval(&x),
            Err(RationalError::ChannelMismatch { expected: 4, got: 6 })
        ));
    }

    #[test]
    fn per_group_independence() {
        // First half identity, second half constant zero.
        let identity = RationalCoeffs::new(vec![0.0, 1.0], vec![0.0]).unwrap();
        let zero = RationalCoeffs::new(vec![0.0, 0.0], vec![0.0]).unwrap();
        let layer = GroupedRationalLayer::from_groups(vec![identity, zero], 4).unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.5, -2.0, 3.0, 4.0]).unwrap();
        let y = layer.eval(&x).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn single_group_matches_plain_eval() {
        let c = RationalCoeffs::new(vec![0.3, -1.0, 0.25], vec![0.1, 0.6]).unwrap();
        let layer = GroupedRationalLayer::new_shared(c.clone(), 1, 3).unwrap();
        let x = Tensor::new(vec![2, 3], vec![-1.0, 0.0, 0.5, 2.0, -0.25, 1.1]).unwrap();
        assert_eq!(layer.eval(&x).unwrap(), eval_rational(&c, &x).unwrap());
    }

    #[test]
    fn group_shared_purity() {
        // Equal scalar inputs on channels of the same group give equal outputs.
        let c = RationalCoeffs::new(vec![0.2, 0.9, -0.1], vec![0.4, -0.2]).unwrap();
        let layer = GroupedRationalLayer::new_shared(c, 2, 6).unwrap();
        let x = Tensor::new(vec![1, 6], vec![0.7, 0.7, 0.7, -0.3, -0.3, -0.3]).unwrap();
        let y = layer.eval(&x).unwrap();
        assert_eq!(y.data()[0], y.data()[1]);
        assert_eq!(y.data()[1], y.data()[2]);
        assert_eq!(y.data()[3], y.data()[4]);
        assert_eq!(y.data()[4], y.data()[5]);
    }
}
