//! Structured low-rank perturbation of rational activation coefficients.
//!
//! Each adapted group carries a pair of factorizations `delta = A * B` with
//! `A in R^{d x r}` (small Gaussian init) and `B in R^{r x 1}` (zero init),
//! one pair per perturbed polynomial. Zero-initialized `B` makes the adapted
//! layer bit-identical to the base layer until training moves it. Const-only
//! tuning replaces the factors with two directly trainable scalar offsets on
//! `a_0` and `b_0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::{GroupedRationalLayer, RationalCoeffs, RationalError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::util::rng::{self, SeededRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("delta shape mismatch: expected {expected} coefficients, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("group expansion: {new_groups} is not a multiple of {old_groups}")]
    NotAMultiple { old_groups: usize, new_groups: usize },
    #[error("group expansion: {new_groups} groups do not divide {channels} channels")]
    DoesNotDivide { new_groups: usize, channels: usize },
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// Which side(s) of the rational the adapter perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoraMode {
    Both,
    NumeratorOnly,
    DenominatorOnly,
    ConstOnly,
}

impl NoraMode {
    pub fn perturbs_numerator(&self) -> bool {
        matches!(self, NoraMode::Both | NoraMode::NumeratorOnly)
    }

    pub fn perturbs_denominator(&self) -> bool {
        matches!(self, NoraMode::Both | NoraMode::DenominatorOnly)
    }
}

/// Std-dev of the Gaussian initialization of `A`.
pub const INIT_STD: f64 = 0.02;

/// The pair `(A, B)` parameterizing one polynomial's coefficient update.
/// The effective update is the length-`d` vector `A * B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankDelta {
    /// Row-major `d x r`.
    a: Vec<f64>,
    /// `r x 1`.
    b: Vec<f64>,
    d: usize,
    r: usize,
}

impl LowRankDelta {
    /// Gaussian `A`, zero `B`: the effective delta starts exactly at zero.
    pub fn init(d: usize, r: usize, rng: &mut SeededRng) -> Result<Self, AdapterError> {
        if r == 0 {
            return Err(AdapterError::ZeroRank);
        }
        let a = (0..d * r).map(|_| rng::normal(rng, 0.0, INIT_STD)).collect();
        Ok(LowRankDelta {
            a,
            b: vec![0.0; r],
            d,
            r,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.r)
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `A * B` as a length-`d` vector.
    pub fn effective(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for i in 0..self.d {
            let mut acc = 0.0;
            for k in 0..self.r {
                acc += self.a[i * self.r + k] * self.b[k];
            }
            out[i] = acc;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.d * self.r + self.r
    }

    #[cfg(test)]
    pub(crate) fn set_b(&mut self, b: Vec<f64>) {
        assert_eq!(b.len(), self.r);
        self.b = b;
    }
}

/// Per-group adapter state: optional numerator/denominator factor pairs, or
/// two scalar offsets in const-only mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoraDelta {
    mode: NoraMode,
    p_delta: Option<LowRankDelta>,
    q_delta: Option<LowRankDelta>,
    /// `[delta_a0]` in const-only mode.
    const_a0: Option<Vec<f64>>,
    /// `[delta_b0]` in const-only mode.
    const_b0: Option<Vec<f64>>,
}

impl NoraDelta {
    /// Fresh adapter for a group with numerator size `m + 1` and denominator
    /// size `n + 1`. Gaussian draws happen in a fixed order: numerator factor
    /// first, then denominator.
    pub fn init(
        mode: NoraMode,
        num_coeffs: usize,
        den_coeffs: usize,
        rank: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, AdapterError> {
        match mode {
            NoraMode::ConstOnly => Ok(NoraDelta {
                mode,
                p_delta: None,
                q_delta: None,
                const_a0: Some(vec![0.0]),
                const_b0: Some(vec![0.0]),
            }),
            _ => {
                let p_delta = if mode.perturbs_numerator() {
                    Some(LowRankDelta::init(num_coeffs, rank, rng)?)
                } else {
                    None
                };
                let q_delta = if mode.perturbs_denominator() {
                    Some(LowRankDelta::init(den_coeffs, rank, rng)?)
                } else {
                    None
                };
                Ok(NoraDelta {
                    mode,
                    p_delta,
                    q_delta,
                    const_a0: None,
                    const_b0: None,
                })
            }
        }
    }

    pub fn mode(&self) -> NoraMode {
        self.mode
    }

    pub fn p_delta(&self) -> Option<&LowRankDelta> {
        self.p_delta.as_ref()
    }

    pub fn q_delta(&self) -> Option<&LowRankDelta> {
        self.q_delta.as_ref()
    }

    /// Effective numerator update vector (zeros when that side is inactive).
    pub fn effective_a(&self, num_coeffs: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_coeffs];
        if let Some(p) = &self.p_delta {
            out = p.effective();
        }
        if let Some(c) = &self.const_a0 {
            out[0] += c[0];
        }
        out
    }

    /// Effective denominator update vector.
    pub fn effective_b(&self, den_coeffs: usize) -> Vec<f64> {
        let mut out = vec![0.0; den_coeffs];
        if let Some(q) = &self.q_delta {
            out = q.effective();
        }
        if let Some(c) = &self.const_b0 {
            out[0] += c[0];
        }
        out
    }

    /// `a' = a + (A^P B^P)`, `b' = b + (A^Q B^Q)`; absent deltas contribute
    /// zero.
    pub fn apply(&self, base: &RationalCoeffs) -> RationalCoeffs {
        let (m, n) = base.degrees();
        base.with_offsets(&self.effective_a(m + 1), &self.effective_b(n + 1))
    }

    /// Trainable parameters held by this group's adapter.
    pub fn param_count(&self) -> usize {
        match self.mode {
            NoraMode::ConstOnly => 2,
            _ => {
                self.p_delta.as_ref().map_or(0, LowRankDelta::param_count)
                    + self.q_delta.as_ref().map_or(0, LowRankDelta::param_count)
            }
        }
    }

    /// Builds `a_eff`/`b_eff` tape nodes from leased leaves, registering every
    /// trainable factor under `prefix`.
    pub(crate) fn build_effective(
        &self,
        tape: &mut Tape,
        a_leaf: Var,
        b_leaf: Var,
        num_coeffs: usize,
        den_coeffs: usize,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<(Var, Var), TensorError> {
        let build_side = |tape: &mut Tape,
                              leaf: Var,
                              delta: &Option<LowRankDelta>,
                              constant: &Option<Vec<f64>>,
                              coeffs: usize,
                              side: &str,
                              pairs: &mut Vec<(String, Var)>|
         -> Result<Var, TensorError> {
            let mut eff = leaf;
            if let Some(lr) = delta {
                let (d, r) = lr.dims();
                let a_var = tape.input(
                    &Tensor::new(vec![d, r], lr.a().to_vec())?.requires_grad(true),
                );
                let b_var = tape.input(
                    &Tensor::new(vec![r, 1], lr.b().to_vec())?.requires_grad(true),
                );
                pairs.push((format!("{prefix}.{side}_A"), a_var));
                pairs.push((format!("{prefix}.{side}_B"), b_var));
                let prod = tape.matmul(a_var, b_var)?;
                let flat = tape.reshape(prod, vec![d])?;
                eff = tape.add(leaf, flat)?;
            }
            if let Some(c) = constant {
                let offset = tape.input(&Tensor::new(vec![1], c.clone())?.requires_grad(true));
                pairs.push((format!("{prefix}.{side}_const"), offset));
                let mut basis = vec![0.0; coeffs];
                basis[0] = 1.0;
                let e0 = tape.constant(&Tensor::new(vec![coeffs], basis)?);
                let contrib = tape.mul(e0, offset)?;
                eff = tape.add(eff, contrib)?;
            }
            Ok(eff)
        };
        let a_eff = build_side(
            tape,
            a_leaf,
            &self.p_delta,
            &self.const_a0,
            num_coeffs,
            "p",
            pairs,
        )?;
        let b_eff = build_side(
            tape,
            b_leaf,
            &self.q_delta,
            &self.const_b0,
            den_coeffs,
            "q",
            pairs,
        )?;
        Ok((a_eff, b_eff))
    }

    /// Mutable traversal over the adapter's trainable factors. `B` factors
    /// and const offsets are exempt from weight decay.
    pub(crate) fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        if let Some(p) = self.p_delta.as_mut() {
            let (d, r) = (p.d, p.r);
            f(&format!("{prefix}.p_A"), &mut p.a, vec![d, r], true, true);
            f(&format!("{prefix}.p_B"), &mut p.b, vec![r, 1], true, false);
        }
        if let Some(q) = self.q_delta.as_mut() {
            let (d, r) = (q.d, q.r);
            f(&format!("{prefix}.q_A"), &mut q.a, vec![d, r], true, true);
            f(&format!("{prefix}.q_B"), &mut q.b, vec![r, 1], true, false);
        }
        if let Some(c) = self.const_a0.as_mut() {
            f(&format!("{prefix}.p_const"), c, vec![1], true, false);
        }
        if let Some(c) = self.const_b0.as_mut() {
            f(&format!("{prefix}.q_const"), c, vec![1], true, false);
        }
    }
}

/// Configuration for attaching adapters to a grouped layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoraConfig {
    pub rank: usize,
    pub mode: NoraMode,
}

/// Attaches a fresh adapter to every group: base coefficients freeze, delta
/// factors become the only trainable state. Returns configuration warnings
/// (rank exceeding the coefficient count is legal but useless).
pub fn init_nora(
    layer: &mut GroupedRationalLayer,
    cfg: NoraConfig,
    rng: &mut SeededRng,
) -> Result<Vec<String>, AdapterError> {
    if cfg.rank == 0 && cfg.mode != NoraMode::ConstOnly {
        return Err(AdapterError::ZeroRank);
    }
    let (m, n) = layer.degrees();
    let mut warnings = Vec::new();
    if cfg.mode != NoraMode::ConstOnly {
        let d_min = match cfg.mode {
            NoraMode::NumeratorOnly => m + 1,
            NoraMode::DenominatorOnly => n + 1,
            _ => (m + 1).min(n + 1),
        };
        if cfg.rank >= d_min {
            warnings.push(format!(
                "rank {} >= coefficient count {}: factorization is over-parameterized",
                cfg.rank, d_min
            ));
        }
    }
    layer.set_base_trainable(false);
    for state in layer.groups_mut() {
        state.delta = Some(NoraDelta::init(cfg.mode, m + 1, n + 1, cfg.rank, rng)?);
    }
    Ok(warnings)
}

/// Folds every group's delta into its base coefficients and removes the
/// deltas. Evaluations before and after agree to one coefficient addition;
/// a second merge is a no-op.
pub fn merge(layer: &mut GroupedRationalLayer) -> Result<(), AdapterError> {
    for g in 0..layer.num_groups() {
        let merged = layer.effective_coeffs(g);
        let state = &mut layer.groups_mut()[g];
        state.base = merged;
        state.delta = None;
    }
    Ok(())
}

/// Replicates each group's base coefficients and delta into
/// `new_groups / G` child groups whose channel blocks tile the parent's
/// block. The function computed by the layer is unchanged at the moment of
/// expansion.
pub fn expand_groups(
    layer: &GroupedRationalLayer,
    new_groups: usize,
) -> Result<GroupedRationalLayer, AdapterError> {
    let old = layer.num_groups();
    if new_groups == 0 || new_groups % old != 0 {
        return Err(AdapterError::NotAMultiple {
            old_groups: old,
            new_groups,
        });
    }
    if layer.channels() % new_groups != 0 {
        return Err(AdapterError::DoesNotDivide {
            new_groups,
            channels: layer.channels(),
        });
    }
    let mut expanded = layer.clone();
    let states = expanded.groups_mut();
    let parents = std::mem::take(states);
    for child in 0..new_groups {
        let parent = child * old / new_groups;
        states.push(parents[parent].clone());
    }
    Ok(expanded)
}

/// Trainable parameters held by a layer: adapter factors plus base
/// coefficients when those are unfrozen.
pub fn layer_trainable_params(layer: &GroupedRationalLayer) -> usize {
    let (m, n) = layer.degrees();
    let base = if layer.base_trainable() {
        (m + 1 + n + 1) * layer.num_groups()
    } else {
        0
    };
    base + layer
        .groups_ref()
        .iter()
        .filter_map(|s| s.delta.as_ref())
        .map(NoraDelta::param_count)
        .sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::seeded;

    fn gelu_ish_layer(groups: usize, channels: usize) -> GroupedRationalLayer {
        let coeffs = RationalCoeffs::new(
            vec![0.0, 0.5, 0.3, -0.05, -0.01, 0.002],
            vec![0.1, -0.2, 0.4, 0.05, 0.01],
        )
        .unwrap();
        GroupedRationalLayer::new_shared(coeffs, groups, channels).unwrap()
    }

    #[test]
    fn zero_init_is_bitwise_identity() {
        let base = gelu_ish_layer(8, 32);
        let mut adapted = base.clone();
        let mut rng = seeded(5);
        init_nora(
            &mut adapted,
            NoraConfig {
                rank: 2,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![3, 32], (0..96).map(|i| (i as f64) * 0.07 - 3.0).collect())
            .unwrap();
        let y_base = base.eval(&x).unwrap();
        let y_adapted = adapted.eval(&x).unwrap();
        for (a, b) in y_base.data().iter().zip(y_adapted.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trainable_count_both_mode() {
        // m=5, n=4, r=2, G=8: 8 * ((6*2+2) + (5*2+2)) = 208.
        let mut layer = gelu_ish_layer(8, 32);
        let mut rng = seeded(0);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 2,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(layer_trainable_params(&layer), 208);
    }

    #[test]
    fn trainable_count_const_only() {
        let mut layer = gelu_ish_layer(8, 32);
        let mut rng = seeded(0);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 1,
                mode: NoraMode::ConstOnly,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(layer_trainable_params(&layer), 16);
    }

    #[test]
    fn selective_counts() {
        // numerator-only: (m+1) r + r per group; denominator-only mirrors it.
        for (mode, expected) in [
            (NoraMode::NumeratorOnly, 8 * (6 * 2 + 2)),
            (NoraMode::DenominatorOnly, 8 * (5 * 2 + 2)),
        ] {
            let mut layer = gelu_ish_layer(8, 32);
            let mut rng = seeded(0);
            init_nora(&mut layer, NoraConfig { rank: 2, mode }, &mut rng).unwrap();
            assert_eq!(layer_trainable_params(&layer), expected);
        }
    }

    #[test]
    fn effective_coeffs_rank_one_hand_case() {
        let base = RationalCoeffs::new(vec![1.0, 2.0, 3.0], vec![0.0]).unwrap();
        let mut delta = LowRankDelta::init(3, 1, &mut seeded(1)).unwrap();
        // A = [1, 0, 0]^T, B = [0.5] -> delta = [0.5, 0, 0].
        delta.a = vec![1.0, 0.0, 0.0];
        delta.set_b(vec![0.5]);
        let nd = NoraDelta {
            mode: NoraMode::NumeratorOnly,
            p_delta: Some(delta),
            q_delta: None,
            const_a0: None,
            const_b0: None,
        };
        let eff = nd.apply(&base);
        assert_eq!(eff.numerator(), &[1.5, 2.0, 3.0]);
        assert_eq!(eff.denominator(), &[0.0]);
    }

    #[test]
    fn effective_delta_equals_product_exactly() {
        let mut rng = seeded(9);
        let mut lr = LowRankDelta::init(6, 3, &mut rng).unwrap();
        lr.set_b(vec![0.3, -0.7, 0.05]);
        let eff = lr.effective();
        for i in 0..6 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += lr.a()[i * 3 + k] * lr.b()[k];
            }
            assert_eq!(eff[i].to_bits(), acc.to_bits());
        }
    }

    #[test]
    fn merge_zero_init_preserves_base_exactly() {
        let base = gelu_ish_layer(4, 8);
        let mut adapted = base.clone();
        let mut rng = seeded(3);
        init_nora(
            &mut adapted,
            NoraConfig {
                rank: 2,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        merge(&mut adapted).unwrap();
        for g in 0..4 {
            assert_eq!(adapted.base(g), base.base(g));
            assert!(adapted.delta(g).is_none());
        }
        assert_eq!(layer_trainable_params(&adapted), 0);
    }

    #[test]
    fn merge_matches_premerge_outputs() {
        let mut layer = gelu_ish_layer(4, 8);
        let mut rng = seeded(11);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 2,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        // Push the deltas off zero.
        layer.for_each_param("act", &mut |name, data, _, _, _| {
            if name.contains("_B") {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = 0.1 + 0.03 * i as f64;
                }
            }
        });
        let grid: Vec<f64> = (0..4001).map(|i| -4.0 + i as f64 * 8.0 / 4000.0).collect();
        let x = Tensor::new(vec![grid.len() / 8 * 8 / 8, 8], grid[..4000].to_vec()).unwrap();
        let before = layer.eval(&x).unwrap();
        let mut merged = layer.clone();
        merge(&mut merged).unwrap();
        let after = merged.eval(&x).unwrap();
        let max_diff = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "max pre/post merge discrepancy {max_diff}");
        // Double merge is a no-op.
        let again = {
            let mut m2 = merged.clone();
            merge(&mut m2).unwrap();
            m2
        };
        assert_eq!(again, merged);
    }

    #[test]
    fn expansion_is_a_no_op_on_outputs() {
        let mut layer = gelu_ish_layer(8, 32);
        let mut rng = seeded(2);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 3,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(
            vec![2, 32],
            (0..64).map(|i| (i as f64) * 0.11 - 3.5).collect(),
        )
        .unwrap();
        let y8 = layer.eval(&x).unwrap();
        let layer16 = expand_groups(&layer, 16).unwrap();
        let y16 = layer16.eval(&x).unwrap();
        for (a, b) in y8.data().iter().zip(y16.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            layer_trainable_params(&layer16),
            2 * layer_trainable_params(&layer)
        );
    }

    #[test]
    fn expansion_perturbation_is_local_to_child_block() {
        let mut layer = gelu_ish_layer(8, 32);
        let mut rng = seeded(2);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 1,
                mode: NoraMode::ConstOnly,
            },
            &mut rng,
        )
        .unwrap();
        let mut layer16 = expand_groups(&layer, 16).unwrap();
        let x = Tensor::new(vec![1, 32], vec![0.4; 32]).unwrap();
        let before = layer16.eval(&x).unwrap();
        // Perturb only child group 0's numerator offset.
        layer16.for_each_param("act", &mut |name, data, _, _, _| {
            if name == "act.g0.p_const" {
                data[0] += 0.1;
            }
        });
        let after = layer16.eval(&x).unwrap();
        // Child 0 owns channels [0, 2): 32 channels / 16 groups.
        for c in 0..32 {
            let changed = before.data()[c] != after.data()[c];
            assert_eq!(changed, c < 2, "channel {c}");
        }
    }

    #[test]
    fn expansion_validates_arguments() {
        let layer = gelu_ish_layer(8, 32);
        assert!(matches!(
            expand_groups(&layer, 12),
            Err(AdapterError::NotAMultiple { .. })
        ));
        // 64 groups cannot divide 32 channels.
        assert!(matches!(
            expand_groups(&layer, 64),
            Err(AdapterError::DoesNotDivide { .. })
        ));
    }

    #[test]
    fn rank_at_least_dimension_warns_but_proceeds() {
        let mut layer = gelu_ish_layer(2, 4);
        let mut rng = seeded(0);
        let warnings = init_nora(
            &mut layer,
            NoraConfig {
                rank: 7,
                mode: NoraMode::Both,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(layer.delta(0).is_some());
    }

    #[test]
    fn selective_mode_leaves_other_side_unadapted() {
        let mut layer = gelu_ish_layer(2, 4);
        let mut rng = seeded(4);
        init_nora(
            &mut layer,
            NoraConfig {
                rank: 2,
                mode: NoraMode::NumeratorOnly,
            },
            &mut rng,
        )
        .unwrap();
        let delta = layer.delta(0).unwrap();
        assert!(delta.p_delta().is_some());
        assert!(delta.q_delta().is_none());
    }
}
