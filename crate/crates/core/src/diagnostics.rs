//! Computable stability diagnostics: per-layer Lipschitz data and the
//! network product bound, the layer-telescoped deviation bound between a
//! base model and an activation-adapted one, and a distribution-distance
//! adaptability score.
//!
//! The chain analyses (`lipschitz_bound`, `deviation_check`) apply to MLP
//! models, whose block structure `h = phi(W h)` matches the bound's shape;
//! the adaptability score works on any architecture.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Activation, Linear, Model, ModelError, ModelKind};
use crate::tensor::{Tensor, TensorError};
use crate::util::rng;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("chain diagnostics require an MLP model")]
    UnsupportedArch,
    #[error("models are not comparable: {0}")]
    ArchMismatch(String),
    #[error("probe batch is empty")]
    EmptyProbe,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-layer Lipschitz data: activation slope bound over a recorded grid and
/// the weight's spectral norm from power iteration.
#[derive(Debug, Clone, Serialize)]
pub struct LayerLip {
    pub name: String,
    /// `sup |phi'|` over the layer's probe grid (1.0 for the head).
    pub act_lip: f64,
    pub spectral_norm: f64,
    pub power_iterations: usize,
    pub converged: bool,
    /// Interval the activation slope was scanned over.
    pub interval: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub layers: Vec<LayerLip>,
    /// Product over layers of `act_lip * spectral_norm`.
    pub product_bound: f64,
    pub grid_points: usize,
}

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 10_000;

/// Largest singular value of a `[in, out]` weight by power iteration.
/// Deterministic seeded start vector. Returns `(sigma, iterations,
/// converged)`.
pub fn spectral_norm(w: &[f64], in_dim: usize, out_dim: usize, seed: u64) -> (f64, usize, bool) {
    if in_dim == 0 || out_dim == 0 {
        return (0.0, 0, true);
    }
    let mut stream = rng::substream(seed, "power-iteration", 0);
    let mut v: Vec<f64> = (0..in_dim).map(|_| rng::normal(&mut stream, 0.0, 1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; out_dim];
        for i in 0..in_dim {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..out_dim {
                out[j] += w[i * out_dim + j] * vi;
            }
        }
        out
    };
    let apply_t = |u: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; in_dim];
        for i in 0..in_dim {
            let mut acc = 0.0;
            for j in 0..out_dim {
                acc += w[i * out_dim + j] * u[j];
            }
            out[i] = acc;
        }
        out
    };
    let mut sigma = 0.0;
    for iter in 1..=POWER_MAX_ITERS {
        let u = apply(&v);
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if u_norm == 0.0 {
            return (0.0, iter, true);
        }
        let mut next = apply_t(&u);
        let n_norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut next {
            *x /= n_norm;
        }
        v = next;
        let new_sigma = u_norm; // ||W v|| with unit v from previous iterate
        if (new_sigma - sigma).abs() <= POWER_TOL * new_sigma.max(1.0) {
            return (new_sigma, iter, true);
        }
        sigma = new_sigma;
    }
    (sigma, POWER_MAX_ITERS, false)
}

fn chain<'m>(model: &'m Model) -> Result<(&'m [(Linear, Activation)], &'m Linear), DiagnosticsError> {
    match model.kind() {
        ModelKind::Mlp { hidden, head } => Ok((hidden.as_slice(), head)),
        ModelKind::Transformer { .. } => Err(DiagnosticsError::UnsupportedArch),
    }
}

/// `sup |phi'|` over a dense grid, maximized across a grouped layer's
/// (effective) group functions; fixed GELU uses its analytic derivative.
fn activation_slope_bound(act: &Activation, interval: (f64, f64), grid_points: usize) -> f64 {
    let (lo, hi) = interval;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut worst = 0.0f64;
    match act {
        Activation::Gelu => {
            for k in 0..grid_points {
                let x = lo + k as f64 * step;
                worst = worst.max(crate::util::special::gelu_derivative(x).abs());
            }
        }
        Activation::Rational(layer) => {
            for g in 0..layer.num_groups() {
                let coeffs = layer.effective_coeffs(g);
                for k in 0..grid_points {
                    let x = lo + k as f64 * step;
                    worst = worst.max(coeffs.derivative_scalar(x).abs());
                }
            }
        }
    }
    worst
}

/// Product bound on the network Lipschitz constant of an MLP:
/// `prod_l sup|phi_l'| * ||W_l||_2`, with the head entering through its
/// spectral norm alone.
pub fn lipschitz_bound(
    model: &Model,
    probe_interval: (f64, f64),
    grid_points: usize,
) -> Result<LipschitzReport, DiagnosticsError> {
    let (hidden, head) = chain(model)?;
    let grid_points = grid_points.max(16);
    let mut layers = Vec::new();
    let mut product = 1.0;
    for (i, (linear, act)) in hidden.iter().enumerate() {
        let (sigma, iters, converged) =
            spectral_norm(linear.weight(), linear.in_dim(), linear.out_dim(), i as u64);
        let act_lip = activation_slope_bound(act, probe_interval, grid_points);
        product *= sigma * act_lip;
        layers.push(LayerLip {
            name: format!("hidden.{i}"),
            act_lip,
            spectral_norm: sigma,
            power_iterations: iters,
            converged,
            interval: probe_interval,
        });
    }
    let (sigma, iters, converged) =
        spectral_norm(head.weight(), head.in_dim(), head.out_dim(), hidden.len() as u64);
    product *= sigma;
    layers.push(LayerLip {
        name: "head".into(),
        act_lip: 1.0,
        spectral_norm: sigma,
        power_iterations: iters,
        converged,
        interval: probe_interval,
    });
    Ok(LipschitzReport {
        layers,
        product_bound: product,
        grid_points,
    })
}

/// Both sides of the layer-telescoped deviation bound on one probe input.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeDeviation {
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub probes: Vec<ProbeDeviation>,
    /// Max over probes of `||delta phi_l(z_l)||_2` per hidden layer.
    pub per_layer_delta: Vec<f64>,
    /// Downstream Lipschitz product used for each hidden layer.
    pub downstream_products: Vec<f64>,
    pub violations: usize,
    pub max_violation: f64,
    pub slack: f64,
    pub grid_points: usize,
}

const DEVIATION_SLACK: f64 = 1e-9;

/// Checks `||F'(x) - F(x)|| <= sum_l (prod_{j>l} Lip_j) ||delta phi_l(z_l)||`
/// on every probe row, where the adapted model differs from the base only in
/// activation deltas. Per-layer slope bounds are taken over the observed
/// pre-activation ranges (padded), so the bound is self-contained.
pub fn deviation_check(
    base: &Model,
    adapted: &Model,
    probe: &Tensor,
) -> Result<DeviationReport, DiagnosticsError> {
    let (hidden_base, head_base) = chain(base)?;
    let (hidden_adapted, _) = chain(adapted)?;
    if probe.shape().first().copied().unwrap_or(0) == 0 {
        return Err(DiagnosticsError::EmptyProbe);
    }
    if hidden_base.len() != hidden_adapted.len() {
        return Err(DiagnosticsError::ArchMismatch(format!(
            "{} vs {} hidden layers",
            hidden_base.len(),
            hidden_adapted.len()
        )));
    }
    // Weights and base coefficients must agree bit-for-bit; only activation
    // delta parameters may differ.
    let base_snapshot = base.snapshot();
    let adapted_snapshot = adapted.snapshot();
    let is_delta = |name: &str| {
        name.ends_with("p_A")
            || name.ends_with("p_B")
            || name.ends_with("q_A")
            || name.ends_with("q_B")
            || name.ends_with("p_const")
            || name.ends_with("q_const")
    };
    for (name, values) in &base_snapshot {
        if is_delta(name) {
            continue;
        }
        match adapted_snapshot.iter().find(|(n, _)| n == name) {
            Some((_, other)) if other == values => {}
            _ => {
                return Err(DiagnosticsError::ArchMismatch(format!(
                    "parameter {name} differs outside activation deltas"
                )))
            }
        }
    }

    let layer_count = hidden_base.len();
    let rows = probe.shape()[0];
    let dim = probe.shape()[1];
    let grid_points = 10_000usize;

    // Hybrid trajectories: hybrid k applies adapted activations to layers
    // < k and base activations from layer k on. Collect per-layer
    // pre-activation ranges across every hybrid (the mean-value argument
    // needs the slope bound to cover all compared trajectories), the
    // pre-activations z_l shared by hybrids l-1 and l, and the end outputs.
    let mut z_ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); layer_count];
    let mut shared_z: Vec<Vec<Tensor>> = vec![Vec::with_capacity(rows); layer_count];
    let mut outputs_base = Vec::with_capacity(rows);
    let mut outputs_adapted = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = Tensor::new(vec![1, dim], probe.data()[r * dim..(r + 1) * dim].to_vec())?;
        for k in 0..=layer_count {
            let mut h = x.clone();
            for (l, (linear, act_base)) in hidden_base.iter().enumerate() {
                let z = linear.apply_plain(&h)?;
                for &v in z.data() {
                    let range = &mut z_ranges[l];
                    range.0 = range.0.min(v);
                    range.1 = range.1.max(v);
                }
                if l + 1 == k {
                    shared_z[l].push(z.clone());
                }
                let act = if l < k {
                    &hidden_adapted[l].1
                } else {
                    act_base
                };
                h = act.apply_plain(&z)?;
            }
            let logits = head_base.apply_plain(&h)?;
            if k == 0 {
                outputs_base.push(logits);
            } else if k == layer_count {
                outputs_adapted.push(logits);
            }
        }
    }

    // Per-layer Lipschitz data of the BASE downstream blocks over padded
    // empirical ranges.
    let mut act_lips = Vec::with_capacity(layer_count);
    let mut sigmas = Vec::with_capacity(layer_count);
    for (l, (linear, act)) in hidden_base.iter().enumerate() {
        let (lo, hi) = z_ranges[l];
        let pad = 0.1 * (hi - lo).abs().max(1.0) + 0.5;
        act_lips.push(activation_slope_bound(act, (lo - pad, hi + pad), grid_points));
        let (sigma, _, _) =
            spectral_norm(linear.weight(), linear.in_dim(), linear.out_dim(), l as u64);
        sigmas.push(sigma);
    }
    let (sigma_head, _, _) = spectral_norm(
        head_base.weight(),
        head_base.in_dim(),
        head_base.out_dim(),
        layer_count as u64,
    );
    // Downstream product for layer l: prod_{j>l} act_lip_j sigma_j, then the
    // head's spectral norm.
    let mut downstream = vec![0.0; layer_count];
    let mut acc = sigma_head;
    for l in (0..layer_count).rev() {
        downstream[l] = acc;
        acc *= act_lips[l] * sigmas[l];
    }

    let mut probes = Vec::with_capacity(rows);
    let mut per_layer_delta = vec![0.0f64; layer_count];
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    for r in 0..rows {
        let lhs = l2_diff(&outputs_adapted[r], &outputs_base[r]);
        let mut rhs = 0.0;
        for l in 0..layer_count {
            let z = &shared_z[l][r];
            let base_out = hidden_base[l].1.apply_plain(z)?;
            let adapted_out = hidden_adapted[l].1.apply_plain(z)?;
            let delta = l2_diff(&adapted_out, &base_out);
            per_layer_delta[l] = per_layer_delta[l].max(delta);
            rhs += downstream[l] * delta;
        }
        if lhs > rhs + DEVIATION_SLACK {
            violations += 1;
            max_violation = max_violation.max(lhs - rhs);
        }
        probes.push(ProbeDeviation { lhs, rhs });
    }
    Ok(DeviationReport {
        probes,
        per_layer_delta,
        downstream_products: downstream,
        violations,
        max_violation,
        slack: DEVIATION_SLACK,
        grid_points,
    })
}

fn l2_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Returns a copy with every adapter delta scaled by `factor` (zero-init
/// `B` factors and const offsets carry the magnitude, so scaling them scales
/// the effective update linearly).
pub fn scale_deltas(model: &Model, factor: f64) -> Model {
    let mut out = model.clone();
    out.for_each_param(&mut |name, data, _, _, _| {
        if name.ends_with("p_B") || name.ends_with("q_B") || name.ends_with("_const") {
            for v in data.iter_mut() {
                *v *= factor;
            }
        }
    });
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptabilityReport {
    /// `(site, score)` per activation site, scores in [0, 1).
    pub per_layer: Vec<(String, f64)>,
    pub mean: f64,
}

/// Per-layer adaptability: exact 1-Wasserstein distance `d` between the
/// empirical distributions of activation outputs on the probe batch
/// (computed from sorted samples), normalized to `d / (1 + d)`.
pub fn adaptability_score(
    before: &Model,
    after: &Model,
    probe: &Tensor,
) -> Result<AdaptabilityReport, DiagnosticsError> {
    if probe.shape().first().copied().unwrap_or(0) == 0 {
        return Err(DiagnosticsError::EmptyProbe);
    }
    let a = before.activation_values(probe)?;
    let b = after.activation_values(probe)?;
    if a.len() != b.len() {
        return Err(DiagnosticsError::ArchMismatch(format!(
            "{} vs {} activation sites",
            a.len(),
            b.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(a.len());
    for ((name_a, mut values_a), (name_b, mut values_b)) in a.into_iter().zip(b) {
        if name_a != name_b || values_a.len() != values_b.len() {
            return Err(DiagnosticsError::ArchMismatch(format!(
                "site {name_a} vs {name_b}"
            )));
        }
        values_a.sort_by(f64::total_cmp);
        values_b.sort_by(f64::total_cmp);
        let d = values_a
            .iter()
            .zip(&values_b)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / values_a.len() as f64;
        per_layer.push((name_a, d / (1.0 + d)));
    }
    let mean = per_layer.iter().map(|(_, s)| s).sum::<f64>() / per_layer.len().max(1) as f64;
    Ok(AdaptabilityReport { per_layer, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        apply_plan, ActivationCfg, AdaptationPlan, Arch, Model, ModelConfig, NoraPlan, PlanMode,
    };
    use crate::nora::NoraMode;
    use crate::rational::RationalCoeffs;

    fn rational_mlp(depth: usize, seed: u64) -> Model {
        let config = ModelConfig {
            arch: Arch::Mlp,
            depth,
            hidden: 8,
            heads: 1,
            ffn_mult: 1,
            activation: ActivationCfg::GroupedRational {
                groups: 4,
                m: 5,
                n: 4,
            },
            head_classes: 3,
            in_features: 8,
            tokens: 1,
            layer_norm_trainable: false,
            seed,
        };
        Model::build(&config).unwrap()
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        // 2 * identity: sigma = 2.
        let w = vec![2.0, 0.0, 0.0, 2.0];
        let (sigma, _, converged) = spectral_norm(&w, 2, 2, 0);
        assert!(converged);
        assert!((sigma - 2.0).abs() < 1e-7);
    }

    #[test]
    fn identity_activation_identity_weight_bound_is_one() {
        let mut model = rational_mlp(1, 1);
        // Overwrite to exact identity: W = I, phi = x.
        model.for_each_param(&mut |name, data, _, _, _| {
            if name == "hidden.0.w" {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = if i % 9 == 0 { 1.0 } else { 0.0 };
                }
            } else if name == "head.w" {
                // 8 x 3 slice of the identity.
                for (i, v) in data.iter_mut().enumerate() {
                    *v = if i / 3 == i % 3 && i % 3 == i - (i / 3) * 3 && i / 3 < 3 && i % 3 == i / 3 {
                        0.0
                    } else {
                        *v
                    };
                }
            } else if name == "hidden.0.b" || name == "head.b" {
                data.fill(0.0);
            } else if name.ends_with(".a") {
                let ident = RationalCoeffs::identity(5, 4);
                data.copy_from_slice(ident.numerator());
            } else if name.ends_with(".b") && name.contains(".act.") {
                data.fill(0.0);
            }
        });
        let report = lipschitz_bound(&model, (-4.0, 4.0), 2001).unwrap();
        // hidden.0 contributes exactly 1 * 1.
        assert!((report.layers[0].spectral_norm - 1.0).abs() < 1e-7);
        assert!((report.layers[0].act_lip - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bound_dominates_measured_slopes() {
        let model = rational_mlp(2, 3);
        let report = lipschitz_bound(&model, (-6.0, 6.0), 4001).unwrap();
        let mut stream = crate::util::rng::substream(77, "probe-pairs", 0);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..8)
                .map(|_| crate::util::rng::uniform(&mut stream, -1.5, 1.5))
                .collect();
            let b: Vec<f64> = a
                .iter()
                .map(|v| v + crate::util::rng::normal(&mut stream, 0.0, 0.1))
                .collect();
            let xa = Tensor::new(vec![1, 8], a.clone()).unwrap();
            let xb = Tensor::new(vec![1, 8], b.clone()).unwrap();
            let ya = model.logits(&xa).unwrap();
            let yb = model.logits(&xb).unwrap();
            let dist_in = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dist_in > 1e-12 {
                worst = worst.max(l2_diff(&ya, &yb) / dist_in);
            }
        }
        assert!(
            report.product_bound >= worst,
            "bound {} < measured slope {}",
            report.product_bound,
            worst
        );
    }

    #[test]
    fn transformer_is_unsupported_for_chain_diagnostics() {
        let config = ModelConfig {
            arch: Arch::MiniTransformer,
            depth: 1,
            hidden: 8,
            heads: 1,
            ffn_mult: 2,
            activation: ActivationCfg::FixedGelu,
            head_classes: 2,
            in_features: 8,
            tokens: 2,
            layer_norm_trainable: false,
            seed: 0,
        };
        let model = Model::build(&config).unwrap();
        assert!(matches!(
            lipschitz_bound(&model, (-1.0, 1.0), 100),
            Err(DiagnosticsError::UnsupportedArch)
        ));
    }

    fn adapted_pair(seed: u64, bump: f64) -> (Model, Model) {
        let base = rational_mlp(2, seed);
        let mut adapted = base.clone();
        apply_plan(
            &mut adapted,
            &AdaptationPlan {
                mode: PlanMode::Nora {
                    nora: NoraPlan {
                        rank: 2,
                        mode: NoraMode::Both,
                        sites: None,
                    },
                },
                include_head: false,
                seed: seed + 1,
            },
        )
        .unwrap();
        adapted.for_each_param(&mut |name, data, _, _, _| {
            if name.ends_with("p_B") || name.ends_with("q_B") {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = bump * (0.5 + 0.1 * i as f64);
                }
            }
        });
        (base, adapted)
    }

    #[test]
    fn zero_deltas_give_zero_both_sides() {
        let base = rational_mlp(2, 5);
        let mut adapted = base.clone();
        apply_plan(
            &mut adapted,
            &AdaptationPlan {
                mode: PlanMode::Nora {
                    nora: NoraPlan {
                        rank: 1,
                        mode: NoraMode::Both,
                        sites: None,
                    },
                },
                include_head: false,
                seed: 9,
            },
        )
        .unwrap();
        let probe = Tensor::new(vec![4, 8], (0..32).map(|i| i as f64 * 0.1 - 1.6).collect())
            .unwrap();
        let report = deviation_check(&base, &adapted, &probe).unwrap();
        for p in &report.probes {
            assert_eq!(p.lhs, 0.0);
            assert_eq!(p.rhs, 0.0);
        }
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn deviation_bound_holds_on_random_deltas() {
        let (base, adapted) = adapted_pair(11, 0.05);
        let mut stream = crate::util::rng::substream(40, "probes", 0);
        let data: Vec<f64> = (0..50 * 8)
            .map(|_| crate::util::rng::uniform(&mut stream, -2.0, 2.0))
            .collect();
        let probe = Tensor::new(vec![50, 8], data).unwrap();
        let report = deviation_check(&base, &adapted, &probe).unwrap();
        assert_eq!(report.violations, 0, "max violation {}", report.max_violation);
        // The bound is meaningful: both sides nonzero.
        assert!(report.probes.iter().any(|p| p.lhs > 0.0));
        assert!(report.probes.iter().all(|p| p.rhs >= p.lhs));
    }

    #[test]
    fn deviation_rejects_weight_mismatch() {
        let (base, mut adapted) = adapted_pair(13, 0.01);
        adapted.for_each_param(&mut |name, data, _, _, _| {
            if name == "hidden.0.w" {
                data[0] += 1e-9;
            }
        });
        assert!(matches!(
            deviation_check(&base, &adapted, &Tensor::zeros(vec![1, 8])),
            Err(DiagnosticsError::ArchMismatch(_))
        ));
    }

    #[test]
    fn first_order_scaling_of_lhs() {
        let (base, adapted) = adapted_pair(17, 1.0);
        let probe = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f64) * 0.05 - 1.6).collect())
            .unwrap();
        let small = scale_deltas(&adapted, 1e-4);
        let large = scale_deltas(&adapted, 1e-3);
        let mean_lhs = |m: &Model| {
            let report = deviation_check(&base, m, &probe).unwrap();
            report.probes.iter().map(|p| p.lhs).sum::<f64>() / report.probes.len() as f64
        };
        let ratio = mean_lhs(&large) / mean_lhs(&small);
        assert!(
            (ratio - 10.0).abs() / 10.0 < 0.05,
            "scaling ratio {ratio} not within 5% of 10"
        );
    }

    #[test]
    fn adaptability_zero_for_identical_models() {
        let model = rational_mlp(2, 19);
        let probe = Tensor::new(vec![6, 8], (0..48).map(|i| i as f64 * 0.07 - 1.5).collect())
            .unwrap();
        let report = adaptability_score(&model, &model, &probe).unwrap();
        for (_, score) in &report.per_layer {
            assert_eq!(*score, 0.0);
        }
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn adaptability_constant_shift_closed_form() {
        // Shifting a layer's delta a0 by c with phi = x/(1+|b0|) shifts every
        // activation output by c/(1+|b0|), so W1 = |c|/(1+|b0|) exactly.
        let config = ModelConfig {
            arch: Arch::Mlp,
            depth: 1,
            hidden: 4,
            heads: 1,
            ffn_mult: 1,
            activation: ActivationCfg::GroupedRational {
                groups: 1,
                m: 1,
                n: 0,
            },
            head_classes: 2,
            in_features: 4,
            tokens: 1,
            layer_norm_trainable: false,
            seed: 23,
        };
        let mut before = Model::build(&config).unwrap();
        // b0 = 0.5 in the base coefficients.
        before.for_each_param(&mut |name, data, _, _, _| {
            if name == "hidden.0.act.g0.b" {
                data[0] = 0.5;
            }
        });
        let mut after = before.clone();
        apply_plan(
            &mut after,
            &AdaptationPlan {
                mode: PlanMode::Nora {
                    nora: NoraPlan {
                        rank: 1,
                        mode: NoraMode::ConstOnly,
                        sites: None,
                    },
                },
                include_head: false,
                seed: 0,
            },
        )
        .unwrap();
        let c = 0.3;
        after.for_each_param(&mut |name, data, _, _, _| {
            if name == "hidden.0.act.g0.p_const" {
                data[0] = c;
            }
        });
        let probe = Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.3 - 3.0).collect())
            .unwrap();
        let report = adaptability_score(&before, &after, &probe).unwrap();
        let d = c / 1.5;
        let expected = d / (1.0 + d);
        assert!(
            (report.per_layer[0].1 - expected).abs() < 1e-12,
            "{} vs {expected}",
            report.per_layer[0].1
        );
    }

    #[test]
    fn adaptability_is_symmetric_and_bounded() {
        let (base, adapted) = adapted_pair(29, 0.2);
        let probe = Tensor::new(vec![7, 8], (0..56).map(|i| i as f64 * 0.06 - 1.7).collect())
            .unwrap();
        let ab = adaptability_score(&base, &adapted, &probe).unwrap();
        let ba = adaptability_score(&adapted, &base, &probe).unwrap();
        for ((_, x), (_, y)) in ab.per_layer.iter().zip(&ba.per_layer) {
            assert_eq!(x, y);
            assert!((0.0..1.0).contains(x));
        }
    }

    #[test]
    fn empty_probe_is_contract_error() {
        let model = rational_mlp(1, 31);
        let empty = Tensor::zeros(vec![0, 8]);
        assert!(matches!(
            adaptability_score(&model, &model, &empty),
            Err(DiagnosticsError::EmptyProbe)
        ));
    }
}
