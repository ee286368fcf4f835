//! Fits safe rational functions `P(x) / (1 + |Q(x)|)` to reference
//! activations on an interval, and studies how the achievable error decays
//! with total degree.
//!
//! The solver alternates a Sanathanan-Koerner-style linearization (joint
//! weighted linear least squares in all coefficients, with the denominator
//! sign pattern frozen from the previous iterate) with damped Gauss-Newton
//! refinement on the true residual. Sup-norm fits run the same machinery
//! under Lawson reweighting. All linear algebra happens in a Chebyshev basis
//! on the fit interval; only the final coefficients are converted back to
//! monomials.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::{RationalCoeffs, RationalError, MAX_DEGREE};
use crate::util::linalg;
use crate::util::special;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid fit spec: {0}")]
    BadSpec(String),
    #[error("rate study needs at least 4 degrees, got {got}")]
    StudyTooSmall { got: usize },
    #[error("rate study degrees must be strictly increasing in total degree")]
    DegreesNotIncreasing,
    #[error("linear solve failed even with ridge regularization")]
    SolveFailed,
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// Reference activation to approximate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitTarget {
    Gelu,
    Relu,
    Tanh,
    Silu,
    Abs,
    Constant { value: f64 },
}

impl FitTarget {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            FitTarget::Gelu => special::gelu(x),
            FitTarget::Relu => special::relu(x),
            FitTarget::Tanh => x.tanh(),
            FitTarget::Silu => special::silu(x),
            FitTarget::Abs => x.abs(),
            FitTarget::Constant { value } => *value,
        }
    }

    /// Targets with a kink decay root-exponentially in total degree rather
    /// than geometrically.
    pub fn has_kink(&self) -> bool {
        matches!(self, FitTarget::Relu | FitTarget::Abs)
    }

    pub fn name(&self) -> String {
        match self {
            FitTarget::Gelu => "gelu".into(),
            FitTarget::Relu => "relu".into(),
            FitTarget::Tanh => "tanh".into(),
            FitTarget::Silu => "silu".into(),
            FitTarget::Abs => "abs".into(),
            FitTarget::Constant { value } => format!("constant={value}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitLoss {
    LeastSquares,
    /// Sup-norm approximated by Lawson's iteratively reweighted least squares.
    SupNorm,
}

/// Everything that determines a fit. Identical specs produce identical
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub target: FitTarget,
    pub interval: (f64, f64),
    pub grid_points: usize,
    pub degrees: (usize, usize),
    pub loss: FitLoss,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Constrain `Q >= 0` on the fit grid, keeping the approximant inside
    /// the classical rational family. Without this the |Q| form can chase
    /// kink targets with sign-changing denominators, whose error is limited
    /// by coefficient growth rather than degree. Rate studies set it.
    #[serde(default)]
    pub positive_denominator: bool,
}

impl FitSpec {
    pub fn new(target: FitTarget, interval: (f64, f64), degrees: (usize, usize)) -> Self {
        FitSpec {
            target,
            interval,
            grid_points: 2001,
            degrees,
            loss: FitLoss::LeastSquares,
            seed: 0,
            max_iters: 200,
            tol: 1e-10,
            positive_denominator: false,
        }
    }

    fn validate(&self) -> Result<(), FitError> {
        let (lo, hi) = self.interval;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(FitError::BadSpec(format!("interval [{lo}, {hi}]")));
        }
        let (m, n) = self.degrees;
        if m > MAX_DEGREE || n > MAX_DEGREE {
            return Err(FitError::BadSpec(format!("degrees ({m}, {n}) exceed cap")));
        }
        let min_grid = 10 * (m + n + 2);
        if self.grid_points < min_grid {
            return Err(FitError::BadSpec(format!(
                "grid_points {} below 10*(m+n+2) = {min_grid}",
                self.grid_points
            )));
        }
        if self.max_iters == 0 {
            return Err(FitError::BadSpec("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fit outcome. `sup_error`/`l2_error` are measured on a verification grid
/// ten times denser than the fit grid, never on the fit grid itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coeffs: RationalCoeffs,
    pub sup_error: f64,
    pub l2_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub used_ridge: bool,
}

fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Chebyshev polynomials `T_0..T_deg` at `t`.
fn cheb_row(t: f64, deg: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(deg + 1);
    row.push(1.0);
    if deg >= 1 {
        row.push(t);
    }
    for k in 2..=deg {
        let next = 2.0 * t * row[k - 1] - row[k - 2];
        row.push(next);
    }
    row
}

/// Coefficients of `T_k` in the monomial basis, for k = 0..=deg.
fn cheb_monomial_table(deg: usize) -> Vec<Vec<f64>> {
    let mut table: Vec<Vec<f64>> = vec![vec![1.0]];
    if deg >= 1 {
        table.push(vec![0.0, 1.0]);
    }
    for k in 2..=deg {
        let mut next = vec![0.0; k + 1];
        for (i, &c) in table[k - 1].iter().enumerate() {
            next[i + 1] += 2.0 * c;
        }
        for (i, &c) in table[k - 2].iter().enumerate() {
            next[i] -= c;
        }
        table.push(next);
    }
    table
}

/// Converts Chebyshev coefficients in `t = scale * x + shift` into monomial
/// coefficients in `x`.
fn cheb_to_x_monomials(cheb: &[f64], scale: f64, shift: f64) -> Vec<f64> {
    let deg = cheb.len() - 1;
    let table = cheb_monomial_table(deg);
    // Monomial coefficients in t.
    let mut in_t = vec![0.0; deg + 1];
    for (k, &c) in cheb.iter().enumerate() {
        for (i, &tc) in table[k].iter().enumerate() {
            in_t[i] += c * tc;
        }
    }
    // Substitute t = scale*x + shift: accumulate c_i * (scale*x + shift)^i.
    let mut out = vec![0.0; deg + 1];
    let mut power = vec![1.0]; // (scale*x + shift)^i as monomials in x
    for i in 0..=deg {
        for (j, &p) in power.iter().enumerate() {
            out[j] += in_t[i] * p;
        }
        if i < deg {
            // Multiply by (scale*x + shift).
            let mut next = vec![0.0; power.len() + 1];
            for (j, &p) in power.iter().enumerate() {
                next[j] += p * shift;
                next[j + 1] += p * scale;
            }
            power = next;
        }
    }
    out
}

struct Workspace {
    ts: Vec<f64>,
    fs: Vec<f64>,
    m: usize,
    n: usize,
    /// Cached Chebyshev rows per grid point, degree max(m, n).
    rows: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(xs: &[f64], target: FitTarget, m: usize, n: usize, lo: f64, hi: f64) -> Self {
        let scale = 2.0 / (hi - lo);
        let shift = -(hi + lo) / (hi - lo);
        let ts: Vec<f64> = xs.iter().map(|&x| scale * x + shift).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| target.eval(x)).collect();
        let deg = m.max(n);
        let rows = ts.iter().map(|&t| cheb_row(t, deg)).collect();
        Workspace { ts, fs, m, n, rows }
    }

    fn eval_poly(&self, coeffs: &[f64], k: usize) -> f64 {
        coeffs
            .iter()
            .zip(&self.rows[k])
            .map(|(&c, &t)| c * t)
            .sum()
    }
}

/// One Sanathanan-Koerner pass: joint linear solve with frozen denominator
/// sign pattern and `1/D^2` weighting. The denominator's constant term stays
/// frozen at its current value: leaving it free admits the spurious exact
/// solution `P = 0, 1 + s Q = 0` of the multiplied-through residual.
/// Soft-fails to `None` when even the ridged normal equations collapse.
fn sk_step(
    ws: &Workspace,
    weights: &[f64],
    signs: &[f64],
    dens: &[f64],
    q0: f64,
    ridge_used: &mut bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (m, n) = (ws.m, ws.n);
    let cols = m + 1 + n;
    let rows = ws.ts.len();
    let mut design = vec![0.0; rows * cols];
    let mut rhs = vec![0.0; rows];
    let mut w = vec![0.0; rows];
    for k in 0..rows {
        for i in 0..=m {
            design[k * cols + i] = ws.rows[k][i];
        }
        for j in 1..=n {
            design[k * cols + m + j] = -ws.fs[k] * signs[k] * ws.rows[k][j];
        }
        rhs[k] = ws.fs[k] * (1.0 + signs[k] * q0);
        w[k] = weights[k] / (dens[k] * dens[k]);
    }
    let (solution, ridged) = linalg::weighted_least_squares(&design, &rhs, &w, rows, cols, 1e-10)?;
    if ridged {
        *ridge_used = true;
    }
    let mut q = Vec::with_capacity(n + 1);
    q.push(q0);
    q.extend_from_slice(&solution[m + 1..]);
    Some((solution[..=m].to_vec(), q))
}

/// Damped Gauss-Newton step on the true residual `P/D − f`. Returns the new
/// coefficients when the weighted residual norm improves, otherwise `None`.
/// The |Q| subdifferential at zero is taken as +1 here so the step can move
/// the denominator off an identically-zero start.
fn gauss_newton_step(
    ws: &Workspace,
    weights: &[f64],
    p: &[f64],
    q: &[f64],
    ridge_used: &mut bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (m, n) = (ws.m, ws.n);
    let cols = m + 1 + n + 1;
    let rows = ws.ts.len();
    let mut design = vec![0.0; rows * cols];
    let mut rhs = vec![0.0; rows];
    for k in 0..rows {
        let pk = ws.eval_poly(p, k);
        let qk = ws.eval_poly(q, k);
        let d = 1.0 + qk.abs();
        let sign = if qk < 0.0 { -1.0 } else { 1.0 };
        for i in 0..=m {
            design[k * cols + i] = ws.rows[k][i] / d;
        }
        for j in 0..=n {
            design[k * cols + m + 1 + j] = -pk * sign * ws.rows[k][j] / (d * d);
        }
        rhs[k] = ws.fs[k] - pk / d; // step solves J dc ≈ -r
    }
    let (step, ridged) = linalg::weighted_least_squares(&design, &rhs, weights, rows, cols, 1e-10)?;
    if ridged {
        *ridge_used = true;
    }
    let base = residual_norm(ws, weights, p, q);
    let mut damping = 1.0;
    for _ in 0..10 {
        let cand_p: Vec<f64> = p.iter().zip(&step[..=m]).map(|(&c, &s)| c + damping * s).collect();
        let cand_q: Vec<f64> = q
            .iter()
            .zip(&step[m + 1..])
            .map(|(&c, &s)| c + damping * s)
            .collect();
        if residual_norm(ws, weights, &cand_p, &cand_q) < base {
            return Some((cand_p, cand_q));
        }
        damping *= 0.5;
    }
    None
}

fn residual_norm(ws: &Workspace, weights: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..ws.ts.len() {
        let d = 1.0 + ws.eval_poly(q, k).abs();
        let r = ws.eval_poly(p, k) / d - ws.fs[k];
        acc += weights[k] * r * r;
    }
    (acc / ws.ts.len() as f64).sqrt()
}

fn sup_residual(ws: &Workspace, p: &[f64], q: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..ws.ts.len() {
        let d = 1.0 + ws.eval_poly(q, k).abs();
        let r = (ws.eval_poly(p, k) / d - ws.fs[k]).abs();
        worst = worst.max(r);
    }
    worst
}

/// Measures a candidate on the dense verification grid.
fn verify(coeffs: &RationalCoeffs, target: FitTarget, grid: &[f64]) -> (f64, f64) {
    let mut sup = 0.0f64;
    let mut sq = 0.0;
    for &x in grid {
        let err = coeffs.eval_scalar(x) - target.eval(x);
        sup = sup.max(err.abs());
        sq += err * err;
    }
    (sup, (sq / grid.len() as f64).sqrt())
}

struct Candidate {
    p: Vec<f64>,
    q: Vec<f64>,
    iterations: usize,
    converged: bool,
    used_ridge: bool,
}

/// Projects the denominator onto `Q >= 0` over the fit grid. A global sign
/// flip leaves `|Q|` unchanged, so orient positive first, then lift the
/// constant term.
fn project_positive(ws: &Workspace, q: &mut [f64]) {
    let mut total = 0.0;
    let mut min_q = f64::INFINITY;
    for k in 0..ws.ts.len() {
        total += ws.eval_poly(q, k);
    }
    if total < 0.0 {
        for c in q.iter_mut() {
            *c = -*c;
        }
    }
    for k in 0..ws.ts.len() {
        min_q = min_q.min(ws.eval_poly(q, k));
    }
    if min_q < 0.0 {
        q[0] -= min_q;
    }
}

fn fit_score(ws: &Workspace, loss: FitLoss, p: &[f64], q: &[f64]) -> f64 {
    match loss {
        FitLoss::LeastSquares => {
            let ones = vec![1.0; ws.ts.len()];
            residual_norm(ws, &ones, p, q)
        }
        FitLoss::SupNorm => sup_residual(ws, p, q),
    }
}

/// Core iteration from one starting point: Sanathanan-Koerner passes while
/// they help, Gauss-Newton refinement once they stall, Lawson reweighting
/// after a least-squares warmup when chasing the sup norm. The best iterate
/// under the requested loss is kept.
fn core_solve(ws: &Workspace, spec: &FitSpec, start: Option<(Vec<f64>, Vec<f64>)>) -> Candidate {
    let rows = ws.ts.len();
    let mut ridge_used = false;
    let mut lawson = vec![1.0; rows];
    let (mut p, mut q, have_start) = match start {
        Some((sp, sq)) => (sp, sq, true),
        None => (vec![0.0; ws.m + 1], vec![0.0; ws.n + 1], false),
    };
    let warmup = if spec.loss == FitLoss::SupNorm {
        spec.max_iters / 4
    } else {
        0
    };
    let mut best_p = p.clone();
    let mut best_q = q.clone();
    let mut best_score = fit_score(ws, spec.loss, &p, &q);
    let mut prev_score = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < spec.max_iters {
        iterations += 1;
        let (signs, dens): (Vec<f64>, Vec<f64>) = if have_start || iterations > 1 {
            (0..rows)
                .map(|k| {
                    let qk = ws.eval_poly(&q, k);
                    let s = if qk < 0.0 { -1.0 } else { 1.0 };
                    (s, 1.0 + qk.abs())
                })
                .unzip()
        } else {
            (vec![1.0; rows], vec![1.0; rows])
        };
        let mut stepped = false;
        if let Some((new_p, new_q)) = sk_step(ws, &lawson, &signs, &dens, q[0], &mut ridge_used) {
            let take = (!have_start && iterations == 1)
                || residual_norm(ws, &lawson, &new_p, &new_q)
                    < residual_norm(ws, &lawson, &p, &q);
            if take {
                p = new_p;
                q = new_q;
                stepped = true;
            }
        }
        if !stepped {
            if let Some((gp, gq)) = gauss_newton_step(ws, &lawson, &p, &q, &mut ridge_used) {
                p = gp;
                q = gq;
                stepped = true;
            }
        }
        if spec.positive_denominator && stepped {
            project_positive(ws, &mut q);
        }

        if spec.loss == FitLoss::SupNorm && iterations > warmup {
            let mut total = 0.0;
            for k in 0..rows {
                let d = 1.0 + ws.eval_poly(&q, k).abs();
                let r = (ws.eval_poly(&p, k) / d - ws.fs[k]).abs();
                lawson[k] *= r + 1e-14;
                total += lawson[k];
            }
            let mean = total / rows as f64;
            for w in &mut lawson {
                *w /= mean;
            }
        }

        let score = fit_score(ws, spec.loss, &p, &q);
        if score < best_score {
            best_score = score;
            best_p = p.clone();
            best_q = q.clone();
        }
        match spec.loss {
            FitLoss::LeastSquares => {
                if !stepped || (prev_score - score).abs() < spec.tol {
                    converged = true;
                    break;
                }
            }
            FitLoss::SupNorm => {
                // Reweighting may unstick a stalled iterate, so only the
                // post-warmup score change terminates.
                if iterations > warmup + 1 && (prev_score - score).abs() < spec.tol {
                    converged = true;
                    break;
                }
            }
        }
        prev_score = score;
    }
    Candidate {
        p: best_p,
        q: best_q,
        iterations,
        converged,
        used_ridge: ridge_used,
    }
}

/// Fits `spec.target` on `spec.interval` with the safe rational form.
/// Non-convergence within `max_iters` is reported, not raised.
pub fn fit_rational(spec: &FitSpec) -> Result<FitReport, FitError> {
    fit_rational_warm(spec, None)
}

/// Same as [`fit_rational`] but with an extra warm start from existing
/// monomial coefficients (padded with zeros to the requested degrees).
pub fn fit_rational_warm(
    spec: &FitSpec,
    warm: Option<&RationalCoeffs>,
) -> Result<FitReport, FitError> {
    spec.validate()?;
    let (lo, hi) = spec.interval;
    let (m, n) = spec.degrees;
    let xs = uniform_grid(lo, hi, spec.grid_points);
    let ws = Workspace::new(&xs, spec.target, m, n, lo, hi);

    // Deterministic multi-start: a cold start, optionally the caller's warm
    // start, and a ladder of denominator magnitudes. Kink targets need the
    // large-|Q| basins, which Gauss-Newton cannot reach from zero.
    let mut starts: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None];
    if let Some(start) = warm {
        if let Some(projected) = monomials_to_cheb(start, m, n, lo, hi) {
            starts.push(Some(projected));
        }
    }
    if spec.positive_denominator {
        // Seeds of the form s * t^2 = s*(T0 + T2)/2: nonnegative, vanishing
        // mid-interval where kink targets need the denominator smallest.
        if n >= 2 {
            for s in [4.0, 32.0] {
                let mut q0 = vec![0.0; n + 1];
                q0[0] = 0.5 * s;
                q0[2] = 0.5 * s;
                starts.push(Some((vec![0.0; m + 1], q0)));
            }
        }
    } else if n >= 1 {
        for s in [4.0, 32.0] {
            let mut q0 = vec![0.0; n + 1];
            q0[1] = s;
            starts.push(Some((vec![0.0; m + 1], q0)));
        }
    }

    // Candidates are ranked on the dense verification grid, not the fit
    // grid: large-coefficient iterates can look good on the fit grid while
    // misbehaving between its points.
    let scale = 2.0 / (hi - lo);
    let shift = -(hi + lo) / (hi - lo);
    let dense = uniform_grid(lo, hi, (spec.grid_points - 1) * 10 + 1);
    let mut best: Option<FitReport> = None;
    for start in starts {
        let candidate = core_solve(&ws, spec, start);
        let coeffs = RationalCoeffs::new(
            cheb_to_x_monomials(&candidate.p, scale, shift),
            cheb_to_x_monomials(&candidate.q, scale, shift),
        )?;
        let (sup_error, l2_error) = verify(&coeffs, spec.target, &dense);
        let report = FitReport {
            coeffs,
            sup_error,
            l2_error,
            iterations: candidate.iterations,
            converged: candidate.converged,
            used_ridge: candidate.used_ridge,
        };
        let better = match &best {
            None => true,
            Some(b) => match spec.loss {
                FitLoss::SupNorm => report.sup_error < b.sup_error,
                FitLoss::LeastSquares => report.l2_error < b.l2_error,
            },
        };
        if better {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Projects monomial coefficients onto the Chebyshev working basis (used for
/// warm starts). Returns `None` when the degrees do not fit.
fn monomials_to_cheb(
    coeffs: &RationalCoeffs,
    m: usize,
    n: usize,
    lo: f64,
    hi: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (pm, pn) = coeffs.degrees();
    if pm > m || pn > n {
        return None;
    }
    // Least-squares projection on a dense grid is exact for polynomials.
    let xs = uniform_grid(lo, hi, 8 * (m.max(n) + 2));
    let scale = 2.0 / (hi - lo);
    let shift = -(hi + lo) / (hi - lo);
    let project = |vals: &[f64], deg: usize| -> Option<Vec<f64>> {
        let rows = xs.len();
        let cols = deg + 1;
        let mut design = vec![0.0; rows * cols];
        for (k, &x) in xs.iter().enumerate() {
            let row = cheb_row(scale * x + shift, deg);
            design[k * cols..(k + 1) * cols].copy_from_slice(&row);
        }
        let w = vec![1.0; rows];
        linalg::weighted_least_squares(&design, vals, &w, rows, cols, 1e-12).map(|(c, _)| c)
    };
    let pv: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &c in coeffs.numerator().iter().rev() {
                acc = acc * x + c;
            }
            acc
        })
        .collect();
    let qv: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &c in coeffs.denominator().iter().rev() {
                acc = acc * x + c;
            }
            acc
        })
        .collect();
    Some((project(&pv, m)?, project(&qv, n)?))
}

/// Slope/intercept/fit quality of a least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn line_fit(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    LineFit {
        slope,
        intercept,
        r_squared,
    }
}

/// One row of a rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub total_degree: usize,
    pub m: usize,
    pub n: usize,
    pub sup_error: f64,
    pub l2_error: f64,
}

/// Error-decay study over increasing total degree. For smooth targets the
/// regression runs `log(err)` against `N`; for kink targets against
/// `sqrt(N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub target: String,
    pub interval: (f64, f64),
    pub points: Vec<RatePoint>,
    /// "N" or "sqrt(N)".
    pub regressor: String,
    pub rate_fit: LineFit,
}

/// Degree splits tried at total degree `total`: balanced plus one step to
/// either side, clipped to the representable range. Odd and even targets
/// favor different numerator/denominator parities, so a single fixed split
/// would stall every other degree.
fn candidate_splits(total: usize) -> Vec<(usize, usize)> {
    let h = total / 2;
    let mut out = Vec::new();
    let mut push = |m: i64, n: i64| {
        if m >= 0 && n >= 0 && m as usize <= MAX_DEGREE && n as usize <= MAX_DEGREE {
            let pair = (m as usize, n as usize);
            if !out.contains(&pair) {
                out.push(pair);
            }
        }
    };
    let m0 = (total - h) as i64;
    let n0 = h as i64;
    push(m0, n0);
    push(m0 + 1, n0 - 1);
    push(m0 - 1, n0 + 1);
    out
}

/// Runs the fitter across strictly increasing total degrees, trying several
/// numerator/denominator splits per degree and warm-starting from the
/// previous winner; the previous solution itself is kept as a fallback so
/// the reported error never increases with degree.
pub fn rate_study(
    target: FitTarget,
    interval: (f64, f64),
    total_degrees: &[usize],
    loss: FitLoss,
    grid_points: usize,
) -> Result<RateStudy, FitError> {
    if total_degrees.len() < 4 {
        return Err(FitError::StudyTooSmall {
            got: total_degrees.len(),
        });
    }
    for pair in total_degrees.windows(2) {
        if pair[0] >= pair[1] {
            return Err(FitError::DegreesNotIncreasing);
        }
    }
    let mut points = Vec::with_capacity(total_degrees.len());
    let mut best_prev: Option<(FitReport, usize, usize)> = None;
    for &total in total_degrees {
        let mut best: Option<(FitReport, usize, usize)> = None;
        for (m, n) in candidate_splits(total) {
            let mut spec = FitSpec::new(target, interval, (m, n));
            spec.loss = loss;
            spec.grid_points = grid_points.max(10 * (m + n + 2));
            // Higher degrees get proportionally more iterations; a flat
            // budget lets low degrees over-converge while starving high ones.
            spec.max_iters = 25 * total;
            spec.positive_denominator = true;
            let warm = best_prev.as_ref().map(|(r, _, _)| &r.coeffs);
            let report = fit_rational_warm(&spec, warm)?;
            if best.as_ref().is_none_or(|(b, _, _)| report.sup_error < b.sup_error) {
                best = Some((report, m, n));
            }
        }
        let mut best = best.expect("at least one split");
        if let Some((prev, pm, pn)) = &best_prev {
            // Padding the previous solution with zero coefficients evaluates
            // identically, so the best error is monotone in total degree.
            if prev.sup_error < best.0.sup_error {
                let (m, n) = (total - total / 2, total / 2);
                let m = m.max(*pm);
                let n = n.max(*pn);
                let padded = pad_coeffs(&prev.coeffs, m, n)?;
                best = (
                    FitReport {
                        coeffs: padded,
                        sup_error: prev.sup_error,
                        l2_error: prev.l2_error,
                        iterations: prev.iterations,
                        converged: prev.converged,
                        used_ridge: prev.used_ridge,
                    },
                    m,
                    n,
                );
            }
        }
        points.push(RatePoint {
            total_degree: total,
            m: best.1,
            n: best.2,
            sup_error: best.0.sup_error,
            l2_error: best.0.l2_error,
        });
        best_prev = Some(best);
    }
    let (regressor, xs): (String, Vec<f64>) = if target.has_kink() {
        (
            "sqrt(N)".into(),
            points.iter().map(|p| (p.total_degree as f64).sqrt()).collect(),
        )
    } else {
        (
            "N".into(),
            points.iter().map(|p| p.total_degree as f64).collect(),
        )
    };
    let ys: Vec<f64> = points.iter().map(|p| p.sup_error.max(1e-300).ln()).collect();
    let rate_fit = line_fit(&xs, &ys);
    Ok(RateStudy {
        target: target.name(),
        interval,
        points,
        regressor,
        rate_fit,
    })
}

fn pad_coeffs(coeffs: &RationalCoeffs, m: usize, n: usize) -> Result<RationalCoeffs, FitError> {
    let mut a = coeffs.numerator().to_vec();
    let mut b = coeffs.denominator().to_vec();
    a.resize(m + 1, 0.0);
    b.resize(n + 1, 0.0);
    Ok(RationalCoeffs::new(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_on_tiny_interval_is_exact() {
        // tanh(x) == x to 1e-10 on [-5e-4, 5e-4]; degree (1, 0) recovers it.
        let spec = FitSpec::new(FitTarget::Tanh, (-5e-4, 5e-4), (1, 0));
        let report = fit_rational(&spec).unwrap();
        assert!(report.sup_error < 1e-10, "sup {}", report.sup_error);
        let a = report.coeffs.numerator();
        let b0 = report.coeffs.denominator()[0];
        // phi(x) = (a0 + a1 x) / (1 + |b0|) should be ~x.
        assert!((a[1] / (1.0 + b0.abs()) - 1.0).abs() < 1e-6);
        assert!(a[0].abs() < 1e-10);
    }

    #[test]
    fn constant_target_is_exact() {
        let spec = FitSpec::new(FitTarget::Constant { value: 0.5 }, (-1.0, 1.0), (0, 0));
        let report = fit_rational(&spec).unwrap();
        assert!(report.sup_error < 1e-12, "sup {}", report.sup_error);
        // a0 = 0.5 * (1 + |b0|) family.
        let a0 = report.coeffs.numerator()[0];
        let b0 = report.coeffs.denominator()[0];
        assert!((a0 - 0.5 * (1.0 + b0.abs())).abs() < 1e-12);
    }

    #[test]
    fn gelu_five_four_fit_is_tight() {
        let spec = FitSpec::new(FitTarget::Gelu, (-3.0, 3.0), (5, 4));
        let report = fit_rational(&spec).unwrap();
        assert!(
            report.sup_error < 1e-2,
            "GELU (5,4) sup error {}",
            report.sup_error
        );
    }

    #[test]
    fn determinism_identical_reports() {
        let spec = FitSpec::new(FitTarget::Silu, (-3.0, 3.0), (4, 3));
        let a = fit_rational(&spec).unwrap();
        let b = fit_rational(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        let mut spec = FitSpec::new(FitTarget::Tanh, (1.0, -1.0), (2, 2));
        assert!(fit_rational(&spec).is_err());
        spec.interval = (-1.0, 1.0);
        spec.grid_points = 10;
        assert!(fit_rational(&spec).is_err());
    }

    #[test]
    fn rate_study_needs_four_degrees() {
        let err = rate_study(
            FitTarget::Tanh,
            (-2.0, 2.0),
            &[2, 4, 6],
            FitLoss::SupNorm,
            801,
        )
        .unwrap_err();
        assert!(matches!(err, FitError::StudyTooSmall { got: 3 }));
    }

    #[test]
    fn rate_study_degrees_must_increase() {
        let err = rate_study(
            FitTarget::Tanh,
            (-2.0, 2.0),
            &[2, 4, 4, 6],
            FitLoss::SupNorm,
            801,
        )
        .unwrap_err();
        assert!(matches!(err, FitError::DegreesNotIncreasing));
    }

    #[test]
    fn cheb_conversion_round_trip() {
        // T_3(t) = 4t^3 - 3t on t = x (scale 1, shift 0).
        let out = cheb_to_x_monomials(&[0.0, 0.0, 0.0, 1.0], 1.0, 0.0);
        assert_eq!(out, vec![0.0, -3.0, 0.0, 4.0]);
        // Shifted: T_1(2x + 1) = 2x + 1.
        let out = cheb_to_x_monomials(&[0.0, 1.0], 2.0, 1.0);
        assert_eq!(out, vec![1.0, 2.0]);
    }
}
