//! Small dense linear algebra: least-squares via normal equations with
//! partial-pivot Gaussian elimination, plus a ridge fallback for
//! near-singular systems.

/// Solves `A x = b` for square `A` (row-major, n x n) by Gaussian elimination
/// with partial pivoting. Returns `None` when a pivot collapses.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= factor * m[col * n + j];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in row + 1..n {
            acc -= m[row * n + j] * x[j];
        }
        x[row] = acc / m[row * n + row];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Weighted linear least squares `min ||W^(1/2) (D c - y)||` over the columns
/// of design matrix `design` (rows x cols, row-major). Solved through the
/// normal equations; falls back to a ridge-regularized solve when singular.
/// Returns `(solution, used_ridge)`.
pub fn weighted_least_squares(
    design: &[f64],
    y: &[f64],
    weights: &[f64],
    rows: usize,
    cols: usize,
    ridge: f64,
) -> Option<(Vec<f64>, bool)> {
    debug_assert_eq!(design.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(weights.len(), rows);
    let mut ata = vec![0.0; cols * cols];
    let mut atb = vec![0.0; cols];
    for r in 0..rows {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        let row = &design[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let wi = w * row[i];
            atb[i] += wi * y[r];
            for j in i..cols {
                ata[i * cols + j] += wi * row[j];
            }
        }
    }
    // Mirror the upper triangle.
    for i in 0..cols {
        for j in 0..i {
            ata[i * cols + j] = ata[j * cols + i];
        }
    }
    if let Some(x) = solve(&ata, &atb, cols) {
        return Some((x, false));
    }
    let mut ridged = ata;
    for i in 0..cols {
        ridged[i * cols + i] += ridge;
    }
    solve(&ridged, &atb, cols).map(|x| (x, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_2x2() {
        // [2 1; 1 3] x = [5; 10] -> x = [1, 3]
        let x = solve(&[2.0, 1.0, 1.0, 3.0], &[5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_singular_returns_none() {
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2).is_none());
    }

    #[test]
    fn least_squares_recovers_line() {
        // y = 3 + 2x sampled exactly.
        let xs = [-1.0, 0.0, 1.0, 2.0];
        let mut design = Vec::new();
        let mut y = Vec::new();
        for &x in &xs {
            design.extend_from_slice(&[1.0, x]);
            y.push(3.0 + 2.0 * x);
        }
        let w = vec![1.0; xs.len()];
        let (c, ridged) = weighted_least_squares(&design, &y, &w, xs.len(), 2, 1e-10).unwrap();
        assert!(!ridged);
        assert!((c[0] - 3.0).abs() < 1e-10);
        assert!((c[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn least_squares_ridge_fallback() {
        // Duplicate column makes the normal equations singular.
        let design = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = vec![1.0, 2.0, 3.0];
        let w = vec![1.0; 3];
        let (c, ridged) = weighted_least_squares(&design, &y, &w, 3, 2, 1e-10).unwrap();
        assert!(ridged);
        assert!((c[0] + c[1] - 2.0).abs() < 1e-6);
    }
}
