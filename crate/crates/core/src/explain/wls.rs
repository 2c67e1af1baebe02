// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weighted least squares with linear equality constraints and an optional
//! ridge penalty, solved through the normal equations of the
//! constraint-reduced system.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues of the reduced Gram matrix below this fraction of the largest
/// one count as zero when determining rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `row · β = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub row: Vec<f64>,
    pub value: f64,
}

impl LinearConstraint {
    pub fn new(row: Vec<f64>, value: f64) -> Self {
        Self { row, value }
    }

    /// `β_index = value`.
    pub fn fix(p: usize, index: usize, value: f64) -> Self {
        let mut row = vec![0.0; p];
        row[index] = 1.0;
        Self { row, value }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WlsOptions {
    /// Penalty `λ Σ β_j²` over every coefficient not listed in `unpenalized`.
    pub ridge: f64,
    pub unpenalized: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub coefficients: Vec<f64>,
    /// Rank of the reduced, unregularized weighted Gram matrix.
    pub rank: usize,
    /// Ratio of extreme eigenvalues of the regularized reduced Gram matrix.
    pub condition: f64,
}

pub fn wls_solve(
    design: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    constraints: &[LinearConstraint],
) -> Result<WlsSolution> {
    wls_solve_with(design, targets, weights, constraints, &WlsOptions::default())
}

/// Minimizes `Σ_j w_j (y_j − x_j·β)² + λ Σ_{penalized} β_k²` subject to the
/// constraints. Constraints are eliminated by expressing pivot coefficients
/// in terms of the free ones; a rank-deficient reduced system is an error.
pub fn wls_solve_with(
    design: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    constraints: &[LinearConstraint],
    options: &WlsOptions,
) -> Result<WlsSolution> {
    let n = design.len();
    if targets.len() != n {
        return Err(Error::dim(n, targets.len(), "wls targets"));
    }
    if weights.len() != n {
        return Err(Error::dim(n, weights.len(), "wls weights"));
    }
    let p = design.first().map_or(0, Vec::len);
    if p == 0 {
        return Err(Error::Invalid("wls design has no columns".into()));
    }
    if let Some(row) = design.iter().find(|r| r.len() != p) {
        return Err(Error::dim(p, row.len(), "wls design row"));
    }
    if let Some(c) = constraints.iter().find(|c| c.row.len() != p) {
        return Err(Error::dim(p, c.row.len(), "wls constraint row"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Domain("wls weights must be finite and nonnegative".into()));
    }
    if options.ridge < 0.0 || !options.ridge.is_finite() {
        return Err(Error::Domain("ridge penalty must be finite and nonnegative".into()));
    }

    let x = DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let y = DVector::from_column_slice(targets);
    let (offset, basis) = eliminate(constraints, p)?;
    let free = basis.ncols();
    if free == 0 {
        return Ok(WlsSolution {
            coefficients: offset.iter().copied().collect(),
            rank: 0,
            condition: 1.0,
        });
    }

    // β = offset + basis·γ
    let reduced = &x * &basis;
    let residual_target = &y - &x * &offset;
    let w = DVector::from_column_slice(weights);
    let weighted = DMatrix::from_fn(n, free, |i, j| reduced[(i, j)] * w[i]);
    let gram = reduced.transpose() * &weighted;
    let mut rhs = weighted.transpose() * &residual_target;

    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max_eig = eig.iter().copied().fold(0.0, f64::max);
    let rank = eig
        .iter()
        .filter(|v| max_eig > 0.0 && **v > RANK_TOLERANCE * max_eig)
        .count();
    if rank < free {
        return Err(Error::Conditioning { rank, unknowns: free });
    }

    let mut system = gram;
    if options.ridge > 0.0 {
        let penalty = DMatrix::from_fn(p, p, |i, j| {
            if i == j && !options.unpenalized.contains(&i) {
                options.ridge
            } else {
                0.0
            }
        });
        system += basis.transpose() * &penalty * &basis;
        rhs -= basis.transpose() * &penalty * &offset;
    }
    let reg_eig = SymmetricEigen::new(system.clone()).eigenvalues;
    let (lo, hi) = reg_eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let condition = hi / lo;

    let gamma = match system.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => system
            .lu()
            .solve(&rhs)
            .ok_or(Error::Conditioning { rank, unknowns: free })?,
    };
    let beta = offset + basis * gamma;
    Ok(WlsSolution {
        coefficients: beta.iter().copied().collect(),
        rank,
        condition,
    })
}

/// Parametrizes `{β : Cβ = e}` as `offset + basis·γ` by Gauss-Jordan
/// elimination with partial pivoting. Redundant constraints are dropped;
/// inconsistent ones are an error.
fn eliminate(constraints: &[LinearConstraint], p: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = constraints.len();
    let mut a = DMatrix::from_fn(k, p + 1, |i, j| {
        if j < p {
            constraints[i].row[j]
        } else {
            constraints[i].value
        }
    });
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let eps = 1e-12 * scale;
    let mut pivots: Vec<usize> = Vec::new();
    let mut row = 0;
    for col in 0..p {
        if row == k {
            break;
        }
        let (best, best_val) =
            (row..k)
                .map(|r| (r, a[(r, col)].abs()))
                .fold((row, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best_val <= eps {
            continue;
        }
        a.swap_rows(row, best);
        let pivot = a[(row, col)];
        for j in 0..=p {
            a[(row, j)] /= pivot;
        }
        for r in 0..k {
            if r != row {
                let factor = a[(r, col)];
                if factor != 0.0 {
                    for j in 0..=p {
                        a[(r, j)] -= factor * a[(row, j)];
                    }
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    for r in row..k {
        if a[(r, p)].abs() > eps {
            return Err(Error::Invalid("inconsistent equality constraints".into()));
        }
    }

    let free: Vec<usize> = (0..p).filter(|c| !pivots.contains(c)).collect();
    let mut offset = DVector::zeros(p);
    let mut basis = DMatrix::zeros(p, free.len());
    for (r, &pc) in pivots.iter().enumerate() {
        offset[pc] = a[(r, p)];
        for (fj, &fc) in free.iter().enumerate() {
            basis[(pc, fj)] = -a[(r, fc)];
        }
    }
    for (fj, &fc) in free.iter().enumerate() {
        basis[(fc, fj)] = 1.0;
    }
    Ok((offset, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn square_system_interpolates() {
        let design = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let targets = vec![5.0, 10.0];
        let sol = wls_solve(&design, &targets, &ones(2), &[]).unwrap();
        assert_abs_diff_eq!(sol.coefficients[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.coefficients[1], 3.0, epsilon = 1e-10);
        assert_eq!(sol.rank, 2);
    }

    #[test]
    fn equal_weights_match_ordinary_least_squares() {
        let design: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
        let targets = vec![0.1, 1.2, 1.9, 3.2, 3.9, 5.1];
        let a = wls_solve(&design, &targets, &ones(6), &[]).unwrap();
        let b = wls_solve(&design, &targets, &[3.7; 6], &[]).unwrap();
        // closed-form simple regression
        let xbar = 2.5;
        let ybar = targets.iter().sum::<f64>() / 6.0;
        let sxy: f64 = (0..6).map(|i| (i as f64 - xbar) * (targets[i] - ybar)).sum();
        let sxx: f64 = (0..6).map(|i| (i as f64 - xbar).powi(2)).sum();
        let slope = sxy / sxx;
        assert_abs_diff_eq!(a.coefficients[1], slope, epsilon = 1e-12);
        assert_abs_diff_eq!(a.coefficients[0], ybar - slope * xbar, epsilon = 1e-12);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn inactive_constraint_leaves_solution_unchanged() {
        // exact fit of y = 1 + 2x
        let design: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64]).collect();
        let targets: Vec<f64> = (0..4).map(|i| 1.0 + 2.0 * i as f64).collect();
        let free = wls_solve(&design, &targets, &ones(4), &[]).unwrap();
        let fixed = wls_solve(&design, &targets, &ones(4), &[LinearConstraint::fix(2, 0, 1.0)]).unwrap();
        for (x, y) in free.coefficients.iter().zip(&fixed.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn active_constraints_are_honoured() {
        let design: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64, (i * i) as f64]).collect();
        let targets = vec![1.0, 0.0, 2.0, 1.0, 3.0];
        let sum_to_one = LinearConstraint::new(vec![0.0, 1.0, 1.0], 1.0);
        let sol = wls_solve(
            &design,
            &targets,
            &ones(5),
            &[LinearConstraint::fix(3, 0, 0.5), sum_to_one],
        )
        .unwrap();
        assert_abs_diff_eq!(sol.coefficients[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.coefficients[1] + sol.coefficients[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn redundant_constraint_is_dropped_inconsistent_rejected() {
        let design: Vec<Vec<f64>> = (0..3).map(|i| vec![1.0, i as f64]).collect();
        let targets = vec![1.0, 2.0, 3.0];
        let c = LinearConstraint::fix(2, 0, 1.0);
        let doubled = LinearConstraint::new(vec![2.0, 0.0], 2.0);
        assert!(wls_solve(&design, &targets, &ones(3), &[c.clone(), doubled]).is_ok());
        let clash = LinearConstraint::fix(2, 0, 2.0);
        assert!(wls_solve(&design, &targets, &ones(3), &[c, clash]).is_err());
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let design = vec![vec![1.0, 1.0, 0.0]; 5];
        let err = wls_solve(&design, &ones(5), &ones(5), &[]).unwrap_err();
        assert!(matches!(err, Error::Conditioning { rank: 1, unknowns: 3 }));
        // ridge does not rescue a structurally singular design
        let opts = WlsOptions {
            ridge: 1e-6,
            unpenalized: vec![0],
        };
        assert!(wls_solve_with(&design, &ones(5), &ones(5), &[], &opts).is_err());
    }

    #[test]
    fn ridge_shrinks_penalized_coefficients_only() {
        let design: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, (i % 2) as f64, (i / 2 % 2) as f64]).collect();
        let targets: Vec<f64> = design.iter().map(|r| 3.0 + 2.0 * r[1] - r[2]).collect();
        let opts = WlsOptions {
            ridge: 4.0,
            unpenalized: vec![0],
        };
        let sol = wls_solve_with(&design, &targets, &ones(8), &[], &opts).unwrap();
        assert!(sol.coefficients[1] < 2.0 && sol.coefficients[1] > 0.0);
        assert!(sol.coefficients[2] > -1.0 && sol.coefficients[2] < 0.0);
        assert!(sol.condition >= 1.0);
    }
}
