// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shapley values by full coalition enumeration, and the permutation-sampling
//! estimator (LERG_S) that scales past enumeration.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{zeros, ExplainerConfig, Method, OracleValues, ValueFunction};
use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::mask::Mask;
use crate::oracle::Oracle;

/// `|S|!(d−|S|−1)!/d!` for every coalition size `|S| = 0..d-1`, computed as
/// `1 / (d · C(d−1, |S|))`.
fn coalition_weights(d: usize) -> Vec<f64> {
    let mut binom = 1.0f64;
    (0..d)
        .map(|s| {
            if s > 0 {
                binom = binom * (d - s) as f64 / s as f64;
            }
            1.0 / (d as f64 * binom)
        })
        .collect()
}

/// Exact Shapley values from one evaluation of all `2^d` coalitions.
/// Returns `phi[i][t]`.
pub fn shapley_exact_values<V: ValueFunction + ?Sized>(values: &mut V, d_max: usize) -> Result<Vec<Vec<f64>>> {
    let d = values.num_features();
    let t = values.num_outputs();
    if d > d_max {
        return Err(Error::Capability(format!(
            "exact Shapley enumerates 2^{d} coalitions, above the limit of {d_max} features; use lerg_s"
        )));
    }
    if d >= 63 {
        return Err(Error::Capability(format!("{d} features cannot be enumerated")));
    }
    let codes = 1u64 << d;
    let masks: Vec<Mask> = (0..codes).map(|c| Mask::from_code(d, c)).collect();
    let v = values.values(&masks)?;
    let weights = coalition_weights(d);

    let mut phi = zeros(d, t);
    for (i, row) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for code in (0..codes).filter(|c| c & bit == 0) {
            let w = weights[code.count_ones() as usize];
            let (with, without) = (&v[(code | bit) as usize], &v[code as usize]);
            for (slot, (a, b)) in row.iter_mut().zip(with.iter().zip(without)) {
                *slot += w * (a - b);
            }
        }
    }
    Ok(phi)
}

/// Mean marginal contribution of each feature over the given orderings.
/// All prefix coalitions are scored in one batch.
pub fn shapley_from_permutations<V: ValueFunction + ?Sized>(
    values: &mut V,
    permutations: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let d = values.num_features();
    let t = values.num_outputs();
    if permutations.is_empty() {
        return Err(Error::Invalid("need at least one permutation".into()));
    }

    let mut index: HashMap<Mask, usize> = HashMap::new();
    let mut masks: Vec<Mask> = Vec::new();
    let mut walks: Vec<Vec<usize>> = Vec::with_capacity(permutations.len());
    for perm in permutations {
        if perm.len() != d {
            return Err(Error::dim(d, perm.len(), "permutation length"));
        }
        let mut coalition = Mask::empty(d);
        let mut walk = Vec::with_capacity(d + 1);
        let mut record = |m: &Mask| {
            let next = masks.len();
            *index.entry(m.clone()).or_insert_with(|| {
                masks.push(m.clone());
                next
            })
        };
        walk.push(record(&coalition));
        for &feature in perm {
            if feature >= d || coalition.is_present(feature) {
                return Err(Error::Invalid(format!("{perm:?} is not a permutation of 0..{d}")));
            }
            coalition.set(feature, true);
            walk.push(record(&coalition));
        }
        walks.push(walk);
    }

    let v = values.values(&masks)?;
    let mut phi = zeros(d, t);
    for (perm, walk) in permutations.iter().zip(&walks) {
        for (k, &feature) in perm.iter().enumerate() {
            let (before, after) = (&v[walk[k]], &v[walk[k + 1]]);
            for (slot, (a, b)) in phi[feature].iter_mut().zip(after.iter().zip(before)) {
                *slot += a - b;
            }
        }
    }
    let m = permutations.len() as f64;
    phi.iter_mut().flatten().for_each(|x| *x /= m);
    Ok(phi)
}

/// Monte Carlo Shapley over `n_permutations` orderings drawn from a ChaCha8
/// generator seeded with `seed`.
pub fn lerg_s_values<V: ValueFunction + ?Sized>(
    values: &mut V,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = values.num_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutations: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    shapley_from_permutations(values, &permutations)
}

pub fn explain_shapley_exact(
    instance: &Instance,
    oracle: &mut Oracle,
    config: &ExplainerConfig,
) -> Result<AttributionMatrix> {
    config.validate()?;
    let phi = shapley_exact_values(&mut OracleValues::new(oracle, instance), config.d_max_exact)?;
    AttributionMatrix::new(instance, Method::ShapleyExact.as_str(), config.seed, phi)
}

pub fn explain_lerg_s(instance: &Instance, oracle: &mut Oracle, config: &ExplainerConfig) -> Result<AttributionMatrix> {
    config.validate()?;
    let phi = lerg_s_values(&mut OracleValues::new(oracle, instance), config.n_samples, config.seed)?;
    AttributionMatrix::new(instance, Method::LergS.as_str(), config.seed, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::FnValues;
    use approx::assert_abs_diff_eq;
    use itertools::Itertools;

    #[test]
    fn weights_match_factorial_formula() {
        let fact = |n: usize| (1..=n).product::<usize>() as f64;
        for d in 1..=8 {
            for (s, w) in coalition_weights(d).into_iter().enumerate() {
                assert_abs_diff_eq!(w, fact(s) * fact(d - s - 1) / fact(d), epsilon = 1e-15);
            }
        }
    }

    /// Glove game: value 1 when both feature 0 and 1 are present.
    fn glove() -> FnValues<impl FnMut(&Mask) -> Vec<f64>> {
        FnValues::new(3, 1, |m: &Mask| {
            vec![if m.is_present(0) && m.is_present(1) { 1.0 } else { 0.0 }]
        })
    }

    #[test]
    fn exact_on_glove_game() {
        let phi = shapley_exact_values(&mut glove(), 12).unwrap();
        assert_abs_diff_eq!(phi[0][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[1][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[2][0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_feature_is_total_change() {
        let mut v = FnValues::new(1, 2, |m: &Mask| {
            if m.is_present(0) {
                vec![-0.2, -1.0]
            } else {
                vec![-0.9, -0.4]
            }
        });
        let phi = shapley_exact_values(&mut v, 12).unwrap();
        assert_abs_diff_eq!(phi[0][0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[0][1], -0.6, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_limit() {
        let mut v = FnValues::new(5, 1, |_: &Mask| vec![0.0]);
        let err = shapley_exact_values(&mut v, 4).unwrap_err();
        assert!(matches!(err, Error::Capability(ref m) if m.contains("lerg_s")));
    }

    #[test]
    fn all_permutations_reproduce_exact_values() {
        let mut v = FnValues::new(4, 2, |m: &Mask| {
            let s = m.count() as f64;
            let x = if m.is_present(2) { 0.3 } else { 0.0 };
            vec![-(4.0 - s).powi(2) / 10.0 - x, -(m.is_present(0) as u8 as f64) * 0.5]
        });
        let exact = shapley_exact_values(&mut v, 12).unwrap();
        let perms: Vec<Vec<usize>> = (0..4).permutations(4).collect();
        let sampled = shapley_from_permutations(&mut v, &perms).unwrap();
        for (a, b) in exact.iter().flatten().zip(sampled.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_non_permutations() {
        let mut v = glove();
        assert!(shapley_from_permutations(&mut v, &[vec![0, 0, 1]]).is_err());
        assert!(shapley_from_permutations(&mut v, &[vec![0, 1]]).is_err());
        assert!(shapley_from_permutations(&mut v, &[]).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = lerg_s_values(&mut glove(), 50, 11).unwrap();
        let b = lerg_s_values(&mut glove(), 50, 11).unwrap();
        assert_eq!(a, b);
    }
}
