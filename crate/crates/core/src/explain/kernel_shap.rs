// SPDX-License-Identifier: MIT OR Apache-2.0

//! Kernel SHAP: Shapley values as the solution of a weighted linear
//! regression over coalitions, with the empty and full coalitions imposed as
//! equality constraints.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wls::{wls_solve, LinearConstraint};
use super::{zeros, ExplainerConfig, Method, OracleValues, ValueFunction};
use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::mask::Mask;
use crate::oracle::Oracle;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel `μ(s) = (d−1) / (C(d,s)·s·(d−s))`; infinite for `s ∈ {0, d}`.
pub fn shapley_kernel_weight(d: usize, s: usize) -> f64 {
    if s == 0 || s >= d {
        return f64::INFINITY;
    }
    (d - 1) as f64 / (binomial(d, s) * s as f64 * (d - s) as f64)
}

/// Regression rows and their weights: every proper non-empty coalition
/// weighted by the kernel when `n_samples ≥ 2^d − 2`, otherwise sampled
/// antithetic pairs (coalition and complement) with unit weight, the size
/// drawn with probability proportional to `C(d,s)·μ(s)`.
fn coalition_design(d: usize, n_samples: usize, seed: u64) -> (Vec<Mask>, Vec<f64>) {
    let enumerable = d < 63 && (n_samples as u128) >= (1u128 << d) - 2;
    if enumerable {
        let masks: Vec<Mask> = (1..(1u64 << d) - 1).map(|c| Mask::from_code(d, c)).collect();
        let weights = masks.iter().map(|m| shapley_kernel_weight(d, m.count())).collect();
        return (masks, weights);
    }

    let size_mass: Vec<f64> = (1..d).map(|s| 1.0 / (s * (d - s)) as f64).collect();
    let total: f64 = size_mass.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = n_samples.div_ceil(2);
    let mut masks = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let mut u = rng.random::<f64>() * total;
        let mut size = d - 1;
        for (k, mass) in size_mass.iter().enumerate() {
            if u < *mass {
                size = k + 1;
                break;
            }
            u -= mass;
        }
        let chosen = index::sample(&mut rng, d, size);
        let mask = Mask::from_present(d, chosen.iter());
        masks.push(mask.complement());
        masks.push(mask);
    }
    let weights = vec![1.0; masks.len()];
    (masks, weights)
}

pub fn kernel_shap_values<V: ValueFunction + ?Sized>(
    values: &mut V,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = values.num_features();
    let t = values.num_outputs();
    if d < 2 {
        return Err(Error::Invalid(format!(
            "kernel SHAP needs at least 2 features, got {d}"
        )));
    }
    let (masks, weights) = coalition_design(d, n_samples, seed);
    let mut all = Vec::with_capacity(masks.len() + 2);
    all.push(Mask::empty(d));
    all.push(Mask::full(d));
    all.extend(masks.iter().cloned());
    let v = values.values(&all)?;
    let (v_empty, v_full) = (&v[0], &v[1]);

    let design: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| std::iter::once(1.0).chain(m.iter().map(|b| b as u8 as f64)).collect())
        .collect();
    let mut phi = zeros(d, t);
    for step in 0..t {
        let targets: Vec<f64> = v[2..].iter().map(|row| row[step]).collect();
        let constraints = [
            LinearConstraint::fix(d + 1, 0, v_empty[step]),
            LinearConstraint::new(vec![1.0; d + 1], v_full[step]),
        ];
        let solution = wls_solve(&design, &targets, &weights, &constraints)?;
        for (i, row) in phi.iter_mut().enumerate() {
            row[step] = solution.coefficients[i + 1];
        }
    }
    Ok(phi)
}

pub fn explain_kernel_shap(
    instance: &Instance,
    oracle: &mut Oracle,
    config: &ExplainerConfig,
) -> Result<AttributionMatrix> {
    config.validate()?;
    let phi = kernel_shap_values(&mut OracleValues::new(oracle, instance), config.n_samples, config.seed)?;
    AttributionMatrix::new(instance, Method::KernelShap.as_str(), config.seed, phi)
}
