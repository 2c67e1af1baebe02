// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local linear surrogates over random feature masks: LIME (locality-weighted
//! fit of the logprob) and LERG_L (unweighted fit of the logprob ratio to the
//! full input).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wls::{wls_solve_with, WlsOptions};
use super::{zeros, ExplainerConfig, Method, OracleValues, ValueFunction};
use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::mask::Mask;
use crate::oracle::Oracle;

/// `n` masks with every bit Bernoulli(0.5), followed by the full mask.
pub fn sample_bernoulli_masks(d: usize, n: usize, seed: u64) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks: Vec<Mask> = (0..n)
        .map(|_| Mask::from_bits((0..d).map(|_| rng.random_bool(0.5)).collect()))
        .collect();
    masks.push(Mask::full(d));
    masks
}

/// Fits `target_t(z) ≈ β_0 + Σ β_i z_i` per output token with a free,
/// unpenalized intercept and returns the slopes as `phi[i][t]`.
fn fit_surrogate(
    masks: &[Mask],
    targets: impl Fn(usize, usize) -> f64,
    weights: &[f64],
    t: usize,
    ridge: f64,
) -> Result<Vec<Vec<f64>>> {
    let d = masks.first().map_or(0, Mask::len);
    let design: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| std::iter::once(1.0).chain(m.iter().map(|b| b as u8 as f64)).collect())
        .collect();
    let options = WlsOptions {
        ridge,
        unpenalized: vec![0],
    };
    let mut phi = zeros(d, t);
    for step in 0..t {
        let y: Vec<f64> = (0..masks.len()).map(|j| targets(j, step)).collect();
        let solution = wls_solve_with(&design, &y, weights, &[], &options)?;
        for (i, row) in phi.iter_mut().enumerate() {
            row[step] = solution.coefficients[i + 1];
        }
    }
    Ok(phi)
}

fn check_rows(masks: &[Mask], rows: &[Vec<f64>]) -> Result<usize> {
    if masks.is_empty() {
        return Err(Error::Invalid("no masks to fit".into()));
    }
    if rows.len() != masks.len() {
        return Err(Error::dim(masks.len(), rows.len(), "value rows"));
    }
    let t = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != t) {
        return Err(Error::dim(t, r.len(), "value row length"));
    }
    Ok(t)
}

/// LIME fit on given masks: weights `exp(−D(z)²/width²)` with
/// `D(z) = 1 − |z|/d`, ridge on the slopes.
pub fn lime_fit(masks: &[Mask], rows: &[Vec<f64>], kernel_width: f64, ridge: f64) -> Result<Vec<Vec<f64>>> {
    let t = check_rows(masks, rows)?;
    let d = masks[0].len() as f64;
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let distance = 1.0 - m.count() as f64 / d;
            (-(distance * distance) / (kernel_width * kernel_width)).exp()
        })
        .collect();
    fit_surrogate(masks, |j, step| rows[j][step], &weights, t, ridge)
}

/// LERG_L fit on given masks: target `v_t(z) − v_t(full)`, uniform weights.
pub fn lerg_l_fit(masks: &[Mask], rows: &[Vec<f64>], full: &[f64], ridge: f64) -> Result<Vec<Vec<f64>>> {
    let t = check_rows(masks, rows)?;
    if full.len() != t {
        return Err(Error::dim(t, full.len(), "full-input values"));
    }
    let weights = vec![1.0; masks.len()];
    fit_surrogate(masks, |j, step| rows[j][step] - full[step], &weights, t, ridge)
}

fn sample_for<V: ValueFunction + ?Sized>(values: &V, n_samples: usize, seed: u64) -> Result<Vec<Mask>> {
    let d = values.num_features();
    if n_samples < d + 2 {
        return Err(Error::Invalid(format!(
            "local surrogate over {d} features needs at least {} samples, got {n_samples}",
            d + 2
        )));
    }
    Ok(sample_bernoulli_masks(d, n_samples, seed))
}

pub fn lime_values<V: ValueFunction + ?Sized>(
    values: &mut V,
    n_samples: usize,
    kernel_width: f64,
    ridge: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let masks = sample_for(values, n_samples, seed)?;
    let rows = values.values(&masks)?;
    lime_fit(&masks, &rows, kernel_width, ridge)
}

pub fn lerg_l_values<V: ValueFunction + ?Sized>(
    values: &mut V,
    n_samples: usize,
    ridge: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let masks = sample_for(values, n_samples, seed)?;
    let rows = values.values(&masks)?;
    // the sampler always ends with the full mask
    let full = rows.last().expect("sampler yields the full mask").clone();
    lerg_l_fit(&masks, &rows, &full, ridge)
}

pub fn explain_lime(instance: &Instance, oracle: &mut Oracle, config: &ExplainerConfig) -> Result<AttributionMatrix> {
    config.validate()?;
    let phi = lime_values(
        &mut OracleValues::new(oracle, instance),
        config.n_samples,
        config.kernel_width,
        config.ridge_lambda,
        config.seed,
    )?;
    AttributionMatrix::new(instance, Method::Lime.as_str(), config.seed, phi)
}

pub fn explain_lerg_l(instance: &Instance, oracle: &mut Oracle, config: &ExplainerConfig) -> Result<AttributionMatrix> {
    config.validate()?;
    let phi = lerg_l_values(
        &mut OracleValues::new(oracle, instance),
        config.n_samples,
        config.ridge_lambda,
        config.seed,
    )?;
    AttributionMatrix::new(instance, Method::LergL.as_str(), config.seed, phi)
}
