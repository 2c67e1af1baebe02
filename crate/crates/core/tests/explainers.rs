// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use approx::assert_abs_diff_eq;
use common::*;
use seqattrib::explain::{
    explain, kernel_shap_values, lerg_l_fit, lime_fit, shapley_exact_values, ExplainerConfig, FnValues, Method,
};
use seqattrib::mask::Mask;
use seqattrib::toymodel::{ToyBridge, ToyModelSpec};
use seqattrib::Error;

fn dims(seed: u64) -> (usize, usize) {
    (2 + (seed % 7) as usize, 1 + (seed / 7 % 4) as usize)
}

fn exact(spec: &ToyModelSpec) -> (seqattrib::Instance, Vec<Vec<f64>>) {
    let inst = greedy_instance(spec);
    let mut oracle = toy_oracle(spec, &inst);
    let phi = explain(&inst, &mut oracle, &ExplainerConfig::for_method(Method::ShapleyExact)).unwrap();
    (inst, phi.phi)
}

#[test]
fn worked_example_matches_brute_force() {
    let spec = worked_spec();
    let inst = toy_instance(&spec, vec!["A".into()]);
    let mut oracle = toy_oracle(&spec, &inst);
    let phi = explain(&inst, &mut oracle, &ExplainerConfig::for_method(Method::ShapleyExact)).unwrap();
    let reference = brute_force_shapley(&spec, inst.output_tokens());
    assert!(max_abs_diff(&phi.phi, &reference) <= 1e-12);
    assert_abs_diff_eq!(phi.phi[0][0], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(phi.phi[1][0], -0.5, epsilon = 1e-12);
}

#[test]
fn exact_agrees_with_permutation_brute_force() {
    for seed in 0..10 {
        let (d, t) = dims(seed);
        let spec = ToyModelSpec::generate(seed, d.min(6), t, 3).unwrap();
        let (inst, phi) = exact(&spec);
        let reference = brute_force_shapley(&spec, inst.output_tokens());
        assert!(max_abs_diff(&phi, &reference) <= 1e-9, "seed {seed}");
    }
}

#[test]
fn efficiency_over_seeded_specs() {
    for seed in 0..100 {
        let (d, t) = dims(seed);
        let spec = ToyModelSpec::generate(seed, d, t, 4).unwrap();
        let (inst, phi) = exact(&spec);
        for step in 0..t {
            let sum: f64 = phi.iter().map(|row| row[step]).sum();
            let full = reference_value(&spec, inst.output_tokens(), &vec![true; d], step);
            let empty = reference_value(&spec, inst.output_tokens(), &vec![false; d], step);
            assert!((sum - (full - empty)).abs() <= 1e-9, "seed {seed} step {step}");
        }
    }
}

#[test]
fn symmetric_features_share_credit() {
    for seed in 0..100 {
        let (d, t) = dims(seed);
        let mut spec = ToyModelSpec::generate(seed, d, t, 4).unwrap();
        for step in &mut spec.steps {
            step.weights[d - 1] = step.weights[0].clone();
        }
        let (_, phi) = exact(&spec);
        for (a, b) in phi[0].iter().zip(&phi[d - 1]) {
            assert!((a - b).abs() <= 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn dummy_feature_gets_zero() {
    for seed in 0..100 {
        let (d, t) = dims(seed);
        let mut spec = ToyModelSpec::generate(seed, d, t, 4).unwrap();
        let dummy = seed as usize % d;
        for (k, step) in spec.steps.iter_mut().enumerate() {
            // a uniform shift of every logit leaves the softmax unchanged
            step.weights[dummy] = vec![0.3 * k as f64 - 1.0; 4];
        }
        let (_, phi) = exact(&spec);
        assert!(phi[dummy].iter().all(|x| x.abs() <= 1e-9), "seed {seed}");
    }
}

#[test]
fn kernel_shap_full_enumeration_equals_exact() {
    for seed in 0..20u64 {
        let d = 2 + (seed % 9) as usize;
        let spec = ToyModelSpec::generate(1000 + seed, d, 1 + (seed % 3) as usize, 4).unwrap();
        let (inst, phi) = exact(&spec);
        let mut oracle = toy_oracle(&spec, &inst);
        let config = ExplainerConfig {
            n_samples: 1 << d,
            ..ExplainerConfig::for_method(Method::KernelShap)
        };
        let ks = explain(&inst, &mut oracle, &config).unwrap();
        assert!(max_abs_diff(&ks.phi, &phi) <= 1e-6, "seed {seed} d {d}");
    }
}

#[test]
fn kernel_shap_is_exact_on_additive_games() {
    let coef = [1.0, -2.0, 0.5, 4.0, 0.0, -1.0, 2.5, 3.0, -0.75, 1.25, 0.1, -0.2];
    let mut v = FnValues::new(12, 1, |m: &Mask| {
        vec![7.0 + m.iter().zip(coef).map(|(b, c)| if b { c } else { 0.0 }).sum::<f64>()]
    });
    let phi = kernel_shap_values(&mut v, 200, 3).unwrap();
    for (row, want) in phi.iter().zip(coef) {
        assert_abs_diff_eq!(row[0], want, epsilon = 1e-8);
    }
}

#[test]
fn lerg_s_converges_on_worked_example() {
    let spec = worked_spec();
    let inst = toy_instance(&spec, vec!["A".into()]);
    let error = |m: usize, seed: u64| {
        let mut oracle = toy_oracle(&spec, &inst);
        let config = ExplainerConfig {
            n_samples: m,
            seed,
            ..ExplainerConfig::for_method(Method::LergS)
        };
        let phi = explain(&inst, &mut oracle, &config).unwrap().phi;
        ((phi[0][0] - 0.5).abs() + (phi[1][0] + 0.5).abs()) / 2.0
    };
    assert!(error(1000, 7) <= 0.05);
    let averaged: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|&m| (0..20).map(|s| error(m, s)).sum::<f64>() / 20.0)
        .collect();
    assert!(averaged.windows(2).all(|w| w[1] <= w[0]), "{averaged:?}");
}

#[test]
fn surrogates_recover_linear_table_without_ridge() {
    let coef = [2.0, 3.0, -1.0];
    let masks: Vec<Mask> = (0..8).map(|c| Mask::from_code(3, c)).collect();
    let rows: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| vec![0.5 + m.iter().zip(coef).map(|(b, c)| if b { c } else { 0.0 }).sum::<f64>()])
        .collect();
    let lime = lime_fit(&masks, &rows, 0.75, 0.0).unwrap();
    let lerg = lerg_l_fit(&masks, &rows, &rows[7], 0.0).unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(lime[i][0], coef[i], epsilon = 1e-6);
        assert_abs_diff_eq!(lerg[i][0], coef[i], epsilon = 1e-6);
    }
}

#[test]
fn affine_value_scaling() {
    // v' = a·v + b scales exact Shapley values by a
    let base = |m: &Mask| {
        vec![
            m.iter()
                .enumerate()
                .map(|(i, b)| if b { (i * i) as f64 - 1.5 } else { 0.0 })
                .product::<f64>()
                + m.count() as f64,
        ]
    };
    let phi = shapley_exact_values(&mut FnValues::new(4, 1, base), 12).unwrap();
    let scaled = shapley_exact_values(&mut FnValues::new(4, 1, |m: &Mask| vec![-3.0 * base(m)[0] + 11.0]), 12).unwrap();
    for (a, b) in phi.iter().zip(&scaled) {
        assert_abs_diff_eq!(-3.0 * a[0], b[0], epsilon = 1e-12);
    }
}

#[test]
fn every_method_is_deterministic_and_finite() {
    let spec = ToyModelSpec::generate(5, 5, 3, 4).unwrap();
    let inst = greedy_instance(&spec);
    for method in Method::ALL {
        let config = ExplainerConfig {
            n_samples: 64,
            seed: 11,
            ..ExplainerConfig::for_method(method)
        };
        let a = explain(&inst, &mut toy_oracle(&spec, &inst), &config).unwrap();
        let b = explain(&inst, &mut toy_oracle(&spec, &inst), &config).unwrap();
        assert_eq!(a, b, "{}", method.as_str());
        assert!(a.phi.iter().flatten().all(|x| x.is_finite()));
        assert_eq!((a.num_features(), a.num_outputs()), (5, 3));
    }
}

#[test]
fn attention_needs_no_scoring() {
    let spec = ToyModelSpec::generate(8, 6, 4, 5).unwrap();
    let inst = greedy_instance(&spec);
    let bridge = ToyBridge::new(spec.clone(), inst.features().to_vec()).unwrap();
    let counts = bridge.counts();
    let mut oracle = seqattrib::oracle::Oracle::new(Box::new(bridge));
    let phi = explain(&inst, &mut oracle, &ExplainerConfig::for_method(Method::Attention)).unwrap();
    assert_eq!(counts.score(), 0);
    assert_eq!(oracle.stats().score_requests, 0);
    for t in 0..phi.num_outputs() {
        assert!((phi.column(t).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn exact_refuses_large_inputs() {
    let mut v = FnValues::new(13, 1, |_: &Mask| vec![0.0]);
    assert!(matches!(shapley_exact_values(&mut v, 12), Err(Error::Capability(_))));
}
