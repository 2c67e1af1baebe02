// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use itertools::Itertools;
use seqattrib::oracle::Oracle;
use seqattrib::toymodel::{ToyBridge, ToyModelSpec, ToyStep};
use seqattrib::{FeatureGroup, Instance, Mask};

/// d=2, V=2 (A,B), zero bias, W[0]=[1,0], W[1]=[0,1].
pub fn worked_spec() -> ToyModelSpec {
    ToyModelSpec::new(
        vec!["A".into(), "B".into()],
        vec![ToyStep {
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            bias: vec![0.0, 0.0],
        }],
    )
    .unwrap()
}

/// One single-token feature per spec row, outputs given.
pub fn toy_instance(spec: &ToyModelSpec, outputs: Vec<String>) -> Instance {
    let d = spec.num_features();
    Instance::new(
        (0..d).map(|i| format!("x{i}")).collect(),
        (0..d).map(|i| FeatureGroup::single(format!("f{i}"), i)).collect(),
        outputs,
    )
    .unwrap()
}

/// Instance whose outputs are the toy model's greedy decode.
pub fn greedy_instance(spec: &ToyModelSpec) -> Instance {
    toy_instance(spec, spec.greedy_decode(&Mask::full(spec.num_features())))
}

pub fn toy_oracle(spec: &ToyModelSpec, instance: &Instance) -> Oracle {
    Oracle::new(Box::new(
        ToyBridge::new(spec.clone(), instance.features().to_vec()).unwrap(),
    ))
}

/// Reference value function, evaluated straight from the toy parameters:
/// `v_t(S) = logit_t[y_t] − ln Σ_y exp(logit_t[y])`.
pub fn reference_value(spec: &ToyModelSpec, outputs: &[String], present: &[bool], t: usize) -> f64 {
    let y = spec.vocab.iter().position(|s| s == &outputs[t]).unwrap();
    let step = &spec.steps[t];
    let logits: Vec<f64> = (0..spec.vocab.len())
        .map(|k| {
            step.bias[k]
                + present
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p)
                    .map(|(i, _)| step.weights[i][k])
                    .sum::<f64>()
        })
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits[y] - z.ln()
}

/// Shapley values by averaging marginal contributions over all d!
/// orderings of the reference value function. `phi[i][t]`.
pub fn brute_force_shapley(spec: &ToyModelSpec, outputs: &[String]) -> Vec<Vec<f64>> {
    let d = spec.num_features();
    let mut phi = vec![vec![0.0; outputs.len()]; d];
    let mut count = 0.0;
    for order in (0..d).permutations(d) {
        count += 1.0;
        let mut present = vec![false; d];
        for &i in &order {
            for (t, slot) in phi[i].iter_mut().enumerate() {
                let before = reference_value(spec, outputs, &present, t);
                present[i] = true;
                let after = reference_value(spec, outputs, &present, t);
                present[i] = false;
                *slot += after - before;
            }
            present[i] = true;
        }
    }
    phi.iter_mut().flatten().for_each(|x| *x /= count);
    phi
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
