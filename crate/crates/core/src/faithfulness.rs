// SPDX-License-Identifier: MIT OR Apache-2.0

//! Faithfulness of explanations, measured behaviourally.
//!
//! * Sufficiency: perplexity of the explained output when only the top-K%
//!   features are kept. Lower is more faithful.
//! * Necessity: perplexity increase when the top-K% features are removed,
//!   `PPL(removed) − PPL(full)`. Higher is more faithful.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    aggregate_attribution, csv_field, top_k_features, Aggregation, AttributionMatrix, SaliencyVector,
};
use crate::error::{Error, Result};
use crate::explain::{explain, ExplainerConfig, Method};
use crate::instance::Instance;
use crate::mask::Mask;
use crate::oracle::Oracle;

/// Which output sequence is explained and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainTarget {
    /// The model's own greedy prediction, decoded by the bridge.
    #[default]
    ModelPrediction,
    /// The output tokens supplied with the instance.
    Gold,
}

impl fmt::Display for ExplainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExplainTarget::ModelPrediction => "prediction",
            ExplainTarget::Gold => "gold",
        })
    }
}

impl FromStr for ExplainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" | "model_prediction" => Ok(ExplainTarget::ModelPrediction),
            "gold" => Ok(ExplainTarget::Gold),
            other => Err(Error::Invalid(format!("unknown target {other:?} (prediction, gold)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub k_grid: Vec<u32>,
    pub aggregation: Aggregation,
    pub explain_target: ExplainTarget,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![5, 10, 20, 30, 40, 50],
            aggregation: Aggregation::Sum,
            explain_target: ExplainTarget::ModelPrediction,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() {
            return Err(Error::Invalid("K grid is empty".into()));
        }
        if let Some(k) = self.k_grid.iter().find(|k| **k == 0 || **k > 100) {
            return Err(Error::Invalid(format!("K = {k} outside (0, 100]")));
        }
        if self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("K grid must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// `exp(−mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Domain("perplexity of an empty sequence".into()));
    }
    if let Some(v) = logprobs.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(Error::Domain(format!("logprob {v} is not a finite value <= 0")));
    }
    Ok((-logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp())
}

fn check_saliency(instance: &Instance, saliency: &SaliencyVector) -> Result<()> {
    if saliency.len() != instance.num_features() {
        return Err(Error::dim(instance.num_features(), saliency.len(), "saliency length"));
    }
    Ok(())
}

fn keep_mask(d: usize, kept: &[usize]) -> Mask {
    Mask::from_present(d, kept.iter().copied())
}

fn removal_mask(d: usize, removed: &[usize]) -> Mask {
    keep_mask(d, removed).complement()
}

/// Perplexity with every feature outside the top-K% masked.
pub fn sufficiency(instance: &Instance, saliency: &SaliencyVector, oracle: &mut Oracle, k_percent: u32) -> Result<f64> {
    check_saliency(instance, saliency)?;
    let mask = keep_mask(instance.num_features(), &top_k_features(saliency, k_percent));
    perplexity(&oracle.score_batch(instance, &[mask])?[0])
}

/// Perplexity increase when the top-K% features are masked.
pub fn necessity(instance: &Instance, saliency: &SaliencyVector, oracle: &mut Oracle, k_percent: u32) -> Result<f64> {
    check_saliency(instance, saliency)?;
    necessity_for_removed(instance, &top_k_features(saliency, k_percent), oracle)
}

/// `PPL(removed features masked) − PPL(full input)`.
pub fn necessity_for_removed(instance: &Instance, removed: &[usize], oracle: &mut Oracle) -> Result<f64> {
    let d = instance.num_features();
    if let Some(i) = removed.iter().find(|i| **i >= d) {
        return Err(Error::Invalid(format!(
            "feature index {i} out of range for {d} features"
        )));
    }
    let rows = oracle.score_batch(instance, &[removal_mask(d, removed), Mask::full(d)])?;
    Ok(perplexity(&rows[0])? - perplexity(&rows[1])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u32,
    pub mean_sufficiency_ppl: f64,
    pub mean_necessity_delta_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub method: Method,
    pub points: Vec<CurvePoint>,
    /// Instances that completed for this method.
    pub n_instances: usize,
}

/// Raw per-instance values behind a curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub instance: String,
    pub method: Method,
    pub k: u32,
    pub n_features: usize,
    pub n_kept: usize,
    pub baseline_ppl: f64,
    pub sufficiency_ppl: f64,
    pub necessity_delta_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub instance: String,
    pub method: Option<Method>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub curves: Vec<FaithfulnessCurve>,
    /// In corpus order, then method order, then K.
    pub audit: Vec<AuditRow>,
    pub skipped: Vec<SkippedInstance>,
}

impl Evaluation {
    /// Columns `method,K,mean_sufficiency_ppl,mean_necessity_delta_ppl,n_instances`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("method,K,mean_sufficiency_ppl,mean_necessity_delta_ppl,n_instances\n");
        for curve in &self.curves {
            for p in &curve.points {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    curve.method, p.k, p.mean_sufficiency_ppl, p.mean_necessity_delta_ppl, curve.n_instances
                ));
            }
        }
        out
    }

    pub fn audit_csv(&self) -> String {
        let mut out =
            String::from("instance,method,K,n_features,n_kept,baseline_ppl,sufficiency_ppl,necessity_delta_ppl\n");
        for r in &self.audit {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(&r.instance),
                r.method,
                r.k,
                r.n_features,
                r.n_kept,
                r.baseline_ppl,
                r.sufficiency_ppl,
                r.necessity_delta_ppl
            ));
        }
        out
    }
}

/// Sufficiency and necessity of one attribution at every K, scored with a
/// single oracle batch.
pub fn score_attribution(
    instance: &Instance,
    matrix: &AttributionMatrix,
    metric: &MetricConfig,
    oracle: &mut Oracle,
) -> Result<Vec<AuditRow>> {
    let method: Method = matrix.method.parse()?;
    let saliency = aggregate_attribution(matrix, metric.aggregation);
    check_saliency(instance, &saliency)?;
    let d = instance.num_features();

    let tops: Vec<Vec<usize>> = metric.k_grid.iter().map(|k| top_k_features(&saliency, *k)).collect();
    let mut masks = vec![Mask::full(d)];
    for top in &tops {
        masks.push(keep_mask(d, top));
        masks.push(removal_mask(d, top));
    }
    // warms the cache so the per-K calls below are lookups
    oracle.score_batch(instance, &masks)?;

    let baseline_ppl = perplexity(&oracle.baseline(instance)?)?;
    metric
        .k_grid
        .iter()
        .zip(&tops)
        .map(|(&k, top)| {
            Ok(AuditRow {
                instance: instance.id(),
                method,
                k,
                n_features: d,
                n_kept: top.len(),
                baseline_ppl,
                sufficiency_ppl: sufficiency(instance, &saliency, oracle, k)?,
                necessity_delta_ppl: necessity(instance, &saliency, oracle, k)?,
            })
        })
        .collect()
}

/// Resolves the output sequence to explain: the bridge's greedy decode for
/// [`ExplainTarget::ModelPrediction`], the instance's own outputs otherwise.
pub fn resolve_target(instance: &Instance, target: ExplainTarget, oracle: &mut Oracle) -> Result<Instance> {
    match target {
        ExplainTarget::Gold => Ok(instance.clone()),
        ExplainTarget::ModelPrediction => {
            let predicted = oracle.generate(&instance.clone().into())?;
            if predicted == instance.output_tokens() {
                Ok(instance.clone())
            } else {
                instance.with_output_tokens(predicted)
            }
        }
    }
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

type InstanceOutcome = (Vec<AuditRow>, Vec<SkippedInstance>);

fn assemble(methods: &[Method], metric: &MetricConfig, outcomes: Vec<InstanceOutcome>) -> Result<Evaluation> {
    let mut audit = Vec::new();
    let mut skipped = Vec::new();
    for (rows, skips) in outcomes {
        audit.extend(rows);
        skipped.extend(skips);
    }
    if audit.is_empty() {
        let reasons: Vec<String> = skipped
            .iter()
            .take(3)
            .map(|s| format!("{}: {}", s.instance, s.reason))
            .collect();
        return Err(Error::Evaluation(format!(
            "no instance completed ({} failures; first: {})",
            skipped.len(),
            reasons.join("; ")
        )));
    }

    let mut grouped: BTreeMap<(Method, u32), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in &audit {
        let entry = grouped.entry((row.method, row.k)).or_default();
        entry.0.push(row.sufficiency_ppl);
        entry.1.push(row.necessity_delta_ppl);
    }
    let mut curves = Vec::new();
    for &method in methods {
        let points: Vec<CurvePoint> = metric
            .k_grid
            .iter()
            .filter_map(|&k| {
                grouped.remove(&(method, k)).map(|(suff, nec)| CurvePoint {
                    k,
                    mean_sufficiency_ppl: stable_mean(suff),
                    mean_necessity_delta_ppl: stable_mean(nec),
                })
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let n_instances = audit
            .iter()
            .filter(|r| r.method == method && r.k == metric.k_grid[0])
            .count();
        curves.push(FaithfulnessCurve {
            method,
            points,
            n_instances,
        });
    }
    Ok(Evaluation { curves, audit, skipped })
}

fn dedup_methods(methods: &[Method]) -> Result<Vec<Method>> {
    if methods.is_empty() {
        return Err(Error::Invalid("no methods to evaluate".into()));
    }
    let mut seen = Vec::new();
    for m in methods {
        if !seen.contains(m) {
            seen.push(*m);
        }
    }
    Ok(seen)
}

/// Explains every instance with every method and computes the faithfulness
/// curves. Instances run in parallel, each with an oracle from `oracles`; a
/// failing (instance, method) pair is recorded as skipped.
pub fn evaluate_methods<F>(
    corpus: &[Instance],
    methods: &[Method],
    explainer: &ExplainerConfig,
    metric: &MetricConfig,
    oracles: F,
) -> Result<Evaluation>
where
    F: Fn(&Instance) -> Result<Oracle> + Sync,
{
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    metric.validate()?;
    explainer.validate()?;
    let methods = dedup_methods(methods)?;

    let outcomes: Vec<InstanceOutcome> = corpus
        .par_iter()
        .map(|instance| {
            let skip = |method: Option<Method>, e: &Error| SkippedInstance {
                instance: instance.id(),
                method,
                reason: e.to_string(),
            };
            let mut oracle = match oracles(instance) {
                Ok(o) => o,
                Err(e) => return (Vec::new(), vec![skip(None, &e)]),
            };
            let target = match resolve_target(instance, metric.explain_target, &mut oracle) {
                Ok(t) => t,
                Err(e) => return (Vec::new(), vec![skip(None, &e)]),
            };
            let mut rows = Vec::new();
            let mut skipped = Vec::new();
            for &method in &methods {
                let config = ExplainerConfig {
                    method,
                    ..explainer.clone()
                };
                let result = explain(&target, &mut oracle, &config)
                    .and_then(|matrix| score_attribution(&target, &matrix, metric, &mut oracle));
                match result {
                    Ok(r) => rows.extend(r),
                    Err(e) => skipped.push(skip(Some(method), &e)),
                }
            }
            (rows, skipped)
        })
        .collect();
    assemble(&methods, metric, outcomes)
}

/// Faithfulness curves for precomputed attributions: `attributions[j]` holds
/// the matrices (one per method) of `corpus[j]`, which must already carry
/// the explained output tokens.
pub fn evaluate_attributions<F>(
    corpus: &[Instance],
    attributions: &[Vec<AttributionMatrix>],
    metric: &MetricConfig,
    oracles: F,
) -> Result<Evaluation>
where
    F: Fn(&Instance) -> Result<Oracle> + Sync,
{
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if attributions.len() != corpus.len() {
        return Err(Error::dim(corpus.len(), attributions.len(), "attribution lists"));
    }
    metric.validate()?;
    let mut methods = Vec::new();
    for matrices in attributions {
        for m in matrices {
            methods.push(m.method.parse::<Method>()?);
        }
    }
    let methods = dedup_methods(&methods)?;

    let outcomes: Vec<InstanceOutcome> = corpus
        .par_iter()
        .zip(attributions)
        .map(|(instance, matrices)| {
            let mut oracle = match oracles(instance) {
                Ok(o) => o,
                Err(e) => {
                    return (
                        Vec::new(),
                        vec![SkippedInstance {
                            instance: instance.id(),
                            method: None,
                            reason: e.to_string(),
                        }],
                    )
                }
            };
            let mut rows = Vec::new();
            let mut skipped = Vec::new();
            for matrix in matrices {
                match score_attribution(instance, matrix, metric, &mut oracle) {
                    Ok(r) => rows.extend(r),
                    Err(e) => skipped.push(SkippedInstance {
                        instance: instance.id(),
                        method: matrix.method.parse().ok(),
                        reason: e.to_string(),
                    }),
                }
            }
            (rows, skipped)
        })
        .collect();
    assemble(&methods, metric, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[-LN_2, -LN_2]).unwrap(), 2.0);
        assert_eq!(perplexity(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&[-(4f64.ln())]).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(perplexity(&[]), Err(Error::Domain(_))));
        assert!(perplexity(&[0.1]).is_err());
    }

    #[test]
    fn metric_config_validation() {
        assert!(MetricConfig::default().validate().is_ok());
        let with_zero = MetricConfig {
            k_grid: vec![0, 10],
            ..Default::default()
        };
        assert!(with_zero.validate().is_err());
        let unsorted = MetricConfig {
            k_grid: vec![20, 10],
            ..Default::default()
        };
        assert!(unsorted.validate().is_err());
        let dup = MetricConfig {
            k_grid: vec![10, 10],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn stable_mean_ignores_order() {
        let a = vec![0.1, 1e16, -1e16, 0.3, 0.7];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(stable_mean(a).to_bits(), stable_mean(b).to_bits());
    }

    #[test]
    fn target_names() {
        assert_eq!("gold".parse::<ExplainTarget>().unwrap(), ExplainTarget::Gold);
        assert_eq!(
            "prediction".parse::<ExplainTarget>().unwrap(),
            ExplainTarget::ModelPrediction
        );
        assert!("other".parse::<ExplainTarget>().is_err());
    }
}
