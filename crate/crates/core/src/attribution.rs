// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution matrices, their aggregation over output tokens, and top-K%
//! feature selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Instance;

/// Importance of feature `i` for output token `t`, stored as `phi[i][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub method: String,
    pub seed: u64,
    pub phi: Vec<Vec<f64>>,
    pub features: Vec<String>,
    pub output_tokens: Vec<String>,
}

impl AttributionMatrix {
    /// Builds a `d × T` matrix labelled from `instance`, rejecting wrong
    /// shapes and non-finite entries.
    pub fn new(instance: &Instance, method: impl Into<String>, seed: u64, phi: Vec<Vec<f64>>) -> Result<Self> {
        let matrix = Self {
            method: method.into(),
            seed,
            phi,
            features: instance.feature_names(),
            output_tokens: instance.output_tokens().to_vec(),
        };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, t) = (self.features.len(), self.output_tokens.len());
        if self.phi.len() != d {
            return Err(Error::dim(d, self.phi.len(), "attribution rows (features)"));
        }
        for (i, row) in self.phi.iter().enumerate() {
            if row.len() != t {
                return Err(Error::dim(t, row.len(), format!("attribution row {i}")));
            }
            if let Some(t_bad) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite attribution at feature {i}, token {t_bad}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.phi.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.output_tokens.len()
    }

    /// Scores of every feature for one output token.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.phi.iter().map(|row| row[t]).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("attribution serializes")
    }

    /// Long-form CSV: `feature,token_index,phi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,token_index,phi\n");
        for (name, row) in self.features.iter().zip(&self.phi) {
            for (t, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{t},{v}\n", csv_field(name)));
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// How per-token scores are collapsed into one score per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    SumPositive,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Sum, Aggregation::Mean, Aggregation::SumPositive];

    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
            Aggregation::SumPositive => "sum_positive",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown aggregation {s:?} (sum, mean, sum_positive)")))
    }
}

/// One score per feature, the basis for top-K% ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    pub scores: Vec<f64>,
    pub aggregation: Aggregation,
}

impl SaliencyVector {
    pub fn new(scores: Vec<f64>, aggregation: Aggregation) -> Self {
        Self { scores, aggregation }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn aggregate_attribution(matrix: &AttributionMatrix, mode: Aggregation) -> SaliencyVector {
    let t = matrix.num_outputs().max(1) as f64;
    let scores = matrix
        .phi
        .iter()
        .map(|row| match mode {
            Aggregation::Sum => row.iter().sum(),
            Aggregation::Mean => row.iter().sum::<f64>() / t,
            Aggregation::SumPositive => row.iter().map(|v| v.max(0.0)).sum(),
        })
        .collect();
    SaliencyVector::new(scores, mode)
}

/// Number of features kept by a top-`k_percent`% selection over `d` features.
pub fn top_k_count(d: usize, k_percent: u32) -> usize {
    // integer ceiling of k·d/100
    ((k_percent.min(100) as usize * d).div_ceil(100)).min(d)
}

/// Indices of the `⌈K/100 · d⌉` highest-scoring features, ties to the lower
/// index, returned in ascending index order.
pub fn top_k_features(saliency: &SaliencyVector, k_percent: u32) -> Vec<usize> {
    let count = top_k_count(saliency.len(), k_percent);
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency.scores[b].total_cmp(&saliency.scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen
}
